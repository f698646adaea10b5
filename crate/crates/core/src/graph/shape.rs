use super::{numel, split_at_axis, Grads, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every output flat index with the matching flat indices of two
/// broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<S: Real> Graph<S> {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::dim(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut value = vec![S::ZERO; numel(&out)];
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &ta, &tb, |o, ia, ib| value[o] = f(va[ia], vb[ib]));
            value
        };
        self.push(name, value, out, op, &[a, b])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if broadcast_shape(&sa, shape).as_deref() != Some(shape) {
            return Err(Error::dim(
                "broadcast_to",
                format!("cannot broadcast {sa:?} to {shape:?}"),
            ));
        }
        let va = self.value(a);
        let mut value = vec![S::ZERO; numel(shape)];
        let ta = broadcast_strides(&sa, shape);
        for_each_broadcast(shape, &ta, &ta, |o, ia, _| value[o] = va[ia]);
        self.push(
            "broadcast_to",
            value,
            shape.to_vec(),
            Op::BroadcastTo(a),
            &[a],
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = S::from_f64(c);
        let value = self.value(a).iter().map(|&x| x * cs).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", value, shape, Op::Scale(a, c), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        self.push("reshape", value, shape.to_vec(), Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len()
            || axes
                .iter()
                .any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", sa.len()),
            ));
        }
        let out: Vec<usize> = axes.iter().map(|&i| sa[i]).collect();
        let st = strides(&sa);
        let perm_strides: Vec<usize> = axes.iter().map(|&i| st[i]).collect();
        let va = self.value(a);
        let mut value = Vec::with_capacity(va.len());
        for_each_broadcast(&out, &perm_strides, &perm_strides, |_, ia, _| {
            value.push(va[ia])
        });
        self.push("permute", value, out, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out = base.clone();
        out[axis] = total;
        let (outer, _, inner) = split_at_axis(&out, axis);
        let mut value = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        self.push(
            "concat",
            value,
            out,
            Op::Concat(inputs.to_vec(), axis),
            inputs,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sx:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_at_axis(&sx, axis);
        let vx = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&vx[base..base + len * inner]);
        }
        let mut out = sx;
        out[axis] = len;
        self.push("slice", value, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::dim(
                "pad",
                format!("axis {axis} out of range for {sx:?}"),
            ));
        }
        let (outer, n, inner) = split_at_axis(&sx, axis);
        let m = n + before + after;
        let vx = self.value(x);
        let mut value = vec![S::ZERO; outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            value[dst..dst + n * inner].copy_from_slice(&vx[o * n * inner..(o + 1) * n * inner]);
        }
        let mut out = sx;
        out[axis] = m;
        self.push("pad", value, out, Op::Pad { x, axis, before }, &[x])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).iter().copied().sum();
        self.push("sum_all", vec![s], vec![1], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: S = v.iter().copied().sum::<S>() / S::from_f64(v.len() as f64);
        self.push("mean_all", vec![s], vec![1], Op::MeanAll(a), &[a])
    }

    /// Sums out one axis (the axis is removed; a rank-1 input gives shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::dim(
                "sum_axis",
                format!("axis {axis} out of range for {sa:?}"),
            ));
        }
        let (outer, n, inner) = split_at_axis(&sa, axis);
        let va = self.value(a);
        let mut value = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &va[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in value[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out = sa;
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        self.push("sum_axis", value, out, Op::SumAxis(a, axis), &[a])
    }
}

fn reduce_into<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    target: Var,
    grads: &mut Grads<'_, S>,
    g: &[S],
    factor: impl Fn(usize, usize) -> S,
    other: Option<Var>,
) {
    let Some(gt) = grads.slot(target) else { return };
    let so = &nodes[out.0].shape;
    let st = &nodes[target.0].shape;
    if so == st && other.is_none_or(|v| &nodes[v.0].shape == so) {
        for (o, (d, &gi)) in gt.iter_mut().zip(g).enumerate() {
            *d += gi * factor(o, o);
        }
        return;
    }
    let tt = broadcast_strides(st, so);
    let to = other
        .map(|v| broadcast_strides(&nodes[v.0].shape, so))
        .unwrap_or_else(|| tt.clone());
    for_each_broadcast(so, &tt, &to, |o, it, io| gt[it] += g[o] * factor(o, io));
}

pub(super) fn add_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    a: Var,
    b: Var,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    reduce_into(nodes, out, a, grads, g, |_, _| S::ONE, None);
    reduce_into(nodes, out, b, grads, g, |_, _| S::ONE, None);
}

pub(super) fn mul_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    a: Var,
    b: Var,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
    reduce_into(nodes, out, a, grads, g, |_, ib| vb[ib], Some(b));
    reduce_into(nodes, out, b, grads, g, |_, ia| va[ia], Some(a));
}

pub(super) fn broadcast_to_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    a: Var,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    reduce_into(nodes, out, a, grads, g, |_, _| S::ONE, None);
}

pub(super) fn permute_backward<S: Real>(
    nodes: &[Node<S>],
    a: Var,
    axes: &[usize],
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(ga) = grads.slot(a) else { return };
    let sa = &nodes[a.0].shape;
    let out: Vec<usize> = axes.iter().map(|&i| sa[i]).collect();
    let st = strides(sa);
    let ps: Vec<usize> = axes.iter().map(|&i| st[i]).collect();
    for_each_broadcast(&out, &ps, &ps, |o, ia, _| ga[ia] += g[o]);
}

pub(super) fn concat_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    inputs: &[Var],
    axis: usize,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let (outer, total, inner) = split_at_axis(&nodes[out.0].shape, axis);
    let mut offset = 0;
    for &v in inputs {
        let n = nodes[v.0].shape[axis];
        if let Some(gv) = grads.slot(v) {
            for o in 0..outer {
                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                for (d, &s) in gv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        offset += n;
    }
}

pub(super) fn slice_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    x: Var,
    axis: usize,
    start: usize,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(gx) = grads.slot(x) else { return };
    let (outer, n, inner) = split_at_axis(&nodes[x.0].shape, axis);
    let len = nodes[out.0].shape[axis];
    for o in 0..outer {
        let dst = (o * n + start) * inner;
        for (d, &s) in gx[dst..dst + len * inner]
            .iter_mut()
            .zip(&g[o * len * inner..(o + 1) * len * inner])
        {
            *d += s;
        }
    }
}

pub(super) fn pad_backward<S: Real>(
    nodes: &[Node<S>],
    x: Var,
    axis: usize,
    before: usize,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(gx) = grads.slot(x) else { return };
    let (outer, n, inner) = split_at_axis(&nodes[x.0].shape, axis);
    let m = g.len() / (outer * inner);
    for o in 0..outer {
        let src = (o * m + before) * inner;
        for (d, &s) in gx[o * n * inner..(o + 1) * n * inner]
            .iter_mut()
            .zip(&g[src..src + n * inner])
        {
            *d += s;
        }
    }
}

pub(super) fn sum_axis_backward<S: Real>(
    nodes: &[Node<S>],
    a: Var,
    axis: usize,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(ga) = grads.slot(a) else { return };
    let (outer, n, inner) = split_at_axis(&nodes[a.0].shape, axis);
    for o in 0..outer {
        for k in 0..n {
            for (d, &s) in ga[(o * n + k) * inner..(o * n + k + 1) * inner]
                .iter_mut()
                .zip(&g[o * inner..(o + 1) * inner])
            {
                *d += s;
            }
        }
    }
}
