use super::shape::broadcast_shape;
use super::{numel, Grads, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_acc<S: Real>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<S: Real>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::ZERO; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&a, &b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// `ga[m×k] += gc[m×n] · b[k×n]ᵀ`
fn gemm_nt_acc<S: Real>(ga: &mut [S], gc: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &gc[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `gb[k×n] += a[m×k]ᵀ · gc[m×n]`
fn gemm_tn_acc<S: Real>(gb: &mut [S], a: &[S], gc: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &gc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (d, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += aip * x;
            }
        }
    }
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (matrix offset in a, matrix offset in b) per output matrix.
    pairs: Vec<(usize, usize)>,
}

fn plan(sa: &[usize], sb: &[usize]) -> Result<MatMulPlan> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::dim(
            "matmul",
            format!("operands must have rank >= 2, got {sa:?} and {sb:?}"),
        ));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {sa:?} · {sb:?}"),
        ));
    }
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch = broadcast_shape(ba, bb).ok_or_else(|| {
        Error::dim(
            "matmul",
            format!("batch dims of {sa:?} and {sb:?} do not broadcast"),
        )
    })?;
    let rank = batch.len();
    let batch_strides = |shape: &[usize]| {
        let off = rank - shape.len();
        let mut st = vec![0; rank];
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            if shape[i] != 1 {
                st[i + off] = acc;
            }
            acc *= shape[i];
        }
        st
    };
    let (sta, stb) = (batch_strides(ba), batch_strides(bb));
    let count = numel(&batch);
    let mut pairs = Vec::with_capacity(count);
    let mut counter = vec![0; rank];
    for _ in 0..count {
        let ia: usize = counter.iter().zip(&sta).map(|(c, s)| c * s).sum();
        let ib: usize = counter.iter().zip(&stb).map(|(c, s)| c * s).sum();
        pairs.push((ia * m * k, ib * k * n));
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < batch[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
    })
}

impl<S: Real> Graph<S> {
    /// Batched matrix product `[..., m, k] · [..., k, n]`; batch dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = plan(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = vec![S::ZERO; numel(&p.out_shape)];
        if self.shape(b).len() == 2 {
            // One shared right operand: fold the batch into the rows.
            gemm_acc(&mut value, va, vb, va.len() / p.k, p.k, p.n);
        } else {
            let mn = p.m * p.n;
            for (o, &(oa, ob)) in p.pairs.iter().enumerate() {
                gemm_acc(
                    &mut value[o * mn..(o + 1) * mn],
                    &va[oa..oa + p.m * p.k],
                    &vb[ob..ob + p.k * p.n],
                    p.m,
                    p.k,
                    p.n,
                );
            }
        }
        self.push("matmul", value, p.out_shape, Op::MatMul(a, b), &[a, b])
    }

    /// Affine map over the last axis: `x · w + bias` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

pub(super) fn matmul_backward<S: Real>(
    nodes: &[Node<S>],
    a: Var,
    b: Var,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
    let p = plan(sa, sb).expect("shapes validated in forward");
    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
    let shared_rhs = sb.len() == 2;
    let rows = va.len() / p.k;
    if let Some(ga) = grads.slot(a) {
        if shared_rhs {
            gemm_nt_acc(ga, g, vb, rows, p.k, p.n);
        } else {
            let mn = p.m * p.n;
            for (o, &(oa, ob)) in p.pairs.iter().enumerate() {
                gemm_nt_acc(
                    &mut ga[oa..oa + p.m * p.k],
                    &g[o * mn..(o + 1) * mn],
                    &vb[ob..ob + p.k * p.n],
                    p.m,
                    p.k,
                    p.n,
                );
            }
        }
    }
    if let Some(gb) = grads.slot(b) {
        if shared_rhs {
            gemm_tn_acc(gb, va, g, rows, p.k, p.n);
        } else {
            let mn = p.m * p.n;
            for (o, &(oa, ob)) in p.pairs.iter().enumerate() {
                gemm_tn_acc(
                    &mut gb[ob..ob + p.k * p.n],
                    &va[oa..oa + p.m * p.k],
                    &g[o * mn..(o + 1) * mn],
                    p.m,
                    p.k,
                    p.n,
                );
            }
        }
    }
}
