use super::{numel, split_at_axis, Grads, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORM_FLOOR: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + a * x * x * x)).tanh())
}

pub(super) fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * c * (S::ONE + S::from_f64(3.0) * a * x * x)
}

impl<S: Real> Graph<S> {
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", value, shape, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push("tanh", value, shape, Op::Tanh(a), &[a])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let va = self.value(a);
        let mut value = vec![S::ZERO; va.len()];
        let mut exps = vec![0.0f64; n];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mut mx = va[idx(0)];
                for k in 1..n {
                    mx = mx.max(va[idx(k)]);
                }
                // Exponentials and their sum in f64 so that long rows (LCS
                // kernels have C·K² entries) still sum to 1 within 1e-6 in f32.
                let mut sum = 0.0f64;
                for k in 0..n {
                    let e = (va[idx(k)] - mx).to_f64().exp();
                    exps[k] = e;
                    sum += e;
                }
                for k in 0..n {
                    value[idx(k)] = S::from_f64(exps[k] / sum);
                }
            }
        }
        self.push("softmax", value, shape, Op::Softmax(a, axis), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "scale {:?} / shift {:?} must be [{d}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = numel(&shape) / d;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut value = vec![S::ZERO; vx.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let dn = S::from_f64(d as f64);
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / dn;
            let rs = S::ONE / (var + S::from_f64(LAYER_NORM_EPS)).sqrt();
            for (j, &v) in row.iter().enumerate() {
                value[r * d + j] = (v - mu) * rs * vg[j] + vb[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(
            "layer_norm",
            value,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Divides each last-axis vector by `max(‖v‖, 1e-8)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let vx = self.value(x);
        let rows = vx.len() / d;
        let floor = S::from_f64(NORM_FLOOR);
        let mut norms = Vec::with_capacity(rows);
        let mut value = vec![S::ZERO; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            let denom = n.max(floor);
            for (o, &v) in value[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / denom;
            }
            norms.push(n);
        }
        self.push(
            "l2_normalize",
            value,
            shape,
            Op::L2Normalize {
                x,
                norms,
                eps: NORM_FLOOR,
            },
            &[x],
        )
    }

    /// Cosine similarity along the last axis of two same-shaped operands.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        let prod = self.mul(na, nb)?;
        let last = self.shape(prod).len() - 1;
        self.sum_axis(prod, last)
    }

    /// Mean softmax cross-entropy of `[B, T, ...]` logits against class labels
    /// laid out as `[B, ...]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {shape:?} need a class axis"),
            ));
        }
        let (b, t, inner) = split_at_axis(&shape, 1);
        if labels.len() != b * inner {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for logits {shape:?}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= t) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {t} classes"
            )));
        }
        let v = self.value(logits);
        let mut probs = vec![S::ZERO; v.len()];
        let mut total = S::ZERO;
        for bi in 0..b {
            for p in 0..inner {
                let idx = |k: usize| (bi * t + k) * inner + p;
                let mut mx = v[idx(0)];
                for k in 1..t {
                    mx = mx.max(v[idx(k)]);
                }
                let mut sum = S::ZERO;
                for k in 0..t {
                    let e = (v[idx(k)] - mx).exp();
                    probs[idx(k)] = e;
                    sum += e;
                }
                for k in 0..t {
                    probs[idx(k)] = probs[idx(k)] / sum;
                }
                let label = labels[bi * inner + p];
                total += sum.ln() + mx - v[idx(label)];
            }
        }
        let loss = total / S::from_f64((b * inner) as f64);
        self.push(
            "cross_entropy",
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared difference to a fixed target.
    pub fn mse(&mut self, x: Var, target: &[S]) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != target.len() {
            return Err(Error::dim(
                "mse",
                format!("{} targets for {:?}", target.len(), self.shape(x)),
            ));
        }
        let sum: S = vx
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let loss = sum / S::from_f64(vx.len() as f64);
        self.push(
            "mse",
            vec![loss],
            vec![1],
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            &[x],
        )
    }
}

pub(super) fn softmax_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    a: Var,
    axis: usize,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(ga) = grads.slot(a) else { return };
    let y = &nodes[out.0].value;
    let (outer, n, inner) = split_at_axis(&nodes[out.0].shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: S = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..n {
                ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward<S: Real>(
    nodes: &[Node<S>],
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[S],
    rstd: &[S],
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let vx = &nodes[x.0].value;
    let vg = &nodes[gamma.0].value;
    let d = vg.len();
    let rows = vx.len() / d;
    let dn = S::from_f64(d as f64);
    let xhat = |r: usize, j: usize| (vx[r * d + j] - mean[r]) * rstd[r];
    if let Some(gg) = grads.slot(gamma) {
        for r in 0..rows {
            for j in 0..d {
                gg[j] += g[r * d + j] * xhat(r, j);
            }
        }
    }
    if let Some(gb) = grads.slot(beta) {
        for r in 0..rows {
            for j in 0..d {
                gb[j] += g[r * d + j];
            }
        }
    }
    if let Some(gx) = grads.slot(x) {
        for r in 0..rows {
            let mut m1 = S::ZERO;
            let mut m2 = S::ZERO;
            for j in 0..d {
                let gh = g[r * d + j] * vg[j];
                m1 += gh;
                m2 += gh * xhat(r, j);
            }
            m1 = m1 / dn;
            m2 = m2 / dn;
            for j in 0..d {
                let gh = g[r * d + j] * vg[j];
                gx[r * d + j] += rstd[r] * (gh - m1 - xhat(r, j) * m2);
            }
        }
    }
}

pub(super) fn l2_normalize_backward<S: Real>(
    nodes: &[Node<S>],
    out: Var,
    x: Var,
    norms: &[S],
    eps: f64,
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(gx) = grads.slot(x) else { return };
    let y = &nodes[out.0].value;
    let d = y.len() / norms.len();
    let floor = S::from_f64(eps);
    for (r, &n) in norms.iter().enumerate() {
        let range = r * d..(r + 1) * d;
        if n > floor {
            let dot: S = g[range.clone()]
                .iter()
                .zip(&y[range.clone()])
                .map(|(&a, &b)| a * b)
                .sum();
            for j in range {
                gx[j] += (g[j] - y[j] * dot) / n;
            }
        } else {
            for j in range {
                gx[j] += g[j] / floor;
            }
        }
    }
}

pub(super) fn cross_entropy_backward<S: Real>(
    nodes: &[Node<S>],
    logits: Var,
    labels: &[usize],
    probs: &[S],
    g: &[S],
    grads: &mut Grads<'_, S>,
) {
    let Some(gl) = grads.slot(logits) else { return };
    let (b, t, inner) = split_at_axis(&nodes[logits.0].shape, 1);
    let scale = g[0] / S::from_f64((b * inner) as f64);
    for bi in 0..b {
        for p in 0..inner {
            let label = labels[bi * inner + p];
            for k in 0..t {
                let idx = (bi * t + k) * inner + p;
                let target = if k == label { S::ONE } else { S::ZERO };
                gl[idx] += scale * (probs[idx] - target);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_values(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y)[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_uniform_on_constants_and_shift_invariant() {
        let mut g = Graph::<f32>::new();
        let x = g.constant_values(&[4], vec![2.5; 4]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).iter().all(|&p| (p - 0.25).abs() < 1e-7));

        let a = g.constant_values(&[3], vec![0.1, -1.0, 2.0]).unwrap();
        let b = g.constant_values(&[3], vec![5.1, 4.0, 7.0]).unwrap();
        let (ya, yb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        for (p, q) in g.value(ya).iter().zip(g.value(yb)) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_values(&[1, 2], vec![1.0, 3.0]).unwrap();
        let one = g.constant_values(&[2], vec![1.0; 2]).unwrap();
        let zero = g.constant_values(&[2], vec![0.0; 2]).unwrap();
        let y = g.layer_norm(x, one, zero).unwrap();
        // (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y)[0] + expect).abs() < 1e-12);
        assert!((g.value(y)[1] - expect).abs() < 1e-12);

        let c = g.constant_values(&[1, 3], vec![4.0; 3]).unwrap();
        let one3 = g.constant_values(&[3], vec![1.0; 3]).unwrap();
        let zero3 = g.constant_values(&[3], vec![0.0; 3]).unwrap();
        let y = g.layer_norm(c, one3, zero3).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_t() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_values(&[1, 3, 2, 2], vec![0.0; 12]).unwrap();
        let l = g.cross_entropy(x, &[0, 1, 2, 1]).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            g.cross_entropy(x, &[0, 1, 3, 1]),
            Err(Error::Input(_))
        ));
    }
}
