//! Named-parameter building blocks shared by the model modules.
//!
//! Every helper reads its weights from a [`ParamStore`] under a name prefix:
//! `<name>.weight` / `<name>.bias` for linear maps, `<name>.gamma` /
//! `<name>.beta` for layer norms.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::real::Real;

pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    init: &mut Init<'_, R>,
    name: &str,
    din: usize,
    dout: usize,
) {
    store.insert(format!("{name}.weight"), init.fan_in(&[din, dout], din));
    store.insert(format!("{name}.bias"), init.zeros(&[dout]));
}

pub fn init_norm<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, name: &str, d: usize) {
    store.insert(format!("{name}.gamma"), init.ones(&[d]));
    store.insert(format!("{name}.beta"), init.zeros(&[d]));
}

/// Two-layer GELU MLP `d → hidden → dout`.
pub fn init_mlp<R: Rng>(
    store: &mut ParamStore,
    init: &mut Init<'_, R>,
    name: &str,
    d: usize,
    hidden: usize,
    dout: usize,
) {
    init_linear(store, init, &format!("{name}.fc1"), d, hidden);
    init_linear(store, init, &format!("{name}.fc2"), hidden, dout);
}

/// Query/key/value projections to `d_model` and an output projection to `d_out`.
pub fn init_attention<R: Rng>(
    store: &mut ParamStore,
    init: &mut Init<'_, R>,
    name: &str,
    dq: usize,
    dkv: usize,
    d_model: usize,
    d_out: usize,
) {
    init_linear(store, init, &format!("{name}.q"), dq, d_model);
    init_linear(store, init, &format!("{name}.k"), dkv, d_model);
    init_linear(store, init, &format!("{name}.v"), dkv, d_model);
    init_linear(store, init, &format!("{name}.o"), d_model, d_out);
}

pub fn linear<S: Real>(g: &mut Graph<S>, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.weight"))?;
    let b = g.param(ps, &format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

pub fn norm<S: Real>(g: &mut Graph<S>, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(ps, &format!("{name}.gamma"))?;
    let beta = g.param(ps, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn mlp<S: Real>(g: &mut Graph<S>, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, ps, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, ps, &format!("{name}.fc2"), h)
}

/// `[..., L, heads·dh]` → `[..., heads, L, dh]`
fn split_heads<S: Real>(g: &mut Graph<S>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = s.len();
    let mut split = s[..r - 1].to_vec();
    split.extend([heads, s[r - 1] / heads]);
    let x = g.reshape(x, &split)?;
    let mut axes: Vec<usize> = (0..r - 2).collect();
    axes.extend([r - 1, r - 2, r]);
    g.permute(x, &axes)
}

/// `[..., heads, L, dh]` → `[..., L, heads·dh]`
fn merge_heads<S: Real>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = s.len();
    let mut axes: Vec<usize> = (0..r - 3).collect();
    axes.extend([r - 2, r - 3, r - 1]);
    let x = g.permute(x, &axes)?;
    let mut merged = s[..r - 3].to_vec();
    merged.extend([s[r - 2], s[r - 3] * s[r - 1]]);
    g.reshape(x, &merged)
}

/// Multi-head attention of `q_in: [..., Lq, dq]` over `kv_in: [..., Lk, dkv]`,
/// scaled by `1/√(d_model/heads)`.
///
/// `mask`, when given, is added to the `[..., heads, Lq, Lk]` scores before the
/// softmax (large negative entries switch keys off).
pub fn attention<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let q = linear(g, ps, &format!("{name}.q"), q_in)?;
    let k = linear(g, ps, &format!("{name}.k"), kv_in)?;
    let v = linear(g, ps, &format!("{name}.v"), kv_in)?;
    let d_model = *g.shape(q).last().expect("rank >= 2");
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!(
            "{name}: width {d_model} is not divisible by {heads} heads"
        )));
    }
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / ((d_model / heads) as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let last = g.shape(scores).len() - 1;
    let attn = g.softmax(scores, last)?;
    let out = g.matmul(attn, v)?;
    let out = merge_heads(g, out)?;
    linear(g, ps, &format!("{name}.o"), out)
}
