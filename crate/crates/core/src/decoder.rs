//! Upsampling decoder with local-similarity re-injection, the auxiliary
//! branch used for its loss and for top-k class pruning.
//!
//! Every pathway acts on one category plane at a time with shared weights, so
//! the decoder never mixes categories.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{self, init_linear};
use crate::model::{MergeMode, ModelConfig};
use crate::params::{Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

fn init_conv<R: Rng>(
    store: &mut ParamStore,
    init: &mut Init<'_, R>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    store.insert(
        format!("{name}.weight"),
        init.fan_in(&[cout, cin, k, k], cin * k * k),
    );
    store.insert(format!("{name}.bias"), init.zeros(&[cout]));
}

pub fn init_decoder<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let mut cin = cfg.cost_dim;
    for s in 1..=cfg.decoder_stages {
        let cout = cfg.decoder_width(s);
        let p = format!("dec.stage{s}");
        match cfg.merge {
            MergeMode::Concat => init_conv(store, init, &format!("{p}.conv"), cout, cin + 1, 3),
            MergeMode::Add => {
                store.insert(format!("{p}.scale"), init.ones(&[cin]));
                init_conv(store, init, &format!("{p}.conv"), cout, cin, 3);
            }
        }
        cin = cout;
    }
    init_conv(store, init, "dec.head", 1, cin, 1);
    init_linear(store, init, "aux.proj", cfg.cost_dim, cfg.aux_hidden);
    init_conv(store, init, "aux.conv", 1, cfg.aux_hidden, 3);
}

fn conv<S: Real>(g: &mut Graph<S>, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.weight"))?;
    let b = g.param(ps, &format!("{name}.bias"))?;
    g.conv2d(x, w, b)
}

/// `[B, T, H, W, D]` → `[B·T, D, H, W]`
fn class_planes<S: Real>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::dim(
            "decoder",
            format!("embedding {s:?} must be [B,T,H,W,D]"),
        ));
    }
    let x = g.permute(x, &[0, 1, 4, 2, 3])?;
    g.reshape(x, &[s[0] * s[1], s[4], s[2], s[3]])
}

/// Each stage: 2× bilinear upsampling, merge with the local similarity
/// resized to the new grid, 3×3 conv, GELU. A 1×1 conv then gives one logit
/// per category, resized to `out_h × out_w`.
pub fn decode<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    f_agg: Var,
    s_l: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let s = g.shape(f_agg).to_vec();
    let (b, t, mut h, mut w) = (s[0], s[1], s[2], s[3]);
    if g.shape(s_l) != [b, t, h, w] {
        return Err(Error::dim(
            "decode",
            format!(
                "local similarity {:?} does not match embedding {s:?}",
                g.shape(s_l)
            ),
        ));
    }
    let mut x = class_planes(g, f_agg)?;
    let sl = g.reshape(s_l, &[b * t, 1, h, w])?;
    for stage in 1..=cfg.decoder_stages {
        h *= 2;
        w *= 2;
        let p = format!("dec.stage{stage}");
        let up = g.bilinear_resize(x, h, w)?;
        let slr = g.bilinear_resize(sl, h, w)?;
        let merged = match cfg.merge {
            MergeMode::Concat => g.concat(&[up, slr], 1)?,
            MergeMode::Add => {
                let scale = g.param(ps, &format!("{p}.scale"))?;
                let cin = g.shape(scale)[0];
                let scale = g.reshape(scale, &[cin, 1, 1])?;
                let injected = g.mul(slr, scale)?;
                g.add(up, injected)?
            }
        };
        let y = conv(g, ps, &format!("{p}.conv"), merged)?;
        x = g.gelu(y)?;
    }
    let logits = conv(g, ps, "dec.head", x)?;
    let logits = g.bilinear_resize(logits, out_h, out_w)?;
    g.reshape(logits, &[b, t, out_h, out_w])
}

/// Per-cell linear projection + GELU, a 3×3 conv to one logit per category,
/// resized to `out_h × out_w`.
pub fn aux_branch<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    f_fused: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let s = g.shape(f_fused).to_vec();
    let x = layers::linear(g, ps, "aux.proj", f_fused)?;
    let x = g.gelu(x)?;
    let x = class_planes(g, x)?;
    let y = conv(g, ps, "aux.conv", x)?;
    let y = g.bilinear_resize(y, out_h, out_w)?;
    g.reshape(y, &[s[0], s[1], out_h, out_w])
}

/// Mean per-pixel softmax cross-entropy of the auxiliary logits.
pub fn aux_loss<S: Real>(g: &mut Graph<S>, y_aux: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(y_aux, labels)
}

/// The `k` categories with the highest maximum logit over pixels, per image,
/// in ascending index order. Ties go to the lower index.
pub fn topk_select(y_aux: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let s = y_aux.shape();
    if s.len() != 4 {
        return Err(Error::dim(
            "topk_select",
            format!("logits {s:?} must be [B,T,H,W]"),
        ));
    }
    let (b, t, hw) = (s[0], s[1], s[2] * s[3]);
    if k == 0 || k > t {
        return Err(Error::Config(format!("top-k must lie in 1..={t}, got {k}")));
    }
    Ok((0..b)
        .map(|bi| {
            let scores: Vec<f32> = (0..t)
                .map(|ti| {
                    y_aux.data()[(bi * t + ti) * hw..][..hw]
                        .iter()
                        .copied()
                        .fold(f32::NEG_INFINITY, f32::max)
                })
                .collect();
            let mut order: Vec<usize> = (0..t).collect();
            order.sort_by(|&a, &c| scores[c].total_cmp(&scores[a]).then(a.cmp(&c)));
            let mut keep = order[..k].to_vec();
            keep.sort_unstable();
            keep
        })
        .collect())
}
