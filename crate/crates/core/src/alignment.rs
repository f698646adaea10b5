//! Pixel-level alignment: the P2Tformer cross-attention stack, which refines
//! text embeddings against pixel tokens, and the T2P head, which turns text
//! vectors into dynamic kernels over upsampled pixel features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{self, attention, init_attention, init_linear, init_mlp, init_norm, mlp, norm};
use crate::model::{GammaMode, ModelConfig};
use crate::params::{Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const GAMMA: &str = "p2t.gamma";
const T2P_UPSCALE: usize = 4;

/// Sine/cosine encoding of the raster index `p = y·W + x`:
/// `P[p, 2i] = sin(p / 10000^(2i/d))`, `P[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_pe(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {d} must be even"
        )));
    }
    let mut data = vec![0.0f32; h * w * d];
    for p in 0..h * w {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin() as f32;
            data[p * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![h * w, d], data)
}

pub fn init_p2tformer<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let d = cfg.channels();
    for l in 0..cfg.p2t_layers {
        let p = format!("p2t.layer{l}");
        init_norm(store, init, &format!("{p}.norm_q"), d);
        init_norm(store, init, &format!("{p}.norm_kv"), d);
        init_attention(store, init, &format!("{p}.attn"), d, d, d, d);
        init_norm(store, init, &format!("{p}.norm_mlp"), d);
        init_mlp(store, init, &format!("{p}.mlp"), d, 4 * d, d);
    }
    let mut gamma = Tensor::full(&[1], cfg.gamma.value());
    gamma.requires_grad = matches!(cfg.gamma, GammaMode::Trainable(_));
    store.insert(GAMMA, gamma);
}

/// `[B, C, H, W]` → `[B, H·W, C]` plus the positional encoding.
pub fn vision_tokens<S: Real>(g: &mut Graph<S>, v_i: Var) -> Result<Var> {
    let s = g.shape(v_i).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(
            "vision_tokens",
            format!("features {s:?} must be [B,C,H,W]"),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = g.reshape(v_i, &[b, c, h * w])?;
    let x = g.permute(x, &[0, 2, 1])?;
    let pe = sinusoidal_pe(h, w, c)?;
    let pe = g.constant(&pe);
    g.add(x, pe)
}

/// One pre-norm cross-attention layer: text queries attend over pixel tokens,
/// then a GELU MLP; both sublayers are residual.
pub fn p2t_layer<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    prefix: &str,
    text: Var,
    vision_kv: Var,
    heads: usize,
) -> Result<Var> {
    let q = norm(g, ps, &format!("{prefix}.norm_q"), text)?;
    let kv = norm(g, ps, &format!("{prefix}.norm_kv"), vision_kv)?;
    let a = attention(g, ps, &format!("{prefix}.attn"), q, kv, heads, None)?;
    let x = g.add(text, a)?;
    let h = norm(g, ps, &format!("{prefix}.norm_mlp"), x)?;
    let h = mlp(g, ps, &format!("{prefix}.mlp"), h)?;
    g.add(x, h)
}

/// `V_T^emb = V_T + γ · V_T,out^N`, where the layer chain starts from `V_T`.
pub fn p2tformer_forward<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    v_i: Var,
    v_t: Var,
) -> Result<Var> {
    let kv = vision_tokens(g, v_i)?;
    let mut x = v_t;
    for l in 0..cfg.p2t_layers {
        x = p2t_layer(g, ps, &format!("p2t.layer{l}"), x, kv, cfg.p2t_heads)?;
    }
    let gamma = g.param(ps, GAMMA)?;
    let scaled = g.mul(gamma, x)?;
    g.add(v_t, scaled)
}

pub fn init_t2p<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let c = cfg.channels();
    let half = c / 2;
    let k = cfg.t2p_kernel;
    init_linear(
        store,
        init,
        "t2p.vision",
        c,
        half * T2P_UPSCALE * T2P_UPSCALE,
    );
    init_linear(store, init, "t2p.text", c, half * k * k + 1);
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentResponse {
    /// `[B, T, 4H, 4W]`
    pub o: Var,
    /// `[B, T, mask_h, mask_w]`
    pub o_align: Var,
}

/// Projects pixels to `C/2` channels at 4× resolution (linear `C → 16·C/2`
/// followed by a pixel shuffle with r = 4), turns each text vector into a
/// `C/2 × K × K` kernel plus bias, correlates, and resizes to the mask grid.
pub fn t2p_head<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    v_i: Var,
    v_t: Var,
    mask_h: usize,
    mask_w: usize,
) -> Result<AlignmentResponse> {
    let si = g.shape(v_i).to_vec();
    let st = g.shape(v_t).to_vec();
    if si.len() != 4 || st.len() != 3 || st[0] != si[0] || st[2] != si[1] {
        return Err(Error::dim(
            "t2p_head",
            format!("vision {si:?} and text {st:?} disagree"),
        ));
    }
    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
    let t = st[1];
    let (half, k) = (c / 2, cfg.t2p_kernel);

    let x = g.permute(v_i, &[0, 2, 3, 1])?;
    let x = layers::linear(g, ps, "t2p.vision", x)?;
    let x = g.permute(x, &[0, 3, 1, 2])?;
    let projected = g.pixel_shuffle(x, T2P_UPSCALE)?;

    let kb = layers::linear(g, ps, "t2p.text", v_t)?;
    let kernels = g.slice(kb, 2, 0, half * k * k)?;
    let kernels = g.reshape(kernels, &[b, t, half, k, k])?;
    let bias = g.slice(kb, 2, half * k * k, 1)?;
    let bias = g.reshape(bias, &[b, t])?;

    let o = g.dyn_conv2d(projected, kernels, bias)?;
    debug_assert_eq!(g.shape(o), &[b, t, T2P_UPSCALE * h, T2P_UPSCALE * w]);
    let o_align = g.bilinear_resize(o, mask_h, mask_w)?;
    Ok(AlignmentResponse { o, o_align })
}

/// Mean squared error between `O_align: [B, T, H, W]` and the one-hot
/// expansion of `labels` (`B·H·W` entries), averaged over all four axes.
pub fn t2p_loss<S: Real>(g: &mut Graph<S>, o_align: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(o_align).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(
            "t2p_loss",
            format!("response {s:?} must be [B,T,H,W]"),
        ));
    }
    let (b, t, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != b * hw {
        return Err(Error::dim(
            "t2p_loss",
            format!("{} labels for response {s:?}", labels.len()),
        ));
    }
    let target = one_hot(labels, b, t, hw)?;
    g.mse(o_align, &target)
}

/// `[B, T, HW]` one-hot layout of `B·HW` labels.
pub(crate) fn one_hot<S: Real>(labels: &[usize], b: usize, t: usize, hw: usize) -> Result<Vec<S>> {
    let mut target = vec![S::ZERO; b * t * hw];
    for (i, &l) in labels.iter().enumerate() {
        if l >= t {
            return Err(Error::Input(format!(
                "label {l} at position {i} is not below T = {t}"
            )));
        }
        let (bi, p) = (i / hw, i % hw);
        target[(bi * t + l) * hw + p] = S::ONE;
    }
    Ok(target)
}
