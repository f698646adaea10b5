//! Category supplementation: global (cosine) and local (dynamic depthwise
//! convolution) similarity volumes, their fusion into a cost embedding, and
//! the class/spatial aggregation stages that propagate it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{self, attention, init_attention, init_linear, init_mlp, init_norm, mlp, norm};
use crate::model::ModelConfig;
use crate::params::{Init, ParamStore};
use crate::real::Real;

/// Added to attention scores of padded window tokens.
const MASKED: f64 = -1e9;

/// Cosine similarity of every pixel vector with every category vector:
/// `[B, T, d]` × `[B, C, H, W]` → `[B, T, H, W]` (requires d = C).
pub fn gcs<S: Real>(g: &mut Graph<S>, v_t: Var, v_i: Var) -> Result<Var> {
    let (st, si) = (g.shape(v_t).to_vec(), g.shape(v_i).to_vec());
    if st.len() != 3 || si.len() != 4 || st[0] != si[0] || st[2] != si[1] {
        return Err(Error::dim(
            "gcs",
            format!("text {st:?} and vision {si:?} disagree"),
        ));
    }
    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
    let text = g.l2_normalize(v_t)?;
    let pix = g.reshape(v_i, &[b, c, h * w])?;
    let pix = g.permute(pix, &[0, 2, 1])?;
    let pix = g.l2_normalize(pix)?;
    let pix = g.permute(pix, &[0, 2, 1])?;
    let s = g.matmul(text, pix)?;
    g.reshape(s, &[b, st[1], h, w])
}

#[derive(Clone, Copy, Debug)]
pub struct LcsKernels {
    /// `[B, T, C, K, K]`; each kernel sums to 1 when normalization is on.
    pub weights: Var,
    /// `[B, T]`
    pub bias: Var,
}

pub fn init_supplement<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let (c, k, df) = (cfg.channels(), cfg.lcs_kernel, cfg.cost_dim);
    init_linear(store, init, "lcs.text", c, c * k * k + 1);
    init_linear(store, init, "fuse", 2, df);
    for l in 0..cfg.class_layers {
        let p = format!("agg.class{l}");
        init_linear(store, init, &format!("{p}.guide"), c, df);
        init_norm(store, init, &format!("{p}.norm"), df);
        init_attention(store, init, &format!("{p}.attn"), df, df, df, df);
        init_norm(store, init, &format!("{p}.norm_mlp"), df);
        init_mlp(store, init, &format!("{p}.mlp"), df, 4 * df, df);
    }
    init_linear(store, init, "agg.spatial.guide", 2 * c, df);
    init_norm(store, init, "agg.spatial.norm", df);
    init_attention(store, init, "agg.spatial.attn", 2 * df, 2 * df, df, df);
    init_norm(store, init, "agg.spatial.norm_mlp", df);
    init_mlp(store, init, "agg.spatial.mlp", df, 4 * df, df);
}

/// Text → `C·K²` kernel entries plus one bias. The entries are arranged as
/// `[C, K, K]` by a pixel shuffle of the `C·K² × 1 × 1` vector
/// (`W[c, i, j] = v[c·K² + i·K + j]`), then, if enabled, softmax-normalized
/// over all `C·K²` entries of each kernel.
pub fn lcs_kernels<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    v_t: Var,
) -> Result<LcsKernels> {
    let st = g.shape(v_t).to_vec();
    let (b, t) = (st[0], st[1]);
    let (c, k) = (cfg.channels(), cfg.lcs_kernel);
    let ck = c * k * k;
    let kb = layers::linear(g, ps, "lcs.text", v_t)?;
    let raw = g.slice(kb, 2, 0, ck)?;
    let raw = g.reshape(raw, &[b * t, ck, 1, 1])?;
    let shuffled = g.pixel_shuffle(raw, k)?;
    let weights = if cfg.kernel_norm {
        let flat = g.reshape(shuffled, &[b, t, ck])?;
        let normed = g.softmax(flat, 2)?;
        g.reshape(normed, &[b, t, c, k, k])?
    } else {
        g.reshape(shuffled, &[b, t, c, k, k])?
    };
    let bias = g.slice(kb, 2, ck, 1)?;
    let bias = g.reshape(bias, &[b, t])?;
    Ok(LcsKernels { weights, bias })
}

/// Depthwise correlation of the pixel features with each category kernel.
pub fn lcs<S: Real>(g: &mut Graph<S>, v_i: Var, kernels: &LcsKernels) -> Result<Var> {
    g.depthwise_conv2d(v_i, kernels.weights, kernels.bias)
}

/// Stacks `(S_g, S_l)` per cell and maps the pair through `2 → d_f` + GELU.
pub fn fuse<S: Real>(g: &mut Graph<S>, ps: &ParamStore, s_g: Var, s_l: Var) -> Result<Var> {
    let (sg, sl) = (g.shape(s_g).to_vec(), g.shape(s_l).to_vec());
    if sg != sl || sg.len() != 4 {
        return Err(Error::dim(
            "fuse",
            format!("S_g {sg:?} and S_l {sl:?} must match as [B,T,H,W]"),
        ));
    }
    let mut col = sg.clone();
    col.push(1);
    let a = g.reshape(s_g, &col)?;
    let b = g.reshape(s_l, &col)?;
    let pair = g.concat(&[a, b], 4)?;
    let f = layers::linear(g, ps, "fuse", pair)?;
    g.gelu(f)
}

/// `[B, R, df]` rows broadcast over `n` cells → `[B·n, R, df]`.
fn broadcast_rows<S: Real>(g: &mut Graph<S>, x: Var, n: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], 1, s[1], s[2]])?;
    let x = g.broadcast_to(x, &[s[0], n, s[1], s[2]])?;
    g.reshape(x, &[s[0] * n, s[1], s[2]])
}

/// Attention across the category axis at every pixel. Queries are the
/// normalized cost vectors plus a projection of the text guidance; keys and
/// values are the normalized cost vectors. No positional encoding on T.
pub fn class_aggregation<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    f: Var,
    text_guidance: Var,
) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 5 {
        return Err(Error::dim(
            "class_aggregation",
            format!("cost {s:?} must be [B,T,H,W,df]"),
        ));
    }
    let (b, t, h, w, df) = (s[0], s[1], s[2], s[3], s[4]);
    let x = g.permute(f, &[0, 2, 3, 1, 4])?;
    let mut x = g.reshape(x, &[b * h * w, t, df])?;
    for l in 0..cfg.class_layers {
        let p = format!("agg.class{l}");
        let guide = layers::linear(g, ps, &format!("{p}.guide"), text_guidance)?;
        let guide = broadcast_rows(g, guide, h * w)?;
        let kv = norm(g, ps, &format!("{p}.norm"), x)?;
        let q = g.add(kv, guide)?;
        let a = attention(g, ps, &format!("{p}.attn"), q, kv, cfg.agg_heads, None)?;
        x = g.add(x, a)?;
        let m = norm(g, ps, &format!("{p}.norm_mlp"), x)?;
        let m = mlp(g, ps, &format!("{p}.mlp"), m)?;
        x = g.add(x, m)?;
    }
    let x = g.reshape(x, &[b, h, w, t, df])?;
    g.permute(x, &[0, 3, 1, 2, 4])
}

struct Windows {
    n: usize,
    nh: usize,
    nw: usize,
    win: usize,
}

/// `[N, H, W, D]` → `[N·nh·nw, win², D]`, zero-padding H and W up to a
/// multiple of `win`.
fn partition<S: Real>(g: &mut Graph<S>, x: Var, win: usize) -> Result<(Var, Windows)> {
    let s = g.shape(x).to_vec();
    let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
    let (nh, nw) = (h.div_ceil(win), w.div_ceil(win));
    let mut x = x;
    if nh * win > h {
        x = g.pad(x, 1, 0, nh * win - h)?;
    }
    if nw * win > w {
        x = g.pad(x, 2, 0, nw * win - w)?;
    }
    let x = g.reshape(x, &[n, nh, win, nw, win, d])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[n * nh * nw, win * win, d])?;
    Ok((x, Windows { n, nh, nw, win }))
}

/// Inverse of [`partition`], without the crop.
fn unpartition<S: Real>(g: &mut Graph<S>, x: Var, win: &Windows) -> Result<Var> {
    let d = *g.shape(x).last().expect("rank 3");
    let x = g.reshape(x, &[win.n, win.nh, win.nw, win.win, win.win, d])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[win.n, win.nh * win.win, win.nw * win.win, d])
}

/// Additive key mask that hides zero-padded tokens, `[N·nh·nw, 1, 1, win²]`.
fn padding_mask<S: Real>(
    g: &mut Graph<S>,
    win: &Windows,
    h: usize,
    w: usize,
) -> Result<Option<Var>> {
    let ws = win.win;
    if win.nh * ws == h && win.nw * ws == w {
        return Ok(None);
    }
    let per_image: Vec<S> = (0..win.nh * win.nw)
        .flat_map(|wi| {
            let (by, bx) = (wi / win.nw, wi % win.nw);
            (0..ws * ws).map(move |p| {
                let (y, x) = (by * ws + p / ws, bx * ws + p % ws);
                if y < h && x < w {
                    S::ZERO
                } else {
                    S::from_f64(MASKED)
                }
            })
        })
        .collect();
    let values = per_image.repeat(win.n);
    g.constant_values(&[win.n * win.nh * win.nw, 1, 1, ws * ws], values)
        .map(Some)
}

/// Windowed (non-shifted) self-attention over the spatial grid of every
/// category. Each token is the normalized cost vector concatenated with a
/// projection of the two vision-guidance maps at that cell. Grids that are
/// not a multiple of the window are zero-padded, the padded keys masked out,
/// and the result cropped back.
pub fn spatial_aggregation<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    f: Var,
    guidance: [Var; 2],
) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 5 {
        return Err(Error::dim(
            "spatial_aggregation",
            format!("cost {s:?} must be [B,T,H,W,df]"),
        ));
    }
    let (b, t, h, w, df) = (s[0], s[1], s[2], s[3], s[4]);
    for &gv in &guidance {
        let gs = g.shape(gv);
        if gs.len() != 4 || gs[0] != b || gs[2] != h || gs[3] != w {
            return Err(Error::dim(
                "spatial_aggregation",
                format!("guidance {gs:?} does not cover the {h}x{w} grid"),
            ));
        }
    }
    let gcat = g.concat(&guidance, 1)?;
    let gcat = g.permute(gcat, &[0, 2, 3, 1])?;
    let gp = layers::linear(g, ps, "agg.spatial.guide", gcat)?;
    let gp = g.reshape(gp, &[b, 1, h, w, df])?;
    let gp = g.broadcast_to(gp, &[b, t, h, w, df])?;
    let gp = g.reshape(gp, &[b * t, h, w, df])?;

    let x = g.reshape(f, &[b * t, h, w, df])?;
    let xn = norm(g, ps, "agg.spatial.norm", x)?;
    let tokens = g.concat(&[xn, gp], 3)?;
    let (tw, win) = partition(g, tokens, cfg.window)?;
    let mask = padding_mask(g, &win, h, w)?;
    let a = attention(g, ps, "agg.spatial.attn", tw, tw, cfg.agg_heads, mask)?;
    let a = unpartition(g, a, &win)?;
    let a = g.slice(a, 1, 0, h)?;
    let a = g.slice(a, 2, 0, w)?;

    let x = g.add(x, a)?;
    let m = norm(g, ps, "agg.spatial.norm_mlp", x)?;
    let m = mlp(g, ps, "agg.spatial.mlp", m)?;
    let x = g.add(x, m)?;
    g.reshape(x, &[b, t, h, w, df])
}
