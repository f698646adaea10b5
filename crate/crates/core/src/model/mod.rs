//! The full segmentation pipeline: frozen encoders, pixel-level alignment,
//! category supplementation, aggregation and decoding.

mod config;

pub use config::{GammaMode, MergeMode, ModelConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, AlignmentResponse};
use crate::decoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::real::Real;
use crate::supplement;
use crate::tensor::Tensor;
use crate::vlm::{self, TextFeatures, VisionFeatures};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    /// Trainable weights plus the frozen encoder under `vlm.`.
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = vlm::build_encoder(&cfg.vlm)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        alignment::init_p2tformer(&mut params, &mut init, &cfg);
        alignment::init_t2p(&mut params, &mut init, &cfg);
        supplement::init_supplement(&mut params, &mut init, &cfg);
        decoder::init_decoder(&mut params, &mut init, &cfg);
        Ok(Self { cfg, params })
    }

    /// Wraps loaded weights, checking that every tensor the config needs exists.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(cfg.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint lacks tensor {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn encode_image(&self, images: &Tensor) -> Result<VisionFeatures> {
        vlm::encode_image(&self.params, &self.cfg.vlm, images)
    }

    pub fn encode_text(&self, ids: &[u32], batch: usize) -> Result<TextFeatures> {
        vlm::encode_text(ids, batch, &self.cfg.vlm)
    }

    /// Checksum of the frozen encoder tensors.
    pub fn encoder_checksum(&self) -> String {
        let mut enc = ParamStore::new();
        for (n, t) in self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(vlm::PREFIX))
        {
            enc.insert(n.clone(), t.clone());
        }
        enc.checksum()
    }
}

/// Graph nodes of the shared trunk.
#[derive(Clone, Copy, Debug)]
pub struct Trunk {
    pub v_i: Var,
    pub v_t: Var,
    pub v_t_emb: Var,
    pub s_g: Var,
    pub s_l: Var,
    pub fused: Var,
    pub agg: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub trunk: Trunk,
    pub y: Var,
    pub y_aux: Var,
    pub align: Option<AlignmentResponse>,
}

/// Encoders → P2Tformer → GCS/LCS → fusion → class and spatial aggregation.
pub fn trunk<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    vision: &VisionFeatures,
    text: &TextFeatures,
) -> Result<Trunk> {
    let v_i = g.constant(&vision.final_);
    let g1 = g.constant(&vision.guidance[0]);
    let g2 = g.constant(&vision.guidance[1]);
    let v_t = g.constant(&text.embeddings);
    let v_t_emb = alignment::p2tformer_forward(g, ps, cfg, v_i, v_t)?;
    let s_g = supplement::gcs(g, v_t_emb, v_i)?;
    let kernels = supplement::lcs_kernels(g, ps, cfg, v_t_emb)?;
    let s_l = supplement::lcs(g, v_i, &kernels)?;
    let fused = supplement::fuse(g, ps, s_g, s_l)?;
    let agg = supplement::class_aggregation(g, ps, cfg, fused, v_t_emb)?;
    let agg = supplement::spatial_aggregation(g, ps, cfg, agg, [g1, g2])?;
    Ok(Trunk {
        v_i,
        v_t,
        v_t_emb,
        s_g,
        s_l,
        fused,
        agg,
    })
}

/// Full training-time forward pass; logits are produced at `out_h × out_w`.
/// The T2P head runs only when `with_alignment` is set.
pub fn forward<S: Real>(
    g: &mut Graph<S>,
    ps: &ParamStore,
    cfg: &ModelConfig,
    vision: &VisionFeatures,
    text: &TextFeatures,
    out_h: usize,
    out_w: usize,
    with_alignment: bool,
) -> Result<Outputs> {
    let trunk = trunk(g, ps, cfg, vision, text)?;
    let y = decoder::decode(g, ps, cfg, trunk.agg, trunk.s_l, out_h, out_w)?;
    let y_aux = decoder::aux_branch(g, ps, trunk.fused, out_h, out_w)?;
    let align = if with_alignment {
        Some(alignment::t2p_head(
            g,
            ps,
            cfg,
            trunk.v_i,
            trunk.v_t_emb,
            out_h,
            out_w,
        )?)
    } else {
        None
    };
    Ok(Outputs {
        trunk,
        y,
        y_aux,
        align,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[B, H, W]` indices into the category list.
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    /// Categories decoded for each image.
    pub retained: Vec<Vec<usize>>,
}

/// Argmax over axis 1 of `[B, T, H, W]`, first maximum wins.
pub fn argmax_classes(logits: &[f32], b: usize, t: usize, hw: usize) -> Vec<usize> {
    let mut out = vec![0; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let mut best = (0, f32::NEG_INFINITY);
            for ti in 0..t {
                let v = logits[(bi * t + ti) * hw + p];
                if v > best.1 {
                    best = (ti, v);
                }
            }
            out[bi * hw + p] = best.0;
        }
    }
    out
}

/// Gathers categories `keep` of image `b` from a `[B, T, ...]` node.
fn gather_classes<S: Real>(g: &mut Graph<S>, x: Var, b: usize, keep: &[usize]) -> Result<Var> {
    let img = g.slice(x, 0, b, 1)?;
    let parts = keep
        .iter()
        .map(|&t| g.slice(img, 1, t, 1))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 1)
}

/// Segments `images: [B, 3, H, W]` against `category_ids`.
///
/// With `top_k = None` every category is decoded. With `Some(k)` the
/// auxiliary branch picks `k` categories per image and only those are
/// decoded, so pruned categories can never be predicted.
pub fn infer(
    model: &Model,
    images: &Tensor,
    category_ids: &[u32],
    top_k: Option<usize>,
) -> Result<Prediction> {
    if category_ids.is_empty() {
        return Err(Error::Input("empty category list".into()));
    }
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim(
            "infer",
            format!("images {s:?} must be [B,3,H,W]"),
        ));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let t = category_ids.len();
    let vision = model.encode_image(images)?;
    let text = model.encode_text(category_ids, b)?;
    let (ps, cfg) = (&model.params, &model.cfg);
    let mut g = Graph::<f32>::new();
    let tr = trunk(&mut g, ps, cfg, &vision, &text)?;

    let (labels, retained) = match top_k {
        None => {
            let y = decoder::decode(&mut g, ps, cfg, tr.agg, tr.s_l, h, w)?;
            (
                argmax_classes(g.value(y), b, t, h * w),
                vec![(0..t).collect(); b],
            )
        }
        Some(k) => {
            let y_aux = decoder::aux_branch(&mut g, ps, tr.fused, h, w)?;
            let keep = decoder::topk_select(&g.to_tensor(y_aux), k)?;
            let mut labels = Vec::with_capacity(b * h * w);
            for (bi, kept) in keep.iter().enumerate() {
                let agg = gather_classes(&mut g, tr.agg, bi, kept)?;
                let sl = gather_classes(&mut g, tr.s_l, bi, kept)?;
                let y = decoder::decode(&mut g, ps, cfg, agg, sl, h, w)?;
                labels.extend(
                    argmax_classes(g.value(y), 1, kept.len(), h * w)
                        .into_iter()
                        .map(|i| kept[i]),
                );
            }
            (labels, keep)
        }
    };
    Ok(Prediction {
        labels,
        shape: [b, h, w],
        retained,
    })
}
