//! Training configuration, the overall objective and the optimisation loop.

use std::fmt::Write as _;
use std::time::Instant;

use crate::alignment;
use crate::decoder;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradReport};
use crate::graph::{Graph, Var};
use crate::metrics::Accumulator;
use crate::model::{self, Model, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::real::Real;
use crate::scene::{default_vocabulary, SceneSpec, SyntheticScene};
use crate::vlm::{TextFeatures, VisionFeatures};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda_align: f64,
    pub lambda_auxi: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub iters: usize,
    pub seed: u64,
    /// Categories kept by pruned inference.
    pub top_k: usize,
    /// Evaluate with top-k pruning.
    pub fast_mode: bool,
    pub scenes: usize,
    pub categories: usize,
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda_align: 0.02,
            lambda_auxi: 0.2,
            lr: 2e-4,
            optimizer: OptimizerKind::Adam,
            iters: 300,
            seed: 0,
            top_k: 1,
            fast_mode: false,
            scenes: 8,
            categories: 6,
            image_size: 64,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in file order.
pub const KEYS: &[&str] = &[
    "lambda_align",
    "lambda_auxi",
    "lr",
    "optimizer",
    "iters",
    "seed",
    "top_k",
    "fast_mode",
    "scenes",
    "categories",
    "image_size",
    "kernel_size",
    "kernel_norm",
    "p2t_layers",
    "p2t_heads",
    "gamma",
    "t2p_kernel",
    "decoder_stages",
    "merge_mode",
    "cost_dim",
    "agg_heads",
    "class_layers",
    "window",
    "aux_hidden",
    "channels",
    "patch",
    "vlm_seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {value:?} for `{key}` (expected on/off)"
        ))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "lambda_align" => self.lambda_align = parse(key, value)?,
            "lambda_auxi" => self.lambda_auxi = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "iters" => self.iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "fast_mode" => self.fast_mode = parse_bool(key, value)?,
            "scenes" => self.scenes = parse(key, value)?,
            "categories" | "T" => self.categories = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "kernel_size" | "K" => m.lcs_kernel = parse(key, value)?,
            "kernel_norm" => m.kernel_norm = parse_bool(key, value)?,
            "p2t_layers" | "N" => m.p2t_layers = parse(key, value)?,
            "p2t_heads" => m.p2t_heads = parse(key, value)?,
            "gamma" => m.gamma = value.parse()?,
            "t2p_kernel" => m.t2p_kernel = parse(key, value)?,
            "decoder_stages" | "N_d" => m.decoder_stages = parse(key, value)?,
            "merge_mode" => m.merge = value.parse()?,
            "cost_dim" => m.cost_dim = parse(key, value)?,
            "agg_heads" => m.agg_heads = parse(key, value)?,
            "class_layers" => m.class_layers = parse(key, value)?,
            "window" => m.window = parse(key, value)?,
            "aux_hidden" => m.aux_hidden = parse(key, value)?,
            "channels" => m.vlm.channels = parse(key, value)?,
            "patch" => m.vlm.patch = parse(key, value)?,
            "vlm_seed" => m.vlm.seed = parse(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "lambda_align" => self.lambda_align.to_string(),
            "lambda_auxi" => self.lambda_auxi.to_string(),
            "lr" => self.lr.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "iters" => self.iters.to_string(),
            "seed" => self.seed.to_string(),
            "top_k" => self.top_k.to_string(),
            "fast_mode" => on_off(self.fast_mode),
            "scenes" => self.scenes.to_string(),
            "categories" => self.categories.to_string(),
            "image_size" => self.image_size.to_string(),
            "kernel_size" => m.lcs_kernel.to_string(),
            "kernel_norm" => on_off(m.kernel_norm),
            "p2t_layers" => m.p2t_layers.to_string(),
            "p2t_heads" => m.p2t_heads.to_string(),
            "gamma" => m.gamma.to_string(),
            "t2p_kernel" => m.t2p_kernel.to_string(),
            "decoder_stages" => m.decoder_stages.to_string(),
            "merge_mode" => m.merge.to_string(),
            "cost_dim" => m.cost_dim.to_string(),
            "agg_heads" => m.agg_heads.to_string(),
            "class_layers" => m.class_layers.to_string(),
            "window" => m.window.to_string(),
            "aux_hidden" => m.aux_hidden.to_string(),
            "channels" => m.vlm.channels.to_string(),
            "patch" => m.vlm.patch.to_string(),
            "vlm_seed" => m.vlm.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines over `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every key has a value"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda_align >= 0.0 && self.lambda_auxi >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.scenes == 0 {
            return Err(Error::Config("need at least one training scene".into()));
        }
        default_vocabulary(self.categories)?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        let p = self.model.vlm.patch;
        if self.image_size == 0 || self.image_size % p != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the {p}-pixel patch",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let mut spec = SceneSpec::new(
            default_vocabulary(self.categories)?,
            self.image_size,
            self.image_size,
        );
        spec.cell = self.model.vlm.patch;
        Ok(spec)
    }

    /// The seeded training scenes.
    pub fn training_scenes(&self) -> Result<Vec<SyntheticScene>> {
        let spec = self.scene_spec()?;
        (0..self.scenes as u64)
            .map(|i| spec.generate(scene_seed(self.seed, i)))
            .collect()
    }

    /// `n` fresh scenes from the training distribution, disjoint in seed
    /// from [`Self::training_scenes`].
    pub fn heldout_scenes(&self, n: usize) -> Result<Vec<SyntheticScene>> {
        let spec = self.scene_spec()?;
        (0..n as u64)
            .map(|i| spec.generate(scene_seed(self.seed ^ HELDOUT_SALT, i)))
            .collect()
    }
}

const HELDOUT_SALT: u64 = 0x5EED_0E7A;

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

/// Seed of scene `i` in the set drawn from `seed`.
pub fn scene_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub align: Option<Var>,
    pub auxi: Var,
}

/// `L = L_ce + λ_align·L_align + λ_auxi·L_auxi`, keeping each term.
pub fn overall_loss<S: Real>(
    g: &mut Graph<S>,
    y: Var,
    y_aux: Var,
    o_align: Option<Var>,
    labels: &[usize],
    lambda_align: f64,
    lambda_auxi: f64,
) -> Result<LossTerms> {
    let ce = g.cross_entropy(y, labels)?;
    let auxi = decoder::aux_loss(g, y_aux, labels)?;
    let weighted = g.scale(auxi, lambda_auxi)?;
    let mut total = g.add(ce, weighted)?;
    let align = match o_align {
        Some(o) => {
            let a = alignment::t2p_loss(g, o, labels)?;
            let weighted = g.scale(a, lambda_align)?;
            total = g.add(total, weighted)?;
            Some(a)
        }
        None => None,
    };
    Ok(LossTerms {
        total,
        ce,
        align,
        auxi,
    })
}

/// Encoder outputs and labels of one batch; the encoders are frozen, so
/// they are computed once per scene.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vision: VisionFeatures,
    pub text: TextFeatures,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Prepared {
    pub fn new(model: &Model, scene: &SyntheticScene) -> Result<Self> {
        let [b, h, w] = scene.mask.shape;
        Ok(Self {
            vision: model.encode_image(&scene.image)?,
            text: model.encode_text(&scene.vocabulary.ids(), b)?,
            labels: scene.mask.labels.clone(),
            height: h,
            width: w,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub align: f64,
    pub auxi: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
        Ok(Self {
            cfg,
            model,
            optimizer,
            step: 0,
        })
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &Prepared) -> Result<LossRecord> {
        let mut g = Graph::<f32>::new();
        let out = model::forward(
            &mut g,
            &self.model.params,
            &self.model.cfg,
            &batch.vision,
            &batch.text,
            batch.height,
            batch.width,
            true,
        )?;
        let terms = overall_loss(
            &mut g,
            out.y,
            out.y_aux,
            out.align.map(|a| a.o_align),
            &batch.labels,
            self.cfg.lambda_align,
            self.cfg.lambda_auxi,
        )?;
        g.backward(terms.total)?;
        let grads = g.param_grads();
        for (name, grad) in &grads {
            if let Some(index) = grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad {
                    param: name.clone(),
                    index,
                });
            }
        }
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.step += 1;
        let scalar = |v: Var| g.scalar(v) as f64;
        Ok(LossRecord {
            step: self.step,
            total: scalar(terms.total),
            ce: scalar(terms.ce),
            align: terms.align.map_or(0.0, scalar),
            auxi: scalar(terms.auxi),
        })
    }

    /// Runs `cfg.iters` steps, cycling through `data` one scene per step.
    pub fn fit(
        &mut self,
        data: &[Prepared],
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        if data.is_empty() {
            return Err(Error::Input("no training data".into()));
        }
        let mut trace = Vec::with_capacity(self.cfg.iters);
        for i in 0..self.cfg.iters {
            let rec = self.train_step(&data[i % data.len()])?;
            on_step(&rec);
            trace.push(rec);
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub images: usize,
    /// Wall time of inference alone.
    pub seconds: f64,
}

/// Segments every scene against its own vocabulary and pools the metrics.
pub fn evaluate(
    model: &Model,
    scenes: &[SyntheticScene],
    top_k: Option<usize>,
) -> Result<EvalReport> {
    evaluate_with(model, scenes, None, top_k)
}

/// Like [`evaluate`], but queries `ids` instead of each scene's vocabulary.
/// Scene labels must index the same categories in `ids`.
pub fn evaluate_with(
    model: &Model,
    scenes: &[SyntheticScene],
    ids: Option<&[u32]>,
    top_k: Option<usize>,
) -> Result<EvalReport> {
    let mut acc = Accumulator::default();
    let mut seconds = 0.0;
    let mut t = 0;
    for s in scenes {
        let own = s.vocabulary.ids();
        let ids = ids.unwrap_or(&own);
        if ids.get(..own.len()) != Some(&own[..]) {
            return Err(Error::Input(
                "query vocabulary must start with the scene's categories".into(),
            ));
        }
        t = t.max(ids.len());
        let start = Instant::now();
        let pred = model::infer(model, &s.image, ids, top_k)?;
        seconds += start.elapsed().as_secs_f64();
        acc.push(&pred.labels, &s.mask.labels);
    }
    Ok(EvalReport {
        pixel_accuracy: acc.pixel_accuracy()?,
        miou: acc.miou(t)?.mean,
        images: scenes.len(),
        seconds,
    })
}

/// Parameter-name prefixes of the trainable groups, with display names.
pub const PARAM_GROUPS: &[(&str, &str)] = &[
    ("p2t.", "p2tformer"),
    ("t2p.", "t2p_head"),
    ("lcs.", "lcs_projection"),
    ("fuse.", "fusion"),
    ("agg.", "aggregation"),
    ("dec.", "decoder"),
    ("aux.", "aux_branch"),
];

pub fn param_group(name: &str) -> Option<&'static str> {
    PARAM_GROUPS
        .iter()
        .find(|(p, _)| name.starts_with(p))
        .map(|(_, g)| *g)
}

/// Finite-difference check of the full overall loss (all three terms) on a
/// small seeded scene, in 64-bit precision.
pub fn model_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<GradReport> {
    let model = Model::new(cfg.clone(), seed)?;
    let p = cfg.vlm.patch;
    let mut spec = SceneSpec::new(vec![0, 1, 2], 3 * p, 4 * p);
    spec.cell = p;
    let scene = spec.generate(seed)?;
    let batch = Prepared::new(&model, &scene)?;
    let check = GradCheckConfig {
        seed,
        ..check.clone()
    };
    grad_check(&model.params, &check, |g, ps| {
        let out = model::forward(
            g,
            ps,
            cfg,
            &batch.vision,
            &batch.text,
            batch.height,
            batch.width,
            true,
        )?;
        let terms = overall_loss(
            g,
            out.y,
            out.y_aux,
            out.align.map(|a| a.o_align),
            &batch.labels,
            0.02,
            0.2,
        )?;
        Ok(terms.total)
    })
}
