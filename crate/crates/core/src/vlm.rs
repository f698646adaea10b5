//! Frozen toy vision-language model.
//!
//! The image encoder flattens non-overlapping `patch × patch` RGB patches
//! (channel-major, then row, then column) and runs three `tanh(W·x + b)`
//! stages. The stages start random and are then pretrained once, at
//! construction, so that a patch of a category's colour lands near
//! `0.8 · e_id` where `e_id` is that category's text embedding. After that
//! the weights are frozen.
//!
//! Text embeddings come from a seeded hash, see [`text_embedding`].

use std::fs;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::concepts;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "vlm.";
const PRETRAIN_NOISE: f64 = 0.02;
const PRETRAIN_TARGET_SCALE: f32 = 0.8;
const PRETRAIN_STEPS: usize = 1500;
const PRETRAIN_LR: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVlmConfig {
    pub seed: u64,
    pub channels: usize,
    pub patch: usize,
    pub tau: f64,
    /// Encoder stages (1-based, at most 3) exposed as vision guidance.
    pub guidance_layers: [usize; 2],
}

impl Default for ToyVlmConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            channels: 32,
            patch: 4,
            tau: 0.07,
            guidance_layers: [1, 2],
        }
    }
}

impl ToyVlmConfig {
    /// Text width; always equal to the vision width.
    pub fn text_dim(&self) -> usize {
        self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channels must be positive and even, got {}",
                self.channels
            )));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.guidance_layers.iter().any(|&l| !(1..=3).contains(&l)) {
            return Err(Error::Config(format!(
                "guidance layers {:?} must lie in 1..=3",
                self.guidance_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VisionFeatures {
    /// `[B, C, H, W]`
    pub final_: Tensor,
    pub guidance: [Tensor; 2],
}

#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `[B, T, d]`, identical across the batch axis.
    pub embeddings: Tensor,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit-norm embedding of category `id`.
///
/// `state = seed ^ (id · 0x9E3779B97F4A7C15)`; component `j` advances the
/// state by the same constant, applies the splitmix64 finaliser, keeps the top
/// 53 bits as `u ∈ [0, 1)` and uses `2u − 1`. The vector is normalised in
/// `f64`, then rounded to `f32`.
pub fn text_embedding(id: u32, seed: u64, d: usize) -> Vec<f32> {
    let mut state = seed ^ (id as u64).wrapping_mul(GOLDEN);
    let raw: Vec<f64> = (0..d)
        .map(|_| {
            state = state.wrapping_add(GOLDEN);
            let u = (mix(state) >> 11) as f64 / (1u64 << 53) as f64;
            2.0 * u - 1.0
        })
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| (v / norm) as f32).collect()
}

pub fn encode_text(ids: &[u32], batch: usize, cfg: &ToyVlmConfig) -> Result<TextFeatures> {
    if ids.is_empty() {
        return Err(Error::Input("category list is empty".into()));
    }
    if batch == 0 {
        return Err(Error::Input("batch must be positive".into()));
    }
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(Error::Input(format!("category id {id} appears twice")));
        }
    }
    let d = cfg.text_dim();
    let rows: Vec<f32> = ids
        .iter()
        .flat_map(|&id| text_embedding(id, cfg.seed, d))
        .collect();
    let data = rows.repeat(batch);
    Ok(TextFeatures {
        embeddings: Tensor::new(vec![batch, ids.len(), d], data)?,
    })
}

struct Stages<'a> {
    w: [&'a [f32]; 3],
    b: [&'a [f32]; 3],
    c: usize,
    input: usize,
}

/// `out = tanh(x · w + b)` with `w: [in, out]`.
fn dense_tanh(w: &[f32], b: &[f32], x: &[f32], out: &mut [f32]) {
    out.copy_from_slice(b);
    for (&xi, row) in x.iter().zip(w.chunks_exact(out.len())) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out.iter_mut().for_each(|o| *o = o.tanh());
}

impl<'a> Stages<'a> {
    fn from_store(store: &'a ParamStore, cfg: &ToyVlmConfig) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(&format!("{PREFIX}{name}"))
                .map(Tensor::data)
                .ok_or_else(|| Error::Input(format!("missing encoder tensor {PREFIX}{name}")))
        };
        let c = cfg.channels;
        let input = 3 * cfg.patch * cfg.patch;
        let s = Stages {
            w: [
                get("stage1.weight")?,
                get("stage2.weight")?,
                get("stage3.weight")?,
            ],
            b: [
                get("stage1.bias")?,
                get("stage2.bias")?,
                get("stage3.bias")?,
            ],
            c,
            input,
        };
        let expect = [c * input, c * c, c * c];
        for i in 0..3 {
            if s.w[i].len() != expect[i] || s.b[i].len() != c {
                return Err(Error::dim(
                    "toy encoder",
                    format!(
                        "stage {} weights do not match C={c}, patch={}",
                        i + 1,
                        cfg.patch
                    ),
                ));
            }
        }
        Ok(s)
    }

    /// Runs the first `depth` stages, writing each stage's output into `outs`.
    fn run(&self, x: &[f32], depth: usize, outs: &mut [Vec<f32>; 3]) {
        dense_tanh(self.w[0], self.b[0], x, &mut outs[0]);
        for s in 1..depth {
            let (done, rest) = outs.split_at_mut(s);
            dense_tanh(self.w[s], self.b[s], &done[s - 1], &mut rest[0]);
        }
    }
}

fn pretrain_loss(g: &mut Graph<f32>, store: &ParamStore, x: Var, target: &[f32]) -> Result<Var> {
    let mut h = x;
    for s in 1..=3 {
        let w = g.param(store, &format!("{PREFIX}stage{s}.weight"))?;
        let b = g.param(store, &format!("{PREFIX}stage{s}.bias"))?;
        let z = g.linear(h, w, Some(b))?;
        h = g.tanh(z)?;
    }
    g.mse(h, target)
}

/// Builds the frozen encoder: random stages, briefly pretrained so that a
/// noisy patch of each category's colour maps near `0.8 · e_id`. Results are
/// cached per configuration for the life of the process.
pub fn build_encoder(cfg: &ToyVlmConfig) -> Result<ParamStore> {
    cfg.validate()?;
    static CACHE: OnceLock<Mutex<Vec<(ToyVlmConfig, ParamStore)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some((_, store)) = cache
        .lock()
        .expect("cache lock")
        .iter()
        .find(|(c, _)| c == cfg)
    {
        return Ok(store.clone());
    }
    let store = pretrain(cfg)?;
    cache
        .lock()
        .expect("cache lock")
        .push((cfg.clone(), store.clone()));
    Ok(store)
}

fn pretrain(cfg: &ToyVlmConfig) -> Result<ParamStore> {
    let c = cfg.channels;
    let input = 3 * cfg.patch * cfg.patch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    {
        let mut init = Init { rng: &mut rng };
        store.insert(
            format!("{PREFIX}stage1.weight"),
            init.fan_in(&[input, c], input),
        );
        store.insert(format!("{PREFIX}stage1.bias"), init.normal(&[c], 0.5));
        store.insert(format!("{PREFIX}stage2.weight"), init.fan_in(&[c, c], c));
        store.insert(format!("{PREFIX}stage2.bias"), init.normal(&[c], 0.3));
        store.insert(format!("{PREFIX}stage3.weight"), init.fan_in(&[c, c], c));
        store.insert(format!("{PREFIX}stage3.bias"), init.zeros(&[c]));
    }

    let concepts = concepts::all();
    let pp = cfg.patch * cfg.patch;
    let noise = Normal::new(0.0, PRETRAIN_NOISE).expect("valid std");
    let target: Vec<f32> = concepts
        .iter()
        .flat_map(|k| text_embedding(k.id, cfg.seed, c))
        .map(|v| PRETRAIN_TARGET_SCALE * v)
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::Adam, PRETRAIN_LR);
    for _ in 0..PRETRAIN_STEPS {
        let patches: Vec<f32> = concepts
            .iter()
            .flat_map(|k| (0..input).map(move |i| k.color[i / pp]))
            .map(|v| v + noise.sample(&mut rng) as f32)
            .collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant_values(&[concepts.len(), input], patches)?;
        let loss = pretrain_loss(&mut g, &store, x, &target)?;
        g.backward(loss)?;
        opt.step(&mut store, &g.param_grads())?;
    }
    store.set_trainable(PREFIX, false);
    Ok(store)
}

pub fn encode_image(
    store: &ParamStore,
    cfg: &ToyVlmConfig,
    images: &Tensor,
) -> Result<VisionFeatures> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::dim(
            "encode_image",
            format!("images {s:?} must be [B,3,H,W]"),
        ));
    }
    let (b, hi, wi, p) = (s[0], s[2], s[3], cfg.patch);
    if hi % p != 0 || wi % p != 0 {
        return Err(Error::Config(format!(
            "image size {hi}x{wi} is not divisible by patch {p}"
        )));
    }
    let stages = Stages::from_store(store, cfg)?;
    let (h, w, c) = (hi / p, wi / p, cfg.channels);
    let hw = h * w;
    let mut planes = [
        vec![0.0f32; b * c * hw],
        vec![0.0; b * c * hw],
        vec![0.0; b * c * hw],
    ];
    let mut outs = [vec![0.0; c], vec![0.0; c], vec![0.0; c]];
    let mut patch = vec![0.0f32; stages.input];
    let px = images.data();
    for bi in 0..b {
        for py in 0..h {
            for pxi in 0..w {
                for ch in 0..3 {
                    for dy in 0..p {
                        let src = ((bi * 3 + ch) * hi + py * p + dy) * wi + pxi * p;
                        patch[(ch * p + dy) * p..][..p].copy_from_slice(&px[src..src + p]);
                    }
                }
                stages.run(&patch, 3, &mut outs);
                for (plane, out) in planes.iter_mut().zip(&outs) {
                    for (ci, &v) in out.iter().enumerate() {
                        plane[(bi * c + ci) * hw + py * w + pxi] = v;
                    }
                }
            }
        }
    }
    debug_assert_eq!(stages.c, c);
    let shape = vec![b, c, h, w];
    let [p1, p2, p3] = planes;
    let by_stage = [p1, p2, p3.clone()];
    let [g1, g2] = cfg.guidance_layers;
    Ok(VisionFeatures {
        final_: Tensor::new(shape.clone(), p3)?,
        guidance: [
            Tensor::new(shape.clone(), by_stage[g1 - 1].clone())?,
            Tensor::new(shape, by_stage[g2 - 1].clone())?,
        ],
    })
}

/// Cosine similarity over the last axis, norms floored at 1e-8.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let out = g.cosine_similarity(va, vb)?;
    Ok(g.to_tensor(out))
}

/// `−(1/N) Σ_i log[exp(S_ii/τ) / (Σ_j exp(S_ij/τ) + Σ_j exp(S_ji/τ))]`.
///
/// The diagonal term appears in both the row and the column sum; this is
/// deliberately kept rather than rewritten as symmetric InfoNCE.
pub fn contrastive_loss(sim: &Tensor, tau: f64) -> Result<f64> {
    let s = sim.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim(
            "contrastive_loss",
            format!("similarity {s:?} must be square"),
        ));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = s[0];
    let a = |i: usize, j: usize| sim.data()[i * n + j] as f64 / tau;
    let m = sim
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / tau));
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n)
            .map(|j| (a(i, j) - m).exp() + (a(j, i) - m).exp())
            .sum();
        total += a(i, i) - m - denom.ln();
    }
    Ok(-total / n as f64)
}

/// A category list as read from or written to a vocabulary file
/// (`id<TAB>name` per line).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub entries: Vec<(u32, String)>,
}

impl Vocabulary {
    pub fn from_ids(ids: &[u32]) -> Self {
        let entries = ids
            .iter()
            .map(|&id| {
                let name =
                    concepts::concept(id).map_or_else(|| format!("category {id}"), |c| c.name);
                (id, name)
            })
            .collect();
        Self { entries }
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(_, n)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("vocabulary line {}: expected id<TAB>name", i + 1))
            })?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("vocabulary line {}: bad id {id:?}", i + 1)))?;
            if entries.iter().any(|(e, _)| *e == id) {
                return Err(Error::Input(format!("vocabulary id {id} appears twice")));
            }
            entries.push((id, name.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(id, n)| format!("{id}\t{n}\n"))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}
