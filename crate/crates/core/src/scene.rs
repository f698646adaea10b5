//! Seeded synthetic scenes: a grey background with 1–4 non-overlapping
//! boxes and discs, each painted in its category's colour plus mild noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::concepts::{self, Shape, BACKGROUND};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vlm::{ToyVlmConfig, Vocabulary};

pub const NOISE_SIGMA: f64 = 0.02;
const MAX_SHAPES: usize = 4;
const PLACEMENT_TRIES: usize = 100;
const MAX_SUB_SEEDS: u64 = 1000;

/// Per-pixel labels (indices into a vocabulary), row-major `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
}

impl GroundTruthMask {
    pub fn new(labels: Vec<usize>, shape: [usize; 3], t: usize) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(
                "mask",
                format!("{} labels for shape {shape:?}", labels.len()),
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l >= t) {
            return Err(Error::Input(format!(
                "label {} at {i} is not below T = {t}",
                labels[i]
            )));
        }
        Ok(Self { labels, shape })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// `[1, 3, H, W]`
    pub image: Tensor,
    /// The render before noise.
    pub clean: Tensor,
    pub mask: GroundTruthMask,
    pub vocabulary: Vocabulary,
    /// Sub-seed that produced a placeable layout.
    pub sub_seed: u64,
}

/// Background plus the first `t − 1` categories, which cover distinct hues
/// for `t ≤ 9`.
pub fn default_vocabulary(t: usize) -> Result<Vec<u32>> {
    if t < 2 || t > concepts::NUM_CONCEPTS as usize {
        return Err(Error::Config(format!(
            "scene vocabulary size must lie in 2..={}, got {t}",
            concepts::NUM_CONCEPTS
        )));
    }
    Ok((0..t as u32).collect())
}

/// What to draw. Shape boxes are snapped to a `cell`-pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Category ids; index 0 must be the background.
    pub vocabulary: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub cell: usize,
    /// Vocabulary index that every scene must contain.
    pub require: Option<usize>,
}

impl SceneSpec {
    pub fn new(vocabulary: Vec<u32>, height: usize, width: usize) -> Self {
        Self {
            vocabulary,
            height,
            width,
            cell: ToyVlmConfig::default().patch,
            require: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let t = self.vocabulary.len();
        if t < 2 {
            return Err(Error::Config(format!(
                "scenes need T ≥ 2 categories, got {t}"
            )));
        }
        if self.vocabulary[0] != BACKGROUND {
            return Err(Error::Config(
                "vocabulary index 0 must be the background".into(),
            ));
        }
        if let Some(&id) = self
            .vocabulary
            .iter()
            .find(|&&id| concepts::concept(id).is_none())
        {
            return Err(Error::Config(format!("unknown category id {id}")));
        }
        if self.cell == 0 || self.height % self.cell != 0 || self.width % self.cell != 0 {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible by the {}-pixel patch",
                self.height, self.width, self.cell
            )));
        }
        if let Some(r) = self.require {
            if r == 0 || r >= t {
                return Err(Error::Config(format!(
                    "required index {r} must lie in 1..{t}"
                )));
            }
        }
        Ok(())
    }

    /// Deterministic in `seed`. A layout that cannot be placed within 100
    /// rejection samples is redrawn from the next sub-seed.
    pub fn generate(&self, seed: u64) -> Result<SyntheticScene> {
        self.validate()?;
        for sub in 0..MAX_SUB_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(sub);
            if let Some(boxes) = self.layout(&mut rng) {
                return Ok(self.render(&boxes, &mut rng, sub));
            }
        }
        Err(Error::Config(format!(
            "no placeable layout for {}×{} after {MAX_SUB_SEEDS} sub-seeds",
            self.height, self.width
        )))
    }

    fn layout(&self, rng: &mut ChaCha8Rng) -> Option<Vec<Placed>> {
        let t = self.vocabulary.len();
        let (gh, gw) = (self.height / self.cell, self.width / self.cell);
        let side = |n: usize| ((n / 5).max(1), (n * 3 / 8).max(1));
        let (min_h, max_h) = side(gh);
        let (min_w, max_w) = side(gw);

        let mut pool: Vec<usize> = (1..t).collect();
        let mut cats = Vec::new();
        if let Some(r) = self.require {
            pool.retain(|&c| c != r);
            cats.push(r);
        }
        let n = rng.random_range(1..=MAX_SHAPES).min(t - 1).max(cats.len());
        while cats.len() < n {
            cats.push(pool.swap_remove(rng.random_range(0..pool.len())));
        }

        let mut placed: Vec<Placed> = Vec::new();
        for cat in cats {
            let mut ok = None;
            for _ in 0..PLACEMENT_TRIES {
                let h = rng.random_range(min_h..=max_h);
                let w = rng.random_range(min_w..=max_w);
                let b = Placed {
                    cat,
                    y: rng.random_range(0..=gh - h),
                    x: rng.random_range(0..=gw - w),
                    h,
                    w,
                };
                if placed.iter().all(|p| !p.touches(&b)) {
                    ok = Some(b);
                    break;
                }
            }
            placed.push(ok?);
        }
        Some(placed)
    }

    fn render(&self, boxes: &[Placed], rng: &mut ChaCha8Rng, sub_seed: u64) -> SyntheticScene {
        let (h, w, c) = (self.height, self.width, self.cell);
        let mut labels = vec![0usize; h * w];
        for b in boxes {
            let shape = concepts::concept(self.vocabulary[b.cat]).map_or(Shape::Rect, |k| k.shape);
            let (y0, x0, bh, bw) = (b.y * c, b.x * c, b.h * c, b.w * c);
            let (cy, cx) = (y0 as f64 + bh as f64 / 2.0, x0 as f64 + bw as f64 / 2.0);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let inside = match shape {
                        Shape::Ellipse => {
                            let dy = (y as f64 + 0.5 - cy) / (bh as f64 / 2.0);
                            let dx = (x as f64 + 0.5 - cx) / (bw as f64 / 2.0);
                            dy * dy + dx * dx <= 1.0
                        }
                        _ => true,
                    };
                    if inside {
                        labels[y * w + x] = b.cat;
                    }
                }
            }
        }
        let colours: Vec<[f32; 3]> = self
            .vocabulary
            .iter()
            .map(|&id| concepts::concept(id).expect("validated").color)
            .collect();
        let clean = Tensor::from_fn(&[1, 3, h, w], |i| colours[labels[i % (h * w)]][i / (h * w)]);
        let normal = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
        let image = Tensor::from_fn(&[1, 3, h, w], |i| {
            clean.data()[i] + normal.sample(rng) as f32
        });
        SyntheticScene {
            image,
            clean,
            mask: GroundTruthMask {
                labels,
                shape: [1, h, w],
            },
            vocabulary: Vocabulary::from_ids(&self.vocabulary),
            sub_seed,
        }
    }
}

/// A shape box in grid cells.
struct Placed {
    cat: usize,
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Placed {
    /// Overlapping or edge-adjacent.
    fn touches(&self, o: &Placed) -> bool {
        self.y <= o.y + o.h
            && o.y <= self.y + self.h
            && self.x <= o.x + o.w
            && o.x <= self.x + self.w
    }
}

/// A scene over [`default_vocabulary`]`(t)` at the default patch size.
pub fn gen_synthetic_scene(
    seed: u64,
    t: usize,
    height: usize,
    width: usize,
) -> Result<SyntheticScene> {
    SceneSpec::new(default_vocabulary(t)?, height, width).generate(seed)
}

/// Stacks single-image scenes into one `[B, 3, H, W]` batch and its mask.
pub fn stack(scenes: &[&SyntheticScene]) -> Result<(Tensor, GroundTruthMask)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Input("cannot stack zero scenes".into()))?;
    let [_, h, w] = first.mask.shape;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in scenes {
        if s.mask.shape != [1, h, w] || s.vocabulary != first.vocabulary {
            return Err(Error::Input(
                "scenes in a batch must share size and vocabulary".into(),
            ));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.labels);
    }
    let b = scenes.len();
    Ok((
        Tensor::new(vec![b, 3, h, w], data)?,
        GroundTruthMask {
            labels,
            shape: [b, h, w],
        },
    ))
}
