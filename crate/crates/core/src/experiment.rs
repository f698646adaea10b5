//! Ablation sweeps: train one model per grid value on the same seeded data
//! and tabulate accuracy and timing.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::concepts::NUM_CONCEPTS;
use crate::error::{Error, Result};
use crate::model::{GammaMode, MergeMode, Model};
use crate::train::{evaluate_with, EvalReport, Prepared, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    None,
    Gamma,
    P2tLayers,
    LambdaAlign,
    KernelSize,
    KernelNorm,
    TopN,
    Decoder,
}

pub const AXES: &[&str] = &[
    "none",
    "gamma",
    "p2t_layers",
    "lambda_align",
    "kernel_size",
    "kernel_norm",
    "top_n",
    "decoder",
];

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "gamma" => Self::Gamma,
            "p2t_layers" => Self::P2tLayers,
            "lambda_align" => Self::LambdaAlign,
            "kernel_size" => Self::KernelSize,
            "kernel_norm" => Self::KernelNorm,
            "top_n" => Self::TopN,
            "decoder" => Self::Decoder,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation axis {s:?}; valid axes: {}",
                    AXES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Self::None,
            Self::Gamma,
            Self::P2tLayers,
            Self::LambdaAlign,
            Self::KernelSize,
            Self::KernelNorm,
            Self::TopN,
            Self::Decoder,
        ]
        .iter()
        .position(|a| a == self)
        .expect("listed");
        f.write_str(AXES[i])
    }
}

impl Axis {
    /// Grid values, as written in the results table.
    pub fn values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::None => &["default"],
            Self::Gamma => &["trainable", "0.01", "0.1", "0.5", "1", "5"],
            Self::P2tLayers => &["1", "2", "3", "4", "5", "6", "7"],
            Self::LambdaAlign => &["0.002", "0.005", "0.02", "0.2", "0.5", "1", "5"],
            Self::KernelSize => &["1", "3", "5", "7", "9", "11", "13", "15"],
            Self::KernelNorm => &["off", "on"],
            Self::TopN => &["1", "4", "8", "16", "32"],
            Self::Decoder => &["fast+cat", "fast+add", "nofast+cat", "nofast+add"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Axes that change only inference share one trained model.
    pub fn inference_only(self) -> bool {
        self == Self::TopN
    }

    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            Self::None => {}
            Self::Gamma => {
                cfg.model.gamma = match value {
                    "trainable" => GammaMode::Trainable(base.model.gamma.value()),
                    v => GammaMode::Fixed(
                        v.parse()
                            .map_err(|_| Error::Config(format!("bad gamma {v:?}")))?,
                    ),
                }
            }
            Self::P2tLayers => cfg.set("p2t_layers", value)?,
            Self::LambdaAlign => cfg.set("lambda_align", value)?,
            Self::KernelSize => cfg.set("kernel_size", value)?,
            Self::KernelNorm => cfg.set("kernel_norm", value)?,
            Self::TopN => {
                cfg.set("top_k", value)?;
                cfg.fast_mode = true;
            }
            Self::Decoder => {
                let (fast, merge) = value
                    .split_once('+')
                    .ok_or_else(|| Error::Config(format!("bad decoder mode {value:?}")))?;
                cfg.fast_mode = fast == "fast";
                cfg.model.merge = merge.parse::<MergeMode>()?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub value: String,
    pub categories: usize,
    pub top_k: Option<usize>,
    pub final_loss: f64,
    pub eval: EvalReport,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub axis: Axis,
    pub rows: Vec<ResultRow>,
}

pub const HEADER: &str =
    "axis\tvalue\tcategories\ttop_k\tfinal_loss\tpixel_acc\tmiou\ttrain_s\tinfer_s\tinfer_ms_per_image";

impl ResultsTable {
    /// Tab-separated, one header line, one line per grid value.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for r in &self.rows {
            let k = r.top_k.map_or_else(|| "all".to_string(), |k| k.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{k}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.4}\t{:.3}",
                self.axis,
                r.value,
                r.categories,
                r.final_loss,
                r.eval.pixel_accuracy,
                r.eval.miou,
                r.train_seconds,
                r.eval.seconds,
                1e3 * r.eval.seconds / r.eval.images.max(1) as f64,
            );
        }
        out
    }
}

/// Vocabulary used at evaluation: the training categories, padded with
/// further world categories when pruning needs more than `T` of them.
fn eval_ids(cfg: &TrainConfig, axis: Axis) -> Vec<u32> {
    let t = if axis == Axis::TopN {
        let max_k = axis
            .values()
            .iter()
            .filter_map(|v| v.parse().ok())
            .max()
            .unwrap_or(1);
        cfg.categories.max(max_k).min(NUM_CONCEPTS as usize)
    } else {
        cfg.categories
    };
    (0..t as u32).collect()
}

/// Trains one configuration per grid value (one in total for inference-only
/// axes) on `cfg`'s scenes and evaluates on `cfg.scenes` fresh scenes from
/// the same distribution.
pub fn run_experiment(
    cfg: &TrainConfig,
    axis: Axis,
    mut progress: impl FnMut(&ResultRow),
) -> Result<ResultsTable> {
    cfg.validate()?;
    let train_scenes = cfg.training_scenes()?;
    let eval_scenes = cfg.heldout_scenes(cfg.scenes)?;
    let ids = eval_ids(cfg, axis);

    let train = |c: &TrainConfig| -> Result<(Model, f64, f64)> {
        let start = Instant::now();
        let mut trainer = Trainer::new(c.clone())?;
        let data = train_scenes
            .iter()
            .map(|s| Prepared::new(&trainer.model, s))
            .collect::<Result<Vec<_>>>()?;
        let trace = trainer.fit(&data, |_| {})?;
        let loss = trace.last().map_or(f64::NAN, |r| r.total);
        Ok((trainer.model, loss, start.elapsed().as_secs_f64()))
    };

    let shared = if axis.inference_only() {
        Some(train(cfg)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for value in axis.values() {
        let c = axis.apply(cfg, &value)?;
        let owned;
        let (model, loss, secs) = match &shared {
            Some((m, l, s)) => (m, *l, *s),
            None => {
                owned = train(&c)?;
                (&owned.0, owned.1, owned.2)
            }
        };
        let top_k = c.fast_mode.then_some(c.top_k.min(ids.len()));
        let eval = evaluate_with(model, &eval_scenes, Some(&ids), top_k)?;
        let row = ResultRow {
            value,
            categories: ids.len(),
            top_k,
            final_loss: loss,
            eval,
            train_seconds: secs,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(ResultsTable { axis, rows })
}
