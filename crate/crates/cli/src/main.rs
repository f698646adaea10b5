use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ovseg_core::experiment::{run_experiment, Axis};
use ovseg_core::export::{export_pseudomasks, legend, Graymap};
use ovseg_core::gradcheck::GradCheckConfig;
use ovseg_core::model::{infer, Model};
use ovseg_core::scene::SceneSpec;
use ovseg_core::train::{
    evaluate, model_grad_check, param_group, Prepared, TrainConfig, Trainer, PARAM_GROUPS,
};
use ovseg_core::vlm::Vocabulary;
use ovseg_core::ParamStore;

#[derive(Parser)]
#[command(
    name = "ovseg",
    about = "Open-vocabulary segmentation on synthetic scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the file, e.g. `--set kernel_size=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on seeded synthetic scenes and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint stem; writes STEM.fgt, STEM.manifest, STEM.cfg and STEM.trace.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Print every n-th loss record.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Score a checkpoint on its training scenes or on fresh ones.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on the training scenes instead of held-out ones.
        #[arg(long)]
        train_set: bool,
        /// Number of held-out scenes (defaults to the training count).
        #[arg(long)]
        scenes: Option<usize>,
        /// Prune to k categories per image.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Segment one synthetic scene and write the label map with its legend.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one axis and print a tab-separated results table.
    Ablate {
        /// none, gamma, p2t_layers, lambda_align, kernel_size, kernel_norm, top_n or decoder.
        axis: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write global and local similarity maps for every (image, category).
    ExportPseudomasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[command(flatten)]
        vocab: VocabArgs,
        /// Category id that must appear in the scene.
        #[arg(long)]
        require: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct VocabArgs {
    /// Vocabulary file (`id<TAB>name` per line).
    #[arg(long, conflicts_with = "ids")]
    vocab: Option<PathBuf>,
    /// Comma-separated category ids, background first.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<u32>,
}

impl VocabArgs {
    fn resolve(&self, cfg: &TrainConfig) -> Result<Vocabulary> {
        Ok(match (&self.vocab, self.ids.is_empty()) {
            (Some(p), _) => Vocabulary::read(p)?,
            (None, false) => Vocabulary::from_ids(&self.ids),
            (None, true) => Vocabulary::from_ids(&(0..cfg.categories as u32).collect::<Vec<_>>()),
        })
    }
}

fn save_checkpoint(stem: &Path, cfg: &TrainConfig, model: &Model) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.params.save(stem)?;
    fs::write(stem.with_extension("cfg"), cfg.to_text())?;
    Ok(())
}

fn load_checkpoint(stem: &Path) -> Result<(TrainConfig, Model)> {
    let cfg_path = stem.with_extension("cfg");
    let text =
        fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = TrainConfig::from_text(&text)?;
    let params = ParamStore::load(stem).with_context(|| format!("loading {}", stem.display()))?;
    let model = Model::from_params(cfg.model.clone(), params)?;
    Ok((cfg, model))
}

fn scene_for(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    seed: u64,
    require: Option<u32>,
) -> Result<ovseg_core::scene::SyntheticScene> {
    let ids = vocab.ids();
    let mut spec = SceneSpec::new(ids.clone(), cfg.image_size, cfg.image_size);
    spec.cell = cfg.model.vlm.patch;
    if let Some(id) = require {
        spec.require = Some(
            ids.iter()
                .position(|&i| i == id)
                .with_context(|| format!("category {id} is not in the vocabulary"))?,
        );
    }
    Ok(spec.generate(seed)?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            out,
            log_every,
        } => {
            let cfg = config.load()?;
            let mut trainer = Trainer::new(cfg.clone())?;
            let scenes = cfg.training_scenes()?;
            let data = scenes
                .iter()
                .map(|s| Prepared::new(&trainer.model, s))
                .collect::<ovseg_core::Result<Vec<_>>>()?;
            let start = std::time::Instant::now();
            let every = log_every.max(1);
            let trace = trainer.fit(&data, |r| {
                if r.step % every == 0 || r.step == 1 {
                    eprintln!(
                        "step {:>5}  loss {:.5}  ce {:.5}  align {:.5}  aux {:.5}",
                        r.step, r.total, r.ce, r.align, r.auxi
                    );
                }
            })?;
            let secs = start.elapsed().as_secs_f64();
            save_checkpoint(&out, &cfg, &trainer.model)?;
            let mut f = fs::File::create(out.with_extension("trace.tsv"))?;
            writeln!(f, "step\ttotal\tce\talign\tauxi")?;
            for r in &trace {
                writeln!(
                    f,
                    "{}\t{:e}\t{:e}\t{:e}\t{:e}",
                    r.step, r.total, r.ce, r.align, r.auxi
                )?;
            }
            let rep = evaluate(&trainer.model, &scenes, None)?;
            println!("train_s\t{secs:.3}");
            println!("pixel_acc\t{:.6}", rep.pixel_accuracy);
            println!("miou\t{:.6}", rep.miou);
            println!("checksum\t{}", trainer.model.params.checksum());
        }
        Command::Eval {
            checkpoint,
            train_set,
            scenes,
            top_k,
        } => {
            let (cfg, model) = load_checkpoint(&checkpoint)?;
            let set = if train_set {
                cfg.training_scenes()?
            } else {
                cfg.heldout_scenes(scenes.unwrap_or(cfg.scenes))?
            };
            let top_k = top_k
                .or(cfg.fast_mode.then_some(cfg.top_k))
                .map(|k| k.min(cfg.categories));
            let rep = evaluate(&model, &set, top_k)?;
            println!("images\t{}", rep.images);
            println!("pixel_acc\t{:.6}", rep.pixel_accuracy);
            println!("miou\t{:.6}", rep.miou);
            println!("infer_s\t{:.4}", rep.seconds);
        }
        Command::Infer {
            checkpoint,
            scene_seed,
            vocab,
            top_k,
            out,
        } => {
            let (cfg, model) = load_checkpoint(&checkpoint)?;
            let vocab = vocab.resolve(&cfg)?;
            let scene = scene_for(&cfg, &vocab, scene_seed, None)?;
            let pred = infer(&model, &scene.image, &vocab.ids(), top_k)?;
            fs::create_dir_all(&out)?;
            let [_, h, w] = pred.shape;
            Graymap::from_labels(w, h, &pred.labels)?.write(&out.join("labels.pgm"))?;
            Graymap::from_labels(w, h, &scene.mask.labels)?.write(&out.join("truth.pgm"))?;
            fs::write(out.join("legend.txt"), legend(&vocab))?;
            let hits = pred
                .labels
                .iter()
                .zip(&scene.mask.labels)
                .filter(|(a, b)| a == b)
                .count();
            println!("pixel_acc\t{:.6}", hits as f64 / pred.labels.len() as f64);
            let names = vocab.names();
            let kept: Vec<&str> = pred.retained[0].iter().map(|&i| names[i]).collect();
            println!("retained\t{}", kept.join(", "));
        }
        Command::Ablate { axis, config, out } => {
            let axis: Axis = axis.parse()?;
            let cfg = config.load()?;
            let table = run_experiment(&cfg, axis, |r| {
                eprintln!(
                    "{axis} = {}: miou {:.4}, train {:.1}s, infer {:.3}s",
                    r.value, r.eval.miou, r.train_seconds, r.eval.seconds
                );
            })?;
            let tsv = table.to_tsv();
            print!("{tsv}");
            if let Some(path) = out {
                fs::write(path, &tsv)?;
            }
        }
        Command::ExportPseudomasks {
            checkpoint,
            scene_seed,
            vocab,
            require,
            out,
        } => {
            let (cfg, model) = load_checkpoint(&checkpoint)?;
            let vocab = vocab.resolve(&cfg)?;
            let scene = scene_for(&cfg, &vocab, scene_seed, require)?;
            let written = export_pseudomasks(&model, &scene.image, &vocab, &out)?;
            let [_, h, w] = scene.mask.shape;
            Graymap::from_labels(w, h, &scene.mask.labels)?.write(&out.join("truth_img0.pgm"))?;
            println!("wrote {} files to {}", written.len() + 1, out.display());
        }
        Command::Gradcheck {
            config,
            seeds,
            eps,
            tolerance,
        } => {
            let cfg = config.load()?;
            let check = GradCheckConfig {
                eps,
                tolerance,
                ..GradCheckConfig::default()
            };
            let mut worst = vec![0.0f64; PARAM_GROUPS.len()];
            let mut ok = true;
            for seed in 0..seeds {
                let rep = model_grad_check(&cfg.model, seed, &check)?;
                ok &= rep.pass;
                for p in &rep.params {
                    if let Some(g) = param_group(&p.name) {
                        let i = PARAM_GROUPS
                            .iter()
                            .position(|(_, n)| *n == g)
                            .expect("known group");
                        worst[i] = worst[i].max(p.max_rel_err);
                    }
                }
                println!(
                    "seed {seed}\tmax_rel_err {:.3e}\t{}",
                    rep.max_rel_err,
                    if rep.pass { "ok" } else { "FAIL" }
                );
            }
            for ((_, name), w) in PARAM_GROUPS.iter().zip(&worst) {
                println!("{name}\t{w:.3e}");
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
