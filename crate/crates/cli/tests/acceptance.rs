//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs under its own harness so the report is
//! always shown.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ovseg_core::alignment::{p2t_layer, p2tformer_forward, t2p_loss, vision_tokens};
use ovseg_core::experiment::HEADER;
use ovseg_core::export::Graymap;
use ovseg_core::gradcheck::GradCheckConfig;
use ovseg_core::graph::Graph;
use ovseg_core::model::{self, infer, GammaMode, Model, ModelConfig};
use ovseg_core::supplement::{class_aggregation, lcs, lcs_kernels, spatial_aggregation};
use ovseg_core::tensor::Tensor;
use ovseg_core::train::{model_grad_check, param_group, TrainConfig, PARAM_GROUPS};
use ovseg_core::ParamStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET_S: f64 = 180.0;
const ORACLE_TOL: f64 = 1e-5;
const PERM_TOL: f64 = 1e-6;
const PERM_TRIALS: usize = 20;
const PRUNE_SCENES: usize = 50;
/// Allowance for scheduler noise when comparing wall times across k.
const TIME_SLACK: f64 = 0.10;
const KERNEL_SUM_TOL: f64 = 1e-6;
const MIN_PIXEL_ACC: f64 = 0.95;
const MIN_MIOU: f64 = 0.85;
const TRAIN_BUDGET_S: f64 = 300.0;
const ABLATION_ITERS: usize = 30;
const MIN_HELDOUT_IOU: f64 = 0.3;
const HELDOUT_ID: u32 = 6;
const HELDOUT_SEEDS: std::ops::Range<u64> = 1000..1008;

type Outcome = Result<(bool, String), String>;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ovseg"))
}

fn run_bin(args: &[&str]) -> Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "ovseg {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let check = GradCheckConfig {
        eps: 1e-3,
        tolerance: GRAD_TOL,
        ..Default::default()
    };
    for seed in 0..5 {
        let rep = model_grad_check(&ModelConfig::tiny(), seed, &check).map_err(err)?;
        for p in &rep.params {
            let g = param_group(&p.name).ok_or(format!("{} has no group", p.name))?;
            let e = worst.entry(g).or_default();
            *e = e.max(p.max_rel_err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let missing: Vec<_> = PARAM_GROUPS
        .iter()
        .filter(|(_, g)| !worst.contains_key(g))
        .map(|(_, g)| *g)
        .collect();
    let max = worst.values().copied().fold(0.0, f64::max);
    let groups: Vec<String> = worst.iter().map(|(g, e)| format!("{g} {e:.1e}")).collect();
    Ok((
        missing.is_empty() && max <= GRAD_TOL && secs < GRAD_BUDGET_S,
        format!(
            "max rel err {max:.2e} over 5 seeds in {secs:.1}s; {}; missing {missing:?}",
            groups.join(", ")
        ),
    ))
}

fn oracle_equivalence() -> Outcome {
    let all = oracles::all();
    let bad: Vec<_> = all.iter().filter(|(_, e)| !(*e <= ORACLE_TOL)).collect();
    let worst = all.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok((
        bad.is_empty(),
        format!("{} ops, worst {worst:.1e}, failing {bad:?}", all.len()),
    ))
}

fn identity_limits() -> Outcome {
    let cfg = ModelConfig {
        gamma: GammaMode::Fixed(0.0),
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg, 1).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let vision = m.encode_image(&image).map_err(err)?;
    let text = m.encode_text(&[0, 4, 9], 1).map_err(err)?;

    let mut g = Graph::<f32>::new();
    let (vi, vt) = (g.constant(&vision.final_), g.constant(&text.embeddings));
    let out = p2tformer_forward(&mut g, &m.params, &m.cfg, vi, vt).map_err(err)?;
    let gamma_ok = g.value(out) == text.embeddings.data();

    for (name, t) in m.params.iter_mut() {
        if name.starts_with("p2t.layer0.") || name.starts_with("agg.") {
            t.data_mut().fill(0.0);
        }
    }
    let mut g = Graph::<f32>::new();
    let (vi, vt) = (g.constant(&vision.final_), g.constant(&text.embeddings));
    let kv = vision_tokens(&mut g, vi).map_err(err)?;
    let y = p2t_layer(&mut g, &m.params, "p2t.layer0", vt, kv, m.cfg.p2t_heads).map_err(err)?;
    let p2t_ok = g.value(y) == text.embeddings.data();
    let f = g.constant(&Tensor::from_fn(&[1, 3, 4, 4, m.cfg.cost_dim], |_| {
        rng.random_range(-1.0..1.0)
    }));
    let guide = [
        g.constant(&vision.guidance[0]),
        g.constant(&vision.guidance[1]),
    ];
    let c = class_aggregation(&mut g, &m.params, &m.cfg, f, vt).map_err(err)?;
    let s = spatial_aggregation(&mut g, &m.params, &m.cfg, f, guide).map_err(err)?;
    let agg_ok = g.value(c) == g.value(f) && g.value(s) == g.value(f);

    let labels = [0, 2, 1, 1, 2, 0];
    let onehot = Tensor::from_fn(&[1, 3, 2, 3], |i| (labels[i % 6] == i / 6) as u8 as f32);
    let o = g.constant(&onehot);
    let l = t2p_loss(&mut g, o, &labels).map_err(err)?;
    let t2p = g.scalar(l);
    Ok((
        gamma_ok && p2t_ok && agg_ok && t2p == 0.0,
        format!("gamma=0 bit-equal {gamma_ok}, zero p2t layer {p2t_ok}, zero aggregation {agg_ok}, t2p(one-hot) = {t2p}"),
    ))
}

fn permuted<T: Copy>(values: &[T], b: usize, t: usize, perm: &[usize]) -> Vec<T> {
    let inner = values.len() / (b * t);
    let mut out = Vec::with_capacity(values.len());
    for bi in 0..b {
        for &p in perm {
            out.extend_from_slice(&values[(bi * t + p) * inner..][..inner]);
        }
    }
    out
}

fn permutation_equivariance() -> Outcome {
    let m = Model::new(ModelConfig::default(), 3).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, h, w) = (2, 16, 20);
    let mut worst = 0.0f64;
    let mut labels_ok = true;
    for _ in 0..PERM_TRIALS {
        let t = rng.random_range(2..=6);
        let mut pool: Vec<u32> = (0..32).collect();
        pool.shuffle(&mut rng);
        let ids = pool[..t].to_vec();
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let ids_p: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
        let image = Tensor::from_fn(&[b, 3, h, w], |_| rng.random_range(0.0..1.0));
        let vision = m.encode_image(&image).map_err(err)?;
        let run = |ids: &[u32]| -> Result<Vec<Vec<f64>>, String> {
            let text = m.encode_text(ids, b).map_err(err)?;
            let mut g = Graph::<f64>::new();
            let out = model::forward(&mut g, &m.params, &m.cfg, &vision, &text, h, w, false)
                .map_err(err)?;
            let tr = out.trunk;
            Ok([tr.s_g, tr.s_l, tr.fused, tr.agg, out.y]
                .iter()
                .map(|&v| g.value(v).to_vec())
                .collect())
        };
        let (base, swapped) = (run(&ids)?, run(&ids_p)?);
        for (a, p) in base.iter().zip(&swapped) {
            let pa = permuted(a, b, t, &perm);
            worst = pa
                .iter()
                .zip(p)
                .map(|(x, y)| (x - y).abs())
                .fold(worst, f64::max);
        }
        let pred = infer(&m, &image, &ids, None).map_err(err)?;
        let pred_p = infer(&m, &image, &ids_p, None).map_err(err)?;
        labels_ok &= pred
            .labels
            .iter()
            .zip(&pred_p.labels)
            .all(|(&a, &p)| perm[p] == a);
    }
    Ok((
        worst <= PERM_TOL && labels_ok,
        format!("{PERM_TRIALS} permutations, max deviation of S_g, S_l, F, F_agg, Y {worst:.1e} (64-bit), label maps consistent {labels_ok}"),
    ))
}

fn pruning(model: &Model, cfg: &TrainConfig) -> Outcome {
    let scenes = cfg.heldout_scenes(PRUNE_SCENES).map_err(err)?;
    let t = cfg.categories;
    let mut identical = 0;
    for s in &scenes {
        let ids = s.vocabulary.ids();
        let full = infer(model, &s.image, &ids, None).map_err(err)?;
        let all = infer(model, &s.image, &ids, Some(t)).map_err(err)?;
        identical += usize::from(full.labels == all.labels);
    }
    // Best of three passes per k to damp scheduler noise.
    let mut times = Vec::new();
    for k in (1..=t).rev() {
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            for s in &scenes {
                infer(model, &s.image, &s.vocabulary.ids(), Some(k)).map_err(err)?;
            }
            best = best.min(start.elapsed().as_secs_f64());
        }
        times.push((k, best));
    }
    let monotone = times
        .windows(2)
        .all(|w| w[1].1 <= w[0].1 * (1.0 + TIME_SLACK));
    let report: Vec<String> = times
        .iter()
        .map(|(k, s)| format!("k={k} {:.1}ms", 1e3 * s))
        .collect();
    Ok((
        identical == scenes.len() && monotone,
        format!(
            "k=T identical on {identical}/{} scenes; time non-increasing {monotone}: {}",
            scenes.len(),
            report.join(", ")
        ),
    ))
}

fn kernel_normalization() -> Outcome {
    let mut on_worst = 0.0f64;
    let mut off_closest = f64::INFINITY;
    let mut interior = 0.0f64;
    for k in [1, 3, 5, 9, 15] {
        for norm in [true, false] {
            let cfg = ModelConfig {
                lcs_kernel: k,
                kernel_norm: norm,
                ..ModelConfig::default()
            };
            let m = Model::new(cfg, 7).map_err(err)?;
            let text = m.encode_text(&[0, 3, 8, 17], 1).map_err(err)?;
            let mut g = Graph::<f32>::new();
            let vt = g.constant(&text.embeddings);
            let kern = lcs_kernels(&mut g, &m.params, &m.cfg, vt).map_err(err)?;
            let s = g.shape(kern.weights).to_vec();
            for kernel in g.value(kern.weights).chunks(s[2] * s[3] * s[4]) {
                let d = (kernel.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs();
                if norm {
                    on_worst = on_worst.max(d);
                } else {
                    off_closest = off_closest.min(d);
                }
            }
            if norm {
                let (c, h, w, a) = (m.cfg.channels(), k + 4, k + 5, 0.37f32);
                let vi = g.constant(&Tensor::full(&[1, c, h, w], a));
                let out = lcs(&mut g, vi, &kern).map_err(err)?;
                let (vals, bias) = (g.value(out).to_vec(), g.value(kern.bias).to_vec());
                let r = k / 2;
                for t in 0..4 {
                    for y in r..h - r {
                        for x in r..w - r {
                            interior = interior
                                .max((vals[(t * h + y) * w + x] - (a + bias[t])).abs() as f64);
                        }
                    }
                }
            }
        }
    }
    Ok((
        on_worst <= KERNEL_SUM_TOL && off_closest > KERNEL_SUM_TOL && interior <= KERNEL_SUM_TOL,
        format!("on: |sum-1| <= {on_worst:.1e}; off: |sum-1| >= {off_closest:.2e}; constant interior error {interior:.1e}"),
    ))
}

fn end_to_end(dir: &Path) -> Outcome {
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let stem = dir.join(name);
        let out = run_bin(&[
            "train",
            "--out",
            stem.to_str().unwrap(),
            "--log-every",
            "1000",
        ])?;
        let field = |k: &str| {
            out.lines()
                .find_map(|l| l.strip_prefix(&format!("{k}\t")))
                .map(str::to_string)
                .ok_or(format!("train output lacks {k}"))
        };
        let num = |k: &str| field(k)?.parse::<f64>().map_err(err);
        runs.push((
            num("pixel_acc")?,
            num("miou")?,
            num("train_s")?,
            field("checksum")?,
            fs::read(stem.with_extension("trace.tsv")).map_err(err)?,
        ));
    }
    let (acc, miou, secs, ref sum, ref trace) = runs[0];
    let repro = runs[1].3 == *sum && runs[1].4 == *trace;
    Ok((
        acc >= MIN_PIXEL_ACC && miou >= MIN_MIOU && secs < TRAIN_BUDGET_S && runs[1].2 < TRAIN_BUDGET_S && repro,
        format!("pixel acc {acc:.4}, mIoU {miou:.4}, {secs:.1}s and {:.1}s; identical checkpoints and traces {repro}", runs[1].2),
    ))
}

fn check_table(tsv: &str, axis: &str, grid: &[&str]) -> Result<(), String> {
    let mut lines = tsv.lines();
    if lines.next() != Some(HEADER) {
        return Err(format!("{axis}: bad header"));
    }
    let cols: Vec<&str> = HEADER.split('\t').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    if rows.len() != grid.len() {
        return Err(format!(
            "{axis}: {} rows for {} grid values",
            rows.len(),
            grid.len()
        ));
    }
    for (row, value) in rows.iter().zip(grid) {
        if row.len() != cols.len() || row[0] != axis || row[1] != *value {
            return Err(format!("{axis}: malformed row {row:?}"));
        }
        for (c, v) in cols.iter().zip(row).skip(4) {
            let x: f64 = v.parse().map_err(|_| format!("{axis}: {c} = {v:?}"))?;
            if !x.is_finite() || (c.starts_with("infer") && x <= 0.0) {
                return Err(format!("{axis}: {c} = {v}"));
            }
        }
    }
    Ok(())
}

fn ablation_smoke(dir: &Path) -> Outcome {
    let iters = format!("iters={ABLATION_ITERS}");
    let mut notes = Vec::new();
    for (axis, grid) in [
        (
            "kernel_size",
            &["1", "3", "5", "7", "9", "11", "13", "15"][..],
        ),
        ("top_n", &["1", "4", "8", "16", "32"][..]),
    ] {
        let path = dir.join(format!("{axis}.tsv"));
        let out = run_bin(&[
            "ablate",
            axis,
            "--set",
            &iters,
            "--out",
            path.to_str().unwrap(),
        ])?;
        let file = fs::read_to_string(&path).map_err(err)?;
        if file != out {
            return Ok((false, format!("{axis}: stdout and file differ")));
        }
        if let Err(e) = check_table(&out, axis, grid) {
            return Ok((false, e));
        }
        let ms: Vec<&str> = out
            .lines()
            .skip(1)
            .map(|l| l.rsplit('\t').next().unwrap_or(""))
            .collect();
        notes.push(format!(
            "{axis}: {} rows, ms/image {}",
            grid.len(),
            ms.join("/")
        ));
    }
    Ok((true, notes.join("; ")))
}

fn pseudomask_export(dir: &Path) -> Outcome {
    let stem = dir.join("a");
    let ids: Vec<u32> = (0..=HELDOUT_ID).collect();
    let ids_arg = ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    let idx = ids.len() - 1;
    let mut ious = Vec::new();
    for seed in HELDOUT_SEEDS {
        let out = dir.join(format!("masks{seed}"));
        run_bin(&[
            "export-pseudomasks",
            "--checkpoint",
            stem.to_str().unwrap(),
            "--ids",
            &ids_arg,
            "--require",
            &HELDOUT_ID.to_string(),
            "--scene-seed",
            &seed.to_string(),
            "--out",
            out.to_str().unwrap(),
        ])?;
        for kind in ["gcs", "lcs"] {
            for t in 0..ids.len() {
                if !out.join(format!("{kind}_img0_cat{t}.pgm")).is_file() {
                    return Ok((false, format!("missing {kind} map for category {t}")));
                }
            }
        }
        let truth = Graymap::read(&out.join("truth_img0.pgm")).map_err(err)?;
        let gcs = Graymap::read(&out.join(format!("gcs_img0_cat{idx}.pgm"))).map_err(err)?;
        // Nearest-neighbour upsampling of the feature-resolution map.
        let (sy, sx) = (truth.height / gcs.height, truth.width / gcs.width);
        let up: Vec<u8> = (0..truth.height * truth.width)
            .map(|i| gcs.pixels[(i / truth.width / sy) * gcs.width + (i % truth.width) / sx])
            .collect();
        let mut sorted = up.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let thr = sorted[up.len() / 10 - 1];
        let (mut inter, mut union) = (0usize, 0usize);
        for (&v, &l) in up.iter().zip(&truth.pixels) {
            let (p, g) = (v >= thr, l as usize == idx);
            inter += usize::from(p && g);
            union += usize::from(p || g);
        }
        ious.push(inter as f64 / union.max(1) as f64);
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let each: Vec<String> = ious.iter().map(|v| format!("{v:.2}")).collect();
    Ok((
        mean >= MIN_HELDOUT_IOU,
        format!(
            "held-out category {HELDOUT_ID}: top-decile GCS IoU mean {mean:.3} over {} scenes ({})",
            ious.len(),
            each.join(" ")
        ),
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let r = f();
        eprintln!(
            "  [criterion {id} took {:.1}s]",
            start.elapsed().as_secs_f64()
        );
        results.push((id, name, r));
    };
    record(1, "gradient suite", &mut gradient_suite);
    record(2, "oracle equivalence", &mut oracle_equivalence);
    record(3, "identity limits", &mut identity_limits);
    record(
        4,
        "category-permutation equivariance",
        &mut permutation_equivariance,
    );
    record(6, "kernel normalization", &mut kernel_normalization);
    record(7, "end-to-end learning", &mut || end_to_end(dir.path()));
    record(5, "pruning soundness", &mut || {
        let stem = dir.path().join("a");
        let cfg =
            TrainConfig::from_text(&fs::read_to_string(stem.with_extension("cfg")).map_err(err)?)
                .map_err(err)?;
        let params = ParamStore::load(&stem).map_err(err)?;
        let model = Model::from_params(cfg.model.clone(), params).map_err(err)?;
        pruning(&model, &cfg)
    });
    record(8, "ablation harness smoke", &mut || {
        ablation_smoke(dir.path())
    });
    record(9, "pseudo-mask export", &mut || {
        pseudomask_export(dir.path())
    });
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {id} [PRIMARY] {name}: {} ({detail})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
