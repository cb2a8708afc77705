//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass substrings as arguments to run a subset,
//! e.g. `cargo test -p icrl-cli --test acceptance -- c4 c7`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use icrl_core::airn::AirnInit;
use icrl_core::backbone::BackboneConfig;
use icrl_core::data::{gen_blobs, gen_outlier_blobs, load_container, save_container, SyntheticSpec};
use icrl_core::episodes::{
    eval_episode, evaluate, infer_episode, meta_optimizer, meta_train, model_checkpoint, model_from_checkpoint,
    train_step, Checkpoint, ClassPool, EvalReport, EvalSpec, TrainConfig,
};
use icrl_core::head::{self, LossWeights};
use icrl_core::model::{forward_episode, EpisodeInputs, IcrlModel, ModelConfig};
use icrl_core::rng;
use icrl_core::tensor::{grad_check, Bound, GradCheckConfig, Graph, Scalar, ScalarGraph, Tensor, Var};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny_backbone(blocks: usize, channels: usize, size: usize) -> BackboneConfig {
    BackboneConfig {
        blocks,
        channels,
        input_size: size,
        input_channels: 3,
        pool: 2,
    }
}

fn random_image(r: &mut impl Rng, size: usize) -> Tensor<f32> {
    Tensor::from_fn([3, size, size], |_| r.gen_range(0.0f32..1.0))
}

// ---- 1: gradient correctness ---------------------------------------------

struct FullEpisodeLoss {
    cfg: ModelConfig,
    support: Vec<Tensor<f32>>,
    queries: Vec<Tensor<f32>>,
    labels: Vec<usize>,
}

impl ScalarGraph for FullEpisodeLoss {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound) -> Var {
        let inputs = EpisodeInputs {
            ways: 2,
            shots: 2,
            support: self.support.iter().collect(),
            queries: self.queries.iter().collect(),
            query_labels: self.labels.clone(),
        };
        forward_episode(g, params, &self.cfg, &inputs, LossWeights::default())
            .expect("episode builds")
            .l_joint
    }
}

fn c1_grad_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..3u64 {
        let cfg = ModelConfig::new(tiny_backbone(2, 8, 8), 2);
        let model = IcrlModel::new(cfg.clone(), seed, AirnInit::Random).map_err(|e| e.to_string())?;
        let mut r = rng::stream(seed, "acceptance.grad-check");
        let f = FullEpisodeLoss {
            cfg,
            support: (0..4).map(|_| random_image(&mut r, 8)).collect(),
            queries: (0..4).map(|_| random_image(&mut r, 8)).collect(),
            labels: vec![0, 0, 1, 1],
        };
        let report = grad_check(
            &f,
            &model.params,
            &GradCheckConfig {
                h: 1e-3,
                seed,
                ..Default::default()
            },
        );
        if report.max_rel_err >= worst {
            worst = report.max_rel_err;
        }
        checked += report.checked;
        skipped += report.skipped_at_kinks;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && checked > 0 && secs < 60.0,
        format!(
            "max relative error {:.2e} over {} coordinates ({} at kinks), 3 seeds, {:.1} s",
            worst, checked, skipped, secs
        ),
    )
}

// ---- 2: zero-initialised revaluing network equals the mean prototype ------

fn cosine_baseline(support: &[Vec<f64>], queries: &[Vec<f64>], ways: usize, shots: usize, tau: f64) -> Vec<Vec<f64>> {
    let d = support[0].len();
    let protos: Vec<Vec<f64>> = (0..ways)
        .map(|n| {
            let mut p = vec![0.0; d];
            for s in &support[n * shots..(n + 1) * shots] {
                for (a, b) in p.iter_mut().zip(s) {
                    *a += b / shots as f64;
                }
            }
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            p.iter().map(|x| x / norm).collect()
        })
        .collect();
    queries
        .iter()
        .map(|q| {
            protos
                .iter()
                .map(|p| tau * q.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn c2_baseline_equivalence() -> Outcome {
    let data = gen_blobs(&SyntheticSpec {
        classes: 6,
        instances_per_class: 12,
        size: 8,
        seed: 21,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let pool = ClassPool::all(&data, &[0, 1, 2, 3, 4, 5]).map_err(|e| e.to_string())?;
    let weights = LossWeights::new(0.0, 0.0);
    let mut logit_err = 0.0f64;
    let mut step_err = 0.0f64;
    let mut argmax_ok = true;
    for shots in [1usize, 3] {
        let mut cfg = ModelConfig::new(tiny_backbone(2, 8, 8), shots);
        let airn = IcrlModel::new(cfg.clone(), 4, AirnInit::Zero).map_err(|e| e.to_string())?;
        cfg.airn = false;
        let plain = IcrlModel::new(cfg, 4, AirnInit::Zero).map_err(|e| e.to_string())?;
        let spec = EvalSpec {
            episodes: 1,
            ways: 4,
            shots,
            queries: 5,
            seed: 8,
        };
        for i in 0..5 {
            let ep = eval_episode(&pool, &spec, i).map_err(|e| e.to_string())?;
            let inputs = ep.inputs(&data);

            let mut g = Graph::<f32>::new();
            let bound = airn.params.bind(&mut g);
            let out = forward_episode(&mut g, &bound, &airn.config, &inputs, weights).map_err(|e| e.to_string())?;
            let expected = cosine_baseline(
                &rows(g.value(out.support_reps)),
                &rows(g.value(out.query_reps)),
                4,
                shots,
                airn.config.tau,
            );
            let got = rows(g.value(out.logits));
            for (e, o) in expected.iter().zip(&got) {
                argmax_ok &= argmax(e) == argmax(o);
                for (a, b) in e.iter().zip(o) {
                    logit_err = logit_err.max((a - b).abs());
                }
            }

            let mut opt_a = meta_optimizer(&airn, &TrainConfig::default());
            let mut opt_p = meta_optimizer(&plain, &TrainConfig::default());
            let mut stepped_a = airn.clone();
            let mut stepped_p = plain.clone();
            train_step(&mut stepped_a, &mut opt_a, &inputs, weights).map_err(|e| e.to_string())?;
            train_step(&mut stepped_p, &mut opt_p, &inputs, weights).map_err(|e| e.to_string())?;
            for p in stepped_p.params.iter() {
                let other = stepped_a.params.value(&p.name).ok_or(format!("missing {}", p.name))?;
                step_err = step_err.max(p.value.max_abs_diff(other));
            }
        }
    }
    check(
        logit_err <= 1e-5 && step_err <= 1e-5 && argmax_ok,
        format!(
            "K=1 and K=3: max logit gap to hand-coded mean-prototype baseline {:.1e}, max parameter gap after one SGD step {:.1e}, argmax {}",
            logit_err,
            step_err,
            if argmax_ok { "identical" } else { "differs" }
        ),
    )
}

// ---- 3: loss identities ---------------------------------------------------

fn inter_of(reps: Vec<f64>, n: usize) -> f64 {
    let d = reps.len() / n;
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::new([n, d], reps));
    let l = head::loss_inter(&mut g, c).expect("non-degenerate reps");
    g.value(l).item()
}

fn c3_loss_identities() -> Outcome {
    let data = gen_blobs(&SyntheticSpec {
        classes: 8,
        instances_per_class: 20,
        size: 8,
        seed: 3,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        ways: 4,
        shots: 3,
        queries: 4,
        epochs: 2,
        episodes_per_epoch: 40,
        augment: false,
        seed: 5,
        ..Default::default()
    };
    let mut model =
        IcrlModel::new(ModelConfig::new(tiny_backbone(2, 8, 8), 3), 5, AirnInit::Random).map_err(|e| e.to_string())?;
    let rows = meta_train(&data, &[0, 1, 2, 3, 4, 5, 6, 7], &mut model, &cfg).map_err(|e| e.to_string())?;
    let worst_row = rows
        .iter()
        .map(|r| (r.losses.l_joint - (r.losses.l_cls + 0.1 * r.losses.l_intra + 0.1 * r.losses.l_inter)).abs())
        .fold(0.0f64, f64::max);

    let n = 5;
    let orthogonal: Vec<f64> = (0..n * 7)
        .map(|i| if i % 7 == i / 7 { 2.0 + i as f64 } else { 0.0 })
        .collect();
    let identical: Vec<f64> = (0..n).flat_map(|_| [0.3, -1.2, 0.7, 2.0, 0.1, 0.0, 5.0]).collect();
    let zero = inter_of(orthogonal, n);
    let full = inter_of(identical, n);
    let target = (n * (n - 1)) as f64;
    check(
        worst_row <= 1e-6 && zero.abs() <= 1e-6 && (full - target).abs() <= 1e-5,
        format!(
            "joint identity residual {:.1e} over {} logged episodes; inter loss {:.1e} for orthogonal reps, {} for identical reps (N(N-1) = {})",
            worst_row,
            rows.len(),
            zero,
            full,
            target
        ),
    )
}

// ---- 4: separable blobs ---------------------------------------------------

fn blob_model(shots: usize, airn: bool) -> Result<IcrlModel, String> {
    let mut cfg = ModelConfig::new(tiny_backbone(3, 16, 16), shots);
    cfg.airn = airn;
    IcrlModel::new(cfg, 0, AirnInit::Random).map_err(|e| e.to_string())
}

fn blob_train_config(episodes: usize) -> TrainConfig {
    TrainConfig {
        ways: 5,
        shots: 5,
        queries: 15,
        epochs: 1,
        episodes_per_epoch: episodes,
        augment: false,
        seed: 0,
        ..Default::default()
    }
}

fn c4_blob_training() -> Outcome {
    let start = Instant::now();
    let data = gen_blobs(&SyntheticSpec {
        classes: 20,
        instances_per_class: 30,
        separation: 10.0,
        noise: 0.1,
        seed: 0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let classes: Vec<usize> = (0..20).collect();
    let mut model = blob_model(5, true)?;
    let rows = meta_train(&data, &classes, &mut model, &blob_train_config(300)).map_err(|e| e.to_string())?;
    let last: f64 = rows[rows.len() - 50..].iter().map(|r| r.query_acc).sum::<f64>() / 50.0;
    let secs = start.elapsed().as_secs_f64();
    check(
        last >= 0.95 && secs < 600.0,
        format!(
            "5-way 5-shot from scratch, 300 episodes: last-50 query accuracy {:.4}, {:.1} s",
            last, secs
        ),
    )
}

// ---- 5: outlier down-weighting -------------------------------------------

fn c5_outlier_downweighting() -> Outcome {
    let spec = SyntheticSpec {
        classes: 30,
        instances_per_class: 30,
        outlier_fraction: 0.2,
        seed: 0,
        ..Default::default()
    };
    let (data, flags) = gen_outlier_blobs(&spec).map_err(|e| e.to_string())?;
    let train: Vec<usize> = (0..20).collect();
    let test: Vec<usize> = (20..30).collect();
    let cfg = blob_train_config(1000);
    let mut on = blob_model(5, true)?;
    let mut off = blob_model(5, false)?;
    meta_train(&data, &train, &mut on, &cfg).map_err(|e| e.to_string())?;
    meta_train(&data, &train, &mut off, &cfg).map_err(|e| e.to_string())?;

    let eval = EvalSpec {
        episodes: 200,
        ways: 5,
        shots: 5,
        queries: 15,
        seed: 1,
    };
    let pool = ClassPool::all(&data, &test).map_err(|e| e.to_string())?;
    let (mut outlier_w, mut clean_w) = (Vec::new(), Vec::new());
    for i in 0..eval.episodes {
        let ep = eval_episode(&pool, &eval, i).map_err(|e| e.to_string())?;
        let inf = infer_episode(&on, &data, &ep).map_err(|e| e.to_string())?;
        let sig = inf.significance.ok_or("no significance weights")?;
        for (slot, weights) in sig.iter().enumerate() {
            for (k, &w) in weights.weights().iter().enumerate() {
                if flags.is_outlier(ep.classes[slot], ep.support[slot][k]) {
                    outlier_w.push(w as f64);
                } else {
                    clean_w.push(w as f64);
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len().max(2) - 1) as f64;
    let (mo, mc) = (mean(&outlier_w), mean(&clean_w));
    let pooled = ((var(&outlier_w, mo) + var(&clean_w, mc)) / 2.0).sqrt();
    let effect = if pooled > 0.0 { (mc - mo) / pooled } else { 0.0 };

    let acc_on = evaluate(&on, &data, &test, &eval).map_err(|e| e.to_string())?;
    let acc_off = evaluate(&off, &data, &test, &eval).map_err(|e| e.to_string())?;
    check(
        !outlier_w.is_empty() && mo < mc && acc_on.mean >= acc_off.mean,
        format!(
            "mean weight outlier {:.4} (n={}) vs clean {:.4} (n={}), effect size d={:.3}; accuracy on {:.4} vs off {:.4}",
            mo,
            outlier_w.len(),
            mc,
            clean_w.len(),
            effect,
            acc_on.mean,
            acc_off.mean
        ),
    )
}

// ---- 6: evaluation protocol ----------------------------------------------

fn c6_protocol() -> Outcome {
    let mut r = rng::stream(6, "acceptance.fixture");
    let fixture: Vec<f64> = (0..600).map(|_| (r.gen_range(0..=75) as f64) / 75.0).collect();
    let n = fixture.len() as f64;
    let mean = fixture.iter().sum::<f64>() / n;
    let sd = (fixture.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let ci = 1.96 * sd / 600f64.sqrt();
    let spec = EvalSpec {
        episodes: 600,
        ways: 5,
        shots: 5,
        queries: 15,
        seed: 0,
    };
    let report = EvalReport::from_accuracies(fixture, &spec).map_err(|e| e.to_string())?;
    let err = (report.mean - mean).abs().max((report.ci95 - ci).abs());

    // The default evaluation length is the 600-episode protocol.
    let default_len = TrainConfig::default().eval_episodes;
    check(
        err <= 1e-9 && report.episodes == 600 && default_len == 600,
        format!(
            "600-episode fixture: mean {:.6} ± {:.6}, gap to hand computation {:.1e}; default eval episodes {}",
            report.mean, report.ci95, err, default_len
        ),
    )
}

// ---- 7: determinism and I/O -----------------------------------------------

fn icrl(dir: &Path, args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_icrl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`icrl {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out)
}

const SMALL_CONFIG: &str = "model.blocks = 2\nmodel.channels = 8\nmodel.input_size = 8\naugment = off\nsplit_ratios = 0.6,0,0.4\nn = 3\nk = 2\nm = 4\n";

fn pipeline_run(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    fs::write(dir.join("run.cfg"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    icrl(
        dir,
        &[
            "synth",
            "--out",
            "d.fsds",
            "--classes",
            "10",
            "--per-class",
            "20",
            "--size",
            "8",
            "--seed",
            "4",
        ],
    )?;
    let common = ["--config", "run.cfg", "--dataset", "d.fsds", "--seed", "9"];
    icrl(
        dir,
        &[
            &["meta-train"][..],
            &common,
            &["--from-scratch", "--epochs", "2", "--episodes", "15", "--out", "m.ckpt"],
        ]
        .concat(),
    )?;
    icrl(
        dir,
        &[
            &["eval"][..],
            &common,
            &["--checkpoint", "m.ckpt", "--episodes", "40", "--out", "r.json"],
        ]
        .concat(),
    )?;
    let metrics = fs::read(dir.join("m.ckpt.metrics.csv")).map_err(|e| e.to_string())?;
    let report = fs::read(dir.join("r.json")).map_err(|e| e.to_string())?;
    Ok((metrics, report))
}

fn c7_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ma, ra) = pipeline_run(a.path())?;
    let (mb, rb) = pipeline_run(b.path())?;
    let runs_match = ma == mb && ra == rb && !ma.is_empty();

    let ds_path = a.path().join("d.fsds");
    let ds_bytes = fs::read(&ds_path).map_err(|e| e.to_string())?;
    let ds = load_container(&ds_path).map_err(|e| e.to_string())?;
    let resaved = a.path().join("again.fsds");
    save_container(&ds, &resaved).map_err(|e| e.to_string())?;
    let fsds_exact = fs::read(&resaved).map_err(|e| e.to_string())? == ds_bytes;

    let ck_bytes = fs::read(a.path().join("m.ckpt")).map_err(|e| e.to_string())?;
    let ck = Checkpoint::from_bytes(&ck_bytes).map_err(|e| e.to_string())?;
    let (model, cfg) = model_from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let ck_exact = ck.to_bytes() == ck_bytes && model_checkpoint(&model, &cfg).to_bytes() == ck_bytes;
    check(
        runs_match && fsds_exact && ck_exact,
        format!(
            "two seeded CLI runs: metrics CSV {} bytes and eval JSON {} bytes {}; FSDS round-trip {}; checkpoint round-trip {}",
            ma.len(),
            ra.len(),
            if runs_match { "identical" } else { "differ" },
            if fsds_exact { "bit-exact" } else { "differs" },
            if ck_exact { "bit-exact" } else { "differs" }
        ),
    )
}

// ---- 8: ablation plumbing -------------------------------------------------

fn c8_ablations() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("run.cfg"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    icrl(
        d,
        &[
            "synth",
            "--out",
            "d.fsds",
            "--classes",
            "10",
            "--per-class",
            "15",
            "--size",
            "8",
        ],
    )?;
    let mut variants: Vec<Vec<&str>> = ["full", "model-1", "model-2", "model-3", "model-4", "model-5"]
        .iter()
        .map(|p| vec!["--pooling", *p])
        .collect();
    variants.push(vec!["--airn", "off"]);
    for losses in ["cls", "cls,intra", "cls,inter", "intra,inter"] {
        variants.push(vec!["--losses", losses]);
    }
    let mut ran = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        let ckpt = format!("v{}.ckpt", i);
        let report = format!("v{}.json", i);
        let base = ["--config", "run.cfg", "--dataset", "d.fsds"];
        icrl(
            d,
            &[
                &["meta-train"][..],
                &base[..],
                v,
                &["--from-scratch", "--epochs", "1", "--episodes", "4", "--out", &ckpt],
            ]
            .concat(),
        )?;
        icrl(
            d,
            &[
                &["eval"][..],
                &base[..],
                &["--checkpoint", &ckpt, "--episodes", "5", "--out", &report],
            ]
            .concat(),
        )?;
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(&report)).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        if json["episodes"] != 5 {
            return Err(format!("{} produced a malformed report", v.join(" ")));
        }
        ran.push(v.join(" "));
    }
    check(
        true,
        format!(
            "meta-train + eval end-to-end for {} configurations: {}",
            ran.len(),
            ran.join("; ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("c1", "gradient correctness", c1_grad_check),
        ("c2", "baseline equivalence", c2_baseline_equivalence),
        ("c3", "loss identities", c3_loss_identities),
        ("c4", "separable-blob training", c4_blob_training),
        ("c5", "outlier down-weighting", c5_outlier_downweighting),
        ("c6", "evaluation protocol", c6_protocol),
        ("c7", "determinism and I/O", c7_determinism),
        ("c8", "ablation plumbing", c8_ablations),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filters.is_empty()
            && !filters
                .iter()
                .any(|f| id.contains(f.as_str()) || name.contains(f.as_str()))
        {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {} {}: {}", id, name, detail),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {}: {}", id, name, detail);
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
