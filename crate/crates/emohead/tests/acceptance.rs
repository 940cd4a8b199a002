//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero on any failure.

use std::fs;
use std::path::Path;
use std::time::Instant;

use emohead::cli::{gradcheck_architecture, run};
use emohead::config::GradcheckConfig;
use emohead::error::Error as IoError;
use emohead::synthetic::{generate, SyntheticSpec};
use emohead::tensor_file::{decode, encode, read_tensor, write_tensor};
use emohead_core::cobyla::{cobyla_minimize, CobylaOptions, Constraint};
use emohead_core::conditioning::{gender_condition, text_condition, Affine, Cln, GenderOp, TextOp};
use emohead_core::fusion::{fit_fusion_weights, fused_f1, ConstraintMode, FitOptions, FusionWeights, PredictionSet};
use emohead_core::loss::{smooth_labels, weighted_cross_entropy, Reduction};
use emohead_core::metrics::{f1_scores, NUM_CLASSES};
use emohead_core::model::{Architecture, HeadModel};
use emohead_core::pooling::{attention_pool, average_pool, std_pool, AttentionMode};
use emohead_core::rng::{stream, Stream};
use emohead_core::train::{train, TrainConfig};
use emohead_core::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const GRADIENT_TOL: f64 = 1e-3;
const GRADIENT_BUDGET_S: f64 = 60.0;
const POOL_TOL: f64 = 1e-5;
const ATTENTIVE_TOL: f64 = 1e-6;
const IDENTITY_TOL: f64 = 1e-6;
const UNIFORM_CE_TOL: f64 = 1e-5;
const SMOOTHING_SUM_TOL: f64 = 1e-9;
const SEPARABLE_MIN_F1: f64 = 0.95;
const BLIND_MAX_F1: f64 = 0.2;
const SEPARABILITY_BUDGET_S: f64 = 300.0;
const COBYLA_MAX_EVALS: usize = 2000;
const FUSION_RESIDUAL_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, Stream::Data)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let cfg = GradcheckConfig::default();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for preset in 1..=5 {
        let arch = Architecture::preset(preset).map_err(|e| e.to_string())?.with_dims(cfg.num_layers, cfg.hidden, cfg.projection);
        for (component, _, err) in gradcheck_architecture(&arch, &cfg, 17).map_err(|e| e.to_string())? {
            check(err < GRADIENT_TOL, || format!("model {} {}: rel err {:e}", preset, component, err))?;
            worst = worst.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < GRADIENT_BUDGET_S, || format!("took {:.1}s", secs))?;
    Ok(format!("5 models at l=4 h=32 d=16, max rel err {:.2e}, {:.1}s", worst, secs))
}

fn naive_mean_std(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = x.len();
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for k in 0..d {
        let mut s = 0.0;
        for row in x {
            s += row[k];
        }
        mean[k] = s / m as f64;
        let mut v = 0.0;
        for row in x {
            v += (row[k] - mean[k]) * (row[k] - mean[k]);
        }
        std[k] = (v / m as f64).max(1e-12).sqrt();
    }
    (mean, std)
}

fn pooling_oracle() -> Outcome {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let mut worst_att: f64 = 0.0;
    for case in 0..100 {
        let m = r.random_range(1..=50);
        let d = r.random_range(1..=32);
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
        let flat32: Vec<f32> = rows.iter().flatten().map(|v| *v as f32).collect();
        let rows32: Vec<Vec<f64>> = flat32.chunks(d).map(|c| c.iter().map(|v| *v as f64).collect()).collect();
        let (mean, std) = naive_mean_std(&rows32);

        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::matrix(m, d, flat32).unwrap());
        let avg = average_pool(&mut g, x).map_err(|e| e.to_string())?;
        let sp = std_pool(&mut g, x).map_err(|e| e.to_string())?;
        let got_avg = g.value(avg).to_f64_vec();
        let got_std = g.value(sp).to_f64_vec();
        let expect: Vec<f64> = mean.iter().chain(&std).copied().collect();
        let err = max_abs_diff(&got_avg, &mean).max(max_abs_diff(&got_std, &expect));
        check(err <= POOL_TOL, || format!("case {} ([{}×{}]): err {:e}", case, m, d, err))?;
        worst = worst.max(err);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(m, d, rows32.iter().flatten().copied().collect()).unwrap());
        let p = g.leaf(Tensor::vector(vec![0.0; d]));
        let att = attention_pool(&mut g, x, p, AttentionMode::AttentiveStats).map_err(|e| e.to_string())?;
        let sp = std_pool(&mut g, x).map_err(|e| e.to_string())?;
        let e = max_abs_diff(g.value(att).data(), g.value(sp).data());
        check(e <= ATTENTIVE_TOL, || format!("case {}: attentive vs std {:e}", case, e))?;
        worst_att = worst_att.max(e);
    }

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
    let p = g.leaf(Tensor::vector(vec![0.0]));
    let lit = attention_pool(&mut g, x, p, AttentionMode::PaperLiteral).map_err(|e| e.to_string())?;
    let got = g.value(lit).data().to_vec();
    check(max_abs_diff(&got, &[0.5, 0.5]) <= 1e-12, || format!("scaled-frames example gave {:?}", got))?;
    Ok(format!("100 random inputs, max err {:.1e}; attentive p=0 vs std {:.1e}; [0],[2] -> {:?}", worst, worst_att, got))
}

fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

fn affine(g: &mut Graph<f64>, r: &mut ChaCha8Rng, n: usize, k: usize) -> (Affine, Vec<f64>, Vec<f64>) {
    let w = random_vec(r, n * k);
    let b = random_vec(r, k);
    let a = Affine { weight: g.leaf(Tensor::matrix(n, k, w.clone()).unwrap()), bias: g.leaf(Tensor::vector(b.clone())) };
    (a, w, b)
}

fn naive_affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let k = b.len();
    (0..k).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * k + j]).sum::<f64>()).collect()
}

fn conditioning_identities() -> Outcome {
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    let modes = ["none", "sum", "sum_half", "multiplication", "cln", "sum_third", "text_multiplication", "text_cln"];
    for mode in modes {
        for trial in 0..100 {
            let q = r.random_range(1..=24);
            let x = random_vec(&mut r, q);
            let mut g = Graph::<f64>::new();
            let xv = g.leaf(Tensor::vector(x.clone()));
            let (out, expect) = match mode {
                "none" => {
                    let e = g.leaf(Tensor::vector(random_vec(&mut r, q)));
                    (gender_condition(&mut g, xv, e, &GenderOp::None), x.clone())
                }
                "sum" => {
                    let e = g.leaf(Tensor::vector(vec![0.0; q]));
                    (gender_condition(&mut g, xv, e, &GenderOp::Sum), x.clone())
                }
                "sum_half" => (gender_condition(&mut g, xv, xv, &GenderOp::SumHalf), x.clone()),
                "multiplication" => {
                    let e = g.leaf(Tensor::vector(vec![1.0; q]));
                    (gender_condition(&mut g, xv, e, &GenderOp::Multiplication), x.clone())
                }
                "cln" => {
                    let c = r.random_range(-2.0..2.0);
                    let xc = g.leaf(Tensor::vector(vec![c; q]));
                    let e = random_vec(&mut r, q);
                    let ev = g.leaf(Tensor::vector(e.clone()));
                    let (scale, _, _) = affine(&mut g, &mut r, q, q);
                    let (shift, sw, sb) = affine(&mut g, &mut r, q, q);
                    (gender_condition(&mut g, xc, ev, &GenderOp::Cln(Cln { scale, shift })), naive_affine(&e, &sw, &sb))
                }
                "sum_third" => (text_condition(&mut g, xv, xv, xv, &TextOp::SumThird), x.clone()),
                "text_multiplication" => {
                    let ones = g.leaf(Tensor::vector(vec![1.0; q]));
                    (text_condition(&mut g, xv, ones, ones, &TextOp::Multiplication), x.clone())
                }
                _ => {
                    let c = r.random_range(-2.0..2.0);
                    let xc = g.leaf(Tensor::vector(vec![c; q]));
                    let eg = random_vec(&mut r, q);
                    let ft = random_vec(&mut r, q);
                    let egv = g.leaf(Tensor::vector(eg.clone()));
                    let ftv = g.leaf(Tensor::vector(ft.clone()));
                    let (reduce, rw, rb) = affine(&mut g, &mut r, 2 * q, q);
                    let (scale, _, _) = affine(&mut g, &mut r, q, q);
                    let (shift, sw, sb) = affine(&mut g, &mut r, q, q);
                    let joined: Vec<f64> = eg.iter().chain(&ft).copied().collect();
                    let cond = naive_affine(&joined, &rw, &rb);
                    let op = TextOp::Cln { reduce, cln: Cln { scale, shift } };
                    (text_condition(&mut g, xc, egv, ftv, &op), naive_affine(&cond, &sw, &sb))
                }
            };
            let out = out.map_err(|e| format!("{}: {}", mode, e))?;
            let err = max_abs_diff(g.value(out).data(), &expect);
            check(err <= IDENTITY_TOL, || format!("{} trial {}: err {:e}", mode, trial, err))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("{} modes × 100 vectors, max err {:.1e}", modes.len(), worst))
}

fn brute_force_f1(preds: &[usize], refs: &[usize], m: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..m)
        .map(|c| {
            let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
            for (p, r) in preds.iter().zip(refs) {
                match (*p == c, *r == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    _ => {}
                }
            }
            if tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + fnn) as f64
            }
        })
        .collect();
    let macro_f1 = per.iter().sum::<f64>() / m as f64;
    (per, macro_f1)
}

fn loss_metric_oracle() -> Outcome {
    let mut r = rng(303);
    let b = 16;
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::full(&[b, 8], r.random_range(-5.0..5.0)).unwrap());
    let targets: Vec<_> = (0..b).map(|_| smooth_labels(r.random_range(0..8), 8, 0.0).unwrap()).collect();
    let loss = weighted_cross_entropy(&mut g, logits, &targets, &[1.0; 8], Reduction::WeightedMean).map_err(|e| e.to_string())?;
    let ce = g.value(loss).item().map_err(|e| e.to_string())?;
    let ln8 = 8f64.ln();
    check((ce - ln8).abs() <= UNIFORM_CE_TOL, || format!("uniform CE {} vs ln 8 {}", ce, ln8))?;

    let mut worst_sum: f64 = 0.0;
    for gamma in [0.0, 0.1, 0.2] {
        for m in [2, 8] {
            for label in 0..m {
                let s: f64 = smooth_labels(label, m, gamma).map_err(|e| e.to_string())?.dist.iter().sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
    }
    check(worst_sum <= SMOOTHING_SUM_TOL, || format!("smoothed target sums off by {:e}", worst_sum))?;

    for case in 0..1000 {
        let m = r.random_range(2..=8);
        let n = r.random_range(1..=60);
        let refs: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        let got = f1_scores(&preds, &refs, m).map_err(|e| e.to_string())?;
        let (per, mac) = brute_force_f1(&preds, &refs, m);
        check(got.per_class == per && got.macro_f1 == mac, || format!("case {}: {:?} vs {:?}", case, got.per_class, per))?;
    }
    Ok(format!("uniform CE - ln 8 = {:.1e}; smoothing sums within {:.1e}; 1000 F1 cases exact", ce - ln8, worst_sum))
}

fn separability() -> Outcome {
    let mut lines = Vec::new();
    for (delta, label) in [(5.0, "δ=5σ"), (0.0, "δ=0")] {
        let spec = SyntheticSpec { delta, sigma: 1.0, seed: 11, ..SyntheticSpec::balanced(50, 20) };
        let data = generate(&spec).map_err(|e| e.to_string())?;
        let mut scores = Vec::new();
        for preset in 1..=5 {
            let start = Instant::now();
            let arch = Architecture::preset(preset).map_err(|e| e.to_string())?;
            let model = HeadModel::<f32>::new(arch, &mut stream(11, Stream::Init)).map_err(|e| e.to_string())?;
            let cfg = TrainConfig { lr: 1e-3, epochs: 20, seed: 11, ..TrainConfig::default() };
            let out = train(model, &data.train, &data.dev, &cfg).map_err(|e| e.to_string())?;
            let f1 = out.best_dev_f1.unwrap_or(0.0);
            let secs = start.elapsed().as_secs_f64();
            check(secs < SEPARABILITY_BUDGET_S, || format!("model {} took {:.0}s", preset, secs))?;
            if delta > 0.0 {
                check(f1 >= SEPARABLE_MIN_F1, || format!("{} model {}: dev F1-macro {:.3}", label, preset, f1))?;
            } else {
                check(f1 < BLIND_MAX_F1, || format!("{} model {}: dev F1-macro {:.3}", label, preset, f1))?;
            }
            scores.push(format!("{:.3}", f1));
        }
        lines.push(format!("{} F1 [{}]", label, scores.join(", ")));
    }
    Ok(lines.join("; "))
}

fn cobyla_suite() -> Outcome {
    let opts = CobylaOptions { rho_beg: 0.5, rho_end: 1e-6, max_evals: COBYLA_MAX_EVALS };
    let mut report = Vec::new();

    let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| x[0])];
    let r = cobyla_minimize(|x: &[f64]| (x[0] - 1.0).powi(2), &cons, &[5.0], &opts).map_err(|e| e.to_string())?;
    check((r.x[0] - 1.0).abs() <= 1e-3, || format!("(x-1)^2: x = {}", r.x[0]))?;
    report.push(format!("(x-1)^2 err {:.1e} in {} evals", (r.x[0] - 1.0).abs(), r.evals));

    let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| 1.0 - x[0] * x[0] - x[1] * x[1])];
    let r = cobyla_minimize(|x: &[f64]| x[0] + x[1], &cons, &[0.0, 0.0], &opts).map_err(|e| e.to_string())?;
    let h = -std::f64::consts::FRAC_1_SQRT_2;
    let err = (r.x[0] - h).abs().max((r.x[1] - h).abs());
    check(err <= 1e-2, || format!("disk: x = {:?}", r.x))?;
    report.push(format!("disk err {:.1e} in {} evals", err, r.evals));

    let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| x[0] - 2.0)];
    let r = cobyla_minimize(|x: &[f64]| x[0], &cons, &[0.0], &opts).map_err(|e| e.to_string())?;
    check((r.x[0] - 2.0).abs() <= 1e-3, || format!("x>=2: x = {}", r.x[0]))?;
    report.push(format!("corner err {:.1e} in {} evals", (r.x[0] - 2.0).abs(), r.evals));
    Ok(report.join("; "))
}

/// Model A is right on classes 0..4 and mistakes class c ≥ 4 for c − 4;
/// model B is right on classes 4..8 and mistakes class c < 4 for c + 4.
fn complementary_ensemble(per_class: usize) -> PredictionSet {
    let spread = |peak: usize, p: f64| -> Vec<f64> {
        let rest = (1.0 - p) / (NUM_CLASSES - 1) as f64;
        (0..NUM_CLASSES).map(|j| if j == peak { p } else { rest }).collect()
    };
    let (mut ids, mut labels, mut probs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..NUM_CLASSES {
        for k in 0..per_class {
            let (a, b) = if c < 4 { (spread(c, 0.9), spread(c + 4, 0.3)) } else { (spread(c - 4, 0.55), spread(c, 0.5)) };
            ids.push(format!("c{}_{}", c, k));
            labels.push(c);
            probs.push(vec![a, b]);
        }
    }
    PredictionSet::new(vec!["A".into(), "B".into()], ids, labels, probs, NUM_CLASSES).unwrap()
}

fn random_prediction_set(r: &mut ChaCha8Rng) -> PredictionSet {
    let n_m = r.random_range(2..=3);
    let n = r.random_range(16..=48);
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        labels.push(r.random_range(0..NUM_CLASSES));
        probs.push(
            (0..n_m)
                .map(|_| {
                    let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| r.random_range(0.01..1.0f64).powi(3)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect(),
        );
    }
    let names = (0..n_m).map(|i| format!("m{}", i)).collect();
    let ids = (0..n).map(|u| format!("u{}", u)).collect();
    PredictionSet::new(names, ids, labels, probs, NUM_CLASSES).unwrap()
}

fn fusion_gain() -> Outcome {
    let set = complementary_ensemble(5);
    let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let perfect_exists = grid.iter().any(|&lo| {
        grid.iter().any(|&hi| {
            let a: Vec<f64> = (0..NUM_CLASSES).map(|j| if j < 4 { lo } else { hi }).collect();
            let b = a.iter().map(|v| 1.0 - v).collect();
            let w = FusionWeights { w: vec![a, b], mode: ConstraintMode::PerClassSimplex };
            fused_f1(&set, &w).unwrap().macro_f1 == 1.0
        })
    });
    check(perfect_exists, || "brute force found no perfect weight matrix".into())?;
    let (w, rep) = fit_fusion_weights(&set, &FitOptions::default()).map_err(|e| e.to_string())?;
    let best_single = rep.per_model.iter().map(|r| r.macro_f1).fold(0.0, f64::max);
    check(rep.fitted.macro_f1 == 1.0, || format!("oracle ensemble fitted F1 {}", rep.fitted.macro_f1))?;
    check(w.residual() <= FUSION_RESIDUAL_TOL, || format!("oracle residual {:e}", w.residual()))?;

    let mut r = rng(404);
    let mut worst_residual: f64 = w.residual();
    let mut gains = 0;
    for case in 0..30 {
        let set = random_prediction_set(&mut r);
        for mode in [ConstraintMode::PerClassSimplex, ConstraintMode::GlobalSums] {
            let (w, rep) = fit_fusion_weights(&set, &FitOptions { mode, ..FitOptions::default() }).map_err(|e| e.to_string())?;
            check(rep.fitted.macro_f1 >= rep.initial.macro_f1, || format!("case {} {:?}: fitted below init", case, mode))?;
            check(w.residual() <= FUSION_RESIDUAL_TOL, || format!("case {} {:?}: residual {:e}", case, mode, w.residual()))?;
            worst_residual = worst_residual.max(w.residual());
            gains += usize::from(rep.fitted.macro_f1 > rep.initial.macro_f1);
        }
    }
    Ok(format!(
        "oracle ensemble {:.3} -> 1.0 (best single {:.3}); 60 random fits never below init ({} improved); max residual {:.1e}",
        rep.initial.macro_f1, best_single, gains, worst_residual
    ))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["emohead"];
    full.extend_from_slice(args);
    match run(full) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {}", args.join(" "), code)),
    }
}

fn pipeline(root: &Path) -> Result<(), String> {
    let config = root.join("run.toml");
    let text = r#"
seed = 5

[data]
train_counts = [6, 6, 6, 6, 6, 6, 6, 6]
dev_counts = [3, 3, 3, 3, 3, 3, 3, 3]
min_frames = 20
max_frames = 70

[model]
projection = 16

[train]
lr = 1e-3
epochs = 2
batch_size = 8

[gradcheck]
hidden = 8
text_dim = 12
batch = 2
max_coords = 4
"#;
    fs::write(&config, text).map_err(|e| e.to_string())?;
    let c = config.to_str().unwrap();
    let p = |k: &str, v: &Path| format!("paths.{}={}", k, v.display());
    let data = root.join("data");
    let common = [p("data_dir", &data), p("train_manifest", &data.join("train.jsonl")), p("dev_manifest", &data.join("dev.jsonl"))];
    let with = |extra: &[String]| -> Vec<String> {
        let mut v: Vec<String> = common.to_vec();
        v.extend_from_slice(extra);
        v.into_iter().flat_map(|s| ["--set".to_string(), s]).collect()
    };
    let args = |cmd: &str, extra: &[String]| -> Vec<String> {
        let mut v = vec![cmd.to_string(), "--config".into(), c.to_string()];
        v.extend(with(extra));
        v
    };
    let call = |v: Vec<String>| {
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        cli(&refs)
    };
    call(args("gen-data", &[]))?;
    for (name, cond) in [("a", "none"), ("b", "multiplication")] {
        let out = root.join(name);
        let extra = [p("output_dir", &out), format!("model.gender_conditioning={}", cond)];
        call(args("train", &extra))?;
        call(args("eval", &extra))?;
    }
    let fuse_out = root.join("fused");
    let mut fuse = args("fuse", &[p("output_dir", &fuse_out)]);
    fuse.push(root.join("a/predictions.csv").display().to_string());
    fuse.push(root.join("b/predictions.csv").display().to_string());
    call(fuse)?;
    call(args("gradcheck", &[p("output_dir", &root.join("grad"))]))?;
    Ok(())
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for r in [&r1, &r2] {
        fs::create_dir_all(r).map_err(|e| e.to_string())?;
        pipeline(r)?;
    }
    let mut files = vec![
        "data/train.jsonl".to_string(),
        "data/dev.jsonl".into(),
        "data/features/train_3_0002.sert".into(),
        "data/text/dev_7_0001.sert".into(),
        "fused/fused.csv".into(),
        "fused/fusion_report.json".into(),
        "grad/gradcheck.csv".into(),
    ];
    for m in ["a", "b"] {
        for f in ["train_log.jsonl", "predictions.csv", "metrics.json", "checkpoint/descriptor.json", "checkpoint/classifier.weight.sert"] {
            files.push(format!("{}/{}", m, f));
        }
    }
    for f in &files {
        let a = fs::read(r1.join(f)).map_err(|e| format!("{}: {}", f, e))?;
        let b = fs::read(r2.join(f)).map_err(|e| format!("{}: {}", f, e))?;
        check(a == b, || format!("{} differs between runs", f))?;
    }
    Ok(format!("gen-data, train, eval, fuse, gradcheck run twice; {} artifacts byte-identical", files.len()))
}

fn format_suite() -> Outcome {
    let mut r = rng(505);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for case in 0..50 {
        let rank = r.random_range(0..=3);
        let dims: Vec<usize> = (0..rank).map(|_| r.random_range(1..=12)).collect();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(r.random())).collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| e.to_string())?;
        let path = tmp.path().join(format!("t{}.sert", case));
        write_tensor(&t, &path).map_err(|e| e.to_string())?;
        let back = read_tensor(&path).map_err(|e| e.to_string())?;
        let same = back.dims() == t.dims() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, || format!("case {} {:?} not bit-exact", case, dims))?;
    }

    let good = encode(&Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap());
    let mut cases: Vec<(&str, Vec<u8>, bool)> = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    cases.push(("magic", bad_magic, true));
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    cases.push(("version", bad_version, true));
    let mut bad_dtype = good.clone();
    bad_dtype[5] = 2;
    cases.push(("dtype", bad_dtype, true));
    cases.push(("payload 12 of 16 bytes", good[..good.len() - 4].to_vec(), false));
    cases.push(("truncated dims", good[..9].to_vec(), false));
    let mut long = good.clone();
    long.extend_from_slice(&[0; 4]);
    cases.push(("trailing bytes", long, false));
    for (name, bytes, is_format) in &cases {
        let ok = match decode(bytes) {
            Err(IoError::Format(_)) => *is_format,
            Err(IoError::Corruption(_)) => !*is_format,
            _ => false,
        };
        check(ok, || format!("{} not rejected with the right error", name))?;
    }
    Ok(format!("50 random shapes bit-exact; {} malformed files rejected", cases.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("pooling oracle suite", pooling_oracle),
        ("conditioning identity suite", conditioning_identities),
        ("loss/metric oracle", loss_metric_oracle),
        ("end-to-end separability", separability),
        ("COBYLA suite", cobyla_suite),
        ("fusion gain", fusion_gain),
        ("reproducibility", reproducibility),
        ("format suite", format_suite),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {}: {}", name, detail),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}: {}", name, why);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
