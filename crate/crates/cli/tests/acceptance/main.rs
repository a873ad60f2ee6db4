//! Acceptance checks, one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

mod oracle;
mod search;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ceco_core::etf::{make_etf, max_pairwise_cosine, verify_etf};
use ceco_core::gradcheck::{run_all, Fault};
use ceco_core::harness::{center_frame, held_out_scenes, train_model, SceneSet, TrainConfig, TrainLog, TrainedModel};
use ceco_core::io::format_dump;
use ceco_core::loss::{
    center_pool, cr_grad_classifier, cr_grad_features, cr_loss, pr_loss_and_grad, total_loss,
};
use ceco_core::metrics::{imbalance_factor, FeatureBatch};
use ceco_core::toy::{backward, forward, gen_scene, scene_center_counts, total_pixel_counts, MlpParams, SceneConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use oracle::{center_loss, etf_deviation, fd, max_cos, objective, pixel_loss, rel, sqdist_deviation};
use search::{drive_down, unit_columns};

const FD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-6;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CECO_LAMBDA: f64 = 0.4;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Report {
    failures: usize,
}

impl Report {
    /// Times `f` and prints its line. A runtime limit, when given, is part
    /// of the criterion.
    fn check(&mut self, id: u32, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        self.record(id, name, limit_s, secs, v);
    }

    fn record(&mut self, id: u32, name: &str, limit_s: Option<f64>, secs: f64, v: Verdict) {
        let in_time = limit_s.is_none_or(|l| secs < l);
        let pass = v.pass && in_time;
        if !pass {
            self.failures += 1;
        }
        let limit = limit_s.map(|l| format!(" limit {l} s")).unwrap_or_default();
        println!(
            "criterion {id:>2} {name:<28} {} | {} | {secs:.3} s{limit}",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn etf_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_norm, mut worst_cos) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let k = rng.random_range(2..=50);
        let d = rng.random_range(k..=4 * k);
        let alpha = rng.random_range(0.1..10.0);
        let frame = match make_etf(d, k, alpha, i) {
            Ok(f) => f,
            Err(e) => return verdict(false, format!("make_etf({d}, {k}, {alpha}) failed: {e}")),
        };
        let (n, c) = etf_deviation(frame.matrix(), alpha);
        worst_norm = worst_norm.max(n);
        worst_cos = worst_cos.max(c);
    }
    verdict(
        worst_norm <= 1e-8 && worst_cos <= 1e-8,
        format!("20 frames, max norm dev {worst_norm:.2e}, max cosine dev {worst_cos:.2e} (tol 1e-8)"),
    )
}

fn separation_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let samples = 100_000;
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..samples {
        let k = rng.random_range(2..=8);
        let d = rng.random_range(1..=16);
        let w = unit_columns(&gaussian(d, k, &mut rng));
        let bound = -1.0 / (k as f64 - 1.0);
        let lib = max_pairwise_cosine(&w).unwrap_or(f64::NAN);
        let own = max_cos(&w);
        // the comparison fails on NaN as well
        if !(own >= bound - 1e-12 && lib >= bound - 1e-12) {
            violations += 1;
        }
        tightest = tightest.min(own - bound);
    }

    let trials = 20;
    let mut stalled = 0;
    let mut rejected = 0;
    for t in 0..trials {
        let k = rng.random_range(3..=8);
        let d = rng.random_range(k..=16);
        let start = make_etf(d, k, 1.0, 500 + t).unwrap().matrix() + gaussian(d, k, &mut rng) * 0.1;
        let w = drive_down(&start, 1e-6);
        if max_cos(&w) + 1.0 / (k as f64 - 1.0) > 1e-6 {
            stalled += 1;
        } else if !verify_etf(&w, 1e-4).map(|r| r.is_etf).unwrap_or(false) {
            rejected += 1;
        }
    }
    verdict(
        violations == 0 && stalled == 0 && rejected == 0,
        format!(
            "{samples} samples, {violations} violations, min slack {tightest:.2e}; \
             {trials} perturbed frames driven to 1e-6: {stalled} stalled, {rejected} failed verify at 1e-4"
        ),
    )
}

fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n)
        .map(|i| if i < k { i } else { rng.random_range(0..k) })
        .collect()
}

fn gradient_fidelity() -> Verdict {
    let trials = 20;
    let mut worst = [0.0f64; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for t in 0..trials {
        let k = rng.random_range(2..=6);
        let d = rng.random_range(k..=k + 4);
        let n = rng.random_range(k..=20);
        let z = gaussian(n, d, &mut rng);
        let y = labels(n, k, &mut rng);
        let w = gaussian(d, k, &mut rng);
        let cb = center_pool(&FeatureBatch::new(z.clone(), y.clone(), k).unwrap());
        let a = cr_grad_classifier(&cb, &w).unwrap();
        worst[0] = worst[0].max(rel(&a, &fd(&w, FD_H, |w| center_loss(&z, &y, w))));

        // classes may be absent here
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let frame = make_etf(d, k, rng.random_range(0.5..4.0), t).unwrap();
        let b = FeatureBatch::new(z.clone(), y.clone(), k).unwrap();
        let a = cr_grad_features(&center_pool(&b), &frame).unwrap();
        worst[1] = worst[1].max(rel(&a, &fd(&z, FD_H, |z| center_loss(z, &y, frame.matrix()))));

        let out = pr_loss_and_grad(&b, &w).unwrap();
        let ez = rel(&out.feature_grad, &fd(&z, FD_H, |z| pixel_loss(z, &y, &w)));
        let ew = rel(&out.classifier_grad, &fd(&w, FD_H, |w| pixel_loss(&z, &y, w)));
        worst[2] = worst[2].max(ez).max(ew);

        worst[3] = worst[3].max(end_to_end_error(t, &mut rng));
    }
    let library = run_all(trials as usize, 31, Fault::None).unwrap();
    let library_worst = library.iter().map(|r| r.worst_error).fold(0.0, f64::max);
    let pass = worst.iter().all(|&e| e <= GRAD_TOL) && library.iter().all(|r| r.passed);
    verdict(
        pass,
        format!(
            "{trials} instances per suite, max rel error: classifier {:.1e}, features {:.1e}, pixel CE {:.1e}, \
             end-to-end {:.1e}; built-in checker {library_worst:.1e} (tol 1e-6)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn end_to_end_error(t: u64, rng: &mut ChaCha8Rng) -> f64 {
    let lambda = [0.0, 0.4, 1.0][(t % 3) as usize];
    let k = rng.random_range(2..=4);
    let (s, h) = (rng.random_range(2..=5), rng.random_range(3..=7));
    let d = rng.random_range(k..=k + 2);
    let n = rng.random_range(k + 1..=14);
    let x = gaussian(n, s, rng);
    let y = labels(n, k, rng);
    let mut p = MlpParams::init(s, h, d, k, 100 + t);
    p.b1 = DVector::from_fn(h, |_, _| 0.2 * rng.random_range(-1.0..1.0));
    p.b2 = DVector::from_fn(d, |_, _| 0.2 * rng.random_range(-1.0..1.0));
    let frame = make_etf(d, k, 1.0, 200 + t).unwrap();

    let fw = forward(&p, &x).unwrap();
    let b = FeatureBatch::new(fw.features.clone(), y.clone(), k).unwrap();
    let out = total_loss(&b, &p.w_pr, &frame, lambda).unwrap();
    let g = backward(&p, &fw.cache, &out.feature_grad, &out.classifier_grad).unwrap();

    let f = |q: &MlpParams| objective(q, &x, &y, frame.matrix(), lambda);
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let nw1 = fd(&p.w1, FD_H, |m| f(&MlpParams { w1: m.clone(), ..p.clone() }));
    let nb1 = fd(&col(&p.b1), FD_H, |m| f(&MlpParams { b1: m.column(0).into_owned(), ..p.clone() }));
    let nw2 = fd(&p.w2, FD_H, |m| f(&MlpParams { w2: m.clone(), ..p.clone() }));
    let nb2 = fd(&col(&p.b2), FD_H, |m| f(&MlpParams { b2: m.column(0).into_owned(), ..p.clone() }));
    let nwp = fd(&p.w_pr, FD_H, |m| f(&MlpParams { w_pr: m.clone(), ..p.clone() }));

    let stack = |parts: [&[f64]; 5]| {
        let all = parts.concat();
        DMatrix::from_column_slice(all.len(), 1, &all)
    };
    let a = stack([g.w1.as_slice(), g.b1.as_slice(), g.w2.as_slice(), g.b2.as_slice(), g.w_pr.as_slice()]);
    let num = stack([nw1.as_slice(), nb1.as_slice(), nw2.as_slice(), nb2.as_slice(), nwp.as_slice()]);
    rel(&a, &num)
}

fn loss_value_oracle() -> Verdict {
    // K = 3, alpha = 1: own logit 1, the other two -1/2
    let e = std::f64::consts::E;
    let per_center = -(e / (e + 2.0 * (-0.5f64).exp())).ln();
    let expected = 3.0 * per_center;
    let frame = make_etf(3, 3, 1.0, 4).unwrap();
    let b = FeatureBatch::new(frame.matrix().transpose(), vec![0, 1, 2], 3).unwrap();
    let got = cr_loss(&center_pool(&b), &frame).unwrap();
    verdict(
        (got - expected).abs() <= 1e-5,
        format!("cr_loss {got:.10}, oracle {expected:.10}, diff {:.1e} (tol 1e-5)", (got - expected).abs()),
    )
}

struct Pair {
    ceco: TrainLog,
    base: TrainLog,
    model: TrainedModel,
    cfg: TrainConfig,
}

fn paired_runs() -> Result<Vec<Pair>, String> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                lambda: CECO_LAMBDA,
                ..TrainConfig::default()
            };
            let (ceco, model) = train_model(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
            let (base, _) = train_model(&cfg.baseline()).map_err(|e| format!("seed {seed} baseline: {e}"))?;
            Ok(Pair { ceco, base, model, cfg })
        })
        .collect()
}

fn nc_improvement(pairs: &[Pair]) -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for p in pairs {
        let (c, b) = (p.ceco.last().unwrap(), p.base.last().unwrap());
        let ok = c.equiang_std_centers < b.equiang_std_centers && c.maxangle_avg_centers < b.maxangle_avg_centers;
        pass &= ok;
        lines.push(format!(
            "seed {} std {:.4}->{:.4} avg {:.4}->{:.4}",
            p.cfg.seed, b.equiang_std_centers, c.equiang_std_centers, b.maxangle_avg_centers, c.maxangle_avg_centers
        ));
    }
    verdict(pass, lines.join("; "))
}

fn tail_improvement(pairs: &[Pair]) -> Verdict {
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&Pair) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let tail = 100.0 * mean(&|p| p.ceco.last().unwrap().tail_accuracy - p.base.last().unwrap().tail_accuracy);
    let head = 100.0 * mean(&|p| p.ceco.last().unwrap().head_accuracy - p.base.last().unwrap().head_accuracy);
    verdict(
        tail >= 2.0 && head.abs() <= 2.0,
        format!("mean tail gain {tail:+.2} points (need >= +2), mean head change {head:+.2} points (need within 2)"),
    )
}

fn eval_branch_removal(pairs: &[Pair]) -> Verdict {
    let p = &pairs[0];
    let eval = SceneSet::new(held_out_scenes(&p.cfg).unwrap());
    let stripped = p.model.without_center_branch();
    let with = p.model.predict(&eval.inputs).unwrap();
    let without = stripped.predict(&eval.inputs).unwrap();
    let (lw, lo) = (p.model.logits(&eval.inputs).unwrap(), stripped.logits(&eval.inputs).unwrap());
    let bits_equal = lw.iter().zip(lo.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        p.model.center_classifier.is_some() && with == without && bits_equal,
        format!("{} predictions and logits compared bitwise (seed {})", with.len(), p.cfg.seed),
    )
}

fn frame_geometry(pairs: &[Pair]) -> Verdict {
    let mut logged: f64 = 0.0;
    let mut records = 0;
    let mut recomputed: f64 = 0.0;
    for p in pairs {
        for r in &p.ceco.records {
            logged = logged.max(r.frame_sqdist_max_dev);
            records += 1;
        }
        let frame = center_frame(&p.cfg).unwrap();
        recomputed = recomputed.max(sqdist_deviation(frame.matrix(), p.cfg.alpha));
    }
    verdict(
        logged <= 1e-10 && recomputed <= 1e-10,
        format!("{records} logged iterations, max dev {logged:.2e}; recomputed {recomputed:.2e} (tol 1e-10)"),
    )
}

fn imbalance_reduction() -> Verdict {
    let base = SceneConfig {
        beta: 100.0,
        ..SceneConfig::default()
    };
    let scenes: Result<Vec<_>, _> = (0..100)
        .map(|i| gen_scene(&SceneConfig { seed: 9000 + i, ..base.clone() }))
        .collect();
    let scenes = match scenes {
        Ok(s) => s,
        Err(e) => return verdict(false, format!("scene generation failed: {e}")),
    };
    let k = base.classes;
    let pixel = imbalance_factor(&total_pixel_counts(&scenes, k)).unwrap();
    let center = imbalance_factor(&scene_center_counts(&scenes, k)).unwrap();
    verdict(
        center < pixel / 3.0,
        format!("100 scenes, pixel imbalance {pixel:.2}, center imbalance {center:.2}"),
    )
}

const SMALL: &[&str] = &[
    "--height", "12", "--width", "12", "--classes", "4", "--beta", "10", "--input-dim", "4",
    "--blobs", "8", "--hidden", "8", "--feature-dim", "6", "--iterations", "10",
    "--eval-every", "5", "--batch-scenes", "2", "--train-scenes", "4", "--eval-scenes", "2",
];

/// Exit code, stdout and every file under `dir`.
type Snapshot = (Option<i32>, Vec<u8>, BTreeMap<String, Vec<u8>>);

fn snapshot(dir: &Path, args: &[String]) -> Snapshot {
    let out = Command::new(env!("CARGO_BIN_EXE_ceco")).args(args).output().expect("binary runs");
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    (out.status.code(), out.stdout, files)
}

fn cli_determinism() -> Verdict {
    let fixtures = tempfile::TempDir::new().unwrap();
    let frame = fixtures.path().join("frame.txt");
    let dump = fixtures.path().join("dump.txt");
    let status = Command::new(env!("CARGO_BIN_EXE_ceco"))
        .args(["make-etf", "--dim", "16", "--classes", "10", "--seed", "2"])
        .arg("--out")
        .arg(&frame)
        .output()
        .unwrap()
        .status;
    if !status.success() {
        return verdict(false, "fixture frame could not be written".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = FeatureBatch::new(gaussian(60, 16, &mut rng), (0..60).map(|i| i % 10).collect(), 10).unwrap();
    fs::write(&dump, format_dump(&batch)).unwrap();
    let (frame, dump) = (frame.display().to_string(), dump.display().to_string());

    let work = tempfile::TempDir::new().unwrap();
    let at = |name: &str| work.path().join(name).display().to_string();
    let small = |head: &[&str]| -> Vec<String> {
        head.iter().chain(SMALL).map(|s| s.to_string()).collect()
    };
    let owned = |v: &[&str]| -> Vec<String> { v.iter().map(|s| s.to_string()).collect() };
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("make-etf", owned(&["make-etf", "--dim", "16", "--classes", "10", "--alpha", "1.5", "--seed", "3", "--out", &at("f.txt")])),
        ("verify-etf", owned(&["verify-etf", "--frame", &frame, "--out", &at("v.json")])),
        ("analyze", owned(&["analyze", "--features", &dump, "--classifier", &frame, "--out", &at("a.json")])),
        ("grad-check", owned(&["grad-check", "--trials", "5", "--seed", "9"])),
        ("train", small(&["train", "--lambda", "0.4", "--out", &at("log.jsonl")])),
        ("ablation", small(&["ablation", "--jobs", "2", "--out", &at("ablation.csv")])),
        ("sweep", small(&["sweep", "--lambdas", "0,0.2,0.4", "--jobs", "2", "--out", &at("sweep.csv")])),
        ("gen-data", small(&["gen-data", "--count", "3", "--out-dir", &at("scenes")])),
    ];

    let mut differing = Vec::new();
    let mut failed = Vec::new();
    for (name, args) in &commands {
        let first = snapshot(work.path(), args);
        clear(work.path());
        let second = snapshot(work.path(), args);
        clear(work.path());
        if first.0 != Some(0) {
            failed.push(*name);
        }
        if first != second {
            differing.push(*name);
        }
    }
    verdict(
        differing.is_empty() && failed.is_empty(),
        format!(
            "{} subcommands run twice; differing: {differing:?}; nonzero exit: {failed:?}",
            commands.len()
        ),
    )
}

fn clear(dir: &Path) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            fs::remove_dir_all(&path).unwrap();
        } else {
            fs::remove_file(&path).unwrap();
        }
    }
}

fn main() {
    let mut report = Report { failures: 0 };
    report.check(1, "etf exactness", Some(1.0), etf_exactness);
    report.check(2, "separation bound", Some(30.0), separation_bound);
    report.check(3, "gradient fidelity", Some(30.0), gradient_fidelity);
    report.check(4, "loss value oracle", None, loss_value_oracle);

    let start = Instant::now();
    let pairs = paired_runs();
    let train_secs = start.elapsed().as_secs_f64();
    match pairs {
        Ok(pairs) => {
            let v = nc_improvement(&pairs);
            report.record(5, "nc-metric improvement", Some(120.0), train_secs, v);
            report.record(6, "tail improvement", None, 0.0, tail_improvement(&pairs));
            report.check(7, "imbalance-factor reduction", Some(10.0), imbalance_reduction);
            report.check(8, "eval-branch removal", None, || eval_branch_removal(&pairs));
            report.check(9, "fixed-frame geometry", None, || frame_geometry(&pairs));
        }
        Err(e) => {
            for (id, name) in [(5, "nc-metric improvement"), (6, "tail improvement")] {
                report.record(id, name, None, train_secs, verdict(false, e.clone()));
            }
            report.check(7, "imbalance-factor reduction", Some(10.0), imbalance_reduction);
            for (id, name) in [(8, "eval-branch removal"), (9, "fixed-frame geometry")] {
                report.record(id, name, None, 0.0, verdict(false, e.clone()));
            }
        }
    }
    report.check(10, "cli determinism", None, cli_determinism);

    println!("acceptance: {} of 10 criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
