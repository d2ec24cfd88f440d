//! End-to-end acceptance checks, one line per criterion.
//!
//! Criteria 5–9 drive the `iemf` binary on the default configuration; the
//! rest exercise the library directly.

#![allow(clippy::needless_range_loop)]

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use iemf_core::analysis::{computational_cost, verify_contraction, CostCurve, QuadraticProblem, StepCase};
use iemf_core::continual::{aa_aia, afr, AccuracyMatrix};
use iemf_core::gradcheck::check_model_gradients;
use iemf_core::neuron::{lif_layer_on_tape, LifParams};
use iemf_core::tape::Tape;
use iemf_core::training::top1_accuracy;
use iemf_core::{iemf::iemf_coefficient, IemfConfig, ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_iemf");
const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn iemf(args: &[&str]) {
    let out =
        Command::new(BIN).args(args).env("IEMF_THREADS", "1").env("RUST_LOG", "warn").output().expect("spawn iemf");
    assert!(out.status.success(), "iemf {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

// 1 ────────────────────────────────────────────────────────────────────────

fn xi_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gammas = [0.1, 0.5, 1.0, 2.0, 5.0];
    let mut violations = 0;
    let mut cases = [0usize; 3];
    for i in 0..10_000 {
        let m: f64 = 1.0 - rng.random::<f64>();
        // every tenth triple sits exactly on the equal case
        let u: f64 = if i % 10 == 0 { m } else { 1.0 - rng.random::<f64>() };
        let g = gammas[rng.random_range(0..gammas.len())];
        let xi = iemf_coefficient(u, m, &IemfConfig { gamma: g, ..IemfConfig::default() });
        let bounded = xi > 0.0 && xi < 2.0 * g;
        let ordered = match (u / m).partial_cmp(&1.0).unwrap() {
            std::cmp::Ordering::Greater => {
                cases[0] += 1;
                xi < g
            }
            std::cmp::Ordering::Equal => {
                cases[1] += 1;
                xi == g
            }
            std::cmp::Ordering::Less => {
                cases[2] += 1;
                xi > g
            }
        };
        violations += usize::from(!(bounded && ordered));
    }
    verdict(
        violations == 0,
        format!("{violations} violations; ratio >1/=1/<1 cases {}/{}/{}", cases[0], cases[1], cases[2]),
    )
}

// 2 ────────────────────────────────────────────────────────────────────────

fn gradient_correctness() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (model, batch, opts) = support::random_case(seed);
        worst = worst.max(check_model_gradients(&model, &batch, &opts, 1e-5).unwrap().max_rel_error);
    }
    let p = LifParams { steps: 4, ..LifParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut snn_err: f64 = 0.0;
    for _ in 0..10 {
        let mut draw = || rng.random_range(-1.0..1.0);
        let w = [[draw(), draw()], [draw(), draw()]];
        let b = [draw() * 0.3, draw() * 0.3];
        let x = [draw() + 1.0, draw() + 1.0];
        let c = [draw(), draw()];
        let (gw, gb, _) = support::lif_oracle(w, b, x, c, &p);
        let mut tape = Tape::new();
        let wv = tape.param(ParamId(0), Tensor::from_rows(&[w[0].to_vec(), w[1].to_vec()]).unwrap());
        let bv = tape.param(ParamId(1), Tensor::vector(b.to_vec()).unwrap());
        let xv = tape.leaf(Tensor::from_rows(&[x.to_vec()]).unwrap());
        let cv = tape.leaf(Tensor::from_rows(&[c.to_vec()]).unwrap());
        let current = tape.linear(xv, wv, bv).unwrap();
        let spikes = lif_layer_on_tape(&mut tape, &vec![current; p.steps], &p).unwrap();
        let terms: Vec<_> = spikes
            .into_iter()
            .map(|s| {
                let weighted = tape.mul(s, cv).unwrap();
                tape.sum(weighted).unwrap()
            })
            .collect();
        let total = terms[1..].iter().fold(terms[0], |acc, &t| tape.add(acc, t).unwrap());
        let grads = tape.backward(total).unwrap();
        let (tw, tb) = (grads.get(ParamId(0)).unwrap(), grads.get(ParamId(1)).unwrap());
        for i in 0..2 {
            for j in 0..2 {
                snn_err = snn_err.max((tw.get(i, j) - gw[i][j]).abs());
            }
            snn_err = snn_err.max((tb.data()[i] - gb[i]).abs());
        }
    }
    verdict(worst < 1e-6 && snn_err < 1e-10, format!("ANN max rel err {worst:.2e}, SNN BPTT max abs err {snn_err:.2e}"))
}

// 3 ────────────────────────────────────────────────────────────────────────

fn contraction() -> Verdict {
    let lambdas = vec![0.01, 0.05, 0.3, 2.0, 10.0];
    // η λ_max · 2 < 2
    let eta = 0.099;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut cases_ok = true;
    for trial in 0..10 {
        let schedule: Vec<f64> = (0..100).map(|_| rng.random_range(1e-3..1.999)).collect();
        let p = QuadraticProblem {
            eigenvalues: lambdas.clone(),
            minimizer: Some((0..5).map(|_| rng.random_range(-2.0..2.0)).collect()),
            alpha0: (0..5).map(|_| rng.random_range(-3.0..3.0)).collect(),
            eta,
            xi_schedule: schedule,
            basis_seed: Some(trial),
        };
        let r = verify_contraction(&p, 100).unwrap();
        worst = worst.max(r.max_residual);
        monotone &= r.deviation_norm[1..].windows(2).all(|w| w[1] <= w[0]);
        cases_ok &= r.step_cases.iter().enumerate().all(|(t, &c)| {
            let xi = p.xi_at(t);
            c == if xi < 1.0 {
                StepCase::Smaller
            } else if xi > 1.0 {
                StepCase::Larger
            } else {
                StepCase::Equal
            }
        });
    }
    verdict(
        worst <= 1e-10 && monotone && cases_ok,
        format!("max residual {worst:.2e}, ‖Δ‖ non-increasing: {monotone}, step cases: {cases_ok}"),
    )
}

// 4 ────────────────────────────────────────────────────────────────────────

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..8);
        let rows = support::random_matrix(&mut rng, k);
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        let (aa, aia) = aa_aia(&m).unwrap();
        let (oa, oi) = support::oracle_aa_aia(&rows);
        mismatches += usize::from(aa.iter().zip(&oa).any(|(a, b)| (a - b).abs() > 1e-12) || (aia - oi).abs() > 1e-12);
        mismatches += usize::from((afr(&m).unwrap() - support::oracle_afr(&rows)).abs() > 1e-12);

        let (b, k) = (rng.random_range(1..20), rng.random_range(2..7));
        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-3..=3) as f64).collect()).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let acc = top1_accuracy(&Tensor::from_rows(&logits).unwrap(), &labels).unwrap();
        mismatches += usize::from((acc - support::oracle_top1(&logits, &labels)).abs() > 1e-12);
    }
    let mut cost_checked = 0;
    while cost_checked < 100 {
        let curves: Vec<(Vec<f64>, f64)> = (0..rng.random_range(2..5))
            .map(|_| {
                let len = rng.random_range(1..12);
                ((0..len).map(|_| rng.random_range(0..=40) as f64 / 40.0).collect(), rng.random_range(1..100) as f64)
            })
            .collect();
        let Some(o) = support::oracle_cost(&curves, 5) else { continue };
        let input: Vec<CostCurve> = curves
            .iter()
            .map(|(e, f)| CostCurve { name: String::new(), errors: e.clone(), flops_per_epoch: *f })
            .collect();
        let r = computational_cost(&input, 5).unwrap();
        let same = (r.upper - o.upper).abs() <= 1e-12
            && (r.lower - o.lower).abs() <= 1e-12
            && r.thresholds.iter().zip(&o.thresholds).all(|(a, b)| (a - b).abs() <= 1e-12)
            && r.methods.iter().zip(&o.costs).all(|(m, c)| match (m.cost, c) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * b.max(1.0),
                (None, None) => true,
                _ => false,
            });
        mismatches += usize::from(!same);
        cost_checked += 1;
    }
    let fixture = AccuracyMatrix::from_rows(&[vec![0.90], vec![0.80, 0.85], vec![0.70, 0.75, 0.88]]).unwrap();
    let two = AccuracyMatrix::from_rows(&[vec![0.90], vec![0.80, 0.85]]).unwrap();
    // F₂ alone, then (F₂ + F₃)/2
    let f2 = afr(&two).unwrap();
    let total = afr(&fixture).unwrap();
    let f3 = 2.0 * total - f2;
    let fixture_ok = (f2 - 0.10).abs() < 1e-12 && (f3 - 0.15).abs() < 1e-12 && (total - 0.125).abs() < 1e-12;
    verdict(
        mismatches == 0 && fixture_ok,
        format!("{mismatches} mismatches over 4×100 instances; AFR fixture F₂={f2:.3} F₃={f3:.3} AFR={total:.4}"),
    )
}

// 5–8: shared seeded runs on the default configuration ───────────────────

struct SeedRun {
    on: PathBuf,
    off: PathBuf,
}

fn train_pairs(root: &Path) -> Vec<SeedRun> {
    (0..SEEDS)
        .map(|seed| {
            let run = SeedRun { on: root.join(format!("s{seed}-on")), off: root.join(format!("s{seed}-off")) };
            for (flag, dir) in [("true", &run.on), ("false", &run.off)] {
                iemf(&["train", "--seed", &seed.to_string(), "--iemf", flag, "--out", s(dir)]);
            }
            run
        })
        .collect()
}

fn xi_dynamics(runs: &[SeedRun]) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let xi = csv_column(&r.on.join("xi_trace.csv"), "xi");
        let n = (xi.len() / 10).max(1);
        let early = xi[..n].iter().sum::<f64>() / n as f64;
        let late = xi[xi.len() - n..].iter().sum::<f64>() / n as f64;
        wins += usize::from(early > late);
        parts.push(format!("{early:.3}>{late:.3}"));
    }
    verdict(wins >= 4, format!("{wins}/5 seeds early ξ > late ξ [{}]", parts.join(" ")))
}

fn benefit(runs: &[SeedRun]) -> Verdict {
    let last = |p: &Path| *csv_column(&p.join("metrics.csv"), "test_acc").last().unwrap();
    let pairs: Vec<(f64, f64)> = runs.iter().map(|r| (last(&r.on), last(&r.off))).collect();
    let wins = pairs.iter().filter(|(a, b)| a >= b).count();
    let mean = |f: fn(&(f64, f64)) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    let (on, off) = (mean(|p| p.0), mean(|p| p.1));
    verdict(
        on >= off && wins >= 4,
        format!("mean test acc {on:.4} (IEMF) vs {off:.4} (vanilla); IEMF ≥ vanilla in {wins}/5 seeds"),
    )
}

fn continual_direction(root: &Path) -> Verdict {
    let mut details = Vec::new();
    let mut pass = true;
    for method in ["finetune", "lwf"] {
        let cfg = root.join(format!("{method}.json"));
        std::fs::write(&cfg, format!(r#"{{"continual": {{"method": "{method}"}}}}"#)).unwrap();
        let mut wins = 0;
        for seed in 0..SEEDS {
            let aia = |flag: &str| {
                let dir = root.join(format!("{method}-{seed}-{flag}"));
                iemf(&[
                    "continual",
                    "--config",
                    s(&cfg),
                    "--seed",
                    &seed.to_string(),
                    "--iemf",
                    flag,
                    "--out",
                    s(&dir),
                ]);
                json(&dir.join("continual_metrics.json"))["aia"].as_f64().unwrap()
            };
            wins += usize::from(aia("true") >= aia("false"));
        }
        pass &= wins >= 3;
        details.push(format!("{method} {wins}/5"));
    }
    verdict(pass, format!("AIA with IEMF ≥ without: {}", details.join(", ")))
}

fn sharpness_direction(runs: &[SeedRun]) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let value = |dir: &Path| {
            let ckpt = dir.join("checkpoint.iemf");
            iemf(&["analyze", "sharpness", "--seed", &seed.to_string(), "--checkpoint", s(&ckpt), "--out", s(dir)]);
            json(&dir.join("sharpness.json"))["sharpness"].as_f64().unwrap()
        };
        let (on, off) = (value(&r.on), value(&r.off));
        wins += usize::from(on <= off);
        parts.push(format!("{on:.2e}/{off:.2e}"));
    }
    verdict(wins >= 3, format!("IEMF ≤ vanilla at radius 0.05 in {wins}/5 seeds [{}]", parts.join(" ")))
}

// 9 ────────────────────────────────────────────────────────────────────────

fn output_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json" | "iemf")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(root: &Path) -> Verdict {
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("generate", vec!["generate".into()]),
        ("train", vec!["train".into()]),
        ("continual", vec!["continual".into()]),
        ("contraction", vec!["analyze".into(), "contraction".into()]),
    ];
    let mut differing = Vec::new();
    let mut compared = 0;
    let run_pair = |name: &str, args: &[String], differing: &mut Vec<String>, compared: &mut usize| {
        let dirs: Vec<PathBuf> = (0..2).map(|i| root.join(format!("{name}-{i}"))).collect();
        for d in &dirs {
            let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
            a.extend(["--seed", "3", "--out", s(d)]);
            iemf(&a);
        }
        let (x, y) = (output_files(&dirs[0]), output_files(&dirs[1]));
        *compared += x.len();
        if x != y {
            differing.push(name.to_string());
        }
    };
    for (name, args) in &commands {
        run_pair(name, args, &mut differing, &mut compared);
    }
    let ckpt = root.join("train-0/checkpoint.iemf");
    let metrics = root.join("train-0/metrics.csv");
    let analyses: Vec<(&str, Vec<String>)> = vec![
        ("sharpness", vec!["analyze".into(), "sharpness".into(), "--checkpoint".into(), s(&ckpt).into()]),
        ("landscape", vec!["analyze".into(), "landscape".into(), "--checkpoint".into(), s(&ckpt).into()]),
        (
            "cost",
            vec![
                "analyze".into(),
                "cost".into(),
                "--metrics".into(),
                format!("a={}", s(&metrics)),
                "--metrics".into(),
                format!("b={}", s(&root.join("train-1/metrics.csv"))),
            ],
        ),
    ];
    for (name, args) in &analyses {
        run_pair(name, args, &mut differing, &mut compared);
    }
    verdict(
        differing.is_empty(),
        format!("7 commands run twice, {compared} output files compared; differing: {differing:?}"),
    )
}

// ──────────────────────────────────────────────────────────────────────────

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> (Verdict, Duration) {
    let start = Instant::now();
    let mut v = f();
    let took = start.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            v.pass = false;
            v.detail.push_str(&format!("; exceeded {}s budget", limit.as_secs()));
        }
    }
    (v, took)
}

#[test]
fn acceptance() {
    let suite = Instant::now();
    let root = TempDir::new().unwrap();
    let mut lines = Vec::new();
    let mut report = |n: usize, name: &str, (v, took): (Verdict, Duration)| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        let line = format!("criterion {n:>2} [{status}] {name}: {} ({:.1}s)", v.detail, took.as_secs_f64());
        // bypass libtest capture so every run logs the verdicts
        let _ = writeln!(std::io::stdout(), "{line}");
        lines.push((v.pass, line));
    };
    let secs = Duration::from_secs;

    report(1, "ξ contract", timed(Some(secs(1)), xi_contract));
    report(2, "gradient correctness", timed(Some(secs(30)), gradient_correctness));
    report(3, "contraction numerics", timed(Some(secs(5)), contraction));
    report(4, "metric oracles", timed(None, metric_oracles));

    let train_start = Instant::now();
    let runs = train_pairs(root.path());
    let train_time = train_start.elapsed();
    // the shared training runs count against both budgets that use them
    let (v5, t5) = timed(None, || xi_dynamics(&runs));
    report(5, "ξ dynamics direction", with_budget(v5, t5 + train_time, secs(180)));
    let (v6, t6) = timed(None, || benefit(&runs));
    report(6, "benefit direction", with_budget(v6, t6 + train_time, secs(300)));
    let dir7 = root.path().join("continual");
    std::fs::create_dir_all(&dir7).unwrap();
    report(7, "continual direction", timed(Some(secs(300)), || continual_direction(&dir7)));
    let (v8, t8) = timed(None, || sharpness_direction(&runs));
    report(8, "sharpness direction", with_budget(v8, t8 + train_time, secs(180)));
    let dir9 = root.path().join("determinism");
    std::fs::create_dir_all(&dir9).unwrap();
    report(9, "determinism", timed(None, || determinism(&dir9)));

    let total = suite.elapsed();
    let fast = total < secs(20 * 60);
    report(
        10,
        "suite runtime",
        (verdict(fast, format!("whole suite took {:.1}s (< 1200s)", total.as_secs_f64())), total),
    );

    let failed: Vec<&String> = lines.iter().filter(|(ok, _)| !ok).map(|(_, l)| l).collect();
    assert!(
        failed.is_empty(),
        "failing criteria:\n{}",
        failed.iter().map(|l| l.as_str()).collect::<Vec<_>>().join("\n")
    );
}

fn with_budget(mut v: Verdict, took: Duration, limit: Duration) -> (Verdict, Duration) {
    if took > limit {
        v.pass = false;
        v.detail.push_str(&format!("; exceeded {}s budget", limit.as_secs()));
    }
    (v, took)
}
