//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

#![allow(clippy::needless_range_loop, clippy::field_reassign_with_default, clippy::neg_cmp_op_on_partial_ord)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use htan::apl::{distance_matrix, gaussian_gram, mahalanobis_sq, AplBasis, AplCoordinates, MetricMatrix};
use htan::checkpoint;
use htan::cli::{cmd_analyze, cmd_covariance, cmd_param_count, cmd_train, RunConfig, TrainSummary};
use htan::data::{generate_dataset, RegimeSwitchingSpec};
use htan::layers::block::BlockTrace;
use htan::spd::{SPD_MIN_EIGENVALUE, SPD_SYMMETRY_TOL, STIEFEL_TOL};
use htan::training::{loss_theta, regularizer, Model, TrainConfig};
use htan::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let started = Instant::now();
    let work = tempfile::tempdir().expect("temporary directory");
    println!("running acceptance criteria 1-9");

    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", gradients()),
        (3, "metric-module oracles", metric_oracles()),
        (4, "loss formula oracles", loss_oracles()),
        (8, "parameter-count crossover", param_count()),
        (9, "determinism and persistence", determinism(work.path())),
    ];
    println!("training 5 seeds x 2 settings of lambda on the default dataset");
    let runs = default_runs(work.path());
    results.push((2, "manifold invariants", manifold(&runs)));
    results.push((5, "adversarial directionality", directionality(&runs)));
    results.push((6, "end-to-end synthetic efficacy", efficacy(&runs)));
    results.push((7, "relation recovery", relation_recovery(&runs, work.path())));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let mut worst_overall = 0.0f64;
    let mut bad = Vec::new();
    for (k, op) in common::GRADIENT_OPS.iter().enumerate() {
        let mut rng = common::rng(1000 + k as u64);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let inst = common::instance(op, &mut rng);
            match inst.error(&mut rng) {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    bad.push(format!("{op}: {e}"));
                    worst = f64::INFINITY;
                }
            }
        }
        if !(worst < common::FD_TOL) {
            bad.push(format!("{op} max rel err {worst:.2e}"));
        }
        worst_overall = worst_overall.max(worst);
    }
    if bad.is_empty() {
        outcome(true, format!("9 operations x 20 instances, max rel err {worst_overall:.2e} < 1e-4"))
    } else {
        outcome(false, bad.join("; "))
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = common::rng(3);
    let mut worst_mc = 0.0f64;
    let samples = 1_000_000;
    for _ in 0..20 {
        let m = rng.random_range(1..=8);
        let beta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gram = match gaussian_gram(&AplBasis::new(beta.clone()).unwrap()) {
            Ok(g) => g,
            Err(e) => return outcome(false, format!("gaussian_gram failed: {e}")),
        };
        let mut acc = vec![0.0; m * m];
        let mut f = vec![0.0; m];
        for _ in 0..samples {
            let x: f64 = StandardNormal.sample(&mut rng);
            for (fi, &b) in f.iter_mut().zip(&beta) {
                *fi = (b - x).max(0.0);
            }
            for i in 0..m {
                for j in 0..m {
                    acc[i * m + j] += f[i] * f[j];
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                let mc = acc[i * m + j] / samples as f64;
                worst_mc = worst_mc.max((mc - gram.tensor().at(i, j)).abs());
            }
        }
    }
    let zero = gaussian_gram(&AplBasis::new(vec![0.0]).unwrap()).unwrap().tensor().at(0, 0);
    let zero_err = (zero - 0.5).abs();

    let mut violations = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=6);
        let metric = MetricMatrix::new(common::random_spd(&mut rng, m, 0.1)).unwrap();
        let pts: Vec<AplCoordinates> = (0..3)
            .map(|_| AplCoordinates::new((0..m).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let d = distance_matrix(&pts, &metric).unwrap();
        let ab = mahalanobis_sq(&pts[0], &pts[1], &metric).unwrap();
        let ba = mahalanobis_sq(&pts[1], &pts[0], &metric).unwrap();
        let s = |i: usize, j: usize| d.at(i, j).sqrt();
        let symmetric = (0..3).all(|i| (0..3).all(|j| d.at(i, j) == d.at(j, i))) && ab == ba;
        let zero_diag = (0..3).all(|i| d.at(i, i) == 0.0);
        let triangle = s(0, 2) <= s(0, 1) + s(1, 2) + 1e-12;
        if !(symmetric && zero_diag && triangle && ab >= 0.0) {
            violations += 1;
        }
    }
    let pass = worst_mc < 1e-2 && zero_err < 1e-6 && violations == 0;
    outcome(
        pass,
        format!(
            "max |gram - MC| {worst_mc:.2e} (< 1e-2), |G(0) - 0.5| {zero_err:.1e} (< 1e-6), \
             distance violations {violations}/1000"
        ),
    )
}

fn trace_of(alpha: Vec<Vec<Vec<f64>>>) -> BlockTrace {
    BlockTrace {
        beta: vec![Vec::new(); alpha.len()],
        alpha,
        pre: Vec::new(),
        post: Vec::new(),
    }
}

fn quad(a: &[f64], b: &[f64], m: &Tensor) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let k = d.len();
    (0..k).map(|i| (0..k).map(|j| d[i] * m.at(i, j) * d[j]).sum::<f64>()).sum()
}

fn loss_oracles() -> Outcome {
    let mut rng = common::rng(4);
    let (l, n, t, m) = (2, 2, 3, 4);
    let mut worst_reg = 0.0f64;
    let mut worst_theta = 0.0f64;
    for _ in 0..20 {
        let alphas: Vec<Vec<Vec<Vec<f64>>>> = (0..l)
            .map(|_| {
                (0..n)
                    .map(|_| (0..t).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                    .collect()
            })
            .collect();
        let metrics: Vec<Vec<Tensor>> = (0..l)
            .map(|_| (0..n).map(|_| common::random_spd(&mut rng, m, 0.2)).collect())
            .collect();
        let traces: Vec<BlockTrace> = alphas.iter().cloned().map(trace_of).collect();

        let mut reg = 0.0;
        let mut theta = 0.0;
        for b in 0..l {
            for s in 0..n {
                let a = &alphas[b][s];
                let d: Vec<Vec<f64>> = (0..t)
                    .map(|i| (0..t).map(|j| quad(&a[i], &a[j], &metrics[b][s])).collect())
                    .collect();
                for i in 0..t {
                    for j in 0..t {
                        reg += d[i][j].abs();
                    }
                    let mut k = 0;
                    for j in 0..t {
                        if d[i][j] > d[i][k] {
                            k = j;
                        }
                    }
                    let lse = (0..t).filter(|&j| j != k).map(|j| d[i][j].exp()).sum::<f64>().ln();
                    theta += d[i][k] - lse;
                }
            }
        }
        worst_reg = worst_reg.max((regularizer(&traces, &metrics).unwrap() - reg).abs());
        worst_theta = worst_theta.max((loss_theta(&traces, &metrics).unwrap() - theta).abs());
    }

    // two tasks: both objectives reduce to 2 d²₁₂
    let mut worst_closed = 0.0f64;
    for _ in 0..20 {
        let a: Vec<Vec<f64>> = (0..2).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let metric = common::random_spd(&mut rng, m, 0.2);
        let d12 = quad(&a[0], &a[1], &metric);
        let traces = vec![trace_of(vec![a.clone()])];
        let metrics = vec![vec![metric]];
        worst_closed = worst_closed
            .max((regularizer(&traces, &metrics).unwrap() - 2.0 * d12).abs())
            .max((loss_theta(&traces, &metrics).unwrap() - 2.0 * d12).abs());
    }
    let pass = worst_reg < 1e-10 && worst_theta < 1e-10 && worst_closed < 1e-10;
    outcome(
        pass,
        format!(
            "regularizer vs enumeration {worst_reg:.1e}, adversarial loss vs enumeration {worst_theta:.1e}, \
             T=2 closed forms {worst_closed:.1e} (all < 1e-10)"
        ),
    )
}

fn param_count() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.finish().unwrap();
    let report = cmd_param_count(&cfg, 50).unwrap();
    let from_five = report.by_tasks.iter().filter(|c| c.tasks >= 5).all(|c| c.htan_smaller());
    let c = report.configured;
    let detail = format!(
        "crossover T = {} (must be <= 5); at T = {}: network {} + metric {} = {} vs baseline {}",
        report.crossover.map_or("none".into(), |t| t.to_string()),
        c.tasks,
        c.htan_network,
        c.htan_metric,
        c.htan_total,
        c.baseline_total
    );
    outcome(from_five && report.crossover.is_some_and(|t| t <= 5), detail)
}

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 2;
    cfg.train.hidden = 16;
    cfg.data.sequences = 40;
    cfg.data.seq_len = 12;
    cfg.split.test_sequences = 20;
    cfg.output.dir = dir.to_path_buf();
    cfg.finish().unwrap();
    cfg
}

fn determinism(work: &Path) -> Outcome {
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    if let Err(e) = cmd_train(&small_config(&a)).and_then(|_| cmd_train(&small_config(&b))) {
        return outcome(false, format!("training failed: {e}"));
    }
    let read = |p: &Path| fs::read(p).unwrap_or_default();
    let metrics_same = read(&a.join("metrics.csv")) == read(&b.join("metrics.csv"));
    let ckpt_same = read(&a.join("checkpoint.htan")) == read(&b.join("checkpoint.htan"));

    // bit-exact round trip through the container
    let round_trip = (|| -> htan::Result<bool> {
        let tensors = checkpoint::load(&a.join("checkpoint.htan"))?;
        let model = Model::from_tensors(&tensors)?;
        let again = model.to_tensors();
        let bits = |ts: &[(String, Tensor)]| -> Vec<(String, Vec<usize>, Vec<u64>)> {
            ts.iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect()))
                .collect()
        };
        checkpoint::save(&work.join("again.htan"), &again)?;
        Ok(bits(&tensors) == bits(&again) && read(&work.join("again.htan")) == read(&a.join("checkpoint.htan")))
    })()
    .unwrap_or(false);

    let cov = covariance_bounds(work);
    let pass = metrics_same && ckpt_same && round_trip && cov.0;
    outcome(
        pass,
        format!(
            "metrics.csv identical: {metrics_same}, checkpoints identical: {ckpt_same}, \
             round trip bit-exact: {round_trip}; {}",
            cov.1
        ),
    )
}

/// Covariance traces for always-coupled and never-coupled specs against
/// their analytic values.
fn covariance_bounds(work: &Path) -> (bool, String) {
    let spec = |rho: f64| RegimeSwitchingSpec {
        rho: vec![rho, rho],
        ..RegimeSwitchingSpec::default()
    };
    let b = spec(0.0).sequences as f64;
    let read = |rho: f64| -> htan::Result<Vec<(f64, f64)>> {
        let data = generate_dataset(&spec(rho))?;
        let dir = work.join(format!("cov_{rho}"));
        let path = cmd_covariance(&data, (0, 1), (0, 0), &dir)?;
        let text = fs::read_to_string(path)?;
        let p = (0..data.seq_len())
            .flat_map(|n| data.slot_labels(0, n))
            .filter(|&y| y == 0)
            .count() as f64
            / (data.sequences() * data.seq_len()) as f64;
        Ok(text
            .lines()
            .skip(1)
            .map(|l| (l.split(',').nth(1).unwrap().parse::<f64>().unwrap(), p))
            .collect())
    };
    let (zero, one) = match (read(0.0), read(1.0)) {
        (Ok(z), Ok(o)) => (z, o),
        (Err(e), _) | (_, Err(e)) => return (false, format!("covariance failed: {e}")),
    };
    // independent indicators: sd of the sample covariance is p(1-p)/sqrt(B) for equal marginals
    let zero_ratio = zero
        .iter()
        .map(|&(c, p)| c.abs() / (3.0 * p * (1.0 - p) / b.sqrt()))
        .fold(0.0, f64::max);
    // identical labels: cov = p̂ - p̂², with sd about |1 - 2p| sqrt(p(1-p)/B) around p - p²
    let one_ratio = one
        .iter()
        .map(|&(c, p)| (c - (p - p * p)).abs() / (3.0 * (1.0 - 2.0 * p).abs() * (p * (1.0 - p) / b).sqrt()))
        .fold(0.0, f64::max);
    (
        zero_ratio < 1.0 && one_ratio < 1.0,
        format!(
            "covariance rho=0 max |cov|/3sd {zero_ratio:.2}, rho=1 max |cov-(p-p^2)|/3sd {one_ratio:.2} (both < 1)"
        ),
    )
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Run {
    seed: u64,
    lambda: f64,
    dir: std::path::PathBuf,
    config: RunConfig,
    summary: Result<TrainSummary, String>,
}

fn default_runs(work: &Path) -> Vec<Run> {
    let mut runs = Vec::new();
    for &seed in &SEEDS {
        for lambda in [0.01, 0.0] {
            let dir = work.join(format!("run_s{seed}_l{lambda}"));
            let mut config = RunConfig::default();
            config.train = TrainConfig {
                seed,
                lambda,
                ..TrainConfig::default()
            };
            config.output.dir = dir.clone();
            config.finish().unwrap();
            let t = Instant::now();
            let summary = cmd_train(&config).map_err(|e| e.to_string());
            match &summary {
                Ok(s) => println!(
                    "  seed {seed} lambda {lambda}: test mean CE {:.6} ({:.1} s)",
                    s.test.mean_loss(),
                    t.elapsed().as_secs_f64()
                ),
                Err(e) => println!("  seed {seed} lambda {lambda}: failed: {e}"),
            }
            runs.push(Run {
                seed,
                lambda,
                dir,
                config,
                summary,
            });
        }
    }
    runs
}

fn failed_runs(runs: &[Run]) -> Option<Outcome> {
    let failed: Vec<String> = runs
        .iter()
        .filter_map(|r| r.summary.as_ref().err().map(|e| format!("seed {} lambda {}: {e}", r.seed, r.lambda)))
        .collect();
    (!failed.is_empty()).then(|| outcome(false, failed.join("; ")))
}

fn manifold(runs: &[Run]) -> Outcome {
    if let Some(o) = failed_runs(runs) {
        return o;
    }
    let mut min_eig = f64::INFINITY;
    let (mut asym, mut defect, mut steps) = (0.0f64, 0.0f64, 0);
    for r in runs {
        let c = &r.summary.as_ref().unwrap().checks;
        min_eig = min_eig.min(c.min_metric_eigenvalue.unwrap_or(f64::NEG_INFINITY));
        asym = asym.max(c.max_metric_asymmetry);
        defect = defect.max(c.max_stiefel_defect);
        steps += c.steps;
    }
    let pass = min_eig >= SPD_MIN_EIGENVALUE && asym <= SPD_SYMMETRY_TOL && defect < STIEFEL_TOL;
    outcome(
        pass,
        format!(
            "{steps} steps over {} runs: min metric eigenvalue {min_eig:.3e} (>= 1e-10), \
             max asymmetry {asym:.1e} (<= 1e-10), max Stiefel defect {defect:.1e} (< 1e-6)",
            runs.len()
        ),
    )
}

fn directionality(runs: &[Run]) -> Outcome {
    if let Some(o) = failed_runs(runs) {
        return o;
    }
    let (mut phi_ok, mut phi_n, mut theta_ok, mut theta_n, mut disjoint) = (0, 0, 0, 0, true);
    for r in runs {
        let c = &r.summary.as_ref().unwrap().checks;
        phi_ok += c.phi_directional_nonpositive;
        phi_n += c.steps;
        theta_ok += c.theta_directional_nonnegative;
        theta_n += c.theta_steps;
        disjoint &= c.all_disjoint;
    }
    let phi_frac = phi_ok as f64 / phi_n as f64;
    let theta_frac = theta_ok as f64 / theta_n as f64;
    outcome(
        phi_frac >= 0.99 && theta_frac >= 0.99 && disjoint,
        format!(
            "network steps descending {phi_ok}/{phi_n} ({:.2}%), metric steps ascending {theta_ok}/{theta_n} \
             ({:.2}%), parameter sets disjoint: {disjoint}",
            100.0 * phi_frac,
            100.0 * theta_frac
        ),
    )
}

fn efficacy(runs: &[Run]) -> Outcome {
    if let Some(o) = failed_runs(runs) {
        return o;
    }
    let mean = |lambda: f64| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.lambda == lambda)
            .map(|r| r.summary.as_ref().unwrap().test.mean_loss())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (with, without) = (mean(0.01), mean(0.0));
    let margin = without - with;
    outcome(
        margin > 0.0,
        format!(
            "mean test CE over 5 seeds: lambda=0.01 {with:.6}, lambda=0 {without:.6}, margin {margin:+.6} (must be > 0)"
        ),
    )
}

fn relation_recovery(runs: &[Run], work: &Path) -> Outcome {
    if let Some(o) = failed_runs(runs) {
        return o;
    }
    let mut per_seed = Vec::new();
    for r in runs.iter().filter(|r| r.lambda == 0.01) {
        let test = match generate_dataset(&r.config.test_spec()) {
            Ok(d) => d,
            Err(e) => return outcome(false, format!("test data: {e}")),
        };
        let out = work.join(format!("analysis_s{}", r.seed));
        match cmd_analyze(&r.dir.join("checkpoint.htan"), &test, (0, 0), &out) {
            Ok(a) => per_seed.push(a.spearman.unwrap_or(f64::NAN)),
            Err(e) => return outcome(false, format!("analyze seed {}: {e}", r.seed)),
        }
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let listed: Vec<String> = per_seed.iter().map(|s| format!("{s:+.3}")).collect();
    outcome(
        mean <= -0.3,
        format!(
            "Spearman(mean d^2_12, coupling) per seed [{}], mean {mean:+.3} (must be <= -0.3)",
            listed.join(", ")
        ),
    )
}
