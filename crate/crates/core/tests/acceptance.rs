//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use pfedpf::federation::{aggregate_gaussians, AlgorithmVariant, BaseAlgorithm};
use pfedpf::flows::{fine_tune, FineTuneConfig, FlowStack, RadialLayer};
use pfedpf::harness::{
    run_ablation, run_experiment, run_probe, run_seed, write_run_artifacts, ExperimentConfig,
};
use pfedpf::laplace::{ggn_precision, GaussianPosterior};
use pfedpf::metrics::{aupr, auroc, ece, fpr_at_95_tpr, Orientation, PredictionBatch, ScoreSet};
use pfedpf::model::{backward, cross_entropy, forward, MlpParams};
use pfedpf::numerics::{cholesky, softmax, Matrix, RngStream};

struct Outcome {
    pass: bool,
    detail: String,
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    ExperimentConfig::from_path(&path).expect("bundled config loads")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient() -> Outcome {
    let mut rng = RngStream::new(1, 0);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 100 {
        let input = 1 + rng.index(6);
        let hidden: Vec<usize> = (0..1 + rng.index(2)).map(|_| 2 + rng.index(7)).collect();
        let classes = 2 + rng.index(4);
        let params = MlpParams::init(input, &hidden, classes, &mut rng);
        let x = rng.normal_vec(input);
        let label = rng.index(classes);
        let trace = forward(&params, &x).unwrap();
        // Finite differences are meaningless across a ReLU kink.
        if trace
            .pre_activations
            .iter()
            .flatten()
            .any(|z| z.abs() < 1e-3)
        {
            continue;
        }
        cases += 1;
        let loss = |p: &MlpParams, x: &[f64]| cross_entropy(&forward(p, x).unwrap().logits, label);
        let grads = backward(&params, &trace, label).unwrap();
        let analytic: Vec<f64> = grads.params.flatten_all();
        let mut idx = 0;
        for li in 0..params.layers().count() {
            let n_w = params.layers().nth(li).unwrap().weight.data().len();
            let n_b = params.layers().nth(li).unwrap().bias.len();
            for j in 0..n_w + n_b {
                let bump = |s: f64| {
                    let mut p = params.clone();
                    let layer = p.layers_mut().nth(li).unwrap();
                    if j < n_w {
                        layer.weight.data_mut()[j] += s;
                    } else {
                        layer.bias[j - n_w] += s;
                    }
                    loss(&p, &x)
                };
                let num = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max(rel(analytic[idx], num));
                idx += 1;
            }
        }
        for j in 0..input {
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let num = (loss(&params, &a) - loss(&params, &b)) / (2.0 * h);
            worst = worst.max(rel(grads.input[j], num));
        }
    }
    Outcome {
        pass: worst < 1e-5,
        detail: format!("max relative error {worst:.2e} over 100 cases (limit 1e-5)"),
    }
}

/// Gradient of `Σ_n CE(W z̃_n, y_n) + γ/2 ‖w‖²`, weights row-major then biases.
fn regularized_gradient(f: &Matrix, y: &[usize], w: &[f64], k: usize, gamma: f64) -> Vec<f64> {
    let d = f.cols();
    let mut g: Vec<f64> = w.iter().map(|v| gamma * v).collect();
    for (n, &yn) in y.iter().enumerate() {
        let z = f.row(n);
        let logits: Vec<f64> = (0..k)
            .map(|c| (0..d).map(|u| w[c * d + u] * z[u]).sum::<f64>() + w[d * k + c])
            .collect();
        let p = softmax(&logits);
        for c in 0..k {
            let e = p[c] - (yn == c) as u8 as f64;
            for u in 0..d {
                g[c * d + u] += e * z[u];
            }
            g[d * k + c] += e;
        }
    }
    g
}

fn laplace() -> Outcome {
    let mut rng = RngStream::new(2, 0);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut problems = 0;
    while problems < 30 {
        let d = 1 + rng.index(5);
        let k = 2 + rng.index(3);
        let p = (d + 1) * k;
        if p > 20 {
            continue;
        }
        problems += 1;
        let n = 3 + rng.index(30);
        let f = Matrix::from_fn(n, d, |_, _| 1.5 * rng.standard_normal());
        let y: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
        let w = rng.normal_vec(p);
        let gamma = 0.1 + 2.0 * rng.uniform();
        let analytic = ggn_precision(&f, &w, gamma);
        let mut numeric = Matrix::zeros(p, p);
        for j in 0..p {
            let mut a = w.clone();
            let mut b = w.clone();
            a[j] += h;
            b[j] -= h;
            let ga = regularized_gradient(&f, &y, &a, k, gamma);
            let gb = regularized_gradient(&f, &y, &b, k, gamma);
            for i in 0..p {
                numeric[(i, j)] = (ga[i] - gb[i]) / (2.0 * h);
            }
        }
        let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(analytic.max_abs_diff(&numeric) / scale);
    }
    Outcome {
        pass: worst < 1e-6,
        detail: format!(
            "max relative Hessian error {worst:.2e} over 30 problems, p <= 20 (limit 1e-6)"
        ),
    }
}

fn numeric_log_abs_det(flow: &FlowStack, x: &[f64]) -> f64 {
    let p = x.len();
    let h = 1e-6;
    let mut j = Matrix::zeros(p, p);
    for c in 0..p {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[c] += h;
        b[c] -= h;
        let ya = flow.forward(&a).unwrap().0;
        let yb = flow.forward(&b).unwrap().0;
        for r in 0..p {
            j[(r, c)] = (ya[r] - yb[r]) / (2.0 * h);
        }
    }
    let jtj = j.transpose().matmul(&j).unwrap();
    0.5 * cholesky(&jtj).unwrap().log_det()
}

fn flow() -> Outcome {
    let mut rng = RngStream::new(3, 0);
    let (mut trip, mut logdet) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let p = 1 + rng.index(16);
        let l = 1 + rng.index(10);
        let layers = (0..l)
            .map(|_| RadialLayer {
                x0: (0..p).map(|_| rng.uniform_range(-3.0, 3.0)).collect(),
                alpha_raw: rng.uniform_range(-4.0, 4.0),
                beta_raw: rng.uniform_range(-6.0, 6.0),
            })
            .collect();
        let stack = FlowStack::new(layers).unwrap();
        let y: Vec<f64> = (0..p).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let x = stack.inverse(&y).unwrap();
        let (back, ld) = stack.forward(&x).unwrap();
        for (a, b) in back.iter().zip(&y) {
            trip = trip.max((a - b).abs());
        }
        logdet = logdet.max((ld - numeric_log_abs_det(&stack, &x)).abs());
    }
    Outcome {
        pass: trip < 1e-8 && logdet < 1e-5,
        detail: format!(
            "round trip {trip:.2e} (limit 1e-8), log-det error {logdet:.2e} (limit 1e-5) over 50 stacks"
        ),
    }
}

fn aggregation() -> Outcome {
    let a = GaussianPosterior::isotropic(vec![0.0], 1.0).unwrap();
    let b = GaussianPosterior::isotropic(vec![2.0], 1.0).unwrap();
    let g = aggregate_gaussians(&[&a, &b], &[0.5, 0.5]).unwrap();
    let hand = g.mean() == [1.0] && g.covariance()[(0, 0)] == 2.0;

    let mut rng = RngStream::new(4, 0);
    let p = 5;
    let weights = [0.2, 0.3, 0.5];
    let comps: Vec<GaussianPosterior> = (0..3)
        .map(|_| {
            let mean: Vec<f64> = (0..p).map(|_| 2.0 + 3.0 * rng.standard_normal()).collect();
            let m = Matrix::from_fn(p, p, |_, _| rng.standard_normal());
            let mut cov = m.matmul(&m.transpose()).unwrap();
            cov.add_diagonal_assign(0.5);
            GaussianPosterior::from_covariance(mean, cov).unwrap()
        })
        .collect();
    let refs: Vec<&GaussianPosterior> = comps.iter().collect();
    let agg = aggregate_gaussians(&refs, &weights).unwrap();

    let draws = 1_000_000;
    let mut sum = vec![0.0; p];
    let mut outer = Matrix::zeros(p, p);
    for _ in 0..draws {
        let u = rng.uniform();
        let c = if u < 0.2 {
            0
        } else if u < 0.5 {
            1
        } else {
            2
        };
        let x = comps[c].sample(&mut rng);
        sum.iter_mut().zip(&x).for_each(|(s, v)| *s += v);
        outer.add_outer_assign(1.0, &x, &x).unwrap();
    }
    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut cov = outer.scaled(1.0 / n);
    cov.add_outer_assign(-1.0, &mean, &mean).unwrap();
    let diff: Vec<f64> = mean.iter().zip(agg.mean()).map(|(a, b)| a - b).collect();
    let mean_err = pfedpf::numerics::norm(&diff) / pfedpf::numerics::norm(agg.mean());
    let cov_err =
        cov.sub(agg.covariance()).unwrap().frobenius_norm() / agg.covariance().frobenius_norm();
    Outcome {
        pass: hand && mean_err < 1e-2 && cov_err < 1e-2,
        detail: format!(
            "1-D example exact: {hand}; 5-D relative error mean {mean_err:.2e}, covariance {cov_err:.2e} (limit 1e-2, 1e6 draws)"
        ),
    }
}

fn simpson<F: Fn(f64) -> f64>(lo: f64, hi: f64, n: usize, f: F) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

fn reverse_kl() -> Outcome {
    let base = GaussianPosterior::isotropic(vec![0.0], 1.0).unwrap();
    let target = GaussianPosterior::isotropic(vec![2.0], 1.0).unwrap();
    let kl = |flow: &FlowStack| {
        simpson(-25.0, 25.0, 20_000, |y| {
            let lp = flow.pushforward_log_density(&base, &[y]).unwrap();
            if lp < -700.0 {
                0.0
            } else {
                lp.exp() * (lp - target.log_density(&[y]))
            }
        })
    };
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let cfg = FineTuneConfig {
            flow_length: 10,
            steps: 500,
            ..FineTuneConfig::default()
        };
        let mut rng = RngStream::new(seed, 7);
        let init = FlowStack::init_from_base(&base, cfg.flow_length, &mut rng.clone());
        let before = kl(&init);
        let out = fine_tune(&base, &target, &cfg, &mut rng).unwrap();
        let after = kl(&out.flow);
        let mut srng = RngStream::new(seed, 8);
        let draws = 20_000;
        let mean = (0..draws)
            .map(|_| out.flow.forward(&base.sample(&mut srng)).unwrap().0[0])
            .sum::<f64>()
            / draws as f64;
        let reduction = 1.0 - after / before;
        if reduction >= 0.8 && (1.8..=2.2).contains(&mean) {
            ok += 1;
        }
        parts.push(format!("{reduction:.3}/{mean:.3}"));
    }
    Outcome {
        pass: ok == 5,
        detail: format!(
            "{ok}/5 seeds with KL reduction >= 0.8 and mean in [1.8, 2.2] (reduction/mean: {})",
            parts.join(", ")
        ),
    }
}

fn brute_force(id: &[f64], ood: &[f64]) -> (f64, f64, f64) {
    let (n_id, n_ood) = (id.len(), ood.len());
    let mut pairs = 0u64;
    for &o in ood {
        for &i in id {
            pairs += if o > i {
                2
            } else if o == i {
                1
            } else {
                0
            };
        }
    }
    let auroc = pairs as f64 / (2 * n_id * n_ood) as f64;
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut aupr, mut prev_tp, mut fpr95) = (0.0, 0, 1.0f64);
    for t in thresholds {
        let tp = ood.iter().filter(|&&s| s >= t).count();
        let fp = id.iter().filter(|&&s| s >= t).count();
        if tp > prev_tp {
            aupr += (tp - prev_tp) as f64 / n_ood as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
        if tp as f64 / n_ood as f64 >= 0.95 {
            fpr95 = fpr95.min(fp as f64 / n_id as f64);
        }
    }
    (auroc, aupr, fpr95)
}

fn ece_hand_cases() -> bool {
    let batch = |rows: &[Vec<f64>], labels: Vec<usize>| {
        PredictionBatch::new(Matrix::from_rows(rows), labels, None).unwrap()
    };
    let perfect = batch(
        &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]],
        vec![0, 2],
    );
    let half = batch(
        &[vec![0.75, 0.25, 0.0, 0.0], vec![0.75, 0.25, 0.0, 0.0]],
        vec![0, 1],
    );
    let mixed = batch(
        &[vec![0.25, 0.25, 0.5, 0.0], vec![1.0, 0.0, 0.0, 0.0]],
        vec![2, 1],
    );
    ece(&perfect, 15) == 0.0 && ece(&half, 4) == 0.25 && ece(&mixed, 2) == 0.75
}

fn metrics() -> Outcome {
    let mut rng = RngStream::new(5, 0);
    let mut mismatches = 0;
    let fixtures = 500;
    for f in 0..fixtures {
        let n_id = 1 + rng.index(100);
        let n_ood = 1 + rng.index(100);
        // Few distinct levels so ties are common.
        let levels = 1 + rng.index(if f % 2 == 0 { 5 } else { 1000 });
        let mut draw = |n: usize, shift: usize| -> Vec<f64> {
            (0..n)
                .map(|_| ((rng.index(levels) + shift) as f64) * 0.1)
                .collect()
        };
        let id = draw(n_id, 0);
        let ood = draw(n_ood, f % 3);
        let s = ScoreSet::new(id.clone(), ood.clone(), Orientation::HigherIsOod).unwrap();
        let (a, p, r) = brute_force(&id, &ood);
        if auroc(&s) != a || aupr(&s) != p || fpr_at_95_tpr(&s) != r {
            mismatches += 1;
        }
    }
    let hand = ece_hand_cases();
    Outcome {
        pass: mismatches == 0 && hand,
        detail: format!(
            "{mismatches}/{fixtures} fixtures differ from brute force (n <= 200, ties); ECE hand cases exact: {hand}"
        ),
    }
}

fn asymptotic() -> Outcome {
    let report = run_probe(&config("probe.json")).expect("probe runs");
    let mut failures = Vec::new();
    let mut worst_map = 1.0f64;
    let (mut lap_margin, mut flow_margin) = (f64::INFINITY, f64::INFINITY);
    for d in &report.directions {
        let r = &d.report;
        let i = r
            .deltas
            .iter()
            .position(|&x| x == 1e4)
            .expect("probe includes 1e4");
        let map = r.map_confidence[i];
        let lap = r.laplace_confidence[i];
        let flow = r.flow_confidence.as_ref().expect("flow column")[i];
        let flow_cap = r.flow_cap.expect("flow cap");
        worst_map = worst_map.min(map);
        lap_margin = lap_margin.min(r.cap + 0.02 - lap);
        flow_margin = flow_margin.min(flow_cap + 0.02 - flow);
        if map < 0.999 || lap > r.cap + 0.02 || flow > flow_cap + 0.02 {
            failures.push(d.direction);
        }
    }
    Outcome {
        pass: failures.is_empty() && report.directions.len() == 20,
        detail: format!(
            "{} directions, failing {failures:?}; min MAP confidence {worst_map:.4}, min slack to cap+0.02: Laplace {lap_margin:.4}, flow {flow_margin:.4}",
            report.directions.len()
        ),
    }
}

fn trends() -> Outcome {
    let desk = config("desk.json");
    let mut lines = Vec::new();
    let mut ece_ok = true;
    let mut fedavg_auroc = (0.0, 0.0);
    for base in [
        BaseAlgorithm::FedAvg,
        BaseAlgorithm::FedPer,
        BaseAlgorithm::LgFedAvg,
    ] {
        let mut wins = 0;
        for &seed in &desk.seeds {
            let run = |pf: bool| {
                let mut cfg = desk.clone();
                cfg.variant = AlgorithmVariant {
                    base,
                    posterior_fine_tune: pf,
                };
                run_seed(&cfg, seed).expect("desk run").evaluation
            };
            let plain = run(false);
            let tuned = run(true);
            if tuned.primary().ece < plain.primary().ece {
                wins += 1;
            }
            if base == BaseAlgorithm::FedAvg {
                let n = desk.seeds.len() as f64;
                fedavg_auroc.0 += plain.primary_detection("noise").unwrap().auroc / n;
                fedavg_auroc.1 += tuned.primary_detection("noise").unwrap().auroc / n;
            }
        }
        ece_ok &= 3 * wins >= 2 * desk.seeds.len();
        lines.push(format!(
            "{base:?}: pf ECE lower in {wins}/{}",
            desk.seeds.len()
        ));
    }
    let auroc_gain = fedavg_auroc.1 - fedavg_auroc.0;

    let mut ablate = desk.clone();
    ablate.ablation.flow_lengths = vec![1, 10];
    let ab = run_ablation(&ablate).expect("ablation runs");
    let (l1, l10) = (
        ab.mean(1, |r| r.auroc).unwrap(),
        ab.mean(10, |r| r.auroc).unwrap(),
    );
    let parts = [ece_ok, auroc_gain >= 0.2, l10 >= l1];
    Outcome {
        pass: parts.iter().all(|&p| p),
        detail: format!(
            "(a) {} [{}]; (b) NOISE AUROC {:.4} -> {:.4}, gain {auroc_gain:.4} [{}]; (c) ablation AUROC L=1 {l1:.4}, L=10 {l10:.4} [{}]",
            lines.join(", "),
            verdict(parts[0]),
            fedavg_auroc.0,
            fedavg_auroc.1,
            verdict(parts[1]),
            verdict(parts[2]),
        ),
    }
}

fn determinism() -> Outcome {
    let mut cfg = config("desk.json");
    cfg.seeds = vec![0];
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, workers) in dirs.iter().zip([1, 3]) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap();
        pool.install(|| {
            let (report, runs, timing) = run_experiment(&cfg).expect("desk run");
            write_run_artifacts(dir.path(), &cfg, &report, &runs, &timing).unwrap();
        });
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("report.json")).unwrap();
    let same = read(&dirs[0]) == read(&dirs[1]);
    Outcome {
        pass: same,
        detail: format!("report.json byte-identical with 1 and 3 workers: {same}"),
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "not met"
    }
}

/// Name, time budget in seconds, check.
type Criterion = (&'static str, f64, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient exactness", 5.0, gradient),
        ("laplace oracle", 10.0, laplace),
        ("flow exactness", 10.0, flow),
        ("aggregation oracle", 30.0, aggregation),
        ("reverse-kl convergence", 60.0, reverse_kl),
        ("metric oracles", 5.0, metrics),
        ("asymptotic regime", 60.0, asymptotic),
        ("trend reproduction", 600.0, trends),
        ("determinism", 120.0, determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let pass = outcome.pass && secs < budget;
        failed += !pass as usize;
        println!(
            "{} {name}: {}; {secs:.1} s (limit {budget} s)",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
