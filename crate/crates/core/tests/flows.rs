use pfedpf::flows::FlowPosterior;
use pfedpf::flows::{fine_tune, FineTuneConfig, FlowStack, LogDensity, RadialLayer};
use pfedpf::laplace::mc_predict_batch;
use pfedpf::laplace::GaussianPosterior;
use pfedpf::numerics::{cholesky, norm, Matrix, RngStream};
use proptest::prelude::*;

fn quadrature<F: Fn(f64) -> f64>(lo: f64, hi: f64, n: usize, f: F) -> f64 {
    // Composite Simpson on n (even) intervals.
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

fn kl_to_target(flow: &FlowStack, base: &GaussianPosterior, target: &GaussianPosterior) -> f64 {
    quadrature(-25.0, 25.0, 20_000, |y| {
        let lp = flow.pushforward_log_density(base, &[y]).unwrap();
        if lp < -700.0 {
            return 0.0;
        }
        lp.exp() * (lp - target.log_density(&[y]))
    })
}

#[test]
fn reverse_kl_moves_unit_gaussian_to_shifted_target() {
    let base = GaussianPosterior::isotropic(vec![0.0], 1.0).unwrap();
    let target = GaussianPosterior::isotropic(vec![2.0], 1.0).unwrap();
    let initial = kl_to_target(&FlowStack::default(), &base, &target);
    assert!((initial - 2.0).abs() < 1e-6, "{initial}");
    for seed in 0..5 {
        let mut rng = RngStream::new(seed, 7);
        let out = fine_tune(&base, &target, &FineTuneConfig::default(), &mut rng).unwrap();
        let kl = kl_to_target(&out.flow, &base, &target);
        let mut srng = RngStream::new(seed, 8);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| out.flow.forward(&base.sample(&mut srng)).unwrap().0[0])
            .sum::<f64>()
            / n as f64;
        println!("seed {seed}: KL {initial:.4} -> {kl:.4}, pushforward mean {mean:.4}");
        assert!(kl <= 0.2 * initial, "seed {seed}: KL {kl}");
        assert!((1.8..=2.2).contains(&mean), "seed {seed}: mean {mean}");

        let head: Vec<f64> = out.losses[..50].to_vec();
        let tail: Vec<f64> = out.losses[out.losses.len() - 50..].to_vec();
        assert!(median(tail) < median(head));
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn layer_strategy(p: usize) -> impl Strategy<Value = RadialLayer> {
    (
        prop::collection::vec(-3.0f64..3.0, p),
        -4.0f64..4.0,
        -6.0f64..6.0,
    )
        .prop_map(|(x0, alpha_raw, beta_raw)| RadialLayer {
            x0,
            alpha_raw,
            beta_raw,
        })
}

fn stack_strategy(max_p: usize, max_l: usize) -> impl Strategy<Value = (FlowStack, Vec<f64>)> {
    (1..=max_p).prop_flat_map(move |p| {
        (
            prop::collection::vec(layer_strategy(p), 0..=max_l),
            prop::collection::vec(-5.0f64..5.0, p),
        )
            .prop_map(|(layers, x)| (FlowStack::new(layers).unwrap(), x))
    })
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_exact_for_any_raw_parameters((flow, y) in stack_strategy(16, 10)) {
        let x = flow.inverse(&y).unwrap();
        let back = flow.forward(&x).unwrap().0;
        for (a, b) in back.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn log_det_matches_numeric_jacobian((flow, x) in stack_strategy(6, 4)) {
        let (_, ld) = flow.forward(&x).unwrap();
        let num = numeric_log_abs_det(&flow, &x);
        prop_assert!((ld - num).abs() < 1e-5, "{ld} vs {num}");
    }

    #[test]
    fn two_layer_log_det_is_sum_at_chained_points(
        (l1, l2, x) in (1usize..6).prop_flat_map(|p| (
            layer_strategy(p), layer_strategy(p), prop::collection::vec(-4.0f64..4.0, p)))
    ) {
        let (mid, ld1) = l1.forward(&x);
        let (_, ld2) = l2.forward(&mid);
        let stack = FlowStack::new(vec![l1, l2]).unwrap();
        let (_, total) = stack.forward(&x).unwrap();
        prop_assert!((total - (ld1 + ld2)).abs() < 1e-12);
        prop_assert!((total - numeric_log_abs_det(&stack, &x)).abs() < 1e-5);
    }

    #[test]
    fn inverse_moves_projection_by_at_most_abs_beta(
        (flow, x) in stack_strategy(8, 5),
        seed in 0u64..1000,
    ) {
        let u = RngStream::new(seed, 0).normal_vec(x.len());
        let back = flow.inverse(&x).unwrap();
        let lhs: f64 = u.iter().zip(&back).map(|(a, b)| a * b).sum();
        let ux: f64 = u.iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!(lhs <= ux + flow.total_abs_beta() * norm(&u) + 1e-9);
    }
}

#[test]
fn identity_stack_density_equals_base() {
    let cov = Matrix::from_rows(&[vec![1.5, 0.2], vec![0.2, 0.7]]);
    let base = GaussianPosterior::from_covariance(vec![0.1, 0.4], cov).unwrap();
    let mut rng = RngStream::new(2, 2);
    let flow = FlowStack::new(
        (0..4)
            .map(|_| RadialLayer::identity(base.sample(&mut rng)))
            .collect(),
    )
    .unwrap();
    for _ in 0..20 {
        let phi = rng.normal_vec(2);
        assert_eq!(
            flow.pushforward_log_density(&base, &phi).unwrap(),
            base.log_density(&phi)
        );
        assert_eq!(
            FlowStack::default()
                .pushforward_log_density(&base, &phi)
                .unwrap(),
            base.log_density(&phi)
        );
    }
}

fn trained_1d_flow() -> (GaussianPosterior, FlowStack) {
    let base = GaussianPosterior::isotropic(vec![0.5], 0.8).unwrap();
    let target = GaussianPosterior::isotropic(vec![-1.0], 0.3).unwrap();
    let cfg = FineTuneConfig {
        steps: 200,
        ..FineTuneConfig::default()
    };
    let out = fine_tune(&base, &target, &cfg, &mut RngStream::new(4, 4)).unwrap();
    (base, out.flow)
}

#[test]
fn pushforward_density_integrates_to_one() {
    let (base, flow) = trained_1d_flow();
    let mass = quadrature(-30.0, 30.0, 20_000, |y| {
        flow.pushforward_log_density(&base, &[y]).unwrap().exp()
    });
    assert!((mass - 1.0).abs() < 0.01, "{mass}");
}

#[test]
fn pushforward_samples_match_density_histogram() {
    let (base, flow) = trained_1d_flow();
    let mut rng = RngStream::new(5, 5);
    let n = 100_000;
    let (lo, hi, bins) = (-4.0, 2.0, 30);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        let y = flow.forward(&base.sample(&mut rng)).unwrap().0[0];
        if y >= lo && y < hi {
            counts[((y - lo) / width) as usize] += 1;
        }
    }
    for (b, &c) in counts.iter().enumerate() {
        let a = lo + b as f64 * width;
        let expected = quadrature(a, a + width, 200, |y| {
            flow.pushforward_log_density(&base, &[y]).unwrap().exp()
        });
        let observed = c as f64 / n as f64;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(
            (observed - expected).abs() < 5.0 * se + 1e-4,
            "bin {b}: {observed} vs {expected}"
        );
    }
}

#[test]
fn identity_flow_prediction_is_bit_identical_to_base() {
    let base = GaussianPosterior::isotropic(vec![0.3, -0.2, 0.1, 0.5, 0.0, -0.4], 0.5).unwrap();
    let mut rng = RngStream::new(6, 6);
    let flow = FlowStack::new(
        (0..10)
            .map(|_| RadialLayer::identity(base.sample(&mut rng)))
            .collect(),
    )
    .unwrap();
    let feats = Matrix::from_fn(7, 2, |r, c| (r as f64 - 3.0) * (c as f64 + 0.5));
    let stream = RngStream::new(7, 0);
    let a = mc_predict_batch(&base, &feats, 64, &mut stream.clone()).unwrap();
    let pushed = FlowPosterior {
        base: &base,
        flow: &flow,
    };
    let b = mc_predict_batch(&pushed, &feats, 64, &mut stream.clone()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn flow_gradient_target_interface_for_gaussian() {
    let base = GaussianPosterior::isotropic(vec![1.0, 2.0], 2.0).unwrap();
    let (v, g) = base.log_density_and_grad(&[1.0, 2.0]);
    assert_eq!(g, vec![0.0, 0.0]);
    assert!((v - base.log_density(&[1.0, 2.0])).abs() == 0.0);
}
