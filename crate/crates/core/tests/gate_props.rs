mod common;

use est_lora::energy::{energy_report, topk_abs_sum, topk_count, EnergyMethod};
use est_lora::gate::{build_plan, plan_with};
use est_lora::{onset_step, plan, plan_baseline, stats, GateConfig, Onset, Parallelism, Selector};
use proptest::prelude::*;

fn config(alpha: f64, d: f64, steps: usize) -> GateConfig {
    GateConfig {
        alpha,
        d_score: d,
        steps,
        ..GateConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn columns_flip_once_and_style_fraction_grows(
        seed in any::<u64>(),
        layers in 1usize..40,
        alpha in 1e-3f64..5.0,
        d in 0.0f64..=1.0,
        steps in 1usize..80,
    ) {
        let mut rng = common::rng(seed);
        let pair = common::placeholder_pair(layers);
        let report = common::report_from(&pair, &common::random_energies(&mut rng, layers));
        let s = plan(&pair, &report, &config(alpha, d, steps)).unwrap();
        for j in 0..layers {
            prop_assert!(common::is_flip_once(&s.column(j)));
        }
        let st = stats(&s);
        prop_assert!(st.per_step_style_fraction.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&st.overall_style_fraction));
        prop_assert!(s.gamma_trace.windows(2).all(|w| w[0] < w[1]) || steps == 1);
    }

    #[test]
    fn onset_matches_scanned_column(
        seed in any::<u64>(),
        alpha in 0.0f64..5.0,
        d in 0.0f64..=1.0,
        steps in 1usize..120,
    ) {
        let mut rng = common::rng(seed);
        let pair = common::placeholder_pair(16);
        let energies = common::random_energies(&mut rng, 16);
        let cfg = config(alpha, d, steps);
        let s = plan(&pair, &common::report_from(&pair, &energies), &cfg).unwrap();
        let st = stats(&s);
        for (j, (key, &(ec, es))) in pair.ordered_keys().iter().zip(&energies).enumerate() {
            let scanned = s.column(j).iter().position(|&v| v == 1).map_or(Onset::Never, Onset::Step);
            prop_assert_eq!(onset_step(ec, es, &cfg), scanned);
            prop_assert_eq!(st.per_layer_onset[key], scanned);
        }
    }

    #[test]
    fn lower_similarity_never_delays_style(
        seed in any::<u64>(),
        alpha in 0.0f64..4.0,
        d1 in 0.0f64..=1.0,
        d2 in 0.0f64..=1.0,
        steps in 1usize..60,
    ) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let mut rng = common::rng(seed);
        let pair = common::placeholder_pair(24);
        let report = common::report_from(&pair, &common::random_energies(&mut rng, 24));
        let a = plan(&pair, &report, &config(alpha, lo, steps)).unwrap();
        let b = plan(&pair, &report, &config(alpha, hi, steps)).unwrap();
        for (ra, rb) in a.choices.iter().zip(&b.choices) {
            for (&x, &y) in ra.iter().zip(rb) {
                prop_assert!(!(y == 1 && x != 1));
            }
        }
    }
}

#[test]
fn execution_mode_does_not_change_output() {
    let mut rng = common::rng(21);
    let pair = common::random_pair(&mut rng, 64, 24, 4);
    let seq = energy_report(&pair, EnergyMethod::Gram).unwrap();
    let cfg = config(1.5, 0.3, 50);
    let a = plan_with(&pair, &seq, &cfg, Parallelism::Sequential).unwrap();
    let b = plan_with(&pair, &seq, &cfg, Parallelism::Rayon).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let c = pool.install(|| plan_with(&pair, &seq, &cfg, Parallelism::Rayon).unwrap());
    assert_eq!(a.to_json().unwrap(), c.to_json().unwrap());
}

#[test]
fn scaling_both_adapters_keeps_choices() {
    let mut rng = common::rng(22);
    let pair = common::random_pair(&mut rng, 40, 16, 4);
    let cfg = config(1.5, 0.4, 50);
    let base = plan(&pair, &energy_report(&pair, EnergyMethod::Gram).unwrap(), &cfg).unwrap();
    for c in [1e-3, 0.37, 7.0, 999.0] {
        let scaled = est_lora::align(
            pair.content().scaled_updates(c).unwrap(),
            pair.style().scaled_updates(c).unwrap(),
        )
        .unwrap();
        let s = plan(&scaled, &energy_report(&scaled, EnergyMethod::Gram).unwrap(), &cfg).unwrap();
        assert_eq!(s.to_csv().unwrap(), base.to_csv().unwrap());
        assert_eq!(s.gamma_trace, base.gamma_trace);
    }
}

#[test]
fn klora_like_is_est_over_topk_importances_without_prior() {
    let mut rng = common::rng(23);
    let pair = common::random_pair(&mut rng, 30, 12, 3);
    let report = energy_report(&pair, EnergyMethod::Gram).unwrap();
    let mut cfg = config(1.5, 0.2, 20);
    cfg.k_fraction = 0.25;

    // Oracle: compute Top-K importances independently and run them through est with D = 1.
    let importances: Vec<(f64, f64)> = pair
        .layer_pairs()
        .map(|(_, c, s)| {
            let k = topk_count(c.update_shape(), 0.25);
            (topk_abs_sum(c, k).unwrap(), topk_abs_sum(s, k).unwrap())
        })
        .collect();
    let est_over_topk = plan(&pair, &common::report_from(&pair, &importances), &config(1.5, 1.0, 20)).unwrap();

    cfg.selector = Selector::KloraLike;
    let klora = plan_baseline(&pair, &report, &cfg).unwrap();
    assert_eq!(klora.schedule().unwrap().choices, est_over_topk.choices);

    // style_time keeps the prior.
    cfg.selector = Selector::StyleTime;
    let st = plan_baseline(&pair, &report, &cfg).unwrap();
    let est_prior = plan(&pair, &common::report_from(&pair, &importances), &config(1.5, 0.2, 20)).unwrap();
    assert_eq!(st.schedule().unwrap().choices, est_prior.choices);
}

#[test]
fn rank_one_layers_where_metrics_agree() {
    // ΔW = s · u vᵀ with ±1 entries: |ΔW| sums to s·m·n and energy to s²·m·n, so
    // with content scale a and style scale b the Top-K ratio is a/b and the energy
    // ratio (a/b)². Choosing a/b ∈ {0, 1} makes both orderings coincide.
    use est_lora::{align, LoraAdapter, LoraLayer, Matrix, Role};
    let sign_layer = |key: &str, s: f64| {
        let down = Matrix::new(1, 4, vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let up = Matrix::new(3, 1, vec![s, -s, s]).unwrap();
        LoraLayer::from_factors(key, down, up, None).unwrap()
    };
    let c = LoraAdapter::new([sign_layer("a", 1.0), sign_layer("b", 0.0)], Role::Content);
    let s = LoraAdapter::new([sign_layer("a", 1.0), sign_layer("b", 1.0)], Role::Style);
    let pair = align(c, s).unwrap();
    let report = energy_report(&pair, EnergyMethod::Gram).unwrap();
    let mut cfg = config(1.0, 1.0, 6);
    cfg.k_fraction = 1.0;
    let est = plan(&pair, &report, &cfg).unwrap();
    cfg.selector = Selector::KloraLike;
    let klora = build_plan(&pair, &report, &cfg, Parallelism::default()).unwrap();
    assert_eq!(klora.schedule().unwrap().choices, est.choices);
}
