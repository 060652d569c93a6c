mod common;

use est_lora::energy::{energy_report, EnergyMethod};
use est_lora::export::{bake_all, heatmap_pgm, parse_heatmap, MANIFEST_NAME};
use est_lora::gate::SelectionSchedule;
use est_lora::{bake, plan, stats, BakeManifest, GateConfig, LoraAdapter, Role};
use proptest::prelude::*;
use rand::Rng;

fn random_schedule(rng: &mut rand_chacha::ChaCha8Rng, keys: &[String], steps: usize) -> SelectionSchedule {
    SelectionSchedule {
        steps,
        ordered_keys: keys.to_vec(),
        choices: (0..steps).map(|_| keys.iter().map(|_| rng.gen_range(1..=2)).collect()).collect(),
        gamma_trace: vec![0.0; steps],
        config: GateConfig {
            steps,
            ..GateConfig::default()
        },
        energy_digest: String::new(),
    }
}

#[test]
fn baked_layers_come_from_the_scheduled_adapter() {
    let mut rng = common::rng(31);
    let pair = common::sdxl_shaped_pair(&mut rng, 20, 4);
    let s = random_schedule(&mut rng, pair.ordered_keys(), 6);
    for step in 0..s.steps {
        let baked = bake(&pair, &s, step).unwrap();
        let reread = LoraAdapter::from_bytes(&baked.to_bytes().unwrap(), Role::Baked).unwrap();
        for (j, (key, content, style)) in pair.layer_pairs().enumerate() {
            let source = if s.choices[step][j] == 2 { content } else { style };
            let got: Vec<_> = reread.layers[key].records().cloned().collect();
            let want: Vec<_> = source.records().cloned().collect();
            assert_eq!(got, want, "step {step} layer {key}");
        }
    }
}

#[test]
fn constant_rows_reproduce_an_input_adapter() {
    let mut rng = common::rng(32);
    let pair = common::sdxl_shaped_pair(&mut rng, 8, 2);
    let mut s = random_schedule(&mut rng, pair.ordered_keys(), 2);
    s.choices = vec![vec![2; 8], vec![1; 8]];
    assert_eq!(bake(&pair, &s, 0).unwrap().layers, pair.content().layers);
    assert_eq!(bake(&pair, &s, 1).unwrap().layers, pair.style().layers);
}

#[test]
fn bake_all_is_deterministic() {
    let mut rng = common::rng(33);
    let pair = common::sdxl_shaped_pair(&mut rng, 10, 2);
    let report = energy_report(&pair, EnergyMethod::Gram).unwrap();
    let s = plan(&pair, &report, &GateConfig { steps: 4, d_score: 0.4, ..GateConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = bake_all(&pair, &s, &a, false).unwrap();
    let mb = bake_all(&pair, &s, &b, false).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.files.len(), 4);
    for f in &ma.files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let manifest: BakeManifest = serde_json::from_slice(&std::fs::read(a.join(MANIFEST_NAME)).unwrap()).unwrap();
    assert_eq!(manifest, ma);
    assert_eq!(manifest.schedule_digest, s.digest().unwrap());
}

#[test]
fn bake_rejects_foreign_schedule() {
    let mut rng = common::rng(34);
    let pair = common::sdxl_shaped_pair(&mut rng, 4, 2);
    let s = random_schedule(&mut rng, &["x".to_string()], 2);
    assert!(bake(&pair, &s, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heatmap_round_trip_and_stats(seed in any::<u64>(), layers in 1usize..30, steps in 1usize..30) {
        let mut rng = common::rng(seed);
        let keys: Vec<String> = (0..layers).map(common::layer_key).collect();
        let s = random_schedule(&mut rng, &keys, steps);
        let pgm = heatmap_pgm(&s);
        prop_assert_eq!(parse_heatmap(&pgm).unwrap(), s.choices.clone());

        let st = stats(&s);
        let ones = s.choices.iter().flatten().filter(|&&v| v == 1).count() as f64;
        prop_assert!((st.overall_style_fraction - ones / (layers * steps) as f64).abs() < 1e-12);
        let mean = st.per_step_style_fraction.iter().sum::<f64>() / steps as f64;
        prop_assert_eq!(st.overall_style_fraction, mean);
        prop_assert!(st.per_step_style_fraction.iter().all(|f| (0.0..=1.0).contains(f)));
    }
}
