use proptest::prelude::*;
use serde_json::json;
use spde_lab::coefficients::Preset;
use spde_lab::config::{apply_env_overrides, json_diff, RunConfig};
use spde_lab::girsanov::{girsanov_weight, recompute_log_weight};
use spde_lab::mild::simulate_mild;
use spde_lab::{Module, SpectralOperator, StreamKey};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_scheme_contracts_differences_exactly(
        seed in any::<u64>(),
        x in prop::collection::vec(-1.0f64..1.0, 4),
        shift in prop::collection::vec(-0.5f64..0.5, 4),
    ) {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Baseline.build(4).unwrap();
        let key = StreamKey::new(seed, Module::Mild, 0);
        let y: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let (dt, horizon) = (1.0 / 64.0, 0.25);
        let px = simulate_mild(&op, &set, &x, horizon, dt, &key, 3).unwrap();
        let py = simulate_mild(&op, &set, &y, horizon, dt, &key, 3).unwrap();
        for (k, (a, b)) in px.states.iter().zip(&py.states).enumerate() {
            for n in 0..4 {
                let want = (-op.eigenvalue(n) * dt).exp().powi(k as i32) * shift[n];
                prop_assert!((b[n] - a[n] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn girsanov_weight_is_trivial_without_drift(seed in any::<u64>(), path in 0u64..64) {
        let op = SpectralOperator::dirichlet(3).unwrap();
        let set = Preset::Baseline.build(3).unwrap();
        let key = StreamKey::new(seed, Module::Girsanov, 0);
        let x = [0.1, -0.2, 0.05];
        let w = girsanov_weight(&op, &set, &x, 0.125, 1.0 / 64.0, &key, path).unwrap();
        prop_assert_eq!(w.log_weight, 0.0);
        let direct = simulate_mild(&op, &set, &x, 0.125, 1.0 / 64.0, &key, path).unwrap();
        prop_assert_eq!(&w.path.states, &direct.states);
    }

    #[test]
    fn girsanov_weight_is_recomputable_from_its_path(seed in any::<u64>(), path in 0u64..64) {
        let op = SpectralOperator::dirichlet(3).unwrap();
        let set = Preset::Dini.build(3).unwrap();
        let key = StreamKey::new(seed, Module::Girsanov, 1);
        let w = girsanov_weight(&op, &set, &[0.2, 0.0, -0.1], 0.125, 1.0 / 64.0, &key, path).unwrap();
        let again = recompute_log_weight(&set, &w.path).unwrap();
        prop_assert!((again - w.log_weight).abs() <= 1e-12 * (1.0 + w.log_weight.abs()));
    }

    #[test]
    fn env_overrides_are_reported_by_the_diff(paths in 2usize..100_000, dim in 1usize..16) {
        let base = serde_json::to_value(RunConfig::default()).unwrap();
        let mut edited = base.clone();
        let env = vec![
            ("SPDE_LAB__experiment__paths".to_string(), paths.to_string()),
            ("SPDE_LAB__operator__dim".to_string(), dim.to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        apply_env_overrides(&mut edited, env).unwrap();
        prop_assert_eq!(&edited["experiment"]["paths"], &json!(paths));
        let diff = json_diff(&base, &edited);
        let default = RunConfig::default();
        let expected = usize::from(paths != default.experiment.paths) + usize::from(dim != default.operator.dim);
        prop_assert_eq!(diff.len(), expected);
        prop_assert!(json_diff(&edited, &edited).is_empty());
    }
}
