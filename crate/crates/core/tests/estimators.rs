use std::sync::Arc;

use fnpeg_core::atmos::{
    prediction_grid, to_pseudodensity, AtmosphereProfile, ExponentialModel, GasModel, GRID_NODES,
};
use fnpeg_core::dynamics::{SphericalState, Vec3, VehicleParams};
use fnpeg_core::estimators::{
    DensityEstimator, ExponentialEstimator, FadingMemoryState, FilterEstimator, LstmEstimator,
    Observation,
};
use fnpeg_core::neural::{Architecture, LstmModel};
use fnpeg_core::pipeline::{FeatureVector, NormalizationStats, FEATURE_LEN};

#[test]
fn constant_bias_contracts_by_gain_each_step() {
    let (k, beta) = (1.5, 0.9);
    let mut state = FadingMemoryState::new(beta).unwrap();
    let mut error = (state.drag_ratio - k).abs();
    for _ in 0..50 {
        state.observe(k, k, 1.0, 1.0);
        let next = (state.drag_ratio - k).abs();
        assert!((next / error - beta).abs() < 1e-12);
        assert_eq!(state.lift_ratio, state.drag_ratio);
        error = next;
    }
    assert!(error < 1e-2 * (1.0 - k).abs());
    assert!((error - 0.5 * beta.powi(50)).abs() < 1e-12);
}

fn observation(h: f64, v: f64, lift: f64, drag: f64) -> Observation {
    let state = SphericalState {
        r: 3_396_200.0 + h * 1000.0,
        lon: 1.6,
        lat: 0.8,
        v,
        gamma: -0.1,
        heading: 0.3,
    };
    Observation {
        altitude_km: h,
        speed: v,
        sensed_lift: lift,
        sensed_drag: drag,
        features: FeatureVector::new(&state, &Vec3::zeros(), 1.0),
    }
}

#[test]
fn filter_learns_a_biased_atmosphere() {
    let model = ExponentialModel::default();
    let veh = VehicleParams::default();
    let mut filter = FilterEstimator::new(model, veh, 0.9).unwrap();
    let plain = ExponentialEstimator::new(model);
    assert_eq!(filter.aero_scales(), (1.0, 1.0));
    assert_eq!(filter.density_at(30.0), plain.density_at(30.0));
    for step in 0..200 {
        let (h, v) = (50.0 - 0.1 * step as f64, 3500.0);
        let drag = 1.3 * veh.drag(model.density_unchecked(h), v);
        filter
            .observe(&observation(h, v, drag * veh.lift_to_drag, drag))
            .unwrap();
    }
    let (lift_scale, drag_scale) = filter.aero_scales();
    assert!((drag_scale - 1.3).abs() < 1e-6);
    assert!((lift_scale - 1.3).abs() < 1e-6);
}

/// A model whose every output is zero, so predictions equal the target means.
fn constant_model(eta: &[f64]) -> LstmModel {
    let mut model =
        LstmModel::new(Architecture::two_layer(FEATURE_LEN, 4, GRID_NODES, 0.0), 3).unwrap();
    let zeros = vec![0.0; model.params().len()];
    model.set_params(zeros).unwrap();
    model.normalization = Some(NormalizationStats {
        feature_mean: vec![0.0; FEATURE_LEN],
        feature_std: vec![1.0; FEATURE_LEN],
        target_mean: eta.to_vec(),
        target_std: vec![1.0; GRID_NODES],
        guarded_features: Vec::new(),
        guarded_targets: Vec::new(),
    });
    model
}

#[test]
fn lstm_estimator_recovers_exponential_truth() {
    let exp = ExponentialModel::default();
    let h: Vec<f64> = (0..=260).map(|k| k as f64 * 0.5).collect();
    let profile = AtmosphereProfile::from_exponential(&exp, h, &GasModel::default()).unwrap();
    let eta = to_pseudodensity(&profile).unwrap();
    let mut est = LstmEstimator::new(Arc::new(constant_model(eta.values()))).unwrap();
    // Before the first observation the exponential law stands in.
    assert_eq!(est.density_at(20.0), exp.density_unchecked(20.0));
    est.observe(&observation(60.0, 3800.0, 1.0, 6.0)).unwrap();
    for &node in prediction_grid().iter() {
        let rel = (est.density_at(node) / exp.density_unchecked(node) - 1.0).abs();
        assert!(rel < 1e-9, "node {node}: {rel}");
    }
    for h in [5.3, 27.9, 61.1] {
        let rel = (est.density_at(h) / exp.density_unchecked(h) - 1.0).abs();
        assert!(rel < 1e-9, "h {h}: {rel}");
    }
}

#[test]
fn lstm_inference_is_deterministic_and_incremental() {
    let model = Arc::new({
        let mut m =
            LstmModel::new(Architecture::two_layer(FEATURE_LEN, 6, GRID_NODES, 0.3), 11).unwrap();
        m.normalization = constant_model(&[1.5; GRID_NODES]).normalization;
        m
    });
    let obs: Vec<Observation> = (0..8)
        .map(|k| {
            observation(
                70.0 - 4.0 * k as f64,
                3900.0 - 90.0 * k as f64,
                0.5 + 0.1 * k as f64,
                3.0 + k as f64,
            )
        })
        .collect();
    let run = || {
        let mut est = LstmEstimator::new(Arc::clone(&model)).unwrap();
        obs.iter()
            .map(|o| {
                est.observe(o).unwrap();
                est.prediction().unwrap().values().to_vec()
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);

    let stats = model.normalization.as_ref().unwrap();
    let xs: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| stats.normalize_features(&o.features))
        .collect();
    let whole = model.predict_sequence(&xs).unwrap();
    for (step, out) in whole.iter().enumerate() {
        let eta: Vec<f64> = stats
            .denormalize_targets(out)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        for (x, y) in eta.iter().zip(&a[step]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn lstm_estimator_requires_normalization() {
    let model =
        LstmModel::new(Architecture::two_layer(FEATURE_LEN, 4, GRID_NODES, 0.0), 1).unwrap();
    assert!(LstmEstimator::new(Arc::new(model)).is_err());
}
