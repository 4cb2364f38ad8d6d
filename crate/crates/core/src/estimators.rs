//! Density estimators queried by the guidance predictor.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::atmos::{
    log_linear, prediction_grid, AtmosphereProfile, ExponentialModel, PseudodensityProfile,
};
use crate::dynamics::VehicleParams;
use crate::neural::{InferenceState, LstmModel};
use crate::pipeline::FeatureVector;
use crate::{Error, Result};

/// What an estimator sees once per guidance cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub altitude_km: f64,
    /// m/s
    pub speed: f64,
    /// Sensed lift acceleration magnitude, m/s².
    pub sensed_lift: f64,
    /// Sensed drag acceleration magnitude, m/s².
    pub sensed_drag: f64,
    pub features: FeatureVector,
}

/// Density model used inside the guidance predictor.
///
/// `density_at` must return a finite positive density for altitudes in
/// [0, 130] km. `observe` is called at most once per guidance cycle, before
/// the predictor queries the estimator.
pub trait DensityEstimator: Send {
    fn density_at(&self, h_km: f64) -> f64;

    /// Multipliers applied to the predicted (lift, drag) accelerations.
    fn aero_scales(&self) -> (f64, f64) {
        (1.0, 1.0)
    }

    fn observe(&mut self, _obs: &Observation) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Exponential,
    Filter,
    Lstm,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::Exponential,
        EstimatorKind::Filter,
        EstimatorKind::Lstm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Exponential => "exponential",
            EstimatorKind::Filter => "filter",
            EstimatorKind::Lstm => "lstm",
        }
    }

    /// Whether the estimator consumes feature measurements.
    pub fn uses_features(&self) -> bool {
        !matches!(self, EstimatorKind::Exponential)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" => Ok(EstimatorKind::Exponential),
            "filter" => Ok(EstimatorKind::Filter),
            "lstm" => Ok(EstimatorKind::Lstm),
            other => Err(Error::Config(format!(
                "unknown estimator '{other}', expected exponential | filter | lstm"
            ))),
        }
    }
}

/// Builds a fresh per-trajectory estimator.
pub fn build_estimator(
    kind: EstimatorKind,
    exponential: ExponentialModel,
    vehicle: VehicleParams,
    filter_gain: f64,
    model: Option<&Arc<LstmModel>>,
) -> Result<Box<dyn DensityEstimator>> {
    Ok(match kind {
        EstimatorKind::Exponential => Box::new(ExponentialEstimator::new(exponential)),
        EstimatorKind::Filter => Box::new(FilterEstimator::new(exponential, vehicle, filter_gain)?),
        EstimatorKind::Lstm => {
            let model = model
                .ok_or_else(|| Error::Config("lstm estimator requires a trained model".into()))?;
            Box::new(LstmEstimator::new(Arc::clone(model))?)
        }
    })
}

/// Stateless exponential law.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExponentialEstimator {
    pub model: ExponentialModel,
}

impl ExponentialEstimator {
    pub fn new(model: ExponentialModel) -> Self {
        Self { model }
    }
}

impl DensityEstimator for ExponentialEstimator {
    fn density_at(&self, h_km: f64) -> f64 {
        self.model.density_unchecked(h_km)
    }
}

/// Perfect knowledge of a tabulated truth atmosphere.
#[derive(Debug, Clone)]
pub struct ProfileEstimator {
    pub profile: Arc<AtmosphereProfile>,
}

impl ProfileEstimator {
    pub fn new(profile: Arc<AtmosphereProfile>) -> Self {
        Self { profile }
    }
}

impl DensityEstimator for ProfileEstimator {
    fn density_at(&self, h_km: f64) -> f64 {
        self.profile.density_at(h_km)
    }
}

/// First-order fading-memory estimate of the sensed/expected lift and drag
/// ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingMemoryState {
    pub lift_ratio: f64,
    pub drag_ratio: f64,
    pub gain: f64,
}

impl FadingMemoryState {
    pub fn new(gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain < 1.0) {
            return Err(Error::Domain(format!(
                "fading-memory gain {gain} outside (0, 1)"
            )));
        }
        Ok(Self {
            lift_ratio: 1.0,
            drag_ratio: 1.0,
            gain,
        })
    }

    /// x ← x + (1 - β)(ratio - x)
    #[inline]
    pub fn blend(&self, previous: f64, ratio: f64) -> f64 {
        previous + (1.0 - self.gain) * (ratio - previous)
    }

    /// Updates both ratios from sensed and expected accelerations. A ratio
    /// whose expectation is not positive is left unchanged.
    pub fn observe(&mut self, lift: f64, drag: f64, expected_lift: f64, expected_drag: f64) {
        if expected_lift > 0.0 {
            self.lift_ratio = self.blend(self.lift_ratio, lift / expected_lift);
        }
        if expected_drag > 0.0 {
            self.drag_ratio = self.blend(self.drag_ratio, drag / expected_drag);
        }
    }
}

/// Exponential law whose predicted lift and drag are scaled by fading-memory
/// ratios. The density view stays exponential.
#[derive(Debug, Clone, Copy)]
pub struct FilterEstimator {
    pub model: ExponentialModel,
    pub vehicle: VehicleParams,
    pub state: FadingMemoryState,
}

impl FilterEstimator {
    pub fn new(model: ExponentialModel, vehicle: VehicleParams, gain: f64) -> Result<Self> {
        Ok(Self {
            model,
            vehicle,
            state: FadingMemoryState::new(gain)?,
        })
    }

    /// Expected (lift, drag) from the exponential law at the sensed state.
    pub fn expected(&self, altitude_km: f64, speed: f64) -> (f64, f64) {
        let drag = self
            .vehicle
            .drag(self.model.density_unchecked(altitude_km), speed);
        (drag * self.vehicle.lift_to_drag, drag)
    }
}

impl DensityEstimator for FilterEstimator {
    fn density_at(&self, h_km: f64) -> f64 {
        self.model.density_unchecked(h_km)
    }

    fn aero_scales(&self) -> (f64, f64) {
        (self.state.lift_ratio, self.state.drag_ratio)
    }

    fn observe(&mut self, obs: &Observation) -> Result<()> {
        let (expected_lift, expected_drag) = self.expected(obs.altitude_km, obs.speed);
        self.state.observe(
            obs.sensed_lift,
            obs.sensed_drag,
            expected_lift,
            expected_drag,
        );
        Ok(())
    }
}

/// Density from the LSTM's latest pseudodensity prediction.
///
/// Inference runs incrementally: each observation advances the recurrent
/// state by one step, which gives the same output as re-running the whole
/// sequence.
#[derive(Debug, Clone)]
pub struct LstmEstimator {
    model: Arc<LstmModel>,
    recurrent: InferenceState,
    steps: usize,
    prediction: Option<PseudodensityProfile>,
    grid: [f64; crate::atmos::GRID_NODES],
    densities: Vec<f64>,
    fallback: ExponentialModel,
}

impl LstmEstimator {
    pub fn new(model: Arc<LstmModel>) -> Result<Self> {
        if model.normalization.is_none() {
            return Err(Error::Config(
                "lstm model has no normalization statistics".into(),
            ));
        }
        let recurrent = model.start();
        Ok(Self {
            model,
            recurrent,
            steps: 0,
            prediction: None,
            grid: prediction_grid(),
            densities: Vec::new(),
            fallback: ExponentialModel::default(),
        })
    }

    pub fn prediction(&self) -> Option<&PseudodensityProfile> {
        self.prediction.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Feeds one raw feature vector and refreshes the stored prediction.
    pub fn push(&mut self, features: &FeatureVector) -> Result<&PseudodensityProfile> {
        if features.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature vector".into()));
        }
        let stats =
            self.model.normalization.as_ref().ok_or_else(|| {
                Error::Config("lstm model has no normalization statistics".into())
            })?;
        let x = stats.normalize_features(features);
        let out = self.model.step(&mut self.recurrent, &x);
        let eta = stats.denormalize_targets(&out);
        let profile = PseudodensityProfile::new(eta.into_iter().map(|v| v.max(0.0)).collect())?;
        self.densities = profile.densities();
        self.steps += 1;
        Ok(self.prediction.insert(profile))
    }
}

impl DensityEstimator for LstmEstimator {
    fn density_at(&self, h_km: f64) -> f64 {
        if self.prediction.is_none() {
            return self.fallback.density_unchecked(h_km);
        }
        log_linear(&self.grid, &self.densities, h_km)
    }

    fn observe(&mut self, obs: &Observation) -> Result<()> {
        self.push(&obs.features).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_estimator_matches_law() {
        let e = ExponentialEstimator::default();
        assert_eq!(e.density_at(0.0), 2.63e-2);
        assert!((e.density_at(10.15) - 2.63e-2 / std::f64::consts::E).abs() < 1e-17);
        assert!(e.density_at(130.0) < 1e-7);
    }

    #[test]
    fn filter_fixed_point_and_single_step() {
        let mut f = FadingMemoryState::new(0.9).unwrap();
        f.observe(1.0, 1.0, 1.0, 1.0);
        assert_eq!((f.lift_ratio, f.drag_ratio), (1.0, 1.0));
        f.observe(2.0, 2.0, 1.0, 1.0);
        assert!((f.lift_ratio - 1.1).abs() < 1e-15);
        assert!((f.drag_ratio - 1.1).abs() < 1e-15);
    }

    #[test]
    fn filter_closed_form_geometric_convergence() {
        let k = 1.7;
        let mut f = FadingMemoryState::new(0.9).unwrap();
        for n in 1..=60 {
            f.observe(k, k, 1.0, 1.0);
            let expected = k + (1.0 - k) * 0.9f64.powi(n);
            assert!((f.drag_ratio - expected).abs() < 1e-13, "step {n}");
        }
    }

    #[test]
    fn filter_skips_zero_expectation() {
        let mut f = FadingMemoryState::new(0.9).unwrap();
        f.observe(3.0, 3.0, 0.0, 0.0);
        assert_eq!((f.lift_ratio, f.drag_ratio), (1.0, 1.0));
        assert!(FadingMemoryState::new(1.0).is_err());
    }

    #[test]
    fn unobserved_filter_equals_exponential() {
        let f = FilterEstimator::new(ExponentialModel::default(), VehicleParams::default(), 0.9)
            .unwrap();
        let e = ExponentialEstimator::default();
        for h in [0.0, 12.5, 60.0, 130.0] {
            assert_eq!(f.density_at(h), e.density_at(h));
        }
        assert_eq!(f.aero_scales(), (1.0, 1.0));
    }

    #[test]
    fn filter_expected_uses_exponential_drag() {
        let f = FilterEstimator::new(ExponentialModel::default(), VehicleParams::default(), 0.9)
            .unwrap();
        let (l, d) = f.expected(30.0, 3000.0);
        let rho = ExponentialModel::default().density_unchecked(30.0);
        assert!((d - rho * 9e6 / 310.0).abs() < 1e-12);
        assert!((l - 0.15 * d).abs() < 1e-12);
    }

    #[test]
    fn estimator_kind_parsing() {
        assert_eq!(
            "LSTM".parse::<EstimatorKind>().unwrap(),
            EstimatorKind::Lstm
        );
        assert!("kalman".parse::<EstimatorKind>().is_err());
        assert!(build_estimator(
            EstimatorKind::Lstm,
            ExponentialModel::default(),
            VehicleParams::default(),
            0.9,
            None
        )
        .is_err());
    }
}
