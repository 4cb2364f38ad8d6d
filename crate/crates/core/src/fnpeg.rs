//! Fully numerical predictor-corrector entry guidance.
//!
//! The longitudinal channel searches for the initial bank magnitude σ₀ of a
//! bank profile that is linear in the energy-like variable
//! e = 1/r̃ - Ṽ²/2, such that the predicted range-to-go at the target energy
//! is zero. The lateral channel picks the bank sign with a velocity-dependent
//! heading deadband.
//!
//! Non-dimensional variables: r̃ = r/R, Ṽ = V/sqrt(g₀R), accelerations in
//! units of g₀, time in units of sqrt(R/g₀).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    central_angle, great_circle_azimuth, integrate_step, PlanetModel, SphericalState, VehicleParams,
};
use crate::estimators::DensityEstimator;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Bank magnitude at the target energy, deg.
    pub final_bank_deg: f64,
    /// Stopping tolerance on |z ∂z/∂σ₀|.
    pub tolerance: f64,
    pub frequency_hz: f64,
    /// Sensed load sqrt(L² + D²) that activates guidance, m/s².
    pub activation_load: f64,
    pub deadband_entry_deg: f64,
    pub deadband_final_deg: f64,
    /// RK4 steps in energy per prediction.
    pub predictor_steps: usize,
    /// Perturbation for the first finite-difference slope, deg.
    pub finite_difference_deg: f64,
    pub max_halvings: u32,
    pub max_iterations: u32,
    pub initial_bank_deg: f64,
    /// Guidance stops updating once e_f - e falls below this margin.
    pub terminal_energy_margin: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            final_bank_deg: 70.0,
            tolerance: 1e-6,
            frequency_hz: 1.0,
            activation_load: 1.47,
            deadband_entry_deg: 2.0,
            deadband_final_deg: 1.5,
            predictor_steps: 200,
            finite_difference_deg: 1.0,
            max_halvings: 20,
            max_iterations: 20,
            initial_bank_deg: 45.0,
            terminal_energy_margin: 1e-3,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let final_bank = self.final_bank_deg.to_radians();
        if !(final_bank > 0.0 && final_bank < PI / 2.0) {
            return Err(Error::Config(format!(
                "final bank {} deg outside (0, 90)",
                self.final_bank_deg
            )));
        }
        if !(self.tolerance > 0.0) || !(self.frequency_hz > 0.0) || self.predictor_steps == 0 {
            return Err(Error::Config(
                "tolerance, frequency and predictor steps must be positive".into(),
            ));
        }
        if !(self.finite_difference_deg > 0.0) || !(self.activation_load >= 0.0) {
            return Err(Error::Config(
                "invalid finite-difference step or activation load".into(),
            ));
        }
        if !(self.deadband_entry_deg > 0.0) || !(self.deadband_final_deg > 0.0) {
            return Err(Error::Config("deadband endpoints must be positive".into()));
        }
        Ok(())
    }
}

/// Guidance target point and terminal conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceTarget {
    /// m
    pub radius: f64,
    /// m/s
    pub speed: f64,
    /// rad
    pub lon: f64,
    /// rad
    pub lat: f64,
    /// Desired range-to-go at the target energy, rad.
    pub range: f64,
}

/// Energy-like variable e = 1/r̃ - Ṽ²/2.
#[inline]
pub fn energy(radius_nd: f64, speed_nd: f64) -> f64 {
    1.0 / radius_nd - 0.5 * speed_nd * speed_nd
}

/// Bank magnitude linear in energy between (e₀, σ₀) and (e_f, σ_f).
pub fn bank_profile(e: f64, e0: f64, ef: f64, bank0: f64, bank_final: f64) -> Result<f64> {
    if ef == e0 {
        return Err(Error::Domain("bank profile needs e0 != ef".into()));
    }
    Ok(bank0 + (e - e0) / (ef - e0) * (bank_final - bank0))
}

/// Dimensional longitudinal state handed to the predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongitudinalState {
    /// m
    pub radius: f64,
    /// m/s
    pub speed: f64,
    /// rad
    pub gamma: f64,
    /// Range-to-go, rad.
    pub range: f64,
}

/// Numerical predictor of the terminal range error.
#[derive(Debug, Clone, Copy)]
pub struct Predictor {
    pub planet: PlanetModel,
    pub vehicle: VehicleParams,
    pub target_energy: f64,
    pub target_range: f64,
    pub final_bank: f64,
    pub steps: usize,
}

/// End of a predicted arc, non-dimensional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedArc {
    pub radius_nd: f64,
    pub gamma: f64,
    pub range: f64,
    /// Terminal range error z = s(e_f) - s_f*.
    pub z: f64,
}

impl Predictor {
    pub fn new(
        planet: PlanetModel,
        vehicle: VehicleParams,
        target: &GuidanceTarget,
        config: &GuidanceConfig,
    ) -> Self {
        let target_energy = energy(
            target.radius / planet.radius,
            target.speed / planet.velocity_scale(),
        );
        Self {
            planet,
            vehicle,
            target_energy,
            target_range: target.range,
            final_bank: config.final_bank_deg.to_radians(),
            steps: config.predictor_steps,
        }
    }

    /// Non-dimensional (r̃, Ṽ) and energy of a dimensional state.
    pub fn nondimensional(&self, state: &LongitudinalState) -> (f64, f64, f64) {
        let r = state.radius / self.planet.radius;
        let v = state.speed / self.planet.velocity_scale();
        (r, v, energy(r, v))
    }

    /// Terminal range error for initial bank magnitude `bank0`.
    pub fn predict_range(
        &self,
        state: &LongitudinalState,
        bank0: f64,
        estimator: &dyn DensityEstimator,
    ) -> Result<f64> {
        Ok(self.propagate(state, bank0, estimator)?.z)
    }

    /// Integrates the longitudinal dynamics and ṡ in energy from the current
    /// energy to the target energy, using de/dτ = Ṽ D̃.
    pub fn propagate(
        &self,
        state: &LongitudinalState,
        bank0: f64,
        estimator: &dyn DensityEstimator,
    ) -> Result<PredictedArc> {
        let (r0, _, e0) = self.nondimensional(state);
        let ef = self.target_energy;
        if !(ef > e0) {
            return Err(Error::Prediction(format!(
                "current energy {e0} is not below target {ef}"
            )));
        }
        let (lift_scale, drag_scale) = estimator.aero_scales();
        let radius = self.planet.radius;
        let beta = self.vehicle.ballistic_coefficient;
        let lift_to_drag = self.vehicle.lift_to_drag;
        let bank_final = self.final_bank;
        let de = (ef - e0) / self.steps as f64;

        let rates = |e: f64, r: f64, gamma: f64| -> Result<[f64; 3]> {
            let v2 = 2.0 * (1.0 / r - e);
            if !(v2 > 0.0) || !r.is_finite() || !gamma.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-physical predicted state r={r}, V^2={v2}"
                )));
            }
            let h_km = (r - 1.0) * radius / 1000.0;
            let q = estimator.density_at(h_km) * v2 * radius / (2.0 * beta);
            let drag = drag_scale * q;
            if !(drag > 0.0) {
                return Err(Error::Prediction(format!(
                    "non-positive drag at {h_km:.2} km"
                )));
            }
            let lift = lift_scale * lift_to_drag * q;
            let bank = bank0 + (e - e0) / (ef - e0) * (bank_final - bank0);
            let (sin_g, cos_g) = gamma.sin_cos();
            Ok([
                sin_g / drag,
                (lift * bank.cos() - cos_g / (r * r) + v2 * cos_g / r) / (v2 * drag),
                -cos_g / (r * drag),
            ])
        };

        // State is (e, r̃, γ, s) with de/de = 1.
        let mut y = [e0, r0, state.gamma, state.range];
        for _ in 0..self.steps {
            y = integrate_step(
                |s: &[f64; 4]| {
                    let [dr, dg, ds] = rates(s[0], s[1], s[2])?;
                    Ok([1.0, dr, dg, ds])
                },
                &y,
                de,
            )?;
        }
        let y = [y[1], y[2], y[3]];
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite predicted terminal state".into()));
        }
        Ok(PredictedArc {
            radius_nd: y[0],
            gamma: y[1],
            range: y[2],
            z: y[2] - self.target_range,
        })
    }
}

/// Outcome of one guidance-cycle bank search.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorReport {
    pub bank: f64,
    pub z: f64,
    pub slope: f64,
    pub iterations: u32,
    pub converged: bool,
    /// |z| of the starting guess followed by every accepted iterate.
    pub z_history: Vec<f64>,
}

/// One damped Newton step with step halving, λ = 1/2^i for the smallest
/// i ≥ 0 that decreases |z|. Returns the accepted (σ₀, z).
pub fn correct_bank<F>(
    predict: &mut F,
    bank: f64,
    z: f64,
    slope: f64,
    config: &GuidanceConfig,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if z == 0.0 {
        return Ok((bank, z));
    }
    if !(slope.is_finite()) || slope == 0.0 {
        return Err(Error::CorrectorStall { halvings: 0 });
    }
    let step = z / slope;
    let mut lambda = 1.0;
    for _ in 0..=config.max_halvings {
        let candidate = (bank - lambda * step).clamp(0.0, PI);
        if let Ok(zc) = predict(candidate) {
            if zc.abs() < z.abs() {
                return Ok((candidate, zc));
            }
        }
        lambda *= 0.5;
    }
    Err(Error::CorrectorStall {
        halvings: config.max_halvings,
    })
}

/// Newton-Raphson search for σ₀: finite-difference slope on the first
/// iteration, secant slope afterwards, stopping on |z ∂z/∂σ₀| ≤ ε.
pub fn solve_bank<F>(
    mut predict: F,
    initial: f64,
    config: &GuidanceConfig,
) -> Result<CorrectorReport>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut bank = initial.clamp(0.0, PI);
    let mut z = predict(bank)?;
    let delta = config.finite_difference_deg.to_radians();
    let forward = if bank + delta <= PI {
        bank + delta
    } else {
        bank - delta
    };
    let mut slope = match predict(forward) {
        Ok(zp) => (zp - z) / (forward - bank),
        Err(_) => {
            let backward = 2.0 * bank - forward;
            let zb = predict(backward)?;
            (zb - z) / (backward - bank)
        }
    };
    let mut report = CorrectorReport {
        bank,
        z,
        slope,
        iterations: 0,
        converged: false,
        z_history: vec![z.abs()],
    };
    if z == 0.0 {
        report.converged = true;
        return Ok(report);
    }
    // The stopping test applies to updated iterates, so at least one
    // correction is always taken.
    for k in 1..=config.max_iterations {
        let (next, zn) = correct_bank(&mut predict, bank, z, slope, config)?;
        if next != bank {
            let secant = (zn - z) / (next - bank);
            if secant.is_finite() && secant != 0.0 {
                slope = secant;
            }
        }
        bank = next;
        z = zn;
        report.bank = bank;
        report.z = z;
        report.slope = slope;
        report.iterations = k;
        report.z_history.push(z.abs());
        if (z * slope).abs() <= config.tolerance {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Heading deadband ΔΨ = c₁V + c₀, rad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deadband {
    pub c1: f64,
    pub c0: f64,
}

impl Deadband {
    /// Linear deadband through (V₀, ΔΨ₀) and (V_f, ΔΨ_f).
    pub fn anchored(entry_speed: f64, final_speed: f64, config: &GuidanceConfig) -> Result<Self> {
        if entry_speed == final_speed {
            return Err(Error::Config(
                "deadband anchors need distinct speeds".into(),
            ));
        }
        let db0 = config.deadband_entry_deg.to_radians();
        let dbf = config.deadband_final_deg.to_radians();
        let c1 = (db0 - dbf) / (entry_speed - final_speed);
        Ok(Self {
            c1,
            c0: dbf - c1 * final_speed,
        })
    }

    pub fn width(&self, speed: f64) -> f64 {
        self.c1 * speed + self.c0
    }
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    } else if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// Bank sign after the deadband test. When |Ψ - ψ| ≥ ΔΨ the sign is set to
/// turn toward the target azimuth, which reverses the bank if it was
/// turning away.
pub fn lateral_channel(
    heading: f64,
    azimuth: f64,
    speed: f64,
    sign: f64,
    deadband: &Deadband,
) -> f64 {
    let offset = wrap_angle(azimuth - heading);
    if offset.abs() >= deadband.width(speed) {
        if offset > 0.0 {
            1.0
        } else {
            -1.0
        }
    } else {
        sign
    }
}

/// Signed bank command issued by a guidance cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceCommand {
    /// Signed bank angle, rad.
    pub bank: f64,
    pub magnitude: f64,
    pub sign: f64,
    pub active: bool,
    /// Terminal range error after correction, when a search ran.
    pub z: Option<f64>,
    /// ∂z/∂σ₀ estimate paired with `z`.
    pub slope: Option<f64>,
    pub iterations: u32,
    pub converged: bool,
    pub reversal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceState {
    pub bank_magnitude: f64,
    pub sign: f64,
    pub active: bool,
    pub reversals: u32,
    pub last_command: GuidanceCommand,
}

/// One guidance instance, bound to a single trajectory.
#[derive(Debug, Clone)]
pub struct Guidance {
    pub config: GuidanceConfig,
    pub predictor: Predictor,
    pub target: GuidanceTarget,
    pub deadband: Deadband,
    pub state: GuidanceState,
}

impl Guidance {
    pub fn new(
        config: GuidanceConfig,
        planet: PlanetModel,
        vehicle: VehicleParams,
        target: GuidanceTarget,
        entry_speed: f64,
    ) -> Result<Self> {
        config.validate()?;
        let predictor = Predictor::new(planet, vehicle, &target, &config);
        let deadband = Deadband::anchored(entry_speed, target.speed, &config)?;
        let magnitude = config.initial_bank_deg.to_radians();
        let hold = GuidanceCommand {
            bank: magnitude,
            magnitude,
            sign: 1.0,
            active: false,
            z: None,
            slope: None,
            iterations: 0,
            converged: false,
            reversal: false,
        };
        Ok(Self {
            config,
            predictor,
            target,
            deadband,
            state: GuidanceState {
                bank_magnitude: magnitude,
                sign: 1.0,
                active: false,
                reversals: 0,
                last_command: hold,
            },
        })
    }

    pub fn is_active(&self) -> bool {
        self.state.active
    }

    /// Whether a cycle at this sensed load would run the predictor-corrector.
    pub fn would_activate(&self, sensed_load: f64) -> bool {
        self.state.active || sensed_load >= self.config.activation_load
    }

    /// Great-circle range from `nav` to the target, rad.
    pub fn range_to_go(&self, nav: &SphericalState) -> f64 {
        central_angle(nav.lon, nav.lat, self.target.lon, self.target.lat)
    }

    pub fn azimuth_to_target(&self, nav: &SphericalState) -> f64 {
        great_circle_azimuth(nav.lon, nav.lat, self.target.lon, self.target.lat)
    }

    /// Runs one guidance cycle. Below the activation load the previous
    /// command is held. Predictor or corrector failures hold the previous
    /// bank magnitude.
    pub fn step(
        &mut self,
        nav: &SphericalState,
        sensed_load: f64,
        estimator: &dyn DensityEstimator,
    ) -> GuidanceCommand {
        if !self.would_activate(sensed_load) {
            return self.state.last_command;
        }
        self.state.active = true;
        let lon_state = LongitudinalState {
            radius: nav.r,
            speed: nav.v,
            gamma: nav.gamma,
            range: self.range_to_go(nav),
        };
        let (_, _, e) = self.predictor.nondimensional(&lon_state);
        let mut command = GuidanceCommand {
            active: true,
            z: None,
            slope: None,
            iterations: 0,
            converged: false,
            reversal: false,
            ..self.state.last_command
        };
        if self.predictor.target_energy - e > self.config.terminal_energy_margin {
            let predictor = self.predictor;
            let solved = solve_bank(
                |b| predictor.predict_range(&lon_state, b, estimator),
                self.state.bank_magnitude,
                &self.config,
            );
            if let Ok(report) = solved {
                self.state.bank_magnitude = report.bank;
                command.z = Some(report.z);
                command.slope = Some(report.slope);
                command.iterations = report.iterations;
                command.converged = report.converged;
            }
            let azimuth = self.azimuth_to_target(nav);
            let sign =
                lateral_channel(nav.heading, azimuth, nav.v, self.state.sign, &self.deadband);
            if sign != self.state.sign {
                command.reversal = true;
                self.state.reversals += 1;
                self.state.sign = sign;
            }
        }
        command.magnitude = self.state.bank_magnitude;
        command.sign = self.state.sign;
        command.bank = command.sign * command.magnitude;
        self.state.last_command = command;
        command
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::ExponentialEstimator;

    #[test]
    fn energy_reference_values() {
        assert_eq!(energy(1.0, 0.0), 1.0);
        assert!(energy(1.0, 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bank_profile_endpoints_and_midpoint() {
        let (s0, sf) = (0.4, 70f64.to_radians());
        assert_eq!(bank_profile(0.3, 0.3, 0.9, s0, sf).unwrap(), s0);
        assert!((bank_profile(0.9, 0.3, 0.9, s0, sf).unwrap() - sf).abs() < 1e-15);
        assert!((bank_profile(0.6, 0.3, 0.9, s0, sf).unwrap() - 0.5 * (s0 + sf)).abs() < 1e-15);
        assert!(bank_profile(0.5, 0.3, 0.3, s0, sf).is_err());
    }

    #[test]
    fn corrector_leaves_zero_residual_alone() {
        let cfg = GuidanceConfig::default();
        let mut f = |_b: f64| Ok(0.0);
        assert_eq!(
            correct_bank(&mut f, 0.7, 0.0, 1.0, &cfg).unwrap(),
            (0.7, 0.0)
        );
        let report = solve_bank(|_b| Ok(0.0), 0.7, &cfg).unwrap();
        assert_eq!(report.bank, 0.7);
        assert!(report.converged);
    }

    #[test]
    fn linear_residual_takes_one_full_step() {
        let cfg = GuidanceConfig::default();
        let target = 1.1;
        let mut calls = Vec::new();
        let mut f = |b: f64| {
            calls.push(b);
            Ok(0.02 * (b - target))
        };
        let (b, z) = correct_bank(&mut f, 0.5, 0.02 * (0.5 - target), 0.02, &cfg).unwrap();
        assert!((b - target).abs() < 1e-15);
        assert!(z.abs() < 1e-16);
        assert_eq!(calls.len(), 1);
    }

    #[test]
    fn stopping_condition_holds_on_convergence() {
        let cfg = GuidanceConfig::default();
        let report = solve_bank(
            |b: f64| Ok(0.05 * (b - 0.9) + 0.01 * (b - 0.9).powi(3)),
            0.2,
            &cfg,
        )
        .unwrap();
        assert!(report.converged);
        assert!((report.z * report.slope).abs() <= cfg.tolerance);
        for w in report.z_history.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn unreachable_target_stalls() {
        let cfg = GuidanceConfig::default();
        // Residual bottoms out away from zero at the lower bound.
        let result = solve_bank(|b: f64| Ok(0.1 + 0.01 * b), 0.5, &cfg);
        assert!(matches!(result, Err(Error::CorrectorStall { .. })));
    }

    fn deadband() -> Deadband {
        Deadband::anchored(4000.0, 1214.0, &GuidanceConfig::default()).unwrap()
    }

    #[test]
    fn deadband_endpoints() {
        let db = deadband();
        assert!((db.width(4000.0) - 2f64.to_radians()).abs() < 1e-15);
        assert!((db.width(1214.0) - 1.5f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn lateral_inside_deadband_keeps_sign() {
        let db = deadband();
        assert_eq!(lateral_channel(0.01, 0.0, 3000.0, 1.0, &db), 1.0);
        assert_eq!(lateral_channel(-0.01, 0.0, 3000.0, -1.0, &db), -1.0);
    }

    #[test]
    fn lateral_reverses_at_exact_deadband() {
        let db = deadband();
        let width = db.width(2500.0);
        // Heading is `width` right of the target azimuth: turn left.
        assert_eq!(lateral_channel(width, 0.0, 2500.0, 1.0, &db), -1.0);
        assert_eq!(lateral_channel(-width, 0.0, 2500.0, -1.0, &db), 1.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn activation_gate_holds_initial_command() {
        let planet = PlanetModel::mars();
        let target = GuidanceTarget {
            radius: planet.radius + 11_000.0,
            speed: 1214.0,
            lon: 101.031f64.to_radians(),
            lat: 47.203f64.to_radians(),
            range: 0.0,
        };
        let mut g = Guidance::new(
            GuidanceConfig::default(),
            planet,
            VehicleParams::default(),
            target,
            4000.0,
        )
        .unwrap();
        let nav = SphericalState {
            r: planet.radius + 130_000.0,
            lon: 90f64.to_radians(),
            lat: 45f64.to_radians(),
            v: 4000.0,
            gamma: -0.2,
            heading: 1.2,
        };
        let cmd = g.step(&nav, 1e-3, &ExponentialEstimator::default());
        assert!(!cmd.active);
        assert_eq!(cmd.bank, 45f64.to_radians());
        assert!(!g.is_active());
    }

    #[test]
    fn due_east_azimuth_from_equator() {
        assert!((great_circle_azimuth(0.0, 0.0, 0.2, 0.0) - PI / 2.0).abs() < 1e-15);
    }
}
