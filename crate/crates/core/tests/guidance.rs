use std::sync::Arc;

use fnpeg_core::atmos::ExponentialModel;
use fnpeg_core::dynamics::{integrate_step, VehicleParams};
use fnpeg_core::estimators::{DensityEstimator, ExponentialEstimator, ProfileEstimator};
use fnpeg_core::fnpeg::{energy, solve_bank, GuidanceConfig, LongitudinalState, Predictor};
use fnpeg_core::sim::{simulate, Scenario, SimOutcome};
use fnpeg_core::Error;

fn nominal_truth_run() -> (
    Scenario,
    Arc<fnpeg_core::atmos::AtmosphereProfile>,
    SimOutcome,
) {
    let scenario = Scenario::default();
    let profile = Arc::new(scenario.nominal_atmosphere().unwrap());
    let mut est = ProfileEstimator::new(Arc::clone(&profile));
    let out = simulate(&scenario.mission, &scenario.sim, &profile, &mut est, None).unwrap();
    (scenario, profile, out)
}

fn predictor(scenario: &Scenario, vehicle: VehicleParams) -> Predictor {
    let target = scenario.mission.target(&scenario.sim.planet);
    Predictor::new(
        scenario.sim.planet,
        vehicle,
        &target,
        &scenario.sim.guidance,
    )
}

fn first_active_state(out: &SimOutcome, guidance: &Predictor) -> LongitudinalState {
    let row = out.log.iter().find(|r| r.command.is_some()).unwrap();
    let target_lon = Scenario::default().mission.target(&guidance.planet);
    LongitudinalState {
        radius: row.state.r,
        speed: row.state.v,
        gamma: row.state.gamma,
        range: fnpeg_core::dynamics::central_angle(
            row.state.lon,
            row.state.lat,
            target_lon.lon,
            target_lon.lat,
        ),
    }
}

#[test]
fn truth_knowledge_reaches_target() {
    let (scenario, _, out) = nominal_truth_run();
    let miss_m = out.terminal_range.abs() * scenario.sim.planet.radius;
    assert!(miss_m < 100.0, "miss {miss_m} m");
    assert!(out.reversals <= 10, "{} reversals", out.reversals);
}

#[test]
fn converged_calls_meet_stopping_rule() {
    let (scenario, _, out) = nominal_truth_run();
    let eps = scenario.sim.guidance.tolerance;
    let mut converged = 0;
    for cmd in out.commands.iter().filter(|c| c.converged) {
        let (z, slope) = (cmd.z.unwrap(), cmd.slope.unwrap());
        assert!((z * slope).abs() <= eps);
        converged += 1;
    }
    assert!(converged > 10);
}

#[test]
fn accepted_iterates_strictly_decrease() {
    let (scenario, profile, out) = nominal_truth_run();
    let pred = predictor(&scenario, scenario.sim.vehicle);
    let est = ProfileEstimator::new(profile);
    let target = scenario.mission.target(&scenario.sim.planet);
    let rows: Vec<_> = out
        .log
        .iter()
        .filter(|r| r.command.is_some())
        .step_by(20)
        .collect();
    assert!(rows.len() > 3);
    for row in rows {
        let state = LongitudinalState {
            radius: row.state.r,
            speed: row.state.v,
            gamma: row.state.gamma,
            range: fnpeg_core::dynamics::central_angle(
                row.state.lon,
                row.state.lat,
                target.lon,
                target.lat,
            ),
        };
        if pred.nondimensional(&state).2 >= pred.target_energy {
            continue;
        }
        // Start away from the flown bank so that the search has work to do.
        let report = solve_bank(
            |b| pred.predict_range(&state, b, &est),
            0.3,
            &scenario.sim.guidance,
        )
        .unwrap();
        assert!(
            report.z_history.windows(2).all(|w| w[1] < w[0]),
            "{:?}",
            report.z_history
        );
    }
}

#[test]
fn converged_bank_nulls_predicted_range_error() {
    let (_, _, out) = nominal_truth_run();
    // The cold-start call only has to meet |z ∂z/∂σ₀| ≤ ε, which allows
    // |z| up to ε/|∂z/∂σ₀|; warm-started calls track the solution closely.
    let late: Vec<_> = out
        .commands
        .iter()
        .skip(1)
        .filter(|c| c.converged)
        .collect();
    assert!(late.len() > 10);
    for cmd in late {
        assert!(cmd.z.unwrap().abs() < 1e-4, "z = {}", cmd.z.unwrap());
    }
}

#[test]
fn lift_up_flies_farthest() {
    let (scenario, _, out) = nominal_truth_run();
    let pred = predictor(&scenario, scenario.sim.vehicle);
    let state = first_active_state(&out, &pred);
    let est = ExponentialEstimator::new(ExponentialModel::default());
    let z: Vec<f64> = (0..=18)
        .map(|k| {
            pred.predict_range(&state, (5.0 * k as f64).to_radians(), &est)
                .unwrap()
        })
        .collect();
    // z = s(e_f) - s_f* with s the range-to-go, so flying farther lowers z.
    assert!(z.windows(2).all(|w| w[1] >= w[0]), "{z:?}");
}

#[test]
fn zero_lift_makes_bank_irrelevant() {
    let (scenario, _, out) = nominal_truth_run();
    let mut vehicle = scenario.sim.vehicle;
    vehicle.lift_to_drag = 0.0;
    let pred = predictor(&scenario, vehicle);
    let state = first_active_state(&out, &pred);
    let est = ExponentialEstimator::new(ExponentialModel::default());
    let z0 = pred.predict_range(&state, 0.0, &est).unwrap();
    for bank in [0.4, 1.2, 2.5] {
        assert_eq!(pred.predict_range(&state, bank, &est).unwrap(), z0);
    }
}

struct Vacuum;

impl DensityEstimator for Vacuum {
    fn density_at(&self, _h_km: f64) -> f64 {
        0.0
    }
}

#[test]
fn vacuum_prediction_is_an_error() {
    let scenario = Scenario::default();
    let pred = predictor(&scenario, scenario.sim.vehicle);
    let state = LongitudinalState {
        radius: scenario.sim.planet.radius + 60_000.0,
        speed: 3800.0,
        gamma: -0.1,
        range: 0.15,
    };
    assert!(matches!(
        pred.predict_range(&state, 0.5, &Vacuum),
        Err(Error::Prediction(_))
    ));
}

/// Time-domain integration of the same longitudinal model up to the target
/// energy, located by bisection on the last step.
fn time_domain_range(
    pred: &Predictor,
    state: &LongitudinalState,
    bank0: f64,
    est: &dyn DensityEstimator,
) -> f64 {
    let planet = pred.planet;
    let veh = pred.vehicle;
    let (r0, v0, e0) = pred.nondimensional(state);
    let ef = pred.target_energy;
    let rates = |y: &[f64; 4]| -> fnpeg_core::Result<[f64; 4]> {
        let [r, v, g, _] = *y;
        let e = energy(r, v);
        let h_km = (r - 1.0) * planet.radius / 1000.0;
        let drag = est.density_at(h_km) * v * v * planet.radius / (2.0 * veh.ballistic_coefficient);
        let lift = veh.lift_to_drag * drag;
        let bank = bank0 + (e - e0) / (ef - e0) * (pred.final_bank - bank0);
        Ok([
            v * g.sin(),
            -drag - g.sin() / (r * r),
            (lift * bank.cos() - g.cos() / (r * r) + v * v * g.cos() / r) / v,
            -v * g.cos() / r,
        ])
    };
    let dt = 1e-4;
    let mut y = [r0, v0, state.gamma, state.range];
    loop {
        let next = integrate_step(rates, &y, dt).unwrap();
        if energy(next[0], next[1]) >= ef {
            let (mut lo, mut hi) = (0.0, dt);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let trial = integrate_step(rates, &y, mid).unwrap();
                if energy(trial[0], trial[1]) >= ef {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return integrate_step(rates, &y, hi).unwrap()[3];
        }
        y = next;
    }
}

#[test]
fn energy_and_time_domain_predictions_agree() {
    let scenario = Scenario::default();
    let pred = predictor(&scenario, scenario.sim.vehicle);
    let est = ExponentialEstimator::new(ExponentialModel::default());
    for (h, v, gamma_deg, bank_deg) in [
        (60.0, 3800.0, -6.0, 50.0),
        (40.0, 3000.0, -3.0, 100.0),
        (70.0, 3950.0, -10.0, 20.0),
    ] {
        let state = LongitudinalState {
            radius: scenario.sim.planet.radius + h * 1000.0,
            speed: v,
            gamma: f64::to_radians(gamma_deg),
            range: 0.2,
        };
        let bank = f64::to_radians(bank_deg);
        let arc = pred.propagate(&state, bank, &est).unwrap();
        let s_time = time_domain_range(&pred, &state, bank, &est);
        assert!(
            (arc.range - s_time).abs() < 1e-5,
            "h={h}: {} vs {s_time}",
            arc.range
        );
    }
}

#[test]
fn guidance_holds_initial_bank_before_activation() {
    let (scenario, _, out) = nominal_truth_run();
    let initial = scenario.sim.guidance.initial_bank_deg.to_radians();
    let first = out.log.iter().position(|r| r.active).unwrap();
    assert!(first > 0);
    assert!(out.log[..first].iter().all(|r| r.bank == initial));
    assert_eq!(GuidanceConfig::default().initial_bank_deg, 45.0);
}
