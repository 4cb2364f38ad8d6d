use fnpeg_core::atmos::ExponentialModel;
use fnpeg_core::dynamics::{
    cart_to_spherical, cartesian_derivatives, integrate_step, spherical_derivatives,
    spherical_to_cart, CartesianState, PlanetModel, SphericalState, Vec3, VehicleParams,
};
use fnpeg_core::sim::Mission;

fn density(model: &ExponentialModel, planet: &PlanetModel, r: f64) -> f64 {
    model.density_unchecked(planet.altitude_km(r).max(0.0))
}

fn propagate_both(
    start: SphericalState,
    bank: f64,
    planet: &PlanetModel,
    seconds: f64,
    dt: f64,
) -> (SphericalState, SphericalState) {
    let veh = VehicleParams::default();
    let atmo = ExponentialModel::default();
    let mut cart = spherical_to_cart(&start).unwrap();
    let mut sph = start;
    let steps = (seconds / dt).round() as usize;
    for _ in 0..steps {
        cart = integrate_step(
            |s: &CartesianState| {
                cartesian_derivatives(s, bank, density(&atmo, planet, s.r.norm()), &veh, planet)
            },
            &cart,
            dt,
        )
        .unwrap();
        sph = integrate_step(
            |s: &SphericalState| {
                spherical_derivatives(s, bank, density(&atmo, planet, s.r), &veh, planet)
            },
            &sph,
            dt,
        )
        .unwrap();
    }
    (cart_to_spherical(&cart).unwrap(), sph)
}

fn max_relative_difference(a: &SphericalState, b: &SphericalState) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[test]
fn cartesian_and_spherical_agree_over_entry_arc() {
    let planet = PlanetModel::mars();
    let entry = Mission::default().entry_state(&planet);
    let (from_cart, sph) = propagate_both(entry, 0.6, &planet, 100.0, 0.1);
    let diff = max_relative_difference(&from_cart, &sph);
    assert!(diff < 1e-6, "relative difference {diff}");
}

#[test]
fn cartesian_and_spherical_agree_in_dense_air() {
    let planet = PlanetModel::mars();
    let start = SphericalState {
        r: planet.radius + 45_000.0,
        lon: 1.6,
        lat: 0.8,
        v: 3500.0,
        gamma: -8f64.to_radians(),
        heading: 0.7,
    };
    let (from_cart, sph) = propagate_both(start, -1.1, &planet, 100.0, 0.1);
    let diff = max_relative_difference(&from_cart, &sph);
    assert!(diff < 1e-6, "relative difference {diff}");
}

#[test]
fn rk4_global_error_ratio_under_halving() {
    // Harmonic oscillator x'' = -x over one period.
    let error = |steps: usize| {
        let dt = 2.0 * std::f64::consts::PI / steps as f64;
        let mut y = [1.0, 0.0];
        for _ in 0..steps {
            y = integrate_step(|s: &[f64; 2]| Ok([s[1], -s[0]]), &y, dt).unwrap();
        }
        ((y[0] - 1.0).powi(2) + y[1].powi(2)).sqrt()
    };
    let ratio = error(64) / error(128);
    assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn rk4_exponential_step() {
    let y = integrate_step(|y: &f64| Ok(*y), &1.0, 0.1).unwrap();
    assert!((y - 0.1f64.exp()).abs() < 1e-6);
    let still = integrate_step(|_: &f64| Ok(0.0), &3.5, 0.1).unwrap();
    assert_eq!(still, 3.5);
}

fn specific_energy(s: &CartesianState, planet: &PlanetModel) -> f64 {
    let spin = planet.omega().cross(&s.r);
    0.5 * s.v.norm_squared() - planet.mu / s.r.norm() - 0.5 * spin.norm_squared()
}

#[test]
fn vacuum_energy_is_conserved_without_rotation() {
    let mut planet = PlanetModel::mars();
    planet.rotation_rate = 0.0;
    let veh = VehicleParams::default();
    let r0 = planet.radius + 130_000.0;
    let mut s = CartesianState {
        r: Vec3::new(r0, 0.0, 0.0),
        v: Vec3::new(0.0, 3000.0, 800.0),
    };
    let e0 = specific_energy(&s, &planet);
    for _ in 0..1000 {
        s = integrate_step(
            |x: &CartesianState| cartesian_derivatives(x, 0.3, 0.0, &veh, &planet),
            &s,
            0.1,
        )
        .unwrap();
    }
    let drift = ((specific_energy(&s, &planet) - e0) / e0).abs();
    assert!(drift < 1e-9, "drift {drift}");
}

#[test]
fn rotating_frame_circular_orbit_keeps_jacobi_energy() {
    let planet = PlanetModel::mars();
    let veh = VehicleParams::default();
    let r0 = planet.radius + 200_000.0;
    let speed = (planet.mu / r0).sqrt();
    let inertial_v = Vec3::new(0.0, speed * 0.6, speed * 0.8);
    let r = Vec3::new(r0, 0.0, 0.0);
    let mut s = CartesianState {
        r,
        v: inertial_v - planet.omega().cross(&r),
    };
    let period = 2.0 * std::f64::consts::PI * (r0.powi(3) / planet.mu).sqrt();
    let steps = (period / 0.5).round() as usize;
    let dt = period / steps as f64;
    let e0 = specific_energy(&s, &planet);
    for _ in 0..steps {
        s = integrate_step(
            |x: &CartesianState| cartesian_derivatives(x, 0.0, 0.0, &veh, &planet),
            &s,
            dt,
        )
        .unwrap();
    }
    let drift = ((specific_energy(&s, &planet) - e0) / e0).abs();
    assert!(drift < 1e-9, "drift {drift}");
    assert!(((s.r.norm() - r0) / r0).abs() < 1e-8);
}
