//! Point-mass entry dynamics over a rotating spherical planet.
//!
//! Lift and drag are accelerations (m/s²). Bank angle is positive for a
//! right turn, i.e. a positive bank increases the heading angle, which is
//! measured clockwise from north in the local horizontal plane.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanetModel {
    /// Gravitational parameter, m³/s².
    pub mu: f64,
    /// Rotation rate about the +z axis, rad/s.
    pub rotation_rate: f64,
    /// Reference radius, m.
    pub radius: f64,
}

impl Default for PlanetModel {
    fn default() -> Self {
        Self::mars()
    }
}

impl PlanetModel {
    pub fn mars() -> Self {
        Self {
            mu: 4.305e13,
            rotation_rate: 4.06e-3_f64.to_radians(),
            radius: 3_396_200.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.radius > 0.0) || !(self.rotation_rate >= 0.0) {
            return Err(Error::Domain(format!("invalid planet model {self:?}")));
        }
        Ok(())
    }

    /// Surface gravity μ/R².
    pub fn g0(&self) -> f64 {
        self.mu / (self.radius * self.radius)
    }

    /// Velocity scale sqrt(g0 R) used for non-dimensionalization.
    pub fn velocity_scale(&self) -> f64 {
        (self.g0() * self.radius).sqrt()
    }

    /// Time scale sqrt(R / g0).
    pub fn time_scale(&self) -> f64 {
        (self.radius / self.g0()).sqrt()
    }

    pub fn omega(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.rotation_rate)
    }

    pub fn altitude_km(&self, r: f64) -> f64 {
        (r - self.radius) / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// kg. Only informational: the equations use β and L/D.
    pub mass: f64,
    /// kg/m²
    pub ballistic_coefficient: f64,
    pub lift_to_drag: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 4.9e4,
            ballistic_coefficient: 155.0,
            lift_to_drag: 0.15,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ballistic_coefficient > 0.0) || !(self.lift_to_drag >= 0.0) || !(self.mass > 0.0)
        {
            return Err(Error::Domain(format!("invalid vehicle {self:?}")));
        }
        Ok(())
    }

    /// Drag acceleration ρV²/(2β).
    #[inline]
    pub fn drag(&self, density: f64, speed: f64) -> f64 {
        density * speed * speed / (2.0 * self.ballistic_coefficient)
    }
}

/// Position and planet-relative velocity in the planet-fixed frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianState {
    pub r: Vec3,
    pub v: Vec3,
}

/// Spherical state. Also used to carry its own time derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalState {
    /// Radius from planet center, m.
    pub r: f64,
    /// Longitude, rad.
    pub lon: f64,
    /// Latitude, rad.
    pub lat: f64,
    /// Planet-relative speed, m/s.
    pub v: f64,
    /// Flight-path angle, positive above the local horizon, rad.
    pub gamma: f64,
    /// Heading, clockwise from north, rad.
    pub heading: f64,
}

impl SphericalState {
    pub fn to_array(&self) -> [f64; 6] {
        [self.r, self.lon, self.lat, self.v, self.gamma, self.heading]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            r: a[0],
            lon: a[1],
            lat: a[2],
            v: a[3],
            gamma: a[4],
            heading: a[5],
        }
    }
}

/// Aerodynamic acceleration magnitudes and the summed vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeroAccel {
    pub lift: f64,
    pub drag: f64,
    pub vector: Vec3,
}

impl AeroAccel {
    /// Sensed load sqrt(L² + D²).
    pub fn load(&self) -> f64 {
        self.lift.hypot(self.drag)
    }
}

/// Lift and drag for bank angle `bank` at freestream density `density`.
pub fn aero_accels(
    state: &CartesianState,
    bank: f64,
    density: f64,
    veh: &VehicleParams,
) -> Result<AeroAccel> {
    let speed = state.v.norm();
    if !(speed > 0.0) {
        return Err(Error::Geometry("zero velocity".into()));
    }
    let h = state.r.cross(&state.v);
    let h_norm = h.norm();
    if !(h_norm > 1e-12 * state.r.norm() * speed) {
        return Err(Error::Geometry("position and velocity are parallel".into()));
    }
    let drag = veh.drag(density, speed);
    let lift = drag * veh.lift_to_drag;
    let vertical = state.v.cross(&h) / (speed * h_norm);
    let lateral = -h / h_norm;
    let (sin_b, cos_b) = bank.sin_cos();
    let vector = lift * (cos_b * vertical + sin_b * lateral) - drag * state.v / speed;
    Ok(AeroAccel { lift, drag, vector })
}

/// Time derivative of the Cartesian state; the returned `r` holds ṙ and
/// `v` holds V̇.
pub fn cartesian_derivatives(
    state: &CartesianState,
    bank: f64,
    density: f64,
    veh: &VehicleParams,
    planet: &PlanetModel,
) -> Result<CartesianState> {
    let aero = aero_accels(state, bank, density, veh)?;
    let r_norm = state.r.norm();
    let omega = planet.omega();
    let gravity = -planet.mu / (r_norm * r_norm * r_norm) * state.r;
    let coriolis = -2.0 * omega.cross(&state.v);
    let centripetal = -omega.cross(&omega.cross(&state.r));
    Ok(CartesianState {
        r: state.v,
        v: gravity + aero.vector + coriolis + centripetal,
    })
}

/// Time derivative of the spherical state, including the rotation terms.
pub fn spherical_derivatives(
    state: &SphericalState,
    bank: f64,
    density: f64,
    veh: &VehicleParams,
    planet: &PlanetModel,
) -> Result<SphericalState> {
    let SphericalState {
        r,
        lat,
        v,
        gamma,
        heading,
        ..
    } = *state;
    let (sin_lat, cos_lat) = lat.sin_cos();
    if cos_lat.abs() < 1e-10 {
        return Err(Error::Domain(
            "spherical equations are singular at the poles".into(),
        ));
    }
    let (sin_g, cos_g) = gamma.sin_cos();
    if cos_g.abs() < 1e-10 {
        return Err(Error::Domain("vertical flight-path angle".into()));
    }
    if !(v > 0.0) {
        return Err(Error::Domain("non-positive speed".into()));
    }
    let (sin_h, cos_h) = heading.sin_cos();
    let w = planet.rotation_rate;
    let g = planet.mu / (r * r);
    let drag = veh.drag(density, v);
    let lift = drag * veh.lift_to_drag;
    let (sin_b, cos_b) = bank.sin_cos();

    let r_dot = v * sin_g;
    let lon_dot = v * cos_g * sin_h / (r * cos_lat);
    let lat_dot = v * cos_g * cos_h / r;
    let v_dot =
        -drag - g * sin_g + w * w * r * cos_lat * (sin_g * cos_lat - cos_g * sin_lat * cos_h);
    let gamma_dot = (lift * cos_b - g * cos_g
        + v * v / r * cos_g
        + 2.0 * w * v * cos_lat * sin_h
        + w * w * r * cos_lat * (cos_g * cos_lat + sin_g * cos_h * sin_lat))
        / v;
    let heading_dot = (lift * sin_b / cos_g + v * v / r * cos_g * sin_h * sin_lat / cos_lat
        - 2.0 * w * v * (sin_g / cos_g * cos_h * cos_lat - sin_lat)
        + w * w * r / cos_g * sin_h * sin_lat * cos_lat)
        / v;
    Ok(SphericalState {
        r: r_dot,
        lon: lon_dot,
        lat: lat_dot,
        v: v_dot,
        gamma: gamma_dot,
        heading: heading_dot,
    })
}

/// Local up, east and north unit vectors at longitude `lon`, latitude `lat`.
fn local_frame(lon: f64, lat: f64) -> (Vec3, Vec3, Vec3) {
    let (sin_lon, cos_lon) = lon.sin_cos();
    let (sin_lat, cos_lat) = lat.sin_cos();
    let up = Vec3::new(cos_lat * cos_lon, cos_lat * sin_lon, sin_lat);
    let east = Vec3::new(-sin_lon, cos_lon, 0.0);
    let north = Vec3::new(-sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat);
    (up, east, north)
}

pub fn cart_to_spherical(state: &CartesianState) -> Result<SphericalState> {
    let r = state.r.norm();
    let speed = state.v.norm();
    if !(r > 0.0) {
        return Err(Error::Domain("zero position vector".into()));
    }
    if !(speed > 0.0) {
        return Err(Error::Domain("zero velocity".into()));
    }
    let horizontal = state.r.x.hypot(state.r.y);
    if horizontal <= 1e-12 * r {
        return Err(Error::Domain("position on the polar axis".into()));
    }
    let lon = state.r.y.atan2(state.r.x);
    let lat = state.r.z.atan2(horizontal);
    let (up, east, north) = local_frame(lon, lat);
    let v_up = state.v.dot(&up);
    let v_east = state.v.dot(&east);
    let v_north = state.v.dot(&north);
    let gamma = v_up.atan2(v_east.hypot(v_north));
    let heading = v_east.atan2(v_north);
    Ok(SphericalState {
        r,
        lon,
        lat,
        v: speed,
        gamma,
        heading,
    })
}

pub fn spherical_to_cart(state: &SphericalState) -> Result<CartesianState> {
    if !(state.r > 0.0) || !(state.v > 0.0) {
        return Err(Error::Domain("non-positive radius or speed".into()));
    }
    if state.lat.cos().abs() < 1e-12 {
        return Err(Error::Domain("latitude at the pole".into()));
    }
    let (up, east, north) = local_frame(state.lon, state.lat);
    let (sin_g, cos_g) = state.gamma.sin_cos();
    let (sin_h, cos_h) = state.heading.sin_cos();
    Ok(CartesianState {
        r: state.r * up,
        v: state.v * (sin_g * up + cos_g * sin_h * east + cos_g * cos_h * north),
    })
}

/// State types the fixed-step integrator can advance.
pub trait OdeState: Clone {
    /// `self + h * rate`
    fn add_scaled(&self, rate: &Self, h: f64) -> Self;
}

impl OdeState for f64 {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        self + h * rate
    }
}

impl<const N: usize> OdeState for [f64; N] {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        let mut out = *self;
        for (o, r) in out.iter_mut().zip(rate) {
            *o += h * r;
        }
        out
    }
}

impl OdeState for CartesianState {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        CartesianState {
            r: self.r + h * rate.r,
            v: self.v + h * rate.v,
        }
    }
}

impl OdeState for SphericalState {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        SphericalState::from_array(self.to_array().add_scaled(&rate.to_array(), h))
    }
}

/// One classical fourth-order Runge-Kutta step of size `dt`.
pub fn integrate_step<S, F>(mut derivative: F, state: &S, dt: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(&S) -> Result<S>,
{
    let k1 = derivative(state)?;
    let k2 = derivative(&state.add_scaled(&k1, 0.5 * dt))?;
    let k3 = derivative(&state.add_scaled(&k2, 0.5 * dt))?;
    let k4 = derivative(&state.add_scaled(&k3, dt))?;
    Ok(state
        .add_scaled(&k1, dt / 6.0)
        .add_scaled(&k2, dt / 3.0)
        .add_scaled(&k3, dt / 3.0)
        .add_scaled(&k4, dt / 6.0))
}

/// Great-circle central angle between two points, rad.
pub fn central_angle(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let a = (0.5 * dlat).sin().powi(2) + lat1.cos() * lat2.cos() * (0.5 * dlon).sin().powi(2);
    2.0 * a.sqrt().min(1.0).asin()
}

/// Initial azimuth of the great circle from point 1 to point 2, clockwise
/// from north, rad.
pub fn great_circle_azimuth(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let dlon = lon2 - lon1;
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    y.atan2(x)
}
