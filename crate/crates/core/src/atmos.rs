//! Atmosphere models.
//!
//! Densities are in kg/m³ and altitudes in km throughout this module. The
//! surrogate generator produces seedable stochastic profiles with a
//! dust-dependent mean, a sinusoidal wave bias and an altitude-growing
//! Gauss-Markov perturbation, all applied in log₁₀ density.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lowest prediction altitude, km.
pub const GRID_MIN_KM: f64 = 4.0;
/// Prediction grid spacing, km.
pub const GRID_STEP_KM: f64 = 2.0;
/// Number of prediction altitudes (4, 6, ..., 80 km).
pub const GRID_NODES: usize = 39;

/// The fixed prediction altitudes in km, ascending.
pub fn prediction_grid() -> [f64; GRID_NODES] {
    let mut grid = [0.0; GRID_NODES];
    for (j, h) in grid.iter_mut().enumerate() {
        *h = GRID_MIN_KM + GRID_STEP_KM * j as f64;
    }
    grid
}

/// Single-scale-height exponential density law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentialModel {
    /// kg/m³
    pub surface_density: f64,
    /// km
    pub scale_height: f64,
}

impl Default for ExponentialModel {
    fn default() -> Self {
        Self {
            surface_density: 2.63e-2,
            scale_height: 10.15,
        }
    }
}

impl ExponentialModel {
    pub fn new(surface_density: f64, scale_height: f64) -> Result<Self> {
        if !(surface_density > 0.0) || !(scale_height > 0.0) {
            return Err(Error::Domain(format!(
                "exponential model needs positive parameters, got rho0={surface_density}, H={scale_height}"
            )));
        }
        Ok(Self {
            surface_density,
            scale_height,
        })
    }

    /// Density at altitude `h_km`. Negative altitudes are rejected.
    pub fn density(&self, h_km: f64) -> Result<f64> {
        if !(h_km >= 0.0) {
            return Err(Error::Domain(format!("negative altitude {h_km} km")));
        }
        Ok(self.density_unchecked(h_km))
    }

    /// Density without the altitude check; the law is evaluated as written
    /// for any real altitude.
    #[inline]
    pub fn density_unchecked(&self, h_km: f64) -> f64 {
        self.surface_density * (-h_km / self.scale_height).exp()
    }
}

/// Ideal-gas properties used for the pressure and Mach number features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasModel {
    pub ratio_of_specific_heats: f64,
    /// J/(kg K)
    pub specific_gas_constant: f64,
    /// Isothermal temperature, K.
    pub reference_temperature: f64,
}

impl Default for GasModel {
    fn default() -> Self {
        Self {
            ratio_of_specific_heats: 1.28,
            specific_gas_constant: 188.92,
            reference_temperature: 210.0,
        }
    }
}

impl GasModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_of_specific_heats > 1.0)
            || !(self.specific_gas_constant > 0.0)
            || !(self.reference_temperature > 0.0)
        {
            return Err(Error::Domain(format!("invalid gas model {self:?}")));
        }
        Ok(())
    }

    /// Temperature at altitude; the model is isothermal.
    pub fn temperature(&self, _h_km: f64) -> f64 {
        self.reference_temperature
    }

    /// Speed of sound in m/s.
    pub fn speed_of_sound(&self, h_km: f64) -> f64 {
        (self.ratio_of_specific_heats * self.specific_gas_constant * self.temperature(h_km)).sqrt()
    }

    /// Static pressure in Pa from density and altitude.
    pub fn pressure(&self, density: f64, h_km: f64) -> f64 {
        density * self.specific_gas_constant * self.temperature(h_km)
    }
}

/// Settings drawn per trajectory for the surrogate atmosphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtmoSample {
    pub dust_level: f64,
    pub wave_offset: f64,
    pub seed: u64,
    pub perturbation_scale: f64,
}

pub const DUST_RANGE: (f64, f64) = (0.1, 3.0);
pub const WAVE_OFFSET_RANGE: (f64, f64) = (1.5, 2.5);
pub const SEED_RANGE: (u64, u64) = (1, 900_000_000);
pub const PERTURBATION_SCALE_RANGE: (f64, f64) = (0.0, 2.0);

impl AtmoSample {
    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !within(self.dust_level, DUST_RANGE) {
            return Err(Error::Domain(format!(
                "dust level {} out of range",
                self.dust_level
            )));
        }
        if !within(self.wave_offset, WAVE_OFFSET_RANGE) {
            return Err(Error::Domain(format!(
                "wave offset {} out of range",
                self.wave_offset
            )));
        }
        if self.seed < SEED_RANGE.0 || self.seed > SEED_RANGE.1 {
            return Err(Error::Domain(format!("seed {} out of range", self.seed)));
        }
        if !within(self.perturbation_scale, PERTURBATION_SCALE_RANGE) {
            return Err(Error::Domain(format!(
                "perturbation scale {} out of range",
                self.perturbation_scale
            )));
        }
        Ok(())
    }

    /// Mid-range dust level and wave offset with no perturbations.
    pub fn nominal() -> Self {
        Self {
            dust_level: 0.5 * (DUST_RANGE.0 + DUST_RANGE.1),
            wave_offset: 0.5 * (WAVE_OFFSET_RANGE.0 + WAVE_OFFSET_RANGE.1),
            seed: SEED_RANGE.0,
            perturbation_scale: 0.0,
        }
    }

    /// Draws dust level, wave offset and seed uniformly over their ranges,
    /// with the given perturbation scale.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, perturbation_scale: f64) -> Self {
        Self {
            dust_level: rng.gen_range(DUST_RANGE.0..=DUST_RANGE.1),
            wave_offset: rng.gen_range(WAVE_OFFSET_RANGE.0..=WAVE_OFFSET_RANGE.1),
            seed: rng.gen_range(SEED_RANGE.0..=SEED_RANGE.1),
            perturbation_scale,
        }
    }
}

/// Shape constants of the surrogate generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub base: ExponentialModel,
    pub dust_reference: f64,
    /// Fractional scale-height change per unit dust above the reference.
    pub dust_scale_height_coeff: f64,
    /// Fractional surface-density change per unit dust above the reference.
    pub dust_surface_density_coeff: f64,
    /// Wave amplitude in dex per unit wave offset.
    pub wave_amplitude_dex: f64,
    pub wave_period_km: f64,
    pub correlation_length_km: f64,
    /// Perturbation standard deviation at the surface, dex.
    pub sigma_surface_dex: f64,
    /// Perturbation standard deviation at `sigma_reference_altitude_km`, dex.
    pub sigma_top_dex: f64,
    pub sigma_reference_altitude_km: f64,
    pub grid_step_km: f64,
    pub max_altitude_km: f64,
    pub density_cap: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            base: ExponentialModel::default(),
            dust_reference: 1.55,
            dust_scale_height_coeff: 0.03,
            dust_surface_density_coeff: 0.05,
            wave_amplitude_dex: 0.02,
            wave_period_km: 60.0,
            correlation_length_km: 8.0,
            sigma_surface_dex: 0.005,
            sigma_top_dex: 0.12,
            sigma_reference_altitude_km: 130.0,
            grid_step_km: 0.5,
            max_altitude_km: 140.0,
            density_cap: 0.9,
        }
    }
}

impl SurrogateConfig {
    /// Dust-adjusted exponential law around which a sample is built.
    pub fn mean_model(&self, dust_level: f64) -> ExponentialModel {
        let dust = dust_level - self.dust_reference;
        ExponentialModel {
            surface_density: self.base.surface_density
                * (1.0 + self.dust_surface_density_coeff * dust),
            scale_height: self.base.scale_height * (1.0 + self.dust_scale_height_coeff * dust),
        }
    }

    /// Wave bias in log₁₀ density at altitude `h_km`.
    pub fn wave_dex(&self, wave_offset: f64, h_km: f64) -> f64 {
        self.wave_amplitude_dex
            * wave_offset
            * (std::f64::consts::TAU * h_km / self.wave_period_km).sin()
    }

    /// Standard deviation of the stochastic term in dex at perturbation
    /// scale 2.
    pub fn sigma_dex(&self, h_km: f64) -> f64 {
        self.sigma_surface_dex
            + (self.sigma_top_dex - self.sigma_surface_dex) * h_km
                / self.sigma_reference_altitude_km
    }

    fn node_count(&self) -> usize {
        (self.max_altitude_km / self.grid_step_km).round() as usize + 1
    }
}

/// Tabulated truth atmosphere on an ascending altitude grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AtmosphereProfile {
    altitudes_km: Vec<f64>,
    density: Vec<f64>,
    temperature: Vec<f64>,
    pressure: Vec<f64>,
}

impl AtmosphereProfile {
    /// Builds a profile from altitudes and densities, filling temperature and
    /// pressure from the gas model.
    pub fn from_density(altitudes_km: Vec<f64>, density: Vec<f64>, gas: &GasModel) -> Result<Self> {
        if altitudes_km.len() != density.len() || altitudes_km.len() < 2 {
            return Err(Error::Shape(format!(
                "profile needs >= 2 matching nodes, got {} altitudes and {} densities",
                altitudes_km.len(),
                density.len()
            )));
        }
        if altitudes_km.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(
                "profile altitudes must be strictly ascending".into(),
            ));
        }
        if density.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Domain(
                "profile density must be positive and finite".into(),
            ));
        }
        let temperature: Vec<f64> = altitudes_km.iter().map(|&h| gas.temperature(h)).collect();
        let pressure = altitudes_km
            .iter()
            .zip(&density)
            .map(|(&h, &d)| gas.pressure(d, h))
            .collect();
        Ok(Self {
            altitudes_km,
            density,
            temperature,
            pressure,
        })
    }

    /// Tabulates an exponential law on `altitudes_km`.
    pub fn from_exponential(
        model: &ExponentialModel,
        altitudes_km: Vec<f64>,
        gas: &GasModel,
    ) -> Result<Self> {
        let density = altitudes_km
            .iter()
            .map(|&h| model.density_unchecked(h))
            .collect();
        Self::from_density(altitudes_km, density, gas)
    }

    pub fn altitudes_km(&self) -> &[f64] {
        &self.altitudes_km
    }

    pub fn densities(&self) -> &[f64] {
        &self.density
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperature
    }

    pub fn pressures(&self) -> &[f64] {
        &self.pressure
    }

    /// Log-linear interpolation; outside the grid the end segments are
    /// extended.
    pub fn density_at(&self, h_km: f64) -> f64 {
        log_linear(&self.altitudes_km, &self.density, h_km)
    }

    /// Static pressure at altitude using the stored (isothermal) temperature.
    pub fn pressure_at(&self, gas: &GasModel, h_km: f64) -> f64 {
        gas.pressure(self.density_at(h_km), h_km)
    }

    /// Writes `manifest.json` and `profile.csv` into `dir`.
    pub fn write(&self, dir: &Path, sample: &AtmoSample, gas: &GasModel) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::json!({
            "format": "atmosphere-profile",
            "version": 1,
            "sample": sample,
            "gas": gas,
            "nodes": self.altitudes_km.len(),
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        let mut out = fs::File::create(dir.join("profile.csv"))?;
        writeln!(out, "h_km,density,temperature,pressure")?;
        for i in 0..self.altitudes_km.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.altitudes_km[i], self.density[i], self.temperature[i], self.pressure[i]
            )?;
        }
        Ok(())
    }
}

/// Log-linear interpolation of a positive tabulated function on ascending
/// abscissae, extrapolating the end segments.
pub(crate) fn log_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    debug_assert!(n >= 2 && ys.len() == n);
    let upper = xs.partition_point(|&node| node < x);
    if upper < n && xs[upper] == x {
        return ys[upper];
    }
    let i = upper.clamp(1, n - 1) - 1;
    let (x0, x1) = (xs[i], xs[i + 1]);
    let (l0, l1) = (ys[i].ln(), ys[i + 1].ln());
    let t = (x - x0) / (x1 - x0);
    (l0 + t * (l1 - l0)).exp()
}

/// Generates the truth profile for `sample` with the default surrogate
/// shape.
pub fn generate_profile(sample: &AtmoSample, gas: &GasModel) -> Result<AtmosphereProfile> {
    generate_profile_with(sample, gas, &SurrogateConfig::default())
}

/// Generates a surrogate profile. The output is a pure function of the
/// sample and configuration.
pub fn generate_profile_with(
    sample: &AtmoSample,
    gas: &GasModel,
    config: &SurrogateConfig,
) -> Result<AtmosphereProfile> {
    sample.validate()?;
    gas.validate()?;
    let mean = config.mean_model(sample.dust_level);
    let n = config.node_count();
    let step = config.grid_step_km;
    let phi = (-step / config.correlation_length_km).exp();
    let innovation = (1.0 - phi * phi).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
    let amplitude = sample.perturbation_scale / 2.0;

    let mut altitudes = Vec::with_capacity(n);
    let mut density = Vec::with_capacity(n);
    let mut markov: f64 = rng.sample(StandardNormal);
    for k in 0..n {
        let h = step * k as f64;
        if k > 0 {
            let w: f64 = rng.sample(StandardNormal);
            markov = phi * markov + innovation * w;
        }
        let log_rho = mean.density_unchecked(h).log10()
            + config.wave_dex(sample.wave_offset, h)
            + amplitude * config.sigma_dex(h) * markov;
        altitudes.push(h);
        density.push(10f64.powf(log_rho).min(config.density_cap));
    }
    AtmosphereProfile::from_density(altitudes, density, gas)
}

/// Pseudodensity η = sqrt(-log₁₀ ρ) on the fixed prediction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudodensityProfile {
    values: Vec<f64>,
}

impl PseudodensityProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != GRID_NODES {
            return Err(Error::Shape(format!(
                "pseudodensity profile needs {GRID_NODES} nodes, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "negative or non-finite pseudodensity {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Densities on the grid, ρ = 10^(-η²).
    pub fn densities(&self) -> Vec<f64> {
        from_pseudodensity(self)
    }
}

/// Samples `profile` on the prediction grid and transforms to pseudodensity.
pub fn to_pseudodensity(profile: &AtmosphereProfile) -> Result<PseudodensityProfile> {
    let values = prediction_grid()
        .iter()
        .map(|&h| pseudodensity(profile.density_at(h)))
        .collect::<Result<Vec<_>>>()?;
    PseudodensityProfile::new(values)
}

/// η for a single density value.
pub fn pseudodensity(density: f64) -> Result<f64> {
    if !(density > 0.0) || density >= 1.0 {
        return Err(Error::Domain(format!(
            "pseudodensity needs 0 < rho < 1 kg/m^3, got {density}"
        )));
    }
    Ok((-density.log10()).sqrt())
}

/// ρ for a single pseudodensity value.
pub fn density_from_pseudodensity(eta: f64) -> Result<f64> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("negative pseudodensity {eta}")));
    }
    Ok(10f64.powf(-eta * eta))
}

pub fn from_pseudodensity(profile: &PseudodensityProfile) -> Vec<f64> {
    profile
        .values
        .iter()
        .map(|&eta| 10f64.powf(-eta * eta))
        .collect()
}
