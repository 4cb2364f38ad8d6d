//! Measurement noise, Monte Carlo campaigns and accuracy metrics.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atmos::{prediction_grid, GRID_NODES};
use crate::dynamics::PlanetModel;
use crate::estimators::EstimatorKind;
use crate::neural::LstmModel;
use crate::pipeline::{FeatureVector, TrajectorySample};
use crate::sim::{case_seed, Scenario};
use crate::{Error, Result};

/// Three-sigma measurement noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// m
    pub radius: f64,
    /// Longitude and latitude, deg.
    pub angle_deg: f64,
    /// m/s
    pub speed: f64,
    /// Flight-path angle and heading, deg.
    pub attitude_deg: f64,
    /// Per acceleration component, in units of `g0`.
    pub accel_g: f64,
    /// m/s², the unit of `accel_g`.
    pub g0: f64,
    /// Multiplicative stagnation-pressure noise, fraction.
    pub pressure_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::table(PlanetModel::mars().g0())
    }
}

impl NoiseSpec {
    /// Reference noise levels with accelerations in units of `g0`.
    pub fn table(g0: f64) -> Self {
        Self {
            radius: 5.0,
            angle_deg: 8.4e-5,
            speed: 1.0,
            attitude_deg: 0.01,
            accel_g: 1e-7,
            g0,
            pressure_fraction: 0.01,
        }
    }

    pub fn zero() -> Self {
        Self {
            radius: 0.0,
            angle_deg: 0.0,
            speed: 0.0,
            attitude_deg: 0.0,
            accel_g: 0.0,
            g0: 0.0,
            pressure_fraction: 0.0,
        }
    }

    /// One-sigma additive levels per feature component; the pressure entry
    /// is the one-sigma relative level.
    pub fn sigmas(&self) -> [f64; 10] {
        let a = self.angle_deg.to_radians() / 3.0;
        let att = self.attitude_deg.to_radians() / 3.0;
        let acc = self.accel_g * self.g0 / 3.0;
        [
            self.radius / 3.0,
            a,
            a,
            self.speed / 3.0,
            att,
            att,
            acc,
            acc,
            acc,
            self.pressure_fraction / 3.0,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas().iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adds zero-mean Gaussian noise to every component. The pressure feature
/// is perturbed multiplicatively before the logarithm.
pub fn inject_noise<R: Rng + ?Sized>(
    feature: &FeatureVector,
    spec: &NoiseSpec,
    rng: &mut R,
) -> FeatureVector {
    let sigma = spec.sigmas();
    let mut out = feature.0;
    for j in 0..9 {
        let w: f64 = rng.sample(StandardNormal);
        out[j] += sigma[j] * w;
    }
    let w: f64 = rng.sample(StandardNormal);
    let factor = 1.0 + sigma[9] * w;
    out[9] += factor.max(f64::MIN_POSITIVE).log10();
    FeatureVector(out)
}

/// Statistics of |s_f| in km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_km: f64,
    pub std_km: f64,
    pub p01_km: f64,
    pub p99_km: f64,
    /// Mean of the signed values, km.
    pub signed_mean_km: f64,
}

/// Percentile by linear interpolation between order statistics at rank
/// p·(n-1).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, population standard deviation and 1st/99th percentiles of |s_f|.
pub fn summarize(signed_km: &[f64]) -> Result<Summary> {
    if signed_km.is_empty() {
        return Err(Error::Domain("cannot summarize an empty campaign".into()));
    }
    let n = signed_km.len() as f64;
    let mut abs: Vec<f64> = signed_km.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let mean = abs.iter().sum::<f64>() / n;
    let var = abs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Summary {
        count: signed_km.len(),
        mean_km: mean,
        std_km: var.sqrt(),
        p01_km: percentile(&abs, 0.01),
        p99_km: percentile(&abs, 0.99),
        signed_mean_km: signed_km.iter().sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignSpec {
    pub count: usize,
    pub master_seed: u64,
    pub first_index: u64,
    pub estimator: EstimatorKind,
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: u64,
    pub seed: u64,
    pub s_f_deg: f64,
    pub s_f_km: f64,
    pub undershoot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: u64,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub estimator: EstimatorKind,
    pub noise: bool,
    pub cases: Vec<CaseResult>,
    pub failures: Vec<CaseFailure>,
}

impl CampaignResult {
    pub fn signed_km(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.s_f_km).collect()
    }

    pub fn summary(&self) -> Result<Summary> {
        summarize(&self.signed_km())
    }

    /// Writes `results.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(fs::File::create(dir.join("results.csv"))?);
        writeln!(out, "case_id,seed,s_f_deg,s_f_km,undershoot_flag")?;
        for c in &self.cases {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.case_id, c.seed, c.s_f_deg, c.s_f_km, c.undershoot as u8
            )?;
        }
        out.flush()?;
        let summary = serde_json::json!({
            "estimator": self.estimator,
            "noise": self.noise,
            "summary": self.summary().ok(),
            "failures": self.failures,
        });
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(())
    }
}

/// Runs independent cases in parallel. Failed cases are recorded and the
/// campaign continues.
pub fn run_campaign(
    scenario: &Scenario,
    spec: &CampaignSpec,
    model: Option<&Arc<LstmModel>>,
) -> Result<CampaignResult> {
    scenario.validate()?;
    if let Some(noise) = &spec.noise {
        noise.validate()?;
    }
    if spec.estimator == EstimatorKind::Lstm && model.is_none() {
        return Err(Error::Config("lstm campaign needs a model".into()));
    }
    let radius = scenario.sim.planet.radius;
    let runs: Vec<(u64, u64, Result<f64>)> = (0..spec.count as u64)
        .into_par_iter()
        .map(|i| {
            let id = spec.first_index + i;
            let seed = case_seed(spec.master_seed, id);
            let run = scenario
                .run_case(seed, spec.estimator, model, spec.noise.as_ref())
                .map(|r| r.outcome.terminal_range);
            (id, seed, run)
        })
        .collect();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for (case_id, seed, run) in runs {
        match run {
            Ok(s) => cases.push(CaseResult {
                case_id,
                seed,
                s_f_deg: s.to_degrees(),
                s_f_km: s * radius / 1000.0,
                undershoot: s > 0.0,
            }),
            Err(e) => failures.push(CaseFailure {
                case_id,
                seed,
                reason: e.to_string(),
            }),
        }
    }
    Ok(CampaignResult {
        estimator: spec.estimator,
        noise: spec.noise.is_some(),
        cases,
        failures,
    })
}

/// Percent density error 100·|ρ̂ - ρ|/ρ.
pub fn density_error_percent(predicted: f64, truth: f64) -> f64 {
    100.0 * ((predicted - truth) / truth).abs()
}

/// Mean percent density error by prefix length and altitude node.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityErrorMap {
    /// `by_length[k][j]`: mean over cases at least k+1 steps long.
    pub by_length: Vec<Vec<f64>>,
    pub cases_by_length: Vec<usize>,
    /// Per node, each case evaluated at its own full length.
    pub full_length: Vec<f64>,
    /// Node-averaged error at 25, 50, 75 and 100 % of each case's length.
    pub quartiles: [f64; 4],
}

impl DensityErrorMap {
    pub fn full_length_mean(&self) -> f64 {
        self.full_length.iter().sum::<f64>() / self.full_length.len() as f64
    }

    /// Writes `errormap.csv` with one row per prefix length.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        let grid = prediction_grid();
        write!(out, "length,cases")?;
        for h in grid {
            write!(out, ",h{h}")?;
        }
        writeln!(out)?;
        for (k, row) in self.by_length.iter().enumerate() {
            write!(out, "{},{}", k + 1, self.cases_by_length[k])?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the model over each test sequence once (causal, so every prefix
/// output comes from one pass) and compares with the sample's targets.
pub fn density_error_map(model: &LstmModel, test: &[TrajectorySample]) -> Result<DensityErrorMap> {
    if test.is_empty() {
        return Err(Error::Domain("empty test set".into()));
    }
    let stats = model
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Config("model has no normalization statistics".into()))?;
    let per_case: Vec<Vec<Vec<f64>>> = test
        .par_iter()
        .map(|sample| {
            let truth = sample.target.densities();
            let inputs: Vec<Vec<f64>> = sample
                .features
                .iter()
                .map(|f| stats.normalize_features(f))
                .collect();
            let outputs = model.predict_sequence(&inputs)?;
            Ok(outputs
                .iter()
                .map(|y| {
                    stats
                        .denormalize_targets(y)
                        .iter()
                        .zip(&truth)
                        .map(|(&eta, &rho)| {
                            density_error_percent(10f64.powf(-eta.max(0.0).powi(2)), rho)
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let max_len = per_case.iter().map(Vec::len).max().unwrap_or(0);
    let mut by_length = vec![vec![0.0; GRID_NODES]; max_len];
    let mut cases_by_length = vec![0usize; max_len];
    for errors in &per_case {
        for (k, row) in errors.iter().enumerate() {
            cases_by_length[k] += 1;
            for (acc, v) in by_length[k].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    for (row, &n) in by_length.iter_mut().zip(&cases_by_length) {
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut full_length = vec![0.0; GRID_NODES];
    let mut quartiles = [0.0; 4];
    let node_mean = |row: &[f64]| row.iter().sum::<f64>() / row.len() as f64;
    for errors in &per_case {
        let n = errors.len();
        for (acc, v) in full_length.iter_mut().zip(&errors[n - 1]) {
            *acc += v;
        }
        for (q, acc) in quartiles.iter_mut().enumerate() {
            let k = (((q + 1) * n) as f64 / 4.0).ceil() as usize;
            *acc += node_mean(&errors[k.clamp(1, n) - 1]);
        }
    }
    let cases = per_case.len() as f64;
    full_length.iter_mut().for_each(|v| *v /= cases);
    quartiles.iter_mut().for_each(|v| *v /= cases);
    Ok(DensityErrorMap {
        by_length,
        cases_by_length,
        full_length,
        quartiles,
    })
}
