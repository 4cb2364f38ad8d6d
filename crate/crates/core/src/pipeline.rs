//! Training data: features, targets, normalization, dataset generation and
//! the curriculum outer loop.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atmos::{
    prediction_grid, pseudodensity, AtmoSample, AtmosphereProfile, GasModel, PseudodensityProfile,
    GRID_NODES,
};
use crate::dynamics::{PlanetModel, SphericalState, Vec3};
use crate::estimators::EstimatorKind;
use crate::evalmc::{inject_noise, summarize, NoiseSpec, Summary};
use crate::neural::{LstmModel, SequenceSample};
use crate::sim::{case_seed, LogRow, Scenario};
use crate::{Error, Result};

pub const FEATURE_LEN: usize = 10;

pub const FEATURE_NAMES: [&str; FEATURE_LEN] = [
    "r",
    "theta",
    "phi",
    "V",
    "gamma",
    "psi",
    "a_x",
    "a_y",
    "a_z",
    "log10_p02",
];

/// Below this Mach number the pressure feature skips the normal shock.
pub const SUBSONIC_FALLBACK_MACH: f64 = 1.2;

/// Lower bound applied to normalization standard deviations.
pub const STD_GUARD: f64 = 1e-12;

/// (r, θ, φ, V, γ, ψ, a_x, a_y, a_z, log₁₀P₀₂)
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_LEN]);

impl FeatureVector {
    pub fn new(state: &SphericalState, accel: &Vec3, log10_p02: f64) -> Self {
        Self([
            state.r,
            state.lon,
            state.lat,
            state.v,
            state.gamma,
            state.heading,
            accel.x,
            accel.y,
            accel.z,
            log10_p02,
        ])
    }

    pub fn spherical(&self) -> SphericalState {
        let x = &self.0;
        SphericalState {
            r: x[0],
            lon: x[1],
            lat: x[2],
            v: x[3],
            gamma: x[4],
            heading: x[5],
        }
    }

    pub fn accel(&self) -> Vec3 {
        Vec3::new(self.0[6], self.0[7], self.0[8])
    }

    pub fn log10_p02(&self) -> f64 {
        self.0[9]
    }
}

/// Isentropic stagnation pressure from static pressure and Mach number.
pub fn isentropic_stagnation(static_pressure: f64, mach: f64, gamma: f64) -> f64 {
    static_pressure * (1.0 + 0.5 * (gamma - 1.0) * mach * mach).powf(gamma / (gamma - 1.0))
}

/// Ratio P₀₂/P₀₁ across a normal shock at upstream Mach `mach`.
pub fn normal_shock_ratio(mach: f64, gamma: f64) -> f64 {
    let m2 = mach * mach;
    let a = ((gamma + 1.0) * m2 / ((gamma - 1.0) * m2 + 2.0)).powf(gamma / (gamma - 1.0));
    let b = ((gamma + 1.0) / (2.0 * gamma * m2 - (gamma - 1.0))).powf(1.0 / (gamma - 1.0));
    a * b
}

/// Stagnation pressure behind the shock from the freestream stagnation
/// pressure. Below [`SUBSONIC_FALLBACK_MACH`] the shock factor is dropped.
pub fn post_shock_stagnation(p01: f64, mach: f64, gamma: f64) -> f64 {
    if mach < SUBSONIC_FALLBACK_MACH {
        p01
    } else {
        p01 * normal_shock_ratio(mach, gamma)
    }
}

/// log₁₀ P₀₂ in Pa at the given state.
pub fn stagnation_pressure_feature(
    state: &SphericalState,
    profile: &AtmosphereProfile,
    gas: &GasModel,
    planet: &PlanetModel,
) -> Result<f64> {
    let h_km = planet.altitude_km(state.r);
    let pressure = profile.pressure_at(gas, h_km);
    if !(pressure > 0.0) {
        return Err(Error::Numeric(format!(
            "non-positive static pressure at {h_km:.2} km"
        )));
    }
    let gamma = gas.ratio_of_specific_heats;
    let mach = state.v / gas.speed_of_sound(h_km);
    let p01 = isentropic_stagnation(pressure, mach, gamma);
    Ok(post_shock_stagnation(p01, mach, gamma).log10())
}

pub fn compute_features(
    state: &SphericalState,
    accel: &Vec3,
    profile: &AtmosphereProfile,
    gas: &GasModel,
    planet: &PlanetModel,
) -> Result<FeatureVector> {
    let p = stagnation_pressure_feature(state, profile, gas, planet)?;
    Ok(FeatureVector::new(state, accel, p))
}

/// One feature vector per active guidance cycle of a trajectory log.
pub fn extract_features(
    log: &[LogRow],
    profile: &AtmosphereProfile,
    gas: &GasModel,
    planet: &PlanetModel,
) -> Result<Vec<FeatureVector>> {
    log.iter()
        .filter(|row| row.command.is_some())
        .map(|row| {
            let a = Vec3::new(row.accel[0], row.accel[1], row.accel[2]);
            compute_features(&row.state, &a, profile, gas, planet)
        })
        .collect()
}

/// Pseudodensity targets on the prediction grid. Nodes below the terminal
/// altitude are extended linearly from the two lowest nodes flown through.
pub fn interpolate_targets(
    truth: &AtmosphereProfile,
    terminal_altitude_km: f64,
) -> Result<PseudodensityProfile> {
    let grid = prediction_grid();
    let mut eta = vec![0.0; GRID_NODES];
    for (e, &h) in eta.iter_mut().zip(&grid) {
        *e = pseudodensity(truth.density_at(h))?;
    }
    let first = grid
        .partition_point(|&h| h < terminal_altitude_km)
        .min(GRID_NODES - 2);
    if first > 0 {
        let (h0, h1) = (grid[first], grid[first + 1]);
        let (e0, e1) = (eta[first], eta[first + 1]);
        let slope = (e1 - e0) / (h1 - h0);
        for j in 0..first {
            eta[j] = (e0 + slope * (grid[j] - h0)).max(0.0);
        }
    }
    PseudodensityProfile::new(eta)
}

/// Feature and target normalization. Feature moments average each
/// trajectory over its steps first and then across trajectories; target
/// moments average across trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    /// Indices whose standard deviation was raised to the guard value.
    #[serde(default)]
    pub guarded_features: Vec<usize>,
    #[serde(default)]
    pub guarded_targets: Vec<usize>,
}

fn guard(std: &mut [f64]) -> Vec<usize> {
    let mut hits = Vec::new();
    for (j, s) in std.iter_mut().enumerate() {
        if !(*s >= STD_GUARD) {
            *s = STD_GUARD;
            hits.push(j);
        }
    }
    hits
}

impl NormalizationStats {
    /// Statistics over feature sequences and their targets.
    pub fn compute(sequences: &[&[FeatureVector]], targets: &[&[f64]]) -> Result<Self> {
        if sequences.is_empty() || sequences.len() != targets.len() {
            return Err(Error::Shape(
                "normalization needs matching non-empty sequences and targets".into(),
            ));
        }
        if sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("empty feature sequence".into()));
        }
        let m = targets[0].len();
        if targets.iter().any(|t| t.len() != m) {
            return Err(Error::Shape("targets differ in length".into()));
        }
        let k = sequences.len() as f64;
        let mut feature_mean = vec![0.0; FEATURE_LEN];
        for seq in sequences {
            let n = seq.len() as f64;
            for x in seq.iter() {
                for j in 0..FEATURE_LEN {
                    feature_mean[j] += x.0[j] / n;
                }
            }
        }
        feature_mean.iter_mut().for_each(|v| *v /= k);
        let mut feature_std = vec![0.0; FEATURE_LEN];
        for seq in sequences {
            let n = seq.len() as f64;
            for x in seq.iter() {
                for j in 0..FEATURE_LEN {
                    let d = x.0[j] - feature_mean[j];
                    feature_std[j] += d * d / n;
                }
            }
        }
        feature_std.iter_mut().for_each(|v| *v = (*v / k).sqrt());

        let mut target_mean = vec![0.0; m];
        for t in targets {
            for j in 0..m {
                target_mean[j] += t[j];
            }
        }
        target_mean.iter_mut().for_each(|v| *v /= k);
        let mut target_std = vec![0.0; m];
        for t in targets {
            for j in 0..m {
                let d = t[j] - target_mean[j];
                target_std[j] += d * d;
            }
        }
        target_std.iter_mut().for_each(|v| *v = (*v / k).sqrt());
        let guarded_features = guard(&mut feature_std);
        let guarded_targets = guard(&mut target_std);
        Ok(Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
            guarded_features,
            guarded_targets,
        })
    }

    pub fn from_samples(samples: &[TrajectorySample]) -> Result<Self> {
        let seqs: Vec<&[FeatureVector]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let targets: Vec<&[f64]> = samples.iter().map(|s| s.target.values()).collect();
        Self::compute(&seqs, &targets)
    }

    pub fn normalize_features(&self, x: &FeatureVector) -> Vec<f64> {
        (0..FEATURE_LEN)
            .map(|j| (x.0[j] - self.feature_mean[j]) / self.feature_std[j])
            .collect()
    }

    pub fn denormalize_features(&self, x: &[f64]) -> FeatureVector {
        let mut out = [0.0; FEATURE_LEN];
        for j in 0..FEATURE_LEN {
            out[j] = x[j] * self.feature_std[j] + self.feature_mean[j];
        }
        FeatureVector(out)
    }

    pub fn normalize_targets(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter()
            .zip(self.target_mean.iter().zip(&self.target_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.target_mean.iter().zip(&self.target_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// One closed-loop trajectory prepared for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub case_seed: u64,
    pub atmosphere: AtmoSample,
    /// Guidance-cycle times from activation onward, s.
    pub times: Vec<f64>,
    pub features: Vec<FeatureVector>,
    pub target: PseudodensityProfile,
    /// Signed terminal range-to-go, rad.
    pub terminal_range: f64,
    pub terminal_altitude_km: f64,
}

impl TrajectorySample {
    pub fn to_sequence(&self, stats: &NormalizationStats) -> SequenceSample {
        SequenceSample {
            inputs: self
                .features
                .iter()
                .map(|f| stats.normalize_features(f))
                .collect(),
            target: stats.normalize_targets(self.target.values()),
        }
    }

    /// Copy with every feature vector corrupted by measurement noise.
    pub fn with_noise(&self, spec: &NoiseSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            features: self
                .features
                .iter()
                .map(|f| inject_noise(f, spec, &mut rng))
                .collect(),
            ..self.clone()
        }
    }
}

/// Provenance of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub master_seed: u64,
    pub first_index: u64,
    pub requested: usize,
    pub count: usize,
    pub failures: usize,
    pub estimator: EstimatorKind,
    pub scenario_hash: String,
    pub cases: Vec<CaseProvenance>,
    pub failed_cases: Vec<FailedCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseProvenance {
    pub index: u64,
    pub seed: u64,
    pub atmosphere: AtmoSample,
    pub terminal_range: f64,
    pub terminal_altitude_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCase {
    pub index: u64,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<TrajectorySample>,
}

/// Which cases to fly for a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub master_seed: u64,
    /// Index of the first case; lets disjoint datasets share a master seed.
    pub first_index: u64,
    pub estimator: EstimatorKind,
}

const DATASET_FORMAT: &str = "fnpeg-dataset";

/// Stable FNV-1a hash of the scenario's JSON form.
pub fn scenario_hash(scenario: &Scenario) -> String {
    let text = serde_json::to_string(scenario).unwrap_or_default();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Flies `spec.count` closed-loop cases and keeps the successful ones whose
/// altitude decreased monotonically. Cases run in parallel; the output
/// order follows the case index.
pub fn generate_dataset(
    scenario: &Scenario,
    spec: &DatasetSpec,
    model: Option<&Arc<LstmModel>>,
) -> Result<Dataset> {
    scenario.validate()?;
    if spec.estimator == EstimatorKind::Lstm && model.is_none() {
        return Err(Error::Config(
            "lstm dataset generation needs a model".into(),
        ));
    }
    let runs: Vec<(u64, u64, Result<TrajectorySample>)> = (0..spec.count as u64)
        .into_par_iter()
        .map(|i| {
            let index = spec.first_index + i;
            let seed = case_seed(spec.master_seed, index);
            (
                index,
                seed,
                fly_sample(scenario, seed, spec.estimator, model),
            )
        })
        .collect();
    let mut samples = Vec::new();
    let mut cases = Vec::new();
    let mut failed_cases = Vec::new();
    for (index, seed, run) in runs {
        match run {
            Ok(sample) => {
                cases.push(CaseProvenance {
                    index,
                    seed,
                    atmosphere: sample.atmosphere,
                    terminal_range: sample.terminal_range,
                    terminal_altitude_km: sample.terminal_altitude_km,
                });
                samples.push(sample);
            }
            Err(e) => failed_cases.push(FailedCase {
                index,
                seed,
                reason: e.to_string(),
            }),
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            master_seed: spec.master_seed,
            first_index: spec.first_index,
            requested: spec.count,
            count: samples.len(),
            failures: failed_cases.len(),
            estimator: spec.estimator,
            scenario_hash: scenario_hash(scenario),
            cases,
            failed_cases,
        },
        samples,
    })
}

fn fly_sample(
    scenario: &Scenario,
    seed: u64,
    kind: EstimatorKind,
    model: Option<&Arc<LstmModel>>,
) -> Result<TrajectorySample> {
    let run = scenario.run_case(seed, kind, model, None)?;
    let out = run.outcome;
    if !out.monotone_altitude {
        return Err(Error::Simulation("altitude is not monotone".into()));
    }
    if out.features.is_empty() {
        return Err(Error::Simulation("guidance never activated".into()));
    }
    let target = interpolate_targets(&run.profile, out.terminal_altitude_km)?;
    Ok(TrajectorySample {
        case_seed: seed,
        atmosphere: run.sample,
        times: out.feature_times,
        features: out.features,
        target,
        terminal_range: out.terminal_range,
        terminal_altitude_km: out.terminal_altitude_km,
    })
}

fn write_record(out: &mut impl Write, values: &[f64]) -> Result<()> {
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_record(input: &mut impl Read) -> Result<Vec<f64>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let n = u64::from_le_bytes(len) as usize;
    if n > 1 << 28 {
        return Err(Error::Ingest(format!("implausible record length {n}")));
    }
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Dataset {
    /// Writes `manifest.json`, `samples.bin` and, when given, `norm.json`.
    ///
    /// Each trajectory is one length-prefixed record: a u64 count followed
    /// by that many little-endian f64 values laid out as
    /// `[N, times(N), features(N×10), targets(39)]`.
    pub fn write(&self, dir: &Path, stats: Option<&NormalizationStats>) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        let mut out = BufWriter::new(fs::File::create(dir.join("samples.bin"))?);
        for s in &self.samples {
            let n = s.features.len();
            let mut values = Vec::with_capacity(1 + n * (1 + FEATURE_LEN) + GRID_NODES);
            values.push(n as f64);
            values.extend(&s.times);
            for f in &s.features {
                values.extend(&f.0);
            }
            values.extend(s.target.values());
            write_record(&mut out, &values)?;
        }
        out.flush()?;
        if let Some(stats) = stats {
            fs::write(dir.join("norm.json"), serde_json::to_string_pretty(stats)?)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Ingest(format!("{} is not a dataset", dir.display())));
        }
        let mut input = BufReader::new(fs::File::open(dir.join("samples.bin"))?);
        let mut samples = Vec::with_capacity(manifest.count);
        for case in &manifest.cases {
            let values = read_record(&mut input)
                .map_err(|e| Error::Ingest(format!("record {}: {e}", case.index)))?;
            let n = values.first().copied().unwrap_or(-1.0);
            if !(n >= 1.0) || n.fract() != 0.0 {
                return Err(Error::Ingest(format!(
                    "record {} has bad length",
                    case.index
                )));
            }
            let n = n as usize;
            if values.len() != 1 + n * (1 + FEATURE_LEN) + GRID_NODES {
                return Err(Error::Ingest(format!("record {} is truncated", case.index)));
            }
            let times = values[1..1 + n].to_vec();
            let features = values[1 + n..1 + n + n * FEATURE_LEN]
                .chunks_exact(FEATURE_LEN)
                .map(|c| FeatureVector(c.try_into().expect("feature chunk")))
                .collect();
            let target = PseudodensityProfile::new(values[1 + n + n * FEATURE_LEN..].to_vec())?;
            samples.push(TrajectorySample {
                case_seed: case.seed,
                atmosphere: case.atmosphere,
                times,
                features,
                target,
                terminal_range: case.terminal_range,
                terminal_altitude_km: case.terminal_altitude_km,
            });
        }
        if samples.len() != manifest.count {
            return Err(Error::Ingest("sample count does not match manifest".into()));
        }
        Ok(Self { manifest, samples })
    }

    /// Noise-corrupted copy, one generator stream per trajectory.
    pub fn with_noise(&self, spec: &NoiseSpec, master_seed: u64) -> Self {
        Self {
            manifest: self.manifest.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| s.with_noise(spec, crate::sim::splitmix64(master_seed ^ s.case_seed)))
                .collect(),
        }
    }

    /// Signed terminal range-to-go of every sample, km.
    pub fn terminal_ranges_km(&self, planet: &PlanetModel) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.terminal_range * planet.radius / 1000.0)
            .collect()
    }
}

/// Splits samples into training and validation parts, normalizes both with
/// statistics from the training part.
pub fn prepare_training(
    samples: &[TrajectorySample],
    train_fraction: f64,
) -> Result<(NormalizationStats, Vec<SequenceSample>, Vec<SequenceSample>)> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to train on".into()));
    }
    let n_train =
        ((samples.len() as f64 * train_fraction).round() as usize).clamp(1, samples.len());
    let stats = NormalizationStats::from_samples(&samples[..n_train])?;
    let train = samples[..n_train]
        .iter()
        .map(|s| s.to_sequence(&stats))
        .collect();
    let val = samples[n_train..]
        .iter()
        .map(|s| s.to_sequence(&stats))
        .collect();
    Ok((stats, train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Relative change of μ and σ of |s_f| that counts as converged.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Consecutive increases of μ that abort the loop.
    pub divergence_run: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.03,
            max_iterations: 15,
            divergence_run: 3,
        }
    }
}

/// Terminal-accuracy statistics of one curriculum iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRecord {
    pub iteration: usize,
    pub mu_km: f64,
    pub sigma_km: f64,
    pub delta_mu: Option<f64>,
    pub delta_sigma: Option<f64>,
    pub converged: bool,
    pub summary: Summary,
    /// Signed terminal range-to-go per case, km.
    pub signed_km: Vec<f64>,
}

/// |a - b| / |b|, zero when both vanish.
pub fn relative_change(current: f64, previous: f64) -> f64 {
    if current == previous {
        0.0
    } else {
        (current - previous).abs() / previous.abs()
    }
}

/// Steps of the outer loop supplied by the caller.
pub trait CurriculumHooks {
    type Model;

    /// Trains a model for this iteration, warm-started from `previous`.
    fn train(&mut self, iteration: usize, previous: Option<&Self::Model>) -> Result<Self::Model>;

    /// Monte Carlo with the model in the loop; signed terminal range-to-go
    /// per case in km.
    fn evaluate(&mut self, iteration: usize, model: &Self::Model) -> Result<Vec<f64>>;

    /// Replaces the training data with trajectories flown by `model`.
    fn regenerate(&mut self, iteration: usize, model: &Self::Model) -> Result<()>;

    fn on_record(&mut self, _record: &CurriculumRecord) {}
}

/// Train, evaluate and regenerate until μ and σ of |s_f| both change by at
/// most the tolerance, or the iteration cap is reached.
pub fn curriculum_loop<H: CurriculumHooks>(
    hooks: &mut H,
    config: &CurriculumConfig,
) -> Result<(H::Model, Vec<CurriculumRecord>)> {
    if config.max_iterations == 0 || !(config.tolerance >= 0.0) {
        return Err(Error::Config(
            "curriculum needs at least one iteration and a non-negative tolerance".into(),
        ));
    }
    let mut history: Vec<CurriculumRecord> = Vec::new();
    let mut model: Option<H::Model> = None;
    let mut rising = 0;
    for iteration in 1..=config.max_iterations {
        let trained = hooks.train(iteration, model.as_ref())?;
        let signed = hooks.evaluate(iteration, &trained)?;
        let summary = summarize(&signed)?;
        let (mu, sigma) = (summary.mean_km, summary.std_km);
        let (delta_mu, delta_sigma, converged) = match history.last() {
            Some(prev) => {
                let dm = relative_change(mu, prev.mu_km);
                let ds = relative_change(sigma, prev.sigma_km);
                rising = if mu > prev.mu_km { rising + 1 } else { 0 };
                (
                    Some(dm),
                    Some(ds),
                    dm <= config.tolerance && ds <= config.tolerance,
                )
            }
            None => (None, None, false),
        };
        let record = CurriculumRecord {
            iteration,
            mu_km: mu,
            sigma_km: sigma,
            delta_mu,
            delta_sigma,
            converged,
            summary,
            signed_km: signed,
        };
        hooks.on_record(&record);
        history.push(record);
        if rising >= config.divergence_run {
            return Err(Error::CurriculumDivergence { iteration, history });
        }
        if converged || iteration == config.max_iterations {
            return Ok((trained, history));
        }
        hooks.regenerate(iteration, &trained)?;
        model = Some(trained);
    }
    unreachable!("loop returns on the last iteration")
}

/// Writes `iteration,mu_km,sigma_km,converged`.
pub fn write_curriculum_csv(path: &Path, history: &[CurriculumRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "iteration,mu_km,sigma_km,converged")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{}",
            r.iteration, r.mu_km, r.sigma_km, r.converged
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atmos::ExponentialModel;

    fn fv(v: f64) -> FeatureVector {
        FeatureVector([v; FEATURE_LEN])
    }

    #[test]
    fn shock_vanishes_at_unit_mach() {
        assert!((normal_shock_ratio(1.0, 1.28) - 1.0).abs() < 1e-14);
        assert!((normal_shock_ratio(1.0 + 1e-6, 1.28) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shock_reference_value() {
        let (g, m): (f64, f64) = (1.28, 10.0);
        let first = ((g + 1.0) * m * m / ((g - 1.0) * m * m + 2.0)).powf(g / (g - 1.0));
        let second = ((g + 1.0) / (2.0 * g * m * m - (g - 1.0))).powf(1.0 / (g - 1.0));
        let expected = 100.0 * first * second;
        assert!((post_shock_stagnation(100.0, m, g) - expected).abs() < 1e-12 * expected);
        let doubled =
            post_shock_stagnation(200.0, m, g).log10() - post_shock_stagnation(100.0, m, g).log10();
        assert!((doubled - 2f64.log10()).abs() < 1e-12);
        assert_eq!(post_shock_stagnation(100.0, 1.1, g), 100.0);
    }

    #[test]
    fn feature_vector_layout() {
        let s = SphericalState {
            r: 1.0,
            lon: 2.0,
            lat: 3.0,
            v: 4.0,
            gamma: 5.0,
            heading: 6.0,
        };
        let f = FeatureVector::new(&s, &Vec3::new(7.0, 8.0, 9.0), 10.0);
        assert_eq!(f.0, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(f.spherical(), s);
        assert_eq!(f.accel(), Vec3::new(7.0, 8.0, 9.0));
    }

    fn exponential_profile() -> AtmosphereProfile {
        let gas = GasModel::default();
        let h: Vec<f64> = (0..=280).map(|k| k as f64 * 0.5).collect();
        AtmosphereProfile::from_exponential(&ExponentialModel::default(), h, &gas).unwrap()
    }

    #[test]
    fn targets_for_exponential_truth_follow_square_root_law() {
        let model = ExponentialModel::default();
        let t = interpolate_targets(&exponential_profile(), 0.0).unwrap();
        let v = t.values();
        assert_eq!(v.len(), 39);
        // η² = -log10 ρ0 + h / (H ln 10) is affine in h, so η is a concave square root.
        let a = -model.surface_density.log10();
        let b = 1.0 / (model.scale_height * std::f64::consts::LN_10);
        for (&h, &e) in prediction_grid().iter().zip(v) {
            assert!((e - (a + b * h).sqrt()).abs() < 1e-9, "h={h}: {e}");
        }
        for w in v.windows(3) {
            assert!(w[0] + w[2] - 2.0 * w[1] < 0.0);
        }
    }

    #[test]
    fn targets_extrapolate_below_terminal_altitude() {
        let profile = exponential_profile();
        let full = interpolate_targets(&profile, 0.0).unwrap();
        let t = interpolate_targets(&profile, 20.0).unwrap();
        let (g, f, v) = (prediction_grid(), full.values(), t.values());
        // Nodes from 20 km up are sampled directly.
        assert_eq!(&v[8..], &f[8..]);
        let slope = (f[9] - f[8]) / 2.0;
        for j in 0..8 {
            let expected = f[8] + slope * (g[j] - 20.0);
            assert!((v[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nested_averaging_weights_samples_equally() {
        let a = [fv(1.0)];
        let b = [fv(2.0), fv(4.0), fv(6.0)];
        let stats = NormalizationStats::compute(&[&a, &b], &[&[0.0], &[1.0]]).unwrap();
        // Sample means 1 and 4; overall (1 + 4) / 2, not (1+2+4+6)/4.
        assert_eq!(stats.feature_mean[0], 2.5);
        let var = (1.5f64.powi(2) + (0.25 + 2.25 + 12.25) / 3.0) / 2.0;
        assert!((stats.feature_std[0] - var.sqrt()).abs() < 1e-15);
        assert_eq!(stats.target_mean, vec![0.5]);
        assert_eq!(stats.target_std, vec![0.5]);
    }

    #[test]
    fn single_sample_normalizes_to_zero_with_guard() {
        let a = [fv(3.0)];
        let stats = NormalizationStats::compute(&[&a], &[&[0.7, 0.2]]).unwrap();
        assert_eq!(stats.normalize_features(&a[0]), vec![0.0; FEATURE_LEN]);
        assert_eq!(stats.normalize_targets(&[0.7, 0.2]), vec![0.0, 0.0]);
        assert_eq!(stats.guarded_features.len(), FEATURE_LEN);
        assert_eq!(stats.guarded_targets, vec![0, 1]);
    }

    #[test]
    fn normalization_round_trip() {
        let a = [
            fv(1.0),
            FeatureVector([3.0, -2.0, 0.1, 4e3, -0.2, 1.0, 0.5, -0.5, 2.0, 3.0]),
        ];
        let b = [FeatureVector([
            3.4e6, 1.6, 0.8, 3.9e3, -0.1, 0.9, 0.1, 0.2, -0.3, 2.5,
        ])];
        let stats = NormalizationStats::compute(&[&a, &b], &[&[1.0, 2.0], &[1.5, 2.2]]).unwrap();
        for x in a.iter().chain(&b) {
            let back = stats.denormalize_features(&stats.normalize_features(x));
            for (p, q) in back.0.iter().zip(&x.0) {
                assert!((p - q).abs() <= 1e-12 * q.abs().max(1e-300));
            }
        }
        let t = [1.2, 2.1];
        let back = stats.denormalize_targets(&stats.normalize_targets(&t));
        for (p, q) in back.iter().zip(&t) {
            assert!((p - q).abs() <= 1e-12 * q.abs());
        }
    }

    #[test]
    fn relative_change_arithmetic() {
        assert!((relative_change(0.88, 0.90) - 0.0222).abs() < 1e-4);
        assert_eq!(relative_change(0.0, 0.0), 0.0);
    }

    struct FixedPoint {
        trained: usize,
        regenerated: usize,
    }

    impl CurriculumHooks for FixedPoint {
        type Model = u32;

        fn train(&mut self, _iteration: usize, _previous: Option<&u32>) -> Result<u32> {
            self.trained += 1;
            Ok(7)
        }

        fn evaluate(&mut self, _iteration: usize, _model: &u32) -> Result<Vec<f64>> {
            Ok(vec![1.0, -2.0, 0.5])
        }

        fn regenerate(&mut self, _iteration: usize, _model: &u32) -> Result<()> {
            self.regenerated += 1;
            Ok(())
        }
    }

    #[test]
    fn fixed_point_trainer_stops_at_second_iteration() {
        let mut hooks = FixedPoint {
            trained: 0,
            regenerated: 0,
        };
        let (model, history) = curriculum_loop(&mut hooks, &CurriculumConfig::default()).unwrap();
        assert_eq!(model, 7);
        assert_eq!(history.len(), 2);
        assert!(history[1].converged);
        assert_eq!(history[1].delta_mu, Some(0.0));
        assert_eq!(hooks.regenerated, 1);
    }

    struct Growing(f64);

    impl CurriculumHooks for Growing {
        type Model = ();

        fn train(&mut self, _iteration: usize, _previous: Option<&()>) -> Result<()> {
            Ok(())
        }

        fn evaluate(&mut self, _iteration: usize, _model: &()) -> Result<Vec<f64>> {
            self.0 *= 2.0;
            Ok(vec![self.0, -self.0 * 1.5])
        }

        fn regenerate(&mut self, _iteration: usize, _model: &()) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn growing_miss_aborts_with_history() {
        match curriculum_loop(&mut Growing(1.0), &CurriculumConfig::default()) {
            Err(Error::CurriculumDivergence { iteration, history }) => {
                assert_eq!(iteration, 4);
                assert_eq!(history.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
