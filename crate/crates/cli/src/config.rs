use std::fmt;
use std::path::Path;

use fnpeg_core::atmos::GRID_NODES;
use fnpeg_core::atmos::{ExponentialModel, GasModel, SurrogateConfig};
use fnpeg_core::dynamics::{PlanetModel, VehicleParams};
use fnpeg_core::estimators::EstimatorKind;
use fnpeg_core::evalmc::NoiseSpec;
use fnpeg_core::fnpeg::GuidanceConfig;
use fnpeg_core::neural::{Architecture, HiddenActivation, TrainConfig};
use fnpeg_core::pipeline::{CurriculumConfig, FEATURE_LEN};
use fnpeg_core::sim::{Mission, Scenario, SimConfig};
use serde::{Deserialize, Serialize};

/// Invalid configuration or arguments; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtmosphereBlock {
    pub planet: PlanetModel,
    pub perturbation_scale: f64,
    pub gas: GasModel,
    /// Exponential law carried on board by the exponential and filter
    /// estimators.
    pub onboard: ExponentialModel,
    pub surrogate: SurrogateConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub dt: f64,
    pub max_time: f64,
    pub filter_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    /// Trajectories per dataset, split into training and validation.
    pub trajectories: usize,
    /// Held-out cases for the density error map.
    pub test_cases: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub dropout: f64,
    pub hidden_activation: HiddenActivation,
    pub learning_rate: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub train_fraction: f64,
    pub curriculum: CurriculumConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignBlock {
    pub count: usize,
    pub estimators: Vec<EstimatorKind>,
    pub noise: bool,
    pub noise_levels: NoiseSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBlock {
    pub data: u64,
    pub training: u64,
    pub campaign: u64,
    pub test: u64,
    pub noise: u64,
}

impl SeedBlock {
    /// Every stream derived from one master seed.
    pub fn from_master(master: u64) -> Self {
        Self {
            data: master,
            training: master,
            campaign: master.wrapping_add(1),
            test: master.wrapping_add(2),
            noise: master.wrapping_add(3),
        }
    }
}

/// One-file description of a run. Defaults reproduce the reference mission
/// and vehicle; `scale` picks the training and campaign sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub mission: Mission,
    pub vehicle: VehicleParams,
    pub guidance: GuidanceConfig,
    pub atmosphere: AtmosphereBlock,
    pub simulation: SimulationBlock,
    pub training: TrainingBlock,
    pub campaign: CampaignBlock,
    pub seeds: SeedBlock,
}

/// Dataset cases start here for held-out test sets.
pub const TEST_FIRST_INDEX: u64 = 1_000_000;

impl RunConfig {
    pub fn defaults(scale: Scale) -> Self {
        let sim = SimConfig::default();
        let scenario = Scenario::default();
        let train = TrainConfig::default();
        let (trajectories, test_cases, hidden_size, epochs, batch_size, count) = match scale {
            Scale::Full => (5000, 1000, 256, 500, 128, 5000),
            Scale::Desk => (250, 100, 32, 50, 16, 200),
        };
        let curriculum = match scale {
            Scale::Full => CurriculumConfig::default(),
            Scale::Desk => CurriculumConfig {
                max_iterations: 3,
                ..CurriculumConfig::default()
            },
        };
        Self {
            scale,
            mission: scenario.mission,
            vehicle: sim.vehicle,
            guidance: sim.guidance,
            atmosphere: AtmosphereBlock {
                planet: sim.planet,
                perturbation_scale: scenario.perturbation_scale,
                gas: sim.gas,
                onboard: sim.exponential,
                surrogate: scenario.surrogate,
            },
            simulation: SimulationBlock {
                dt: sim.dt,
                max_time: sim.max_time,
                filter_gain: sim.filter_gain,
            },
            training: TrainingBlock {
                trajectories,
                test_cases,
                hidden_size,
                layers: 2,
                dropout: 0.2,
                hidden_activation: HiddenActivation::Sigmoid,
                learning_rate: train.learning_rate,
                decay: train.decay,
                epochs,
                batch_size,
                gradient_clip: train.gradient_clip,
                beta1: train.beta1,
                beta2: train.beta2,
                epsilon: train.epsilon,
                train_fraction: train.train_fraction,
                curriculum,
            },
            campaign: CampaignBlock {
                count,
                estimators: vec![
                    EstimatorKind::Exponential,
                    EstimatorKind::Filter,
                    EstimatorKind::Lstm,
                ],
                noise: false,
                noise_levels: NoiseSpec::table(sim.planet.g0()),
            },
            seeds: SeedBlock::from_master(1),
        }
    }

    /// Reads `source` ("default" or a TOML path) over the defaults of the
    /// requested scale. The scale comes from `scale_flag`, else the file's
    /// `scale` key, else full.
    pub fn load(source: &str, scale_flag: Option<Scale>) -> Result<Self, ConfigError> {
        let user = if source == "default" {
            toml::Table::new()
        } else {
            let path = Path::new(source);
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))?
        };
        let file_scale = match user.get("scale") {
            Some(v) => Some(
                v.clone()
                    .try_into::<Scale>()
                    .map_err(|e| ConfigError(format!("invalid scale: {e}")))?,
            ),
            None => None,
        };
        let scale = scale_flag.or(file_scale).unwrap_or(Scale::Full);
        let mut merged = toml::Table::try_from(Self::defaults(scale))
            .map_err(|e| ConfigError(format!("cannot encode defaults: {e}")))?;
        merge(&mut merged, user);
        merged.insert(
            "scale".into(),
            toml::Value::try_from(scale).expect("scale encodes"),
        );
        let config: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| ConfigError(format!("invalid config {source}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.campaign
            .noise_levels
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        let t = &self.training;
        if t.trajectories == 0 || t.hidden_size == 0 || t.layers == 0 || t.test_cases == 0 {
            return Err(ConfigError("training sizes must be positive".into()));
        }
        if self.campaign.count == 0 || self.campaign.estimators.is_empty() {
            return Err(ConfigError(
                "campaign needs a positive count and at least one estimator".into(),
            ));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            mission: self.mission,
            sim: SimConfig {
                planet: self.atmosphere.planet,
                vehicle: self.vehicle,
                guidance: self.guidance,
                gas: self.atmosphere.gas,
                exponential: self.atmosphere.onboard,
                filter_gain: self.simulation.filter_gain,
                dt: self.simulation.dt,
                max_time: self.simulation.max_time,
            },
            surrogate: self.atmosphere.surrogate,
            perturbation_scale: self.atmosphere.perturbation_scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            learning_rate: t.learning_rate,
            decay: t.decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            gradient_clip: t.gradient_clip,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            train_fraction: t.train_fraction,
            seed: self.seeds.training,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let t = &self.training;
        Architecture {
            input_size: FEATURE_LEN,
            hidden_sizes: vec![t.hidden_size; t.layers],
            output_size: GRID_NODES,
            dropout: t.dropout,
            hidden_activation: t.hidden_activation,
        }
    }

    pub fn noise(&self, enabled: bool) -> Option<NoiseSpec> {
        (enabled || self.campaign.noise).then_some(self.campaign.noise_levels)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config encodes as TOML")
    }
}

/// Overlays `user` on `base`, recursing into tables. Unknown keys survive
/// the merge so that deserialization can reject them.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
