use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fnpeg_core::estimators::EstimatorKind;
use fnpeg_core::evalmc::{density_error_map, run_campaign, CampaignSpec, Summary};
use fnpeg_core::neural::{train_with_progress, EpochLoss, LstmModel};
use fnpeg_core::pipeline::{
    curriculum_loop, generate_dataset, prepare_training, write_curriculum_csv, CurriculumHooks,
    CurriculumRecord, Dataset, DatasetSpec, NormalizationStats, TrajectorySample,
};
use fnpeg_core::sim::Scenario;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig, TEST_FIRST_INDEX};

/// Files written by a command, recorded in its run manifest.
#[derive(Default)]
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, relative: impl AsRef<Path>) -> PathBuf {
        let relative: PathBuf = relative
            .as_ref()
            .components()
            .filter(|c| !matches!(c, std::path::Component::CurDir))
            .collect();
        self.files.push(relative.clone());
        self.root.join(relative)
    }

    fn dataset(&mut self, relative: &str, data: &Dataset) -> Result<()> {
        let stats = if data.samples.is_empty() {
            None
        } else {
            Some(NormalizationStats::from_samples(&data.samples)?)
        };
        data.write(&self.root.join(relative), stats.as_ref())?;
        for name in ["manifest.json", "samples.bin", "norm.json"] {
            if stats.is_some() || name != "norm.json" {
                self.path(Path::new(relative).join(name));
            }
        }
        Ok(())
    }

    /// Writes `run_manifest.json` listing every output with its size and
    /// FNV-1a digest.
    pub fn finish(
        mut self,
        command: &str,
        args: &impl Serialize,
        config: &RunConfig,
    ) -> Result<()> {
        #[derive(Serialize)]
        struct Entry {
            path: String,
            bytes: u64,
            fnv1a: String,
        }
        #[derive(Serialize)]
        struct Manifest<'a, A: Serialize> {
            command: &'a str,
            version: &'a str,
            args: &'a A,
            config: &'a RunConfig,
            outputs: Vec<Entry>,
        }
        self.files.sort();
        self.files.dedup();
        let outputs = self
            .files
            .iter()
            .map(|rel| {
                let bytes = fs::read(self.root.join(rel))
                    .with_context(|| format!("missing output {}", rel.display()))?;
                Ok(Entry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    fnv1a: format!("{:016x}", fnv1a(&bytes)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
            config,
            outputs,
        };
        fs::write(
            self.root.join("run_manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn load_model(path: &Path) -> Result<Arc<LstmModel>> {
    let model =
        LstmModel::load(path).with_context(|| format!("cannot load model {}", path.display()))?;
    Ok(Arc::new(model))
}

fn require_model(kind: EstimatorKind, model: Option<&Path>) -> Result<Option<Arc<LstmModel>>> {
    match (kind, model) {
        (_, Some(path)) => Ok(Some(load_model(path)?)),
        (EstimatorKind::Lstm, None) => {
            Err(ConfigError("the lstm estimator needs --model".into()).into())
        }
        _ => Ok(None),
    }
}

#[derive(Serialize)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub count: Option<usize>,
    pub first_index: u64,
    pub estimator: EstimatorKind,
    pub model: Option<PathBuf>,
}

pub fn gen_data(config: &RunConfig, args: &GenDataArgs) -> Result<()> {
    let model = require_model(args.estimator, args.model.as_deref())?;
    let count = args.count.unwrap_or(config.training.trajectories);
    if count == 0 {
        return Err(ConfigError("--count must be positive".into()).into());
    }
    let spec = DatasetSpec {
        count,
        master_seed: config.seeds.data,
        first_index: args.first_index,
        estimator: args.estimator,
    };
    let data = generate_dataset(&config.scenario(), &spec, model.as_ref())?;
    println!(
        "generated {} of {} trajectories with the {} estimator ({} failed)",
        data.samples.len(),
        count,
        args.estimator,
        data.manifest.failures
    );
    if data.samples.is_empty() {
        bail!("every trajectory failed");
    }
    let mut out = Outputs::new(&args.out)?;
    out.dataset(".", &data)?;
    out.finish("gen-data", args, config)
}

#[derive(Serialize)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub init: Option<PathBuf>,
    pub noise: bool,
}

fn write_losses(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss")?;
    for e in history {
        writeln!(f, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
    }
    Ok(())
}

/// Trains on `samples`, warm-starting from `init`, and writes `model.json`
/// and `loss.csv` under `dir`.
fn fit(
    config: &RunConfig,
    samples: &[TrajectorySample],
    init: Option<&LstmModel>,
    out: &mut Outputs,
    dir: &str,
) -> Result<LstmModel> {
    let train_config = config.train_config();
    let (stats, train_set, val_set) = prepare_training(samples, train_config.train_fraction)?;
    let mut model = match init {
        Some(m) => m.clone(),
        None => LstmModel::new(config.architecture(), config.seeds.training)?,
    };
    model.normalization = Some(stats);
    let epochs = train_config.epochs;
    let history = match train_with_progress(&mut model, &train_set, &val_set, &train_config, |e| {
        if e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == epochs {
            eprintln!(
                "  epoch {:>4}  train {:.4e}  val {:.4e}",
                e.epoch, e.train_loss, e.val_loss
            );
        }
    }) {
        Ok(h) => h,
        Err(fnpeg_core::Error::Divergence { epoch, checkpoint }) => {
            let path = out.path(Path::new(dir).join("checkpoint.json"));
            checkpoint.save(&path)?;
            bail!(
                "training diverged at epoch {epoch}; last finite model saved to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    write_losses(&out.path(Path::new(dir).join("loss.csv")), &history)?;
    model.save(&out.path(Path::new(dir).join("model.json")))?;
    Ok(model)
}

pub fn train(config: &RunConfig, args: &TrainArgs) -> Result<()> {
    let mut data = Dataset::read(&args.data)
        .with_context(|| format!("cannot read dataset {}", args.data.display()))?;
    if let Some(spec) = config.noise(args.noise) {
        data = data.with_noise(&spec, config.seeds.noise);
    }
    let init = args.init.as_deref().map(load_model).transpose()?;
    let mut out = Outputs::new(&args.out)?;
    println!("training on {} trajectories", data.samples.len());
    fit(config, &data.samples, init.as_deref(), &mut out, ".")?;
    out.finish("train", args, config)
}

#[derive(Serialize)]
pub struct CampaignArgs {
    pub out: PathBuf,
    pub estimators: Vec<EstimatorKind>,
    pub model: Option<PathBuf>,
    pub noise: bool,
    pub count: Option<usize>,
}

pub fn campaign(config: &RunConfig, args: &CampaignArgs) -> Result<()> {
    let kinds = if args.estimators.is_empty() {
        config.campaign.estimators.clone()
    } else {
        args.estimators.clone()
    };
    let model = match kinds.iter().find(|k| **k == EstimatorKind::Lstm) {
        Some(&k) => require_model(k, args.model.as_deref())?,
        None => None,
    };
    let count = args.count.unwrap_or(config.campaign.count);
    if count == 0 {
        return Err(ConfigError("--count must be positive".into()).into());
    }
    let noise = config.noise(args.noise);
    let scenario = config.scenario();
    let mut out = Outputs::new(&args.out)?;
    let mut rows = Vec::new();
    for kind in kinds {
        let spec = CampaignSpec {
            count,
            master_seed: config.seeds.campaign,
            first_index: 0,
            estimator: kind,
            noise,
        };
        let result = run_campaign(&scenario, &spec, model.as_ref())?;
        let summary = result.summary()?;
        result.write(&args.out.join(kind.as_str()))?;
        out.path(Path::new(kind.as_str()).join("results.csv"));
        out.path(Path::new(kind.as_str()).join("summary.json"));
        println!(
            "{:<12} mean {:>8.3} km  std {:>8.3} km  p01 {:>8.3} km  p99 {:>8.3} km  failures {}",
            kind.as_str(),
            summary.mean_km,
            summary.std_km,
            summary.p01_km,
            summary.p99_km,
            result.failures.len()
        );
        rows.push((kind, result.failures.len(), summary));
    }
    write_comparison(&out.path("comparison.csv"), noise.is_some(), &rows)?;
    out.finish("campaign", args, config)
}

fn write_comparison(
    path: &Path,
    noise: bool,
    rows: &[(EstimatorKind, usize, Summary)],
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "estimator,noise,cases,failures,mean_km,std_km,p01_km,p99_km,signed_mean_km"
    )?;
    for (kind, failures, s) in rows {
        writeln!(
            f,
            "{kind},{},{},{failures},{},{},{},{},{}",
            noise as u8, s.count, s.mean_km, s.std_km, s.p01_km, s.p99_km, s.signed_mean_km
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
pub struct ErrorMapArgs {
    pub model: PathBuf,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub noise: bool,
}

pub fn error_map(config: &RunConfig, args: &ErrorMapArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let mut data = match &args.data {
        Some(dir) => {
            Dataset::read(dir).with_context(|| format!("cannot read dataset {}", dir.display()))?
        }
        None => {
            let spec = DatasetSpec {
                count: config.training.test_cases,
                master_seed: config.seeds.test,
                first_index: TEST_FIRST_INDEX,
                estimator: EstimatorKind::Exponential,
            };
            generate_dataset(&config.scenario(), &spec, None)?
        }
    };
    if let Some(spec) = config.noise(args.noise) {
        data = data.with_noise(&spec, config.seeds.noise);
    }
    let map = density_error_map(&model, &data.samples)?;
    let mut out = Outputs::new(&args.out)?;
    map.write_csv(&out.path("error_map.csv"))?;
    #[derive(Serialize)]
    struct MapSummary {
        cases: usize,
        full_length_mean_percent: f64,
        full_length_percent: Vec<f64>,
        quartile_means_percent: [f64; 4],
    }
    let summary = MapSummary {
        cases: data.samples.len(),
        full_length_mean_percent: map.full_length_mean(),
        full_length_percent: map.full_length.clone(),
        quartile_means_percent: map.quartiles,
    };
    fs::write(
        out.path("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "{} cases: mean density error {:.3}% at full length; quartiles {:.3} / {:.3} / {:.3} / {:.3} %",
        summary.cases, summary.full_length_mean_percent, map.quartiles[0], map.quartiles[1], map.quartiles[2], map.quartiles[3]
    );
    out.finish("error-map", args, config)
}

#[derive(Serialize)]
pub struct CurriculumArgs {
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub iterations: Option<usize>,
}

struct Hooks<'a> {
    config: &'a RunConfig,
    scenario: Scenario,
    samples: Vec<TrajectorySample>,
    out: Outputs,
}

impl CurriculumHooks for Hooks<'_> {
    type Model = Arc<LstmModel>;

    fn train(
        &mut self,
        iteration: usize,
        previous: Option<&Self::Model>,
    ) -> fnpeg_core::Result<Self::Model> {
        eprintln!(
            "iteration {iteration}: training on {} trajectories",
            self.samples.len()
        );
        let dir = format!("iter_{iteration}");
        fit(
            self.config,
            &self.samples,
            previous.map(|m| m.as_ref()),
            &mut self.out,
            &dir,
        )
        .map(Arc::new)
        .map_err(|e| fnpeg_core::Error::Simulation(format!("{e:#}")))
    }

    fn evaluate(&mut self, iteration: usize, model: &Self::Model) -> fnpeg_core::Result<Vec<f64>> {
        let spec = CampaignSpec {
            count: self.config.campaign.count,
            master_seed: self.config.seeds.campaign,
            first_index: 0,
            estimator: EstimatorKind::Lstm,
            noise: self.config.noise(false),
        };
        let result = run_campaign(&self.scenario, &spec, Some(model))?;
        let dir = format!("iter_{iteration}/campaign");
        result.write(&self.out.root.join(&dir))?;
        self.out.path(Path::new(&dir).join("results.csv"));
        self.out.path(Path::new(&dir).join("summary.json"));
        Ok(result.signed_km())
    }

    fn regenerate(&mut self, iteration: usize, model: &Self::Model) -> fnpeg_core::Result<()> {
        let spec = DatasetSpec {
            count: self.config.training.trajectories,
            master_seed: self.config.seeds.data,
            first_index: 0,
            estimator: EstimatorKind::Lstm,
        };
        let data = generate_dataset(&self.scenario, &spec, Some(model))?;
        eprintln!(
            "iteration {iteration}: regenerated {} trajectories with the network in the loop ({} failed)",
            data.samples.len(),
            data.manifest.failures
        );
        self.out
            .dataset(&format!("iter_{}/data", iteration + 1), &data)
            .map_err(|e| fnpeg_core::Error::Simulation(format!("{e:#}")))?;
        self.samples = data.samples;
        Ok(())
    }

    fn on_record(&mut self, r: &CurriculumRecord) {
        let pct = |d: Option<f64>| d.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        println!(
            "iteration {:>2}  mu {:>8.3} km  sigma {:>8.3} km  dmu {:>8}  dsigma {:>8}{}",
            r.iteration,
            r.mu_km,
            r.sigma_km,
            pct(r.delta_mu),
            pct(r.delta_sigma),
            if r.converged { "  converged" } else { "" }
        );
    }
}

pub fn curriculum(config: &RunConfig, args: &CurriculumArgs) -> Result<()> {
    let mut cc = config.training.curriculum;
    if let Some(n) = args.iterations {
        if n == 0 {
            return Err(ConfigError("--iterations must be positive".into()).into());
        }
        cc.max_iterations = n;
    }
    let scenario = config.scenario();
    let mut out = Outputs::new(&args.out)?;
    let data = match &args.data {
        Some(dir) => {
            Dataset::read(dir).with_context(|| format!("cannot read dataset {}", dir.display()))?
        }
        None => {
            let spec = DatasetSpec {
                count: config.training.trajectories,
                master_seed: config.seeds.data,
                first_index: 0,
                estimator: EstimatorKind::Exponential,
            };
            let data = generate_dataset(&scenario, &spec, None)?;
            eprintln!(
                "generated {} initial trajectories with the exponential estimator ({} failed)",
                data.samples.len(),
                data.manifest.failures
            );
            data
        }
    };
    out.dataset("iter_1/data", &data)?;
    let mut hooks = Hooks {
        config,
        scenario,
        samples: data.samples,
        out,
    };
    match curriculum_loop(&mut hooks, &cc) {
        Ok((model, history)) => {
            write_curriculum_csv(&hooks.out.path("history.csv"), &history)?;
            model.save(&hooks.out.path("model.json"))?;
            hooks.out.finish("curriculum", args, config)
        }
        Err(fnpeg_core::Error::CurriculumDivergence { iteration, history }) => {
            write_curriculum_csv(&hooks.out.path("history.csv"), &history)?;
            hooks.out.finish("curriculum", args, config)?;
            Err(fnpeg_core::Error::CurriculumDivergence { iteration, history }.into())
        }
        Err(e) => Err(e.into()),
    }
}
