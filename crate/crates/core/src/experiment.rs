//! Experiment configuration files and the on-disk outputs of each command.
//!
//! A config is a TOML file with `[data]`, `[train]`, `[mask]` and `[output]`
//! sections. Every command first writes `config.resolved.toml` with all
//! defaults filled in, so an output directory always describes itself.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{self, DatasetSpec, Environment, PartitionScheme};
use crate::error::{Error, Result};
use crate::fedcore::{self, Ablation, Algorithm, RoundReport, RunConfig, RunData, RunResult, ServerState};
use crate::masking::MaskSettings;

pub const METRICS_HEADER: &str = "round,algorithm,train_accuracy,test_accuracy,loss_loc,loss_l1,loss_pen,B_est,eps_est,bound_satisfied,wallclock_ms";

fn default_true() -> bool {
    true
}

/// Data source: the synthetic generator, or a manifest written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Manifest of a generated dataset; overrides the synthetic fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub partition: PartitionScheme,
    #[serde(default = "d::n_invariant")]
    pub n_invariant: usize,
    #[serde(default = "d::n_spurious")]
    pub n_spurious: usize,
    #[serde(default = "d::classes")]
    pub classes: usize,
    #[serde(default = "d::train_alphas")]
    pub train_alphas: Vec<f64>,
    #[serde(default = "d::test_alpha")]
    pub test_alpha: f64,
    #[serde(default = "d::samples_per_env")]
    pub samples_per_env: usize,
    #[serde(default = "d::label_noise")]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Defaults shared with [`DatasetSpec`].
mod d {
    use crate::datasets::DatasetSpec;

    pub fn n_invariant() -> usize {
        DatasetSpec::default().n_invariant
    }
    pub fn n_spurious() -> usize {
        DatasetSpec::default().n_spurious
    }
    pub fn classes() -> usize {
        DatasetSpec::default().classes
    }
    pub fn train_alphas() -> Vec<f64> {
        DatasetSpec::default().train_alphas
    }
    pub fn test_alpha() -> f64 {
        DatasetSpec::default().test_alpha
    }
    pub fn samples_per_env() -> usize {
        DatasetSpec::default().samples_per_env
    }
    pub fn label_noise() -> f64 {
        DatasetSpec::default().label_noise
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::from_spec(&DatasetSpec::default(), PartitionScheme::default())
    }
}

impl DataSection {
    pub fn from_spec(spec: &DatasetSpec, partition: PartitionScheme) -> Self {
        DataSection {
            manifest: None,
            partition,
            n_invariant: spec.n_invariant,
            n_spurious: spec.n_spurious,
            classes: spec.classes,
            train_alphas: spec.train_alphas.clone(),
            test_alpha: spec.test_alpha,
            samples_per_env: spec.samples_per_env,
            label_noise: spec.label_noise,
            seed: spec.seed,
        }
    }

    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_invariant: self.n_invariant,
            n_spurious: self.n_spurious,
            classes: self.classes,
            train_alphas: self.train_alphas.clone(),
            test_alpha: self.test_alpha,
            samples_per_env: self.samples_per_env,
            label_noise: self.label_noise,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "t::algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "t::clients")]
    pub clients: usize,
    #[serde(default = "t::client_fraction")]
    pub client_fraction: f64,
    #[serde(default = "t::rounds")]
    pub rounds: usize,
    #[serde(default = "t::local_epochs")]
    pub local_epochs: usize,
    /// Learning rate; required.
    pub eta: f64,
    #[serde(default = "t::lambda")]
    pub lambda: f64,
    #[serde(default = "t::l1_weight")]
    pub l1_weight: f64,
    #[serde(default = "t::mu")]
    pub mu: f64,
    #[serde(default = "t::batch_size")]
    pub batch_size: usize,
    #[serde(default = "t::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Consecutive rounds of rising test loss before stopping; 0 disables.
    #[serde(default = "t::patience")]
    pub patience: usize,
    #[serde(default)]
    pub theory_checks: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
    #[serde(default)]
    pub disable_scaling: bool,
    #[serde(default)]
    pub disable_mask: bool,
    #[serde(default)]
    pub disable_penalty: bool,
}

/// Defaults shared with [`RunConfig`].
mod t {
    use crate::fedcore::{Algorithm, RunConfig};

    pub fn algorithm() -> Algorithm {
        RunConfig::default().algorithm
    }
    pub fn clients() -> usize {
        RunConfig::default().clients
    }
    pub fn client_fraction() -> f64 {
        RunConfig::default().client_fraction
    }
    pub fn rounds() -> usize {
        RunConfig::default().rounds
    }
    pub fn local_epochs() -> usize {
        RunConfig::default().local_epochs
    }
    pub fn lambda() -> f64 {
        RunConfig::default().lambda
    }
    pub fn l1_weight() -> f64 {
        RunConfig::default().l1_weight
    }
    pub fn mu() -> f64 {
        RunConfig::default().mu
    }
    pub fn batch_size() -> usize {
        RunConfig::default().batch_size
    }
    pub fn hidden() -> Vec<usize> {
        RunConfig::default().hidden
    }
    pub fn patience() -> usize {
        10
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "o::dir")]
    pub dir: PathBuf,
    /// Write a JSON checkpoint every this many rounds; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Fill `wallclock_ms`; off by default so metrics files are reproducible.
    #[serde(default)]
    pub record_wallclock: bool,
    /// Write `masks.csv` for FedGen runs.
    #[serde(default = "default_true")]
    pub write_masks: bool,
}

mod o {
    use std::path::PathBuf;

    pub fn dir() -> PathBuf {
        PathBuf::from("runs/latest")
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: o::dir(),
            checkpoint_every: 0,
            record_wallclock: false,
            write_masks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub mask: MaskSettings,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory relative paths inside the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.to_run_config().validate()?;
        if cfg.data.manifest.is_none() {
            cfg.data.spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// The config with every default written out.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_run_config(&self) -> RunConfig {
        let t = &self.train;
        RunConfig {
            algorithm: t.algorithm,
            clients: t.clients,
            client_fraction: t.client_fraction,
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            eta: t.eta,
            lambda: t.lambda,
            l1_weight: t.l1_weight,
            mu: t.mu,
            batch_size: t.batch_size,
            hidden: t.hidden.clone(),
            mask: self.mask,
            ablation: Ablation {
                disable_scaling: t.disable_scaling,
                disable_mask: t.disable_mask,
                disable_penalty: t.disable_penalty,
            },
            partition: self.data.partition,
            seed: t.seed,
            patience: (t.patience > 0).then_some(t.patience),
            theory_checks: t.theory_checks,
            smoothness: t.smoothness,
        }
    }

    pub fn load_data(&self) -> Result<RunData> {
        match &self.data.manifest {
            Some(m) => load_manifest(&self.base_dir.join(m)),
            None => Ok(datasets::gen_synthetic(&self.data.spec())?.into()),
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::io(&path, "output directory is in use by another run")
                }
                _ => Error::io(&path, e),
            })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>, computed: bool) -> String {
    match (v, computed) {
        (Some(x), _) => x.to_string(),
        (None, true) => "undefined".into(),
        (None, false) => String::new(),
    }
}

/// `metrics.csv` contents; `wallclock` holds one entry per report.
pub fn metrics_csv(result: &RunResult, wallclock: &[u128]) -> String {
    let theory = result.config.theory_checks;
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (i, r) in result.reports.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.algorithm,
            r.train_accuracy,
            r.test_accuracy,
            r.loss.loc,
            r.loss.l1,
            r.loss.pen,
            opt(r.b_est, theory),
            opt(r.eps_est, theory),
            r.bound_satisfied.map(|b| b.to_string()).unwrap_or_default(),
            wallclock.get(i).copied().unwrap_or(0),
        );
    }
    out
}

/// `masks.csv` contents: final gates per client, then the aggregate.
pub fn masks_csv(result: &RunResult) -> Option<String> {
    let aggregate = result.server.mask_logits.as_ref()?;
    let gate = |m: &[f64]| -> String {
        m.iter()
            .map(|&x| crate::autodiff::sigmoid(x).to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = String::from("owner");
    for i in 0..aggregate.len() {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for c in &result.clients {
        if let Some(m) = &c.mask {
            let _ = writeln!(out, "client_{},{}", c.id, gate(m.logits()));
        }
    }
    let _ = writeln!(out, "aggregate,{}", gate(aggregate));
    Some(out)
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    round: usize,
    params: &'a crate::model::ModelParams,
    mask_logits: Option<&'a [f64]>,
}

/// Runs one experiment, writing its outputs into `out_dir`.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunResult> {
    let data = cfg.load_data()?;
    run_into(cfg, &cfg.to_run_config(), &data, out_dir)
}

fn run_into(cfg: &ExperimentConfig, run: &RunConfig, data: &RunData, out_dir: &Path) -> Result<RunResult> {
    let _lock = DirLock::acquire(out_dir)?;
    let mut resolved = cfg.clone();
    apply_run_config(&mut resolved, run);
    write_file(&out_dir.join("config.resolved.toml"), &resolved.resolved_toml()?)?;

    let every = cfg.output.checkpoint_every;
    let ckpt_dir = out_dir.join("checkpoints");
    if every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    let mut wallclock = Vec::new();
    let mut start = Instant::now();
    let mut observer = |report: &RoundReport, server: &ServerState, _: &[fedcore::ClientState]| -> Result<()> {
        wallclock.push(if cfg.output.record_wallclock {
            start.elapsed().as_millis()
        } else {
            0
        });
        start = Instant::now();
        if every > 0 && report.round.is_multiple_of(every) {
            let path = ckpt_dir.join(format!("round_{:04}.json", report.round));
            let ck = Checkpoint {
                round: report.round,
                params: &server.params,
                mask_logits: server.mask_logits.as_deref(),
            };
            let json = serde_json::to_string(&ck).map_err(|e| Error::io(&path, e))?;
            write_file(&path, &json)?;
        }
        Ok(())
    };
    let result = fedcore::run_training_with(run, data, &mut observer)?;

    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&result, &wallclock))?;
    if cfg.output.write_masks {
        if let Some(masks) = masks_csv(&result) {
            write_file(&out_dir.join("masks.csv"), &masks)?;
        }
    }
    if let Some(theory) = &result.theory {
        let path = out_dir.join("theory.json");
        let json = serde_json::to_string_pretty(theory).map_err(|e| Error::io(&path, e))?;
        write_file(&path, &json)?;
    }
    Ok(result)
}

fn apply_run_config(cfg: &mut ExperimentConfig, run: &RunConfig) {
    let t = &mut cfg.train;
    t.algorithm = run.algorithm;
    t.local_epochs = run.local_epochs;
    t.disable_scaling = run.ablation.disable_scaling;
    t.disable_mask = run.ablation.disable_mask;
    t.disable_penalty = run.ablation.disable_penalty;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub local_epochs: usize,
    pub rounds_run: usize,
    pub final_test_accuracy: f64,
    pub final_train_accuracy: f64,
}

/// Every algorithm at every `E`, one run directory each, plus `summary.csv`.
pub fn cmd_sweep_epochs(
    cfg: &ExperimentConfig,
    epochs: &[usize],
    algorithms: &[Algorithm],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if epochs.is_empty() {
        return Err(Error::Config("epoch list is empty".into()));
    }
    if algorithms.is_empty() {
        return Err(Error::Config("algorithm list is empty".into()));
    }
    if epochs.contains(&0) {
        return Err(Error::Config("local epochs must be positive".into()));
    }
    let data = cfg.load_data()?;
    let mut rows = Vec::new();
    for &alg in algorithms {
        for &e in epochs {
            let run = RunConfig {
                algorithm: alg,
                local_epochs: e,
                ..cfg.to_run_config()
            };
            let result = run_into(cfg, &run, &data, &out_dir.join(format!("{alg}_E{e}")))?;
            let last = result.final_report();
            rows.push(SweepRow {
                algorithm: alg,
                local_epochs: e,
                rounds_run: result.reports.len(),
                final_test_accuracy: last.test_accuracy,
                final_train_accuracy: last.train_accuracy,
            });
        }
    }
    let mut csv = String::from("algorithm,local_epochs,rounds_run,final_train_accuracy,final_test_accuracy\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.algorithm, r.local_epochs, r.rounds_run, r.final_train_accuracy, r.final_test_accuracy
        );
    }
    write_file(&out_dir.join("summary.csv"), &csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub final_test_accuracy: f64,
    pub final_train_accuracy: f64,
}

/// The ablation variants in report order.
pub const ABLATIONS: [(&str, Ablation); 4] = [
    (
        "full",
        Ablation {
            disable_scaling: false,
            disable_mask: false,
            disable_penalty: false,
        },
    ),
    (
        "-scaling",
        Ablation {
            disable_scaling: true,
            disable_mask: false,
            disable_penalty: false,
        },
    ),
    (
        "-mask",
        Ablation {
            disable_scaling: false,
            disable_mask: true,
            disable_penalty: false,
        },
    ),
    (
        "-penalty",
        Ablation {
            disable_scaling: false,
            disable_mask: false,
            disable_penalty: true,
        },
    ),
];

/// Full FedGen and its three single-component ablations on identical data.
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    if cfg.train.algorithm != Algorithm::FedGen {
        return Err(Error::Config(format!(
            "ablate needs algorithm = \"fedgen\", got \"{}\"",
            cfg.train.algorithm
        )));
    }
    let data = cfg.load_data()?;
    let mut rows = Vec::new();
    for (label, ablation) in ABLATIONS {
        let run = RunConfig {
            ablation,
            ..cfg.to_run_config()
        };
        let dir = out_dir.join(label.trim_start_matches('-'));
        let result = run_into(cfg, &run, &data, &dir)?;
        let last = result.final_report();
        rows.push(AblationRow {
            variant: label.to_string(),
            final_test_accuracy: last.test_accuracy,
            final_train_accuracy: last.train_accuracy,
        });
    }
    let mut csv = String::from("variant,final_train_accuracy,final_test_accuracy\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.variant, r.final_train_accuracy, r.final_test_accuracy);
    }
    write_file(&out_dir.join("summary.csv"), &csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub env_id: usize,
    pub alpha: f64,
    /// `"train"` or `"test"`.
    pub role: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub classes: usize,
    pub features: usize,
    pub label_column: String,
    pub spurious_idx: Vec<usize>,
    pub environments: Vec<ManifestEntry>,
}

/// Writes one CSV per environment and `manifest.toml` into `out_dir`.
pub fn cmd_gendata(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    let data = datasets::gen_synthetic(spec).map_err(|e| Error::Config(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut environments = Vec::new();
    let mut write = |env: &Environment, name: String, role: &str| -> Result<()> {
        datasets::write_csv(env, &out_dir.join(&name))?;
        environments.push(ManifestEntry {
            file: name.into(),
            env_id: env.env_id,
            alpha: env.alpha,
            role: role.into(),
        });
        Ok(())
    };
    for env in &data.train {
        write(env, format!("train_{}.csv", env.env_id), "train")?;
    }
    write(&data.test, "test.csv".into(), "test")?;
    let manifest = Manifest {
        seed: spec.seed,
        classes: spec.classes,
        features: spec.features(),
        label_column: "label".into(),
        spurious_idx: spec.spurious_idx(),
        environments,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&out_dir.join("manifest.toml"), &text)?;
    Ok(manifest)
}

/// Loads the environments listed in a manifest; CSV paths are relative to it.
pub fn load_manifest(path: &Path) -> Result<RunData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut train = Vec::new();
    let mut test = None;
    for entry in &manifest.environments {
        let env = datasets::load_csv(
            &dir.join(&entry.file),
            &manifest.label_column,
            &manifest.spurious_idx,
            entry.alpha,
            Some(manifest.classes),
            entry.env_id,
        )?;
        match entry.role.as_str() {
            "train" => train.push(env),
            "test" if test.is_none() => test = Some(env),
            "test" => return Err(Error::Config(format!("{}: more than one test environment", path.display()))),
            other => return Err(Error::Config(format!("{}: unknown role '{other}'", path.display()))),
        }
    }
    let test = test.ok_or_else(|| Error::Config(format!("{}: no test environment", path.display())))?;
    if train.is_empty() {
        return Err(Error::Config(format!("{}: no training environments", path.display())));
    }
    Ok(RunData { train, test })
}
