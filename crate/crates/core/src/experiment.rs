//! Experiment configuration, run directories and the ablation grid.
//!
//! Each `(experiment, seed)` pair owns `<output_dir>/<name>/seed-<seed>/` holding
//! `resolved-config.json`, `metrics.jsonl`, `diagnostics.jsonl`, `final.json` and
//! `checkpoints/`. Ablation variants nest one level deeper under the variant name.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diagnostics::{dormant_ratio, evaluate, probe_set, DormantReport, EvalReport, PROBE_SIZE};
use crate::env::{enumerate, presets, EnumerationResult, SyntheticTask, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, read_manifest, save_checkpoint, Model, NetworkConfig};
use crate::objectives::Objective;
use crate::scalar::Scalar;
use crate::training::{probe_seed, run, stream_rng, Method, Observer, RoundReport, TrainState, TrainerConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const FINAL_FILE: &str = "final.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Where the task definition comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    /// A built-in task by name.
    Preset(String),
    /// A task JSON file; relative paths are resolved against the config file.
    Path(PathBuf),
    Inline(TaskSpec),
}

impl TaskSource {
    pub fn load(&self) -> Result<SyntheticTask> {
        match self {
            TaskSource::Preset(name) => SyntheticTask::from_spec(presets::by_name(name)?),
            TaskSource::Path(path) => SyntheticTask::load(path),
            TaskSource::Inline(spec) => SyntheticTask::from_spec(spec.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_condition: usize,
    /// Seed of the evaluation sampler, independent of the training seed.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_condition: 16, seed: 0 }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskSource,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Short names accepted for trainer fields in overrides.
const TRAINER_ALIASES: &[(&str, &str)] = &[("M", "reset_period"), ("N", "rounds"), ("b", "batch_size")];

fn line_anchored(text: &str, e: serde_json::Error) -> Error {
    let line = text.lines().nth(e.line().saturating_sub(1)).unwrap_or("").trim();
    Error::Config(format!("line {}, column {}: {e} (near `{line}`)", e.line(), e.column()))
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| line_anchored(text, e))?;
        Ok(cfg)
    }

    /// Reads and validates a config; a relative task path is taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let TaskSource::Path(p) = &mut cfg.task {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name `{}` must be a plain directory name", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval.samples_per_condition < 2 {
            return Err(Error::Config("eval.samples_per_condition must be at least 2".into()));
        }
        self.trainer.validate()?;
        self.network.validate()?;
        self.task.load()?;
        Ok(())
    }

    /// Applies `dotted.key=value`. The value is parsed as JSON when possible and as a
    /// string otherwise; the key must already exist in the config.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
        let mut path: Vec<&str> = key.trim().split('.').collect();
        if path.len() == 2 && path[0] == "trainer" {
            if let Some((_, full)) = TRAINER_ALIASES.iter().find(|(a, _)| *a == path[1]) {
                path[1] = full;
            }
        }
        let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        for (i, part) in path.iter().enumerate() {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(*part))
                .ok_or_else(|| Error::Config(format!("override key `{}` does not exist", path[..=i].join("."))))?;
        }
        *node = value;
        let next: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// The config a single seed actually ran with: task inlined, one seed, trainer seed set.
    pub fn resolved(&self, seed: u64) -> Result<Self> {
        let task = self.task.load()?;
        Ok(Self {
            task: TaskSource::Inline(task.spec().clone()),
            seeds: vec![seed],
            trainer: TrainerConfig { seed, ..self.trainer.clone() },
            ..self.clone()
        })
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.experiment_dir().join(format!("seed-{seed}"))
    }
}

/// Creates an empty directory. An existing non-empty directory is an error unless `force`,
/// in which case its contents are removed first.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied {
            if !force {
                return Err(Error::Precondition(format!("{} already exists; pass --force to replace it", dir.display())));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Refuses to overwrite an existing file unless `force`.
pub fn write_new_file(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Precondition(format!("{} already exists; pass --force to replace it", path.display())));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub round: usize,
    #[serde(flatten)]
    pub report: DormantReport,
}

/// End-of-run record written to `final.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rounds: usize,
    pub resets: usize,
    pub eval: EvalReport,
    pub dormancy: DormantReport,
}

struct FileObserver {
    dir: PathBuf,
    metrics: BufWriter<fs::File>,
    diagnostics: BufWriter<fs::File>,
    resets: usize,
}

impl FileObserver {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<fs::File>> {
            let path = dir.join(name);
            Ok(BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?))
        };
        Ok(Self { dir: dir.to_path_buf(), metrics: open(METRICS_FILE)?, diagnostics: open(DIAGNOSTICS_FILE)?, resets: 0 })
    }

    fn line<T: Serialize>(out: &mut BufWriter<fs::File>, path: &Path, value: &T) -> Result<()> {
        serde_json::to_writer(&mut *out, value)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))?;
        self.diagnostics.flush().map_err(|e| Error::io(self.dir.join(DIAGNOSTICS_FILE), e))
    }
}

impl<S: Scalar> Observer<S> for FileObserver {
    fn on_round(&mut self, report: &RoundReport) -> Result<()> {
        self.resets += report.reset as usize;
        Self::line(&mut self.metrics, &self.dir.join(METRICS_FILE), report)
    }

    fn on_diagnostics(&mut self, round: usize, report: &DormantReport) -> Result<()> {
        let record = DiagnosticsRecord { round, report: report.clone() };
        Self::line(&mut self.diagnostics, &self.dir.join(DIAGNOSTICS_FILE), &record)
    }

    fn on_checkpoint(&mut self, state: &TrainState<S>) -> Result<()> {
        let dir = self.dir.join(CHECKPOINT_DIR).join(format!("round-{:06}", state.round()));
        save_checkpoint(dir, state.model(), &state.checkpoint_meta())
    }
}

/// Trains one seed into its run directory and returns the end-of-run summary.
/// `oracles`, when given, are reused for the final evaluation.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, force: bool, oracles: Option<&[EnumerationResult]>) -> Result<RunSummary> {
    let resolved = cfg.resolved(seed)?;
    let task = resolved.task.load()?;
    prepare_dir(dir, force)?;
    write_new_file(&dir.join(RESOLVED_CONFIG_FILE), &pretty(&resolved)?, true)?;
    let mut state = TrainState::<f32>::new(&task, resolved.trainer.clone(), resolved.network.clone())?;
    let mut observer = FileObserver::create(dir)?;
    let outcome = run(&mut state, resolved.method, &mut observer);
    observer.flush()?;
    outcome?;
    save_checkpoint(dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT), state.model(), &state.checkpoint_meta())?;
    let mut rng = stream_rng(resolved.eval.seed, 0, seed);
    let eval = evaluate(state.model(), state.task(), resolved.eval.samples_per_condition, &mut rng, oracles)?;
    let summary = RunSummary { seed, rounds: state.round(), resets: observer.resets, eval, dormancy: state.dormancy()? };
    write_new_file(&dir.join(FINAL_FILE), &pretty(&summary)?, true)?;
    Ok(summary)
}

fn oracles_for(task: &SyntheticTask) -> Option<Vec<EnumerationResult>> {
    task.conditions().iter().map(|x| enumerate(task, x)).collect::<Result<Vec<_>>>().ok()
}

/// Trains every configured seed.
pub fn train_all(cfg: &ExperimentConfig, force: bool) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    for seed in &cfg.seeds {
        let dir = cfg.run_dir(*seed);
        if !force && dir.exists() && fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some() {
            return Err(Error::Precondition(format!("{} already exists; pass --force to replace it", dir.display())));
        }
    }
    let oracles = oracles_for(&cfg.task.load()?);
    cfg.seeds.iter().map(|&s| run_seed(cfg, s, &cfg.run_dir(s), force, oracles.as_deref())).collect()
}

/// Loads a float32 checkpoint and checks it against the task's vocabulary and conditions.
pub fn load_compatible(dir: &Path, task: &SyntheticTask) -> Result<(Model<f32>, crate::nn::CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    let arch = &manifest.architecture;
    if arch.vocab != *task.vocab() || arch.n_conditions != task.conditions().len() {
        return Err(Error::Shape(format!(
            "checkpoint was built for vocab size {} (max_len {}) with {} conditions; task `{}` has vocab size {} (max_len {}) with {} conditions",
            arch.vocab.size(),
            arch.vocab.max_len(),
            arch.n_conditions,
            task.name(),
            task.vocab().size(),
            task.vocab().max_len(),
            task.conditions().len()
        )));
    }
    load_checkpoint::<f32>(dir)
}

pub fn evaluate_checkpoint(dir: &Path, task: &SyntheticTask, samples: usize, seed: u64) -> Result<EvalReport> {
    let (model, _) = load_compatible(dir, task)?;
    let mut rng = stream_rng(seed, 0, 0);
    evaluate(&model, task, samples, &mut rng, None)
}

/// Dormancy of a checkpoint on the probe set of the run that produced it.
pub fn diagnose_checkpoint(dir: &Path, task: &SyntheticTask, tau: f64) -> Result<DormantReport> {
    let (model, meta) = load_compatible(dir, task)?;
    let probe = probe_set(task, probe_seed(meta.rng.seed), PROBE_SIZE);
    dormant_ratio(&model.capture_activations(&probe)?, tau)
}

/// The four rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Flow output layer never reset.
    NoReset,
    /// Replay disabled (every slot on-policy).
    NoPrt,
    /// Variance objective instead of forward-looking detailed balance.
    NoFl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoReset, Variant::NoPrt, Variant::NoFl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReset => "no_reset",
            Variant::NoPrt => "no_prt",
            Variant::NoFl => "no_fl",
        }
    }

    pub fn apply(self, trainer: &TrainerConfig) -> TrainerConfig {
        let mut t = trainer.clone();
        match self {
            Variant::Full => {}
            Variant::NoReset => t.reset_period = None,
            Variant::NoPrt => t.replay_mix = 0.0,
            Variant::NoFl => t.objective = Objective::Vargrad,
        }
        t
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation toggle `{s}` (full | no_reset | no_prt | no_fl)")))
    }
}

pub fn parse_grid(names: &[String]) -> Result<Vec<Variant>> {
    let grid = names.iter().map(|n| n.parse()).collect::<Result<Vec<Variant>>>()?;
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(grid)
}

/// Per-variant medians across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: usize,
    pub median_max_reward: f64,
    pub median_diversity: f64,
    pub median_modes_covered: f64,
    /// Flow hidden layer.
    pub median_dormant_fraction: f64,
    pub median_resets: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn ablation_run_dir(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> PathBuf {
    cfg.experiment_dir().join(variant.name()).join(format!("seed-{seed}"))
}

/// Runs every `(variant, seed)` pair, then folds their `final.json` files into `summary.csv`.
pub fn run_ablation(cfg: &ExperimentConfig, grid: &[Variant], force: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let root = cfg.experiment_dir();
    if root.exists() && !force && fs::read_dir(&root).map_err(|e| Error::io(&root, e))?.next().is_some() {
        return Err(Error::Precondition(format!("{} already exists; pass --force to replace it", root.display())));
    }
    let oracles = oracles_for(&cfg.task.load()?);
    for &variant in grid {
        let vcfg = ExperimentConfig { trainer: variant.apply(&cfg.trainer), method: Method::Gflownet, ..cfg.clone() };
        for &seed in &cfg.seeds {
            run_seed(&vcfg, seed, &ablation_run_dir(cfg, variant, seed), force, oracles.as_deref())?;
        }
    }
    summarize_ablation(cfg, grid)
}

/// Pure fold over the run directories of a finished grid; writes `summary.csv`.
pub fn summarize_ablation(cfg: &ExperimentConfig, grid: &[Variant]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in grid {
        let mut summaries = Vec::new();
        for &seed in &cfg.seeds {
            let path = ablation_run_dir(cfg, variant, seed).join(FINAL_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            summaries.push(serde_json::from_str::<RunSummary>(&text)?);
        }
        let col = |f: &dyn Fn(&RunSummary) -> f64| median(&mut summaries.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: variant.name().into(),
            runs: summaries.len(),
            median_max_reward: col(&|s| s.eval.max_reward),
            median_diversity: col(&|s| s.eval.diversity),
            median_modes_covered: col(&|s| s.eval.modes_covered.map_or(f64::NAN, |c| c as f64)),
            median_dormant_fraction: col(&|s| {
                s.dormancy.layer(crate::nn::FLOW_HIDDEN_LAYER).map_or(f64::NAN, |l| l.dormant_fraction)
            }),
            median_resets: col(&|s| s.resets as f64),
        });
    }
    let mut csv = String::from(
        "variant,runs,median_max_reward,median_diversity,median_modes_covered,median_dormant_fraction,median_resets\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant,
            r.runs,
            r.median_max_reward,
            r.median_diversity,
            r.median_modes_covered,
            r.median_dormant_fraction,
            r.median_resets
        ));
    }
    write_new_file(&cfg.experiment_dir().join(SUMMARY_FILE), csv.as_bytes(), true)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        ExperimentConfig::from_json_str(r#"{"name": "t", "task": {"preset": "count"}}"#).unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = config();
        assert_eq!(c.trainer, TrainerConfig::default());
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.eval.samples_per_condition, 16);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = ExperimentConfig::from_json_str("{\"name\": \"t\",\n \"task\": {\"preset\": \"count\"},\n \"trainr\": {}}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(ExperimentConfig::from_json_str(r#"{"name":"t","task":{"preset":"count"},"trainer":{"MM":1}}"#).is_err());
    }

    #[test]
    fn override_alias_changes_only_reset_period() {
        let mut c = config();
        let before = serde_json::to_value(&c).unwrap();
        c.apply_override("trainer.M=1000").unwrap();
        assert_eq!(c.trainer.reset_period, Some(1000));
        let mut after = serde_json::to_value(&c).unwrap();
        after["trainer"]["reset_period"] = before["trainer"]["reset_period"].clone();
        assert_eq!(before, after);
        c.apply_override("trainer.reset_period=null").unwrap();
        assert_eq!(c.trainer.reset_period, None);
        c.apply_override("trainer.objective=vargrad").unwrap();
        assert_eq!(c.trainer.objective, Objective::Vargrad);
    }

    #[test]
    fn bad_overrides_fail() {
        let mut c = config();
        assert!(c.apply_override("trainer.nope=1").is_err());
        assert!(c.apply_override("trainer.replay_mix=2").is_err());
        assert!(c.apply_override("noequals").is_err());
        assert_eq!(c, config());
    }

    #[test]
    fn resolved_config_round_trips() {
        let r = config().resolved(7).unwrap();
        let back = ExperimentConfig::from_json_str(&serde_json::to_string_pretty(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.trainer.seed, 7);
        assert!(matches!(r.task, TaskSource::Inline(_)));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid(&["full".into(), "no_fl".into()]).unwrap(), vec![Variant::Full, Variant::NoFl]);
        assert!(parse_grid(&["full".into(), "no_flow".into()]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn existing_directory_needs_force() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("x");
        prepare_dir(&d, false).unwrap();
        fs::write(d.join("f"), b"1").unwrap();
        assert!(prepare_dir(&d, false).is_err());
        prepare_dir(&d, true).unwrap();
        assert!(fs::read_dir(&d).unwrap().next().is_none());
    }
}
