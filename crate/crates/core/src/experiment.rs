//! Experiment orchestration on disk: configuration, dataset materialization,
//! prune-and-rewind runs with per-round checkpoints and resumption,
//! one-shot baselines, evaluation and reporting.
//!
//! Run directory layout:
//!
//! ```text
//! <run_dir>/config.json         config plus its digest
//! <run_dir>/log.jsonl           one line per epoch
//! <run_dir>/round_000/ ...      checkpoint per round (meta.json, tensors.bin, masks.bin)
//! <run_dir>/report.csv|json     per-round table
//! <run_dir>/oneshot_<kind>_<f>/ one-shot checkpoint and eval.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_checkpoint, read_meta, write_checkpoint, RunCheckpoint, META_FILE};
use crate::data::{combine, load_manifest_dataset, synthesize, write_dataset, DataRecipe, Split, Task};
use crate::error::{Error, Result};
use crate::model::{MicroPromptNet, ModelConfig, ParamInfo};
use crate::pruning::{compression_rate, format_compression, sparsity, PruneConfig, SparsityMask};
use crate::seed::{derive, stream};
use crate::train::{
    evaluate, f64_inf, lth_run, oneshot_run, EpochRecord, EvalRecord, OneShotKind, ResumePoint, RoundResult, Splits,
    TrainConfig, TrainObserver,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub recipe: DataRecipe,
    /// Where `datagen` writes and training reads the PNG datasets.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            recipe: DataRecipe::default(),
            dir: PathBuf::from("data"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub run_dir: PathBuf,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub report: ReportConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prune.validate()?;
        self.train.validate()?;
        self.data.recipe.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding, excluding file locations
    /// (`data.dir`, `report`) so moving a run directory keeps it valid.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("report");
        if let Some(data) = obj.get_mut("data").and_then(|d| d.as_object_mut()) {
            data.remove("dir");
        }
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Seed for θ₀.
    pub fn init_seed(&self) -> u64 {
        derive(self.train.seed, &[stream::INIT])
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("train".to_string(), self.train.seed),
            ("init".to_string(), self.init_seed()),
            ("data".to_string(), self.data.recipe.seed),
        ])
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Clears `dir` when `force`; otherwise refuses a non-empty directory.
fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if is_non_empty_dir(dir) {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

// ---------------------------------------------------------------- datasets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenSummary {
    pub dir: PathBuf,
    /// `(set, split, pairs)` rows; `set` is a task name or `all`.
    pub sets: Vec<(String, Split, usize)>,
}

/// In-memory splits for a recipe: balanced all-in-one training set plus
/// concatenated validation and test sets.
pub fn synthesize_splits(recipe: &DataRecipe) -> Result<Splits> {
    let per_task = synthesize(recipe)?;
    let (train, val, test) = combine(&per_task, derive(recipe.seed, &[stream::BALANCE]))?;
    Ok(Splits { train, val, test })
}

/// Writes every task's splits and the combined set as PNGs with manifests.
pub fn datagen(cfg: &ExperimentConfig, force: bool) -> Result<DatagenSummary> {
    let dir = &cfg.data.dir;
    prepare_output(dir, force)?;
    let per_task = synthesize(&cfg.data.recipe)?;
    let mut sets = Vec::new();
    for s in &per_task {
        for ds in [&s.train, &s.val, &s.test] {
            write_dataset(&dir.join(s.task.name()).join(ds.split.name()), ds)?;
            sets.push((s.task.name().to_string(), ds.split, ds.len()));
        }
    }
    let (train, val, test) = combine(&per_task, derive(cfg.data.recipe.seed, &[stream::BALANCE]))?;
    for ds in [&train, &val, &test] {
        write_dataset(&dir.join("all").join(ds.split.name()), ds)?;
        sets.push(("all".to_string(), ds.split, ds.len()));
    }
    Ok(DatagenSummary { dir: dir.clone(), sets })
}

/// Loads the all-in-one splits written by [`datagen`].
pub fn load_splits(data_dir: &Path) -> Result<Splits> {
    let all = data_dir.join("all");
    if !all.join("train").join("manifest.json").exists() {
        return Err(Error::Data(format!(
            "no dataset under {}; run `datagen` first",
            all.display()
        )));
    }
    let load = |s: Split| -> Result<_> {
        let mut ds = load_manifest_dataset(&all.join(s.name()))?;
        ds.split = s;
        Ok(ds)
    };
    Ok(Splits {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    })
}

// ---------------------------------------------------------------- runs

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";

pub fn round_dir(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(format!("round_{round:03}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredConfig {
    digest: String,
    config: ExperimentConfig,
}

/// A run-log line: an epoch record tagged with the config digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub digest: String,
    #[serde(flatten)]
    pub record: EpochRecord,
}

/// Per-round summary stored in each checkpoint's `extra` field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub sparsity: f64,
    pub eval: EvalRecord,
    pub final_loss: Option<f64>,
}

/// Completed rounds in `run_dir`, ascending.
pub fn completed_rounds(run_dir: &Path) -> Result<Vec<usize>> {
    let mut rounds = Vec::new();
    let Ok(entries) = fs::read_dir(run_dir) else { return Ok(rounds) };
    for entry in entries {
        let entry = entry.map_err(io_err(run_dir))?;
        let name = entry.file_name();
        let Some(r) = name.to_str().and_then(|n| n.strip_prefix("round_")).and_then(|n| n.parse().ok()) else {
            continue;
        };
        if entry.path().join(META_FILE).exists() {
            rounds.push(r);
        }
    }
    rounds.sort_unstable();
    Ok(rounds)
}

struct LogWriter {
    file: fs::File,
    path: PathBuf,
    digest: String,
}

impl TrainObserver for LogWriter {
    fn epoch_end(&mut self, record: &EpochRecord) -> Result<()> {
        let line = LogLine {
            digest: self.digest.clone(),
            record: record.clone(),
        };
        let mut s = serde_json::to_string(&line)?;
        s.push('\n');
        self.file.write_all(s.as_bytes()).map_err(io_err(&self.path))
    }
}

/// Opens the run directory: fresh when absent/forced, otherwise checks the
/// stored digest and returns the last completed round (if any).
fn open_run(cfg: &ExperimentConfig, run_dir: &Path, force: bool) -> Result<Option<usize>> {
    let digest = cfg.digest();
    let cfg_path = run_dir.join(CONFIG_FILE);
    if cfg_path.exists() && !force {
        let stored: StoredConfig = serde_json::from_slice(&fs::read(&cfg_path).map_err(io_err(&cfg_path))?)?;
        if stored.digest != digest {
            return Err(Error::DigestMismatch {
                expected: digest,
                found: stored.digest,
            });
        }
        return Ok(completed_rounds(run_dir)?.last().copied());
    }
    prepare_output(run_dir, force)?;
    let stored = StoredConfig {
        digest,
        config: cfg.clone(),
    };
    fs::write(&cfg_path, serde_json::to_vec_pretty(&stored)?).map_err(io_err(&cfg_path))?;
    Ok(None)
}

/// Rewrites the log keeping only lines of rounds `<= last`.
fn truncate_log(path: &Path, last: Option<usize>) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in text.lines() {
        let Ok(l) = serde_json::from_str::<LogLine>(line) else { continue };
        if last.is_some_and(|r| l.record.round <= r) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(path))
}

fn round_checkpoint(cfg: &ExperimentConfig, theta0: &MicroPromptNet, r: &RoundResult) -> RunCheckpoint {
    let summary = RoundSummary {
        round: r.round,
        sparsity: sparsity(&r.mask),
        eval: r.eval.clone(),
        final_loss: r.trace.epochs.last().map(|e| e.loss),
    };
    RunCheckpoint {
        theta0: theta0.params().clone(),
        theta: r.theta.clone(),
        mask: r.mask.clone(),
        round: r.round,
        seeds: cfg.seeds(),
        config_digest: cfg.digest(),
        extra: serde_json::to_value(summary).expect("summary serializes"),
    }
}

/// Runs (or resumes) iterative pruning in `run_dir`. With `dense_only`, stops after round 0.
pub fn run_lth(cfg: &ExperimentConfig, splits: &Splits, run_dir: &Path, force: bool, dense_only: bool) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let last = open_run(cfg, run_dir, force)?;
    let theta0 = MicroPromptNet::init(&cfg.model, cfg.init_seed())?;
    let resume = match last {
        Some(r) => {
            let ckpt = read_checkpoint(&round_dir(run_dir, r), Some(&cfg.digest()))?;
            if ckpt.theta0 != *theta0.params() {
                return Err(Error::Checkpoint(format!("round {r} checkpoint holds a different θ₀")));
            }
            log::info!("resuming after round {r}");
            Some(ResumePoint {
                round: r,
                theta: ckpt.theta,
                mask: ckpt.mask,
            })
        }
        None => None,
    };
    let log_path = run_dir.join(LOG_FILE);
    truncate_log(&log_path, last)?;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut logger = LogWriter {
        file,
        path: log_path,
        digest: cfg.digest(),
    };
    let mut prune = cfg.prune.clone();
    if dense_only {
        prune.max_rounds = 0;
    }
    if !(dense_only && last.is_some()) {
        lth_run(&theta0, splits, &prune, &cfg.train, resume, &mut logger, &mut |r| {
            write_checkpoint(&round_dir(run_dir, r.round), &round_checkpoint(cfg, &theta0, r))
        })?;
    }
    report(run_dir)
}

// ---------------------------------------------------------------- reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    #[serde(with = "f64_inf")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub round: usize,
    pub surviving_params: usize,
    pub total_params: usize,
    pub sparsity: f64,
    pub compression: f64,
    #[serde(with = "f64_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub tasks: Vec<TaskScore>,
}

fn dense_total(model: &ModelConfig) -> Result<usize> {
    Ok(describe(model)?.total)
}

/// Collects per-round rows from the checkpoints in `run_dir` and writes
/// `report.csv` and `report.json`. A run that stopped before its target is
/// reported as far as it got, with a warning.
pub fn report(run_dir: &Path) -> Result<Vec<ReportRow>> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let stored: StoredConfig = serde_json::from_slice(&fs::read(&cfg_path).map_err(io_err(&cfg_path))?)?;
    let dense = dense_total(&stored.config.model)?;
    let mut rows = Vec::new();
    for r in completed_rounds(run_dir)? {
        let meta = read_meta(&round_dir(run_dir, r))?;
        let summary: RoundSummary = serde_json::from_value(meta.extra)?;
        let e = &summary.eval;
        rows.push(ReportRow {
            round: r,
            surviving_params: e.params_surviving,
            total_params: e.total_params_surviving,
            sparsity: summary.sparsity,
            compression: compression_rate(dense as f64, e.total_params_surviving as f64)?,
            psnr: e.psnr,
            ssim: e.ssim,
            tasks: e
                .per_task
                .iter()
                .map(|t| TaskScore {
                    task: t.task,
                    psnr: t.psnr,
                    ssim: t.ssim,
                })
                .collect(),
        });
    }
    let prune = &stored.config.prune;
    let finished = rows
        .last()
        .is_some_and(|r| r.sparsity >= prune.target_sparsity || r.round >= prune.max_rounds);
    if !finished {
        log::warn!("run in {} is incomplete; report covers {} rounds", run_dir.display(), rows.len());
    }
    let csv_path = run_dir.join("report.csv");
    fs::write(&csv_path, report_csv(&rows)).map_err(io_err(&csv_path))?;
    let json_path = run_dir.join("report.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&rows)?).map_err(io_err(&json_path))?;
    Ok(rows)
}

/// Tasks present in the report, in canonical order.
fn report_tasks(rows: &[ReportRow]) -> Vec<Task> {
    Task::ALL
        .into_iter()
        .filter(|t| rows.iter().any(|r| r.tasks.iter().any(|s| s.task == *t)))
        .collect()
}

/// CSV with one row per round; floats use Rust's shortest round-trip form.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let tasks = report_tasks(rows);
    let mut out = String::from("round,surviving_params,total_params,sparsity,compression,psnr,ssim");
    for t in &tasks {
        out.push_str(&format!(",psnr_{0},ssim_{0}", t.name()));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            r.round, r.surviving_params, r.total_params, r.sparsity, r.compression, r.psnr, r.ssim
        ));
        for t in &tasks {
            match r.tasks.iter().find(|s| s.task == *t) {
                Some(s) => out.push_str(&format!(",{},{}", s.psnr, s.ssim)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Data("empty report".into()))?.split(',').collect();
    let bad = |what: &str| Error::Data(format!("malformed report field `{what}`"));
    let tasks: Vec<Task> = header[7..]
        .chunks(2)
        .map(|c| c[0].strip_prefix("psnr_").ok_or_else(|| bad(c[0]))?.parse())
        .collect::<Result<_>>()?;
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(s));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(s));
            let mut scores = Vec::new();
            for (i, t) in tasks.iter().enumerate() {
                let (p, s) = (f[7 + 2 * i], f[8 + 2 * i]);
                if !p.is_empty() {
                    scores.push(TaskScore {
                        task: *t,
                        psnr: num(p)?,
                        ssim: num(s)?,
                    });
                }
            }
            Ok(ReportRow {
                round: int(f[0])?,
                surviving_params: int(f[1])?,
                total_params: int(f[2])?,
                sparsity: num(f[3])?,
                compression: num(f[4])?,
                psnr: num(f[5])?,
                ssim: num(f[6])?,
                tasks: scores,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- one-shot & eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    pub kind: OneShotKind,
    pub fraction: f64,
    pub surviving_params: usize,
    pub total_params: usize,
    pub sparsity: f64,
    pub compression: String,
    pub finetune_epochs: usize,
    pub eval: EvalRecord,
}

pub fn oneshot_dir(run_dir: &Path, kind: OneShotKind, fraction: f64) -> PathBuf {
    let k = match kind {
        OneShotKind::Magnitude => "magnitude",
        OneShotKind::Random => "random",
    };
    run_dir.join(format!("oneshot_{k}_{fraction}"))
}

/// Prunes the dense round-0 network of `run_dir` once and fine-tunes it.
pub fn run_oneshot(
    cfg: &ExperimentConfig,
    splits: &Splits,
    run_dir: &Path,
    kind: OneShotKind,
    fraction: f64,
    override_digest: bool,
) -> Result<OneShotReport> {
    let dense_dir = round_dir(run_dir, 0);
    if !dense_dir.join(META_FILE).exists() {
        return Err(Error::Checkpoint(format!(
            "no dense checkpoint at {}; run `train` or `lth` first",
            dense_dir.display()
        )));
    }
    let digest = cfg.digest();
    let ckpt = read_checkpoint(&dense_dir, (!override_digest).then_some(digest.as_str()))?;
    let dense = MicroPromptNet::from_store(&cfg.model, ckpt.theta)?;
    let r = oneshot_run(&dense, kind, fraction, splits, &cfg.train)?;
    let total = dense_total(&cfg.model)?;
    let out = RunCheckpoint {
        theta0: ckpt.theta0,
        theta: r.theta,
        mask: r.mask.clone(),
        round: 0,
        seeds: cfg.seeds(),
        config_digest: digest,
        extra: serde_json::to_value(RoundSummary {
            round: 0,
            sparsity: sparsity(&r.mask),
            eval: r.eval.clone(),
            final_loss: r.trace.epochs.last().map(|e| e.loss),
        })?,
    };
    let dir = oneshot_dir(run_dir, kind, fraction);
    write_checkpoint(&dir, &out)?;
    let report = OneShotReport {
        kind,
        fraction,
        surviving_params: r.mask.surviving(),
        total_params: r.eval.total_params_surviving,
        sparsity: sparsity(&r.mask),
        compression: format_compression(compression_rate(total as f64, r.eval.total_params_surviving as f64)?),
        finetune_epochs: cfg.train.finetune_epochs(),
        eval: r.eval,
    };
    let path = dir.join("eval.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(io_err(&path))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub round: usize,
    pub surviving_params: usize,
    pub total_params: usize,
    pub dense_params: usize,
    pub compression: String,
    pub eval: EvalRecord,
}

/// Evaluates the `theta` of a checkpoint on `test`.
pub fn eval_checkpoint(cfg: &ExperimentConfig, ckpt_dir: &Path, test: &crate::data::Dataset, override_digest: bool) -> Result<EvalReport> {
    let digest = cfg.digest();
    let ckpt = read_checkpoint(ckpt_dir, (!override_digest).then_some(digest.as_str()))?;
    let net = MicroPromptNet::from_store(&cfg.model, ckpt.theta)?;
    let eval = evaluate(&net, test, &ckpt.mask, cfg.train.clamp_eval)?;
    let dense = dense_total(&cfg.model)?;
    Ok(EvalReport {
        checkpoint: ckpt_dir.to_path_buf(),
        round: ckpt.round,
        surviving_params: eval.params_surviving,
        total_params: eval.total_params_surviving,
        dense_params: dense,
        compression: format_compression(compression_rate(dense as f64, eval.total_params_surviving as f64)?),
        eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub params: Vec<ParamInfo>,
    pub total: usize,
    pub prunable: usize,
    pub non_prunable: usize,
}

/// Architecture summary: every parameter with its shape and roles.
pub fn describe(model: &ModelConfig) -> Result<Description> {
    let net = MicroPromptNet::init(model, 0)?;
    let params = net.enumerate_params();
    let total = net.params().total_count();
    let prunable = net.params().prunable_count();
    Ok(Description {
        params,
        total,
        prunable,
        non_prunable: total - prunable,
    })
}

/// Mask with the same layout as the prunable tensors of `model`, all ones.
pub fn dense_mask(model: &ModelConfig) -> Result<SparsityMask> {
    Ok(SparsityMask::ones(MicroPromptNet::init(model, 0)?.params()))
}
