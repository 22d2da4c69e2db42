//! Masked training, the iterative prune-and-rewind loop, one-shot baselines
//! and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_flip, crop_patch, Dataset, ImagePair, Task};
use crate::diffcore::Graph;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricConfig};
use crate::model::MicroPromptNet;
use crate::pruning::{
    apply_mask, prune_step_global, prune_step_layerwise, prune_step_random, rewind, sparsity, PruneConfig, Scope,
    SparsityMask,
};
use crate::schedule::{lr_at, ScheduleConfig};
use crate::seed::{derive, stream};
use crate::store::NamedTensorStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub eta_start: f64,
    pub eta_base: f64,
    pub eta_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub patch: usize,
    pub flips: bool,
    pub clamp_eval: bool,
    /// Constant learning rate for one-shot fine-tuning; `eta_base / 10` when absent.
    pub finetune_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            warmup: 15,
            batch_size: 8,
            eta_start: 1e-6,
            eta_base: 2e-4,
            eta_min: 1e-6,
            adam: AdamConfig::default(),
            seed: 0,
            patch: 32,
            flips: true,
            clamp_eval: true,
            finetune_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            eta_start: self.eta_start,
            eta_base: self.eta_base,
            eta_min: self.eta_min,
            j: self.epochs,
            j_w: self.warmup,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.patch == 0 || self.patch % 8 != 0 {
            return Err(Error::InvalidArgument(format!("patch {} must be a positive multiple of 8", self.patch)));
        }
        self.schedule().validate()
    }

    /// `ceil(0.05 · j)`.
    pub fn finetune_epochs(&self) -> usize {
        (self.epochs * 5).div_ceil(100)
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NamedTensorStore) -> Self {
        let zeros = || params.iter().map(|e| vec![0.0f32; e.tensor.len()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Store index → mask layer index, for prunable tensors.
fn mask_slots(theta: &NamedTensorStore) -> Vec<Option<usize>> {
    let mut next = 0;
    theta
        .iter()
        .map(|e| {
            e.prunable.then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// One masked Adam update: masks gradients, applies bias-corrected Adam,
/// then re-applies the mask so pruned entries are exactly zero.
pub fn adam_step(
    theta: &mut NamedTensorStore,
    grads: &mut [Vec<f32>],
    state: &mut AdamState,
    lr: f64,
    mask: &SparsityMask,
    cfg: &AdamConfig,
) -> Result<()> {
    mask.check_aligned(theta)?;
    if grads.len() != theta.len() || state.m.len() != theta.len() {
        return Err(Error::Alignment(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            theta.len()
        )));
    }
    let slots = mask_slots(theta);
    for (i, g) in grads.iter_mut().enumerate() {
        let entry = theta.get(i);
        if g.len() != entry.tensor.len() {
            return Err(Error::Alignment(format!("gradient for `{}` has {} entries", entry.name, g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: entry.name.clone(),
            });
        }
        if let Some(s) = slots[i] {
            for (gv, &k) in g.iter_mut().zip(&mask.layers[s].keep) {
                if k == 0 {
                    *gv = 0.0;
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
    let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
    let (lr, eps) = (lr as f32, cfg.eps as f32);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &gv), mv), vv) in theta.tensor_mut(i).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    apply_mask(theta, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
    #[serde(with = "f64_inf")]
    pub val_psnr: f64,
    pub surviving_params: usize,
    pub sparsity: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss (first on ties).
    pub best_epoch: Option<usize>,
}

/// Hooks into the training loop; every method defaults to a no-op.
pub trait TrainObserver {
    fn after_step(&mut self, _round: usize, _epoch: usize, _step: usize, _theta: &NamedTensorStore, _mask: &SparsityMask) -> Result<()> {
        Ok(())
    }

    fn round_start(&mut self, _round: usize, _theta: &NamedTensorStore, _theta0: &NamedTensorStore, _mask: &SparsityMask) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// A training sample after cropping and flipping. The augmentation seed
/// depends on the epoch, the dataset position and the duplicate index.
fn augmented(pair: &ImagePair, idx: usize, epoch: usize, cfg: &TrainConfig) -> Result<ImagePair> {
    let s = derive(cfg.seed, &[stream::AUGMENT, epoch as u64, idx as u64, pair.copy as u64]);
    let (h, w, _) = pair.degraded.hwc()?;
    let mut out = if (h, w) == (cfg.patch, cfg.patch) {
        pair.clone()
    } else {
        crop_patch(pair, cfg.patch, derive(s, &[0]))?.0
    };
    if cfg.flips {
        out = augment_flip(&out, derive(s, &[1]));
    }
    Ok(out)
}

/// Mean L1 loss over a batch; returns the loss and per-parameter gradients.
pub fn batch_gradients(net: &MicroPromptNet, batch: &[ImagePair]) -> Result<(f64, Vec<Vec<f32>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut g = Graph::<f32>::new();
    let p = net.bind(&mut g, true);
    let mut total = None;
    for pair in batch {
        let x = g.constant(pair.degraded.clone());
        let y = g.constant(pair.clean.clone());
        let out = net.forward_graph(&mut g, &p, x)?;
        let l = g.l1_loss(out, y)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
    g.backward(loss)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = p
        .iter()
        .map(|&v| g.take_grad(v).expect("parameters require grad"))
        .collect();
    Ok((value, grads))
}

/// Mean L1 loss and mean PSNR of clamped outputs.
fn validate(net: &MicroPromptNet, val: &Dataset) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let cfg = MetricConfig::default();
    let (mut loss, mut ps) = (0.0, 0.0);
    for pair in &val.pairs {
        let out = net.forward(&pair.degraded)?;
        loss += out
            .data()
            .iter()
            .zip(pair.clean.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / out.len() as f64;
        ps += psnr(&out.map(|v| v.clamp(0.0, 1.0)), &pair.clean, &cfg)?;
    }
    let n = val.len() as f64;
    Ok((loss / n, ps / n))
}

/// Trains `net` in place with gradient masking for `epochs` epochs of the
/// given schedule. `round` only labels records and observer calls.
#[allow(clippy::too_many_arguments)]
pub fn train_with_lrs(
    net: &mut MicroPromptNet,
    train: &Dataset,
    val: &Dataset,
    mask: &SparsityMask,
    cfg: &TrainConfig,
    lrs: &[f64],
    round: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let n_batches = train.len() / cfg.batch_size;
    if n_batches == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} training pairs cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    mask.check_aligned(net.params())?;
    let mut theta = net.params().clone();
    apply_mask(&mut theta, mask)?;
    *net.params_mut() = theta;
    let mut adam = AdamState::new(net.params());
    let surviving = mask.surviving();
    let sp = sparsity(mask);
    let mut records = Vec::with_capacity(lrs.len());
    for (epoch, &lr) in lrs.iter().enumerate() {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[stream::SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        for b in 0..n_batches {
            let batch = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| augmented(&train.pairs[i], i, epoch, cfg))
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grads) = batch_gradients(net, &batch)?;
            let params = net.params_mut();
            adam_step(params, &mut grads, &mut adam, lr, mask, &cfg.adam)?;
            loss_sum += loss;
            observer.after_step(round, epoch, b, net.params(), mask)?;
        }
        let (val_loss, val_psnr) = validate(net, val)?;
        let record = EpochRecord {
            round,
            epoch,
            loss: loss_sum / n_batches as f64,
            val_loss,
            val_psnr,
            surviving_params: surviving,
            sparsity: sp,
            lr,
        };
        log::debug!("round {round} epoch {epoch}: loss {:.5} val_psnr {:.3}", record.loss, record.val_psnr);
        observer.epoch_end(&record)?;
        records.push(record);
    }
    let best_epoch = records
        .iter()
        .filter(|r| !r.val_loss.is_nan())
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .map(|r| r.epoch);
    Ok(TrainTrace {
        epochs: records,
        best_epoch,
    })
}

/// Full schedule for epochs `0..j`, with the Adam state fresh.
pub fn train_epochs(
    net: &mut MicroPromptNet,
    train: &Dataset,
    val: &Dataset,
    mask: &SparsityMask,
    cfg: &TrainConfig,
    round: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainTrace> {
    let sched = cfg.schedule();
    let lrs = (0..cfg.epochs).map(|t| lr_at(t, &sched)).collect::<Result<Vec<_>>>()?;
    train_with_lrs(net, train, val, mask, cfg, &lrs, round, observer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    pub count: usize,
    #[serde(with = "f64_inf")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(with = "f64_inf")]
    pub input_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(with = "f64_inf")]
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the degraded inputs themselves.
    #[serde(with = "f64_inf")]
    pub input_psnr: f64,
    pub epoch_of_best_validation: Option<usize>,
    /// Surviving prunable parameters.
    pub params_surviving: usize,
    /// Surviving parameters including non-prunable ones.
    pub total_params_surviving: usize,
    pub per_task: Vec<TaskMetrics>,
}

/// Mean PSNR/SSIM over full test images; outputs are clamped to [0,1] when `clamp`.
pub fn evaluate(net: &MicroPromptNet, test: &Dataset, mask: &SparsityMask, clamp: bool) -> Result<EvalRecord> {
    mask.check_aligned(net.params())?;
    let cfg = MetricConfig::default();
    let mut rows: Vec<(Task, f64, f64, f64)> = Vec::with_capacity(test.len());
    for pair in &test.pairs {
        let mut out = net.forward(&pair.degraded)?;
        if clamp {
            out = out.map(|v| v.clamp(0.0, 1.0));
        }
        rows.push((
            pair.task,
            psnr(&out, &pair.clean, &cfg)?,
            ssim(&out, &pair.clean, &cfg)?,
            psnr(&pair.degraded, &pair.clean, &cfg)?,
        ));
    }
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    };
    let per_task = Task::ALL
        .into_iter()
        .filter_map(|t| {
            let sel: Vec<_> = rows.iter().filter(|r| r.0 == t).collect();
            (!sel.is_empty()).then(|| TaskMetrics {
                task: t,
                count: sel.len(),
                psnr: mean(&mut sel.iter().map(|r| r.1)),
                ssim: mean(&mut sel.iter().map(|r| r.2)),
                input_psnr: mean(&mut sel.iter().map(|r| r.3)),
            })
        })
        .collect();
    let non_prunable: usize = net.params().iter().filter(|e| !e.prunable).map(|e| e.tensor.len()).sum();
    Ok(EvalRecord {
        psnr: mean(&mut rows.iter().map(|r| r.1)),
        ssim: mean(&mut rows.iter().map(|r| r.2)),
        input_psnr: mean(&mut rows.iter().map(|r| r.3)),
        epoch_of_best_validation: None,
        params_surviving: mask.surviving(),
        total_params_surviving: mask.surviving() + non_prunable,
        per_task,
    })
}

/// Train/validation/test sets for one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Outcome of one prune-and-rewind round.
#[derive(Clone, Debug)]
pub struct RoundResult {
    pub round: usize,
    pub mask: SparsityMask,
    pub theta: NamedTensorStore,
    pub trace: TrainTrace,
    pub eval: EvalRecord,
}

/// Where an interrupted run resumes: the trained parameters and mask of the last finished round.
#[derive(Clone, Debug)]
pub struct ResumePoint {
    pub round: usize,
    pub theta: NamedTensorStore,
    pub mask: SparsityMask,
}

pub fn prune_once(theta: &NamedTensorStore, mask: &SparsityMask, prune: &PruneConfig) -> Result<SparsityMask> {
    match prune.scope {
        Scope::Global => prune_step_global(theta, mask, prune.rate),
        Scope::Layerwise => prune_step_layerwise(theta, mask, prune.rate, prune.output_layer_factor),
    }
}

/// Iterative magnitude pruning with rewinding to `theta0`.
///
/// Round 0 trains the dense network. Each further round prunes the trained
/// weights, rewinds survivors to `theta0`, and retrains with fresh Adam
/// state and a fresh schedule. Stops once sparsity reaches the target or
/// `max_rounds` is hit. `on_round` sees every finished round.
#[allow(clippy::too_many_arguments)]
pub fn lth_run(
    theta0: &MicroPromptNet,
    data: &Splits,
    prune: &PruneConfig,
    cfg: &TrainConfig,
    resume: Option<ResumePoint>,
    observer: &mut dyn TrainObserver,
    on_round: &mut dyn FnMut(&RoundResult) -> Result<()>,
) -> Result<Vec<RoundResult>> {
    prune.validate()?;
    let config = theta0.config().clone();
    let theta0_store = theta0.params();
    let mut results = Vec::new();
    let (mut round, mut trained, mut mask) = match resume {
        Some(r) => {
            r.mask.check_aligned(theta0_store)?;
            theta0_store.check_compatible(&r.theta)?;
            (r.round, r.theta, r.mask)
        }
        None => {
            let mask = SparsityMask::ones(theta0_store);
            let r = run_round(&config, theta0_store, data, &mask, cfg, 0, observer)?;
            on_round(&r)?;
            let out = (0, r.theta.clone(), mask);
            results.push(r);
            out
        }
    };
    while sparsity(&mask) < prune.target_sparsity && round < prune.max_rounds {
        round += 1;
        let next = prune_once(&trained, &mask, prune)?;
        if next == mask {
            log::warn!("round {round}: pruning removed nothing; stopping");
            break;
        }
        mask = next;
        let r = run_round(&config, theta0_store, data, &mask, cfg, round, observer)?;
        on_round(&r)?;
        trained = r.theta.clone();
        results.push(r);
    }
    Ok(results)
}

fn run_round(
    config: &crate::model::ModelConfig,
    theta0: &NamedTensorStore,
    data: &Splits,
    mask: &SparsityMask,
    cfg: &TrainConfig,
    round: usize,
    observer: &mut dyn TrainObserver,
) -> Result<RoundResult> {
    let theta = rewind(theta0, mask)?;
    observer.round_start(round, &theta, theta0, mask)?;
    let mut net = MicroPromptNet::from_store(config, theta)?;
    let trace = train_epochs(&mut net, &data.train, &data.val, mask, cfg, round, observer)?;
    let mut eval = evaluate(&net, &data.test, mask, cfg.clamp_eval)?;
    eval.epoch_of_best_validation = trace.best_epoch;
    log::info!(
        "round {round}: sparsity {:.4}, {} prunable weights, PSNR {:.3} dB, SSIM {:.4}",
        sparsity(mask),
        mask.surviving(),
        eval.psnr,
        eval.ssim
    );
    Ok(RoundResult {
        round,
        mask: mask.clone(),
        theta: net.into_params(),
        trace,
        eval,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OneShotKind {
    Magnitude,
    Random,
}

#[derive(Clone, Debug)]
pub struct OneShotResult {
    pub mask: SparsityMask,
    pub theta: NamedTensorStore,
    pub trace: TrainTrace,
    pub eval: EvalRecord,
}

/// Mask for a single cut of `fraction` of the prunable weights of a trained network.
pub fn oneshot_mask(trained: &NamedTensorStore, kind: OneShotKind, fraction: f64, seed: u64) -> Result<SparsityMask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("one-shot fraction must be in [0,1), got {fraction}")));
    }
    let ones = SparsityMask::ones(trained);
    match kind {
        OneShotKind::Magnitude => prune_step_global(trained, &ones, fraction),
        OneShotKind::Random => Ok(prune_step_random(&ones, fraction, derive(seed, &[stream::RANDOM_PRUNE]))),
    }
}

/// Prunes a trained dense network once (global magnitude or uniform random)
/// and fine-tunes the survivors for `ceil(0.05 · j)` epochs at a constant rate.
pub fn oneshot_run(
    trained: &MicroPromptNet,
    kind: OneShotKind,
    fraction: f64,
    data: &Splits,
    cfg: &TrainConfig,
) -> Result<OneShotResult> {
    let mask = oneshot_mask(trained.params(), kind, fraction, cfg.seed)?;
    let mut net = trained.clone();
    apply_mask(net.params_mut(), &mask)?;
    let lr = cfg.finetune_lr.unwrap_or(cfg.eta_base / 10.0);
    let lrs = vec![lr; cfg.finetune_epochs()];
    let trace = train_with_lrs(&mut net, &data.train, &data.val, &mask, cfg, &lrs, 0, &mut NoObserver)?;
    let mut eval = evaluate(&net, &data.test, &mask, cfg.clamp_eval)?;
    eval.epoch_of_best_validation = trace.best_epoch;
    Ok(OneShotResult {
        mask,
        theta: net.into_params(),
        trace,
        eval,
    })
}

/// Serializes non-finite floats as strings (`"inf"`, `"-inf"`, `"nan"`),
/// since JSON has no literal for them.
pub mod f64_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number or inf/-inf/nan, got `{other}`"))),
            },
        }
    }
}

/// Identity-like helper used by tests and the CLI: zero the output head so
/// the network returns its input (with a global residual).
pub fn zero_output_layer(net: &mut MicroPromptNet) {
    let params = net.params_mut();
    let out: Vec<usize> = (0..params.len()).filter(|&i| params.get(i).output_layer).collect();
    for i in out {
        params.tensor_mut(i).data_mut().fill(0.0);
        let bias = format!("{}.bias", params.get(i).name.trim_end_matches(".kernel"));
        if let Some(b) = params.position(&bias) {
            params.tensor_mut(b).data_mut().fill(0.0);
        }
    }
}
