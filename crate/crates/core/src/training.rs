//! Training harness: optimizers, the step learning-rate schedule,
//! patience-based early stopping and best-validation checkpointing, for
//! one network or the full three-orientation ensemble.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{binarize, predict_orientation, SegmentOptions};
use crate::losses::{
    boundary_loss_grad, dice_loss_grad, generalized_dice_loss_grad, signed_distance_map, BoundarySchedule, LossKind,
};
use crate::metrics::{csv_io, evaluate_subjects, Stat};
use crate::network::layers::Param;
use crate::network::{seed_for, Checkpoint, CheckpointMeta, Head, NetworkConfig, NetworkEnsemble, Real, UNet};
use crate::parallel::parallel_map;
use crate::sampling::{AugmentConfig, NegativeScope, PatchBatch, Sampler, SamplerConfig, Subject};
use crate::volumes::{EdgeMode, Orientation};

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// RAdam applies the adaptive step only once the variance estimate's
/// degrees of freedom exceed this.
pub const RADAM_RHO_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Radam,
}

impl OptimizerKind {
    pub fn label(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adam => "ADAM",
            OptimizerKind::Radam => "RADAM",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Radam => "radam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "radam" => Ok(OptimizerKind::Radam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real> {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using the gradients stored in `params`.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            if self.kind != OptimizerKind::Sgd {
                self.second = self.first.clone();
            }
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");
        self.steps += 1;
        let c = |x: f64| T::from(x).expect("float cast");
        let t = self.steps as i32;
        match self.kind {
            OptimizerKind::Sgd => {
                let (mu, lr) = (c(SGD_MOMENTUM), c(lr));
                for (p, v) in params.into_iter().zip(&mut self.first) {
                    for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *w = *w - lr * *v;
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::Radam => {
                let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                // None: take an un-adapted momentum step.
                let rect = if self.kind == OptimizerKind::Adam {
                    Some(1.0)
                } else {
                    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                    let rho = rho_inf - 2.0 * t as f64 * b2.powi(t) / bc2;
                    (rho > RADAM_RHO_THRESHOLD).then(|| {
                        (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
                    })
                };
                let (tb1, tb2, eps) = (c(b1), c(b2), c(ADAM_EPSILON));
                let (one_b1, one_b2) = (c(1.0 - b1), c(1.0 - b2));
                let step_m = c(lr / bc1);
                let sqrt_bc2 = c(bc2.sqrt());
                for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = tb1 * *m + one_b1 * g;
                        *v = tb2 * *v + one_b2 * g * g;
                        match rect {
                            Some(r) => *w = *w - step_m * c(r) * *m / ((*v).sqrt() / sqrt_bc2 + eps),
                            None => *w = *w - step_m * *m,
                        }
                    }
                }
            }
        }
    }
}

/// Multiplies the learning rate by `factor` from epoch index `at_epoch`
/// (zero-based) on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub factor: f64,
    pub at_epoch: usize,
}

impl Default for LrStep {
    fn default() -> Self {
        LrStep { factor: 0.1, at_epoch: 250 }
    }
}

pub fn learning_rate(initial: f64, step: Option<LrStep>, epoch_index: usize) -> f64 {
    match step {
        Some(s) if epoch_index >= s.at_epoch => initial * s.factor,
        _ => initial,
    }
}

/// Patience counter. An epoch improves only if its validation Dice is
/// strictly greater than the best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    /// One-based; 0 before the first observation.
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records epoch `epoch` (one-based); returns whether it improved.
    pub fn observe(&mut self, epoch: usize, dice: f64) -> bool {
        if dice > self.best {
            self.best = dice;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSizes {
    pub sagittal: usize,
    pub coronal: usize,
    pub axial: usize,
}

impl EpochSizes {
    pub fn get(&self, o: Orientation) -> usize {
        match o {
            Orientation::Sagittal => self.sagittal,
            Orientation::Coronal => self.coronal,
            Orientation::Axial => self.axial,
        }
    }
}

/// Sampler settings shared by the three orientations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub patch_size: [usize; 2],
    pub positive_fraction: f64,
    pub epoch_sizes: EpochSizes,
    pub augment: AugmentConfig,
    pub negative_scope: NegativeScope,
    pub edge_mode: EdgeMode,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            patch_size: [64, 64],
            positive_fraction: 0.8,
            epoch_sizes: EpochSizes { sagittal: 5000, coronal: 4000, axial: 3000 },
            augment: AugmentConfig::default(),
            negative_scope: NegativeScope::default(),
            edge_mode: EdgeMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub initial_lr: f64,
    pub lr_step: Option<LrStep>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Horizon `E` of the boundary-loss weight schedule; `max_epochs` when
    /// unset.
    pub boundary_horizon: Option<usize>,
    pub network: NetworkConfig,
    pub sampler: SamplerSettings,
    /// Threshold applied to single-network activations for validation.
    pub val_threshold: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Full-scale settings with the best optimizer/loss combination.
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Radam,
            initial_lr: 0.001,
            lr_step: Some(LrStep::default()),
            max_epochs: 1000,
            patience: 200,
            batch_size: 200,
            loss: LossKind::Boundary,
            boundary_horizon: None,
            network: NetworkConfig::default(),
            sampler: SamplerSettings::default(),
            val_threshold: 0.5,
            seed: 0,
        }
    }
}

/// Optimizer, learning rate and loss of the six hyperparameter rows.
pub const TABLE_S1_ROWS: [(OptimizerKind, f64, LossKind); 6] = [
    (OptimizerKind::Sgd, 0.005, LossKind::Dice),
    (OptimizerKind::Adam, 0.0001, LossKind::Dice),
    (OptimizerKind::Adam, 0.0001, LossKind::Gdl),
    (OptimizerKind::Adam, 0.0001, LossKind::Boundary),
    (OptimizerKind::Radam, 0.0001, LossKind::Boundary),
    (OptimizerKind::Radam, 0.001, LossKind::Boundary),
];

pub const PRESETS: [&str; 9] =
    ["paper", "desk", "best", "table-s1-row1", "table-s1-row2", "table-s1-row3", "table-s1-row4", "table-s1-row5", "table-s1-row6"];

impl TrainConfig {
    /// Paper-scale hyperparameters.
    pub fn paper() -> Self {
        TrainConfig::default()
    }

    /// Scaled down to run on a laptop CPU in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            max_epochs: 20,
            patience: 6,
            batch_size: 32,
            sampler: SamplerSettings {
                epoch_sizes: EpochSizes { sagittal: 500, coronal: 400, axial: 300 },
                ..SamplerSettings::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Desk scale with the optimizer, learning rate and loss of
    /// hyperparameter row `row` (1 to 6).
    pub fn table_s1(row: usize) -> Result<Self> {
        let (optimizer, initial_lr, loss) = *TABLE_S1_ROWS
            .get(row.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("hyperparameter row {row} is not in 1..=6")))?;
        let mut config = TrainConfig { optimizer, initial_lr, loss, ..TrainConfig::desk() };
        config.network.head = if loss == LossKind::Dice { Head::Sigmoid } else { Head::Softmax };
        Ok(config)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(TrainConfig::paper()),
            "desk" | "best" => Ok(TrainConfig::desk()),
            other => match other.strip_prefix("table-s1-row").and_then(|r| r.parse().ok()) {
                Some(row) => TrainConfig::table_s1(row),
                None => Err(Error::InvalidArgument(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                ))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !(self.initial_lr > 0.0) {
            return Err(Error::InvalidArgument(format!("initial_lr {} must be positive", self.initial_lr)));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("max_epochs and batch_size must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::InvalidArgument(format!(
                "patience {} must be smaller than max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.loss.needs_two_channels() && self.network.head != Head::Softmax {
            return Err(Error::InvalidArgument(format!(
                "{} needs the two-channel softmax head",
                self.loss.label()
            )));
        }
        let [h, w] = self.sampler.patch_size;
        self.network.check_spatial(h, w)?;
        if !(self.val_threshold > 0.0 && self.val_threshold < 1.0) {
            return Err(Error::InvalidArgument("val_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn sampler_config(&self, orientation: Orientation) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            patch_size: s.patch_size,
            positive_fraction: s.positive_fraction,
            orientation,
            epoch_size: s.epoch_sizes.get(orientation),
            augment: s.augment.clone(),
            seed: seed_for(self.seed ^ 0x5A5A_5A5A_5A5A_5A5A, orientation),
            negative_scope: s.negative_scope,
            edge_mode: s.edge_mode,
        }
    }

    fn horizon(&self) -> usize {
        self.boundary_horizon.unwrap_or(self.max_epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_dice: f64,
    pub val_dice: f64,
    pub lr: f64,
    pub alpha: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub orientation: Option<Orientation>,
    pub epochs: Vec<EpochRecord>,
    /// One-based; 0 if no epoch finished.
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stop_reason: StopReason,
    pub diagnostic: Option<String>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loss and Dice of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub dice: f64,
}

/// What the epoch loop drives: training, validation and snapshots.
pub trait EpochRunner {
    type Snapshot;

    /// Trains one epoch. `epoch_index` is zero-based.
    fn train_epoch(&mut self, epoch_index: usize, lr: f64, alpha: Option<f64>) -> Result<EpochStats>;

    fn validate(&mut self) -> Result<f64>;

    fn snapshot(&self) -> Self::Snapshot;
}

/// Schedule parameters of the epoch loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSchedule {
    pub initial_lr: f64,
    pub lr_step: Option<LrStep>,
    pub max_epochs: usize,
    pub patience: usize,
    /// Horizon of the boundary weight schedule when the loss uses one.
    pub alpha_horizon: Option<usize>,
}

impl From<&TrainConfig> for LoopSchedule {
    fn from(c: &TrainConfig) -> Self {
        LoopSchedule {
            initial_lr: c.initial_lr,
            lr_step: c.lr_step,
            max_epochs: c.max_epochs,
            patience: c.patience,
            alpha_horizon: (c.loss == LossKind::Boundary).then(|| c.horizon()),
        }
    }
}

/// Runs epochs until patience or `max_epochs` runs out, keeping the
/// snapshot taken after the best validation epoch. A training error stops
/// the loop with [`StopReason::Diverged`]; what was learned so far is kept.
pub fn run_epochs<R: EpochRunner>(runner: &mut R, schedule: &LoopSchedule) -> (TrainReport, Option<R::Snapshot>) {
    let start = Instant::now();
    let mut stopper = EarlyStopping::new(schedule.patience);
    let mut best = None;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut diagnostic = None;
    for index in 0..schedule.max_epochs {
        let epoch_start = Instant::now();
        let lr = learning_rate(schedule.initial_lr, schedule.lr_step, index);
        let alpha = schedule.alpha_horizon.map(|h| BoundarySchedule::new(index, h).alpha());
        let result = runner.train_epoch(index, lr, alpha).and_then(|stats| Ok((stats, runner.validate()?)));
        let (stats, val_dice) = match result {
            Ok(r) => r,
            Err(e) => {
                stop_reason = StopReason::Diverged;
                diagnostic = Some(format!("epoch {}: {e}", index + 1));
                log::warn!("training stopped: epoch {}: {e}", index + 1);
                break;
            }
        };
        let epoch = index + 1;
        if stopper.observe(epoch, val_dice) {
            best = Some(runner.snapshot());
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_dice: stats.dice,
            val_dice,
            lr,
            alpha,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: loss {:.4} train dice {:.4} val dice {:.4} (best {:.4} @ {}) lr {lr:.2e}",
            stats.loss,
            stats.dice,
            val_dice,
            stopper.best,
            stopper.best_epoch
        );
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let report = TrainReport {
        orientation: None,
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_dice: if stopper.best_epoch > 0 { stopper.best } else { 0.0 },
        stop_reason,
        diagnostic,
        seconds: start.elapsed().as_secs_f64(),
    };
    (report, best)
}

/// Batch loss and its gradient with respect to the head probabilities.
pub fn batch_loss_grad<T: Real>(
    probs: &Array4<T>,
    targets: &Array3<u8>,
    head: Head,
    loss: LossKind,
    alpha_schedule: BoundarySchedule,
) -> Result<(T, Array4<T>)> {
    let fg = head.foreground();
    let g: Array3<T> = targets.mapv(|v| if v != 0 { T::one() } else { T::zero() });
    let mut dprobs = Array4::<T>::zeros(probs.raw_dim());
    let value = match loss {
        LossKind::Dice => {
            let (value, grad) = dice_loss_grad(probs.index_axis(Axis(1), fg), g.view())?;
            dprobs.index_axis_mut(Axis(1), fg).assign(&grad);
            value
        }
        LossKind::Gdl | LossKind::Boundary => {
            if head != Head::Softmax {
                return Err(Error::InvalidArgument(format!("{} needs the softmax head", loss.label())));
            }
            let p = probs.view().permuted_axes([1, 0, 2, 3]);
            let mut onehot = Array4::<T>::zeros(p.raw_dim());
            Zip::from(onehot.index_axis_mut(Axis(0), 0)).and(&g).for_each(|o, &v| *o = T::one() - v);
            onehot.index_axis_mut(Axis(0), 1).assign(&g);
            let (value, grad) = if loss == LossKind::Gdl {
                generalized_dice_loss_grad(p, onehot.view())?
            } else {
                let mut phi = Array3::<f64>::zeros(targets.raw_dim());
                for (mut out, t) in phi.axis_iter_mut(Axis(0)).zip(targets.axis_iter(Axis(0))) {
                    out.assign(&signed_distance_map(t).phi);
                }
                boundary_loss_grad(p, onehot.view(), phi.view(), alpha_schedule)?
            };
            dprobs.assign(&grad.permuted_axes([1, 0, 2, 3]));
            value
        }
    };
    Ok((value, dprobs))
}

fn hard_dice(probs: &Array4<f32>, targets: &Array3<u8>, fg: usize, threshold: f32) -> f64 {
    let p = probs.index_axis(Axis(1), fg);
    let (mut inter, mut sum) = (0u64, 0u64);
    Zip::from(&p).and(targets).for_each(|&p, &t| {
        let a = p >= threshold;
        let b = t != 0;
        inter += u64::from(a && b);
        sum += u64::from(a) + u64::from(b);
    });
    if sum == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sum as f64
    }
}

/// Mean volume Dice of one network's thresholded predictions.
pub fn validation_dice(
    net: &UNet<f32>,
    subjects: &[Subject],
    orientation: Orientation,
    threshold: f32,
    edge: EdgeMode,
) -> Result<f64> {
    if subjects.is_empty() {
        return Err(Error::EmptySubset("validation"));
    }
    let mut total = 0.0;
    for s in subjects {
        let act = predict_orientation(net, &s.volume, orientation, edge)?;
        let pred = binarize(&act, threshold)?;
        let p = pred.data().mapv(f64::from);
        let g = s.mask.data().mapv(f64::from);
        total += crate::losses::dice_coefficient(p.view(), g.view())?;
    }
    Ok(total / subjects.len() as f64)
}

struct NetRunner<'a> {
    net: UNet<f32>,
    optimizer: Optimizer<f32>,
    sampler: Sampler<'a>,
    val: &'a [Subject],
    config: &'a TrainConfig,
    orientation: Orientation,
}

impl NetRunner<'_> {
    fn step(&mut self, batch: PatchBatch, epoch_index: usize, lr: f64) -> Result<(f64, f64)> {
        let head = self.config.network.head;
        self.net.zero_grad();
        let probs = self.net.forward_train(batch.inputs)?;
        let schedule = BoundarySchedule::new(epoch_index, self.config.horizon());
        let (loss, dprobs) = batch_loss_grad(&probs, &batch.targets, head, self.config.loss, schedule)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: epoch_index + 1, loss: loss as f64 });
        }
        self.net.backward(&dprobs);
        self.optimizer.step(self.net.params_mut(), lr);
        Ok((loss as f64, hard_dice(&probs, &batch.targets, head.foreground(), self.config.val_threshold)))
    }
}

impl EpochRunner for NetRunner<'_> {
    type Snapshot = UNet<f32>;

    fn train_epoch(&mut self, epoch_index: usize, lr: f64, _alpha: Option<f64>) -> Result<EpochStats> {
        let n = self.sampler.batches_per_epoch(self.config.batch_size);
        let (mut loss, mut dice) = (0.0, 0.0);
        for i in 0..n {
            let batch = self.sampler.batch(epoch_index, i, self.config.batch_size);
            let (l, d) = self.step(batch, epoch_index, lr)?;
            loss += l;
            dice += d;
        }
        Ok(EpochStats { loss: loss / n as f64, dice: dice / n as f64 })
    }

    fn validate(&mut self) -> Result<f64> {
        validation_dice(&self.net, self.val, self.orientation, self.config.val_threshold, self.config.sampler.edge_mode)
    }

    fn snapshot(&self) -> UNet<f32> {
        self.net.clone()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation weights; the initial weights if no epoch finished.
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Trains one orientation's network from `net`'s current weights.
pub fn train_network(
    net: UNet<f32>,
    train: &[Subject],
    val: &[Subject],
    orientation: Orientation,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if net.config() != &config.network {
        return Err(Error::InvalidArgument("network does not match the training configuration".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptySubset("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySubset("val"));
    }
    let sampler = Sampler::new(train, config.sampler_config(orientation))?;
    let initial = net.clone();
    let mut runner =
        NetRunner { net, optimizer: Optimizer::new(config.optimizer), sampler, val, config, orientation };
    let (mut report, best) = run_epochs(&mut runner, &LoopSchedule::from(config));
    report.orientation = Some(orientation);
    let meta = CheckpointMeta {
        orientation: Some(orientation),
        epoch: report.best_epoch,
        best_val_dice: report.best_val_dice,
        seed: config.seed,
    };
    Ok(TrainOutcome { checkpoint: Checkpoint::new(best.unwrap_or(initial), meta), report })
}

/// Result of training all three orientations.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub ensemble: NetworkEnsemble,
    /// Sagittal, coronal, axial.
    pub outcomes: Vec<TrainOutcome>,
}

impl EnsembleRun {
    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|o| o.report.stop_reason == StopReason::Diverged)
    }

    /// Error describing the first failed orientation, if any.
    pub fn check(&self) -> Result<()> {
        for o in &self.outcomes {
            if o.report.stop_reason == StopReason::Diverged {
                let last = o.report.epochs.len() + 1;
                return Err(Error::Divergence { epoch: last, loss: f64::NAN });
            }
        }
        Ok(())
    }

    /// Writes `<orientation>.ckpt`, `<orientation>_report.json` and
    /// `<orientation>_curves.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (o, outcome) in Orientation::ALL.iter().zip(&self.outcomes) {
            outcome.checkpoint.save(&dir.join(format!("{o}.ckpt")))?;
            outcome.report.write_json(&dir.join(format!("{o}_report.json")))?;
            outcome.report.write_csv(&dir.join(format!("{o}_curves.csv")))?;
        }
        Ok(())
    }
}

/// Loads the three checkpoints written by [`EnsembleRun::save`].
pub fn load_ensemble(dir: &Path) -> Result<NetworkEnsemble> {
    let load = |o: Orientation| Checkpoint::load(&dir.join(format!("{o}.ckpt"))).map(|c| c.net);
    let ensemble = NetworkEnsemble {
        sagittal: load(Orientation::Sagittal)?,
        coronal: load(Orientation::Coronal)?,
        axial: load(Orientation::Axial)?,
    };
    if ensemble.coronal.config() != ensemble.sagittal.config() || ensemble.axial.config() != ensemble.sagittal.config() {
        return Err(Error::Checkpoint(format!("{}: ensemble members have different configurations", dir.display())));
    }
    Ok(ensemble)
}

/// Trains the three orientation networks with orientation-specific epoch
/// sizes and seeds. Orientations run on up to `workers` threads.
pub fn train_ensemble(train: &[Subject], val: &[Subject], config: &TrainConfig, workers: usize) -> Result<EnsembleRun> {
    config.validate()?;
    let initial = NetworkEnsemble::new(config.network, config.seed)?;
    let outcomes = parallel_map(&Orientation::ALL, workers, |&o| {
        log::info!("training {o} network");
        train_network(initial.get(o).clone(), train, val, o, config)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ensemble = NetworkEnsemble {
        sagittal: outcomes[0].checkpoint.net.clone(),
        coronal: outcomes[1].checkpoint.net.clone(),
        axial: outcomes[2].checkpoint.net.clone(),
    };
    Ok(EnsembleRun { ensemble, outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

impl AblationRow {
    /// The six hyperparameter rows at desk scale, sharing `base`'s seed and
    /// sampler settings.
    pub fn table_s1(base: &TrainConfig) -> Vec<AblationRow> {
        (1..=6)
            .map(|row| {
                let preset = TrainConfig::table_s1(row).expect("rows 1..=6 exist");
                let mut config = base.clone();
                config.optimizer = preset.optimizer;
                config.initial_lr = preset.initial_lr;
                config.loss = preset.loss;
                config.network.head = preset.network.head;
                AblationRow { name: format!("table-s1-row{row}"), config }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub optimizer: String,
    pub initial_lr: f64,
    pub loss: String,
    pub dice: Option<Stat>,
    pub error: Option<String>,
}

/// Trains and evaluates (consensus plus post-processing, on `test`) one
/// ensemble per row. A failing row is recorded and the grid continues.
pub fn ablation_grid(
    train: &[Subject],
    val: &[Subject],
    test: &[Subject],
    rows: &[AblationRow],
    options: &SegmentOptions,
) -> Result<Vec<AblationResult>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("ablation grid needs at least one row".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptySubset("test"));
    }
    Ok(rows
        .iter()
        .map(|row| {
            let outcome = train_ensemble(train, val, &row.config, options.workers).and_then(|run| {
                run.check()?;
                let records = evaluate_subjects(&run.ensemble, test, options)?;
                Stat::of(&records.iter().map(|r| r.dice_both).collect::<Vec<_>>())
            });
            let (dice, error) = match outcome {
                Ok(stat) => (Some(stat), None),
                Err(e) => {
                    log::warn!("ablation row {} failed: {e}", row.name);
                    (None, Some(e.to_string()))
                }
            };
            AblationResult {
                name: row.name.clone(),
                optimizer: row.config.optimizer.label().into(),
                initial_lr: row.config.initial_lr,
                loss: row.config.loss.label().into(),
                dice,
                error,
            }
        })
        .collect())
}

pub fn format_ablation(results: &[AblationResult]) -> String {
    let mut out = String::from("| Optimizer | Initial LR | Loss | Dice |\n|---|---|---|---|\n");
    for r in results {
        let dice = match (&r.dice, &r.error) {
            (Some(s), _) => format!("{:.4}", s.mean),
            (None, Some(e)) => format!("failed: {e}"),
            (None, None) => "n/a".into(),
        };
        out.push_str(&format!("| {} | {} | {} | {} |\n", r.optimizer, r.initial_lr, r.loss, dice));
    }
    out
}
