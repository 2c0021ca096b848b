//! Mini-batch SGD with a cosine-annealed learning rate and the end-of-epoch
//! query-rotation hook.

use crate::diagnostics::{self, DiagnosticsRecord, ScatterDump};
use crate::error::{Error, Result};
use crate::fusion::{AblationMode, Modality};
use crate::linalg::Rng;
use crate::model::{self, ModelParams, ModelSpec, ROTATION_ARRAY};
use crate::rollingq::{controller_step, ControllerEvent, ControllerState, KeyStatsAccumulator, RollingQConfig};
use crate::synth::{self, Dataset, Sample, SyntheticSpec};

/// Where the controller takes its key statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsSource {
    /// Forward traces of the epoch's last batch, recomputed with the
    /// just-updated (frozen) parameters.
    FinalBatch,
    /// Running average over every training forward pass of the epoch.
    EpochAverage,
}

impl StatsSource {
    pub fn as_str(self) -> &'static str {
        match self {
            StatsSource::FinalBatch => "final_batch",
            StatsSource::EpochAverage => "epoch_average",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerCadence {
    EpochEnd,
    /// Ablation only: invoke the controller after every batch.
    EveryBatch,
}

impl ControllerCadence {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerCadence::EpochEnd => "epoch",
            ControllerCadence::EveryBatch => "batch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 means plain SGD.
    pub momentum: f64,
    pub hidden: usize,
    pub dim: usize,
    pub init_std: f64,
    pub rollingq_enabled: bool,
    pub rollingq: RollingQConfig,
    pub stats_source: StatsSource,
    pub cadence: ControllerCadence,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            momentum: 0.0,
            hidden: 32,
            dim: 16,
            init_std: model::DEFAULT_INIT_STD,
            rollingq_enabled: false,
            rollingq: RollingQConfig::default(),
            stats_source: StatsSource::FinalBatch,
            cadence: ControllerCadence::EpochEnd,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
        }
        self.rollingq.validate()
    }

    pub fn model_spec(&self, data: &SyntheticSpec) -> ModelSpec {
        ModelSpec {
            d_in_a: data.d_in_a,
            d_in_v: data.d_in_v,
            hidden: self.hidden,
            dim: self.dim,
            classes: data.classes,
            init_std: self.init_std,
        }
    }
}

/// Cosine-annealed learning rate at epoch `t` of `total`.
pub fn lr_at(epoch: usize, total: usize, base_lr: f64) -> f64 {
    let t = epoch.min(total) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

/// SGD state. Velocity is only allocated when momentum is non-zero.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: None,
        }
    }

    /// `p ← p − lr·∇p` for every array except the rotation.
    pub fn update(&mut self, model: &mut ModelParams, grads: &ModelParams, lr: f64) {
        let step = if self.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
            let mut scaled = v.clone();
            scaled.for_each_array_mut(|_, xs| xs.iter_mut().for_each(|x| *x *= self.momentum));
            scaled.axpy(1.0, grads);
            *v = scaled;
            v.clone()
        } else {
            grads.clone()
        };
        let flat = step.arrays();
        let mut i = 0;
        model.for_each_array_mut(|name, xs| {
            if name != ROTATION_ARRAY {
                for (p, g) in xs.iter_mut().zip(flat[i]) {
                    *p -= lr * g;
                }
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm_a: f64,
    pub grad_norm_v: f64,
    /// Batch-mean gradients that were applied.
    pub grads: ModelParams,
}

/// Forward, backward and one SGD update on a batch. The loss is the batch
/// mean. `position` is `(epoch, batch)` for error reporting.
pub fn train_step(
    model: &mut ModelParams,
    batch: &[&Sample],
    lr: f64,
    sgd: &mut Sgd,
    position: (usize, usize),
    mut on_trace: impl FnMut(&crate::fusion::FusionForwardTrace) -> Result<()>,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let diverged = || Error::Divergence {
        epoch: position.0,
        batch: position.1,
    };
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        // without ablation every logit is -inf only after overflow
        let sg = match model.sample_gradient(&s.raw_a, &s.raw_v, s.label) {
            Err(Error::FullyMasked) => return Err(diverged()),
            other => other?,
        };
        loss += sg.loss;
        grads.axpy(1.0 / n, &sg.grads);
        on_trace(&sg.forward.trace)?;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(diverged());
    }
    sgd.update(model, &grads, lr);
    if !model.is_finite() {
        return Err(diverged());
    }
    Ok(StepOutcome {
        loss,
        grad_norm_a: grads.encoder_norm(Modality::A),
        grad_norm_v: grads.encoder_norm(Modality::V),
        grads,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<DiagnosticsRecord>,
    pub events: Vec<ControllerEvent>,
    pub controller: ControllerState,
    pub final_scatter: ScatterDump,
    pub final_test_accuracy: f64,
    pub model: ModelParams,
    pub dataset: Dataset,
}

impl TrainReport {
    pub fn last_record(&self) -> &DiagnosticsRecord {
        self.records.last().expect("at least one epoch")
    }
}

fn controller_stats_on(model: &ModelParams, samples: &[&Sample]) -> Result<crate::rollingq::BatchKeyStats> {
    let mut acc = KeyStatsAccumulator::new();
    for s in samples {
        let fwd = model.forward(&s.raw_a, &s.raw_v, AblationMode::None)?;
        acc.push(&fwd.trace)?;
    }
    acc.finish()
}

/// Trains on freshly generated data.
pub fn run(config: &TrainConfig, spec: &SyntheticSpec) -> Result<TrainReport> {
    let data = synth::generate(spec)?;
    run_on(config, spec, data)
}

pub fn run_on(config: &TrainConfig, spec: &SyntheticSpec, data: Dataset) -> Result<TrainReport> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let mut model = model::init(&config.model_spec(spec), &root.fork(1))?;
    let mut shuffle_rng = root.fork(2);
    let mut sgd = Sgd::new(config.momentum);
    let mut controller = ControllerState::default();
    let mut events = Vec::new();
    let mut records = Vec::new();
    let mut final_scatter = ScatterDump::default();

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config.epochs, config.lr);
        let order = synth::batches(data.train.len(), config.batch_size, &mut shuffle_rng)?;
        let n_batches = order.len();
        let (mut loss_sum, mut gna, mut gnv) = (0.0, 0.0, 0.0);
        let mut epoch_acc = KeyStatsAccumulator::new();
        let mut epoch_event: Option<ControllerEvent> = None;

        for (j, idx) in order.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let collect = config.rollingq_enabled && config.stats_source == StatsSource::EpochAverage;
            let out = train_step(&mut model, &batch, lr, &mut sgd, (epoch, j), |t| {
                if collect {
                    epoch_acc.push(t)?;
                }
                Ok(())
            })?;
            loss_sum += out.loss;
            gna += out.grad_norm_a;
            gnv += out.grad_norm_v;

            let last = j + 1 == n_batches;
            let fire = config.rollingq_enabled && (last || config.cadence == ControllerCadence::EveryBatch);
            if fire {
                let stats = match config.stats_source {
                    StatsSource::FinalBatch => controller_stats_on(&model, &batch)?,
                    StatsSource::EpochAverage if config.cadence == ControllerCadence::EveryBatch => {
                        let s = epoch_acc.finish()?;
                        epoch_acc = KeyStatsAccumulator::new();
                        s
                    }
                    StatsSource::EpochAverage => epoch_acc.finish()?,
                };
                let ev = controller_step(&mut controller, &config.rollingq, &stats, &mut model.fusion, epoch)?;
                // keep the rotating event if one happened this epoch
                if ev.rotation_applied || !epoch_event.is_some_and(|e| e.rotation_applied) {
                    epoch_event = Some(ev);
                }
                events.push(ev);
            }
        }

        let is_last = epoch + 1 == config.epochs;
        if epoch % config.eval_every == 0 || is_last {
            let snap = diagnostics::snapshot(&model, &data.test)?;
            let nb = n_batches as f64;
            let mut record = snap.record;
            record.epoch = epoch;
            record.alpha = epoch_event.and_then(|e| e.alpha);
            record.rotation_applied = epoch_event.is_some_and(|e| e.rotation_applied);
            record.grad_norm_a = Some(gna / nb);
            record.grad_norm_v = Some(gnv / nb);
            record.train_loss = Some(loss_sum / nb);
            record.check()?;
            records.push(record);
            if is_last {
                final_scatter = snap.scatter;
            }
        }
    }

    let final_test_accuracy = records.last().map_or(0.0, |r| r.test_accuracy);
    Ok(TrainReport {
        records,
        events,
        controller,
        final_scatter,
        final_test_accuracy,
        model,
        dataset: data,
    })
}
