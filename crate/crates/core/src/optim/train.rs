use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, AdamW, EarlyStopper, GroupLr, TrainConfig};
use crate::corruption::corrupt_batch;
use crate::diffcore::Tensor2;
use crate::embedstore::{EmbeddingDataset, Split};
use crate::error::{MedmixError, Result};
use crate::eval::EVAL_BATCH;
use crate::fusion::{Batch, DropoutKey, FusionParams};
use crate::losses::{lambda_schedule, LossBreakdown, LossConfig};
use crate::metrics::{evaluate_scores, MetricsReport};
use crate::rng::{self, SHUFFLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

/// One row of the training log. Losses are means over effective samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lr_router: f64,
    pub lambda_d: f64,
    pub train_task_loss: f64,
    pub train_cos_loss: f64,
    pub train_rkd_loss: f64,
    pub train_distill_loss: f64,
    pub train_total_loss: f64,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub steps: usize,
    pub n_effective: usize,
    pub val_loss: f64,
    pub val_auroc: f64,
    pub val_auprc: f64,
    pub val_mf1: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub seed: u64,
}

impl TrainLog {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for rec in &self.epochs {
            w.serialize(rec).map_err(|e| MedmixError::validation("train_log", e.to_string()))?;
        }
        w.flush().map_err(|e| MedmixError::io("<csv>", e))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Vec<EpochRecord>> {
        csv::Reader::from_reader(reader)
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| MedmixError::validation("train_log", e.to_string()))
    }

    /// `{best_epoch, stop_reason, seed, config, ...}` for the run summary.
    pub fn summary(&self, config: &TrainConfig) -> serde_json::Value {
        let best = self.best();
        serde_json::json!({
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "seed": self.seed,
            "epochs_run": self.epochs.len(),
            "best_val_loss": self.best_val_loss,
            "best_val_metrics": {
                "auroc": best.val_auroc,
                "auprc": best.val_auprc,
                "mf1": best.val_mf1,
                "acc": best.val_acc,
            },
            "config": config,
        })
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: FusionParams<f32>,
    pub log: TrainLog,
}

#[derive(Default)]
struct Accumulator {
    weight: usize,
    task: f64,
    cos: f64,
    rkd: f64,
    distill: f64,
    total: f64,
    norm: f64,
    steps: usize,
}

impl Accumulator {
    fn add(&mut self, bd: &LossBreakdown, norm: f64) {
        let w = bd.n_effective as f64;
        self.weight += bd.n_effective;
        self.task += w * bd.task_loss;
        self.cos += w * bd.cos_loss.iter().sum::<f64>();
        self.rkd += w * bd.rkd_loss.iter().sum::<f64>();
        self.distill += w * bd.distill_loss;
        self.total += w * bd.total;
        self.norm += norm;
        self.steps += 1;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.weight == 0 {
            f64::NAN
        } else {
            v / self.weight as f64
        }
    }
}

struct Validation {
    loss: f64,
    report: MetricsReport,
}

fn validate(
    params: &FusionParams<f32>,
    dataset: &EmbeddingDataset,
    indices: &[usize],
    loss: &LossConfig,
    epoch: usize,
    with_distill: bool,
) -> Result<Validation> {
    let c = dataset.num_classes;
    let (mut sum, mut weight) = (0.0, 0usize);
    let mut probs = Vec::with_capacity(indices.len() * c);
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = Batch::gather(dataset, chunk);
        let trace = match params.eval_loss(&batch, loss, epoch, with_distill) {
            Ok((bd, trace)) => {
                let monitored = if with_distill { bd.total } else { bd.task_loss };
                sum += monitored * bd.n_effective as f64;
                weight += bd.n_effective;
                trace
            }
            Err(MedmixError::EmptyBatch) => params.forward(&batch, None)?,
            Err(e) => return Err(e),
        };
        probs.extend(params.probabilities(&trace.fused_logits).data().iter().map(|&v| v as f64));
    }
    if weight == 0 {
        return Err(MedmixError::validation("val", "no validation sample has an available modality"));
    }
    let probs = Tensor2::from_vec(indices.len(), c, probs)?;
    let labels = dataset.labels.gather_rows(indices).cast();
    Ok(Validation { loss: sum / weight as f64, report: evaluate_scores(&probs, &labels, dataset.task_kind, None)? })
}

/// Trains one model. Deterministic in `(dataset, config)`.
pub fn train(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let schema = dataset.schema();
    if let Some(spec) = &config.train_corruption {
        spec.validate(schema.num_modalities())?;
    }
    let train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(MedmixError::validation("splits", "training needs nonempty train and val splits"));
    }
    let mut params = FusionParams::<f32>::init(&schema, &config.model, &config.variant, config.seed)?;
    params.set_prior(dataset, &train_idx);
    let loss = config.loss_config();
    let mut opt = AdamW::new(config);
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(config.seed, &[SHUFFLE, epoch as u64]));
        let lr = GroupLr::at(epoch, config);
        let mut acc = Accumulator::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = Batch::gather(dataset, chunk);
            if let Some(spec) = &config.train_corruption {
                corrupt_batch(&mut batch, &schema, spec, epoch);
            }
            params.zero_grad();
            let key = DropoutKey { seed: config.seed, epoch: epoch as u64, batch: b as u64 };
            let bd = match params.forward_backward(&batch, &loss, epoch, Some(key)) {
                Ok((bd, _)) => bd,
                Err(MedmixError::EmptyBatch) => continue,
                Err(e) => return Err(e),
            };
            if !bd.total.is_finite() {
                return Err(MedmixError::Diverged { epoch, detail: format!("batch {b}: loss {}", bd.total) });
            }
            let norm = clip_global_norm(&mut params.params_mut(), config.clip_norm);
            if !norm.is_finite() {
                return Err(MedmixError::Diverged { epoch, detail: format!("batch {b}: gradient norm {norm}") });
            }
            opt.step(&mut params.params_mut(), lr)?;
            acc.add(&bd, norm);
        }
        let val = validate(&params, dataset, &val_idx, &loss, epoch, config.monitor_distill_in_val)?;
        if !val.loss.is_finite() {
            return Err(MedmixError::Diverged { epoch, detail: format!("validation loss {}", val.loss) });
        }
        if stopper.observe(epoch, val.loss) {
            best = params.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            lr: lr.other,
            lr_router: lr.router,
            lambda_d: lambda_schedule(epoch, config.distill_ramp_epochs, config.lambda_max),
            train_task_loss: acc.mean(acc.task),
            train_cos_loss: acc.mean(acc.cos),
            train_rkd_loss: acc.mean(acc.rkd),
            train_distill_loss: acc.mean(acc.distill),
            train_total_loss: acc.mean(acc.total),
            grad_norm: if acc.steps == 0 { f64::NAN } else { acc.norm / acc.steps as f64 },
            steps: acc.steps,
            n_effective: acc.weight,
            val_loss: val.loss,
            val_auroc: val.report.auroc,
            val_auprc: val.report.auprc,
            val_mf1: val.report.mf1,
            val_acc: val.report.acc,
        });
        if stopper.should_stop(epoch) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    best.zero_grad();
    Ok(TrainOutcome {
        params: best,
        log: TrainLog { epochs, best_epoch, best_val_loss, stop_reason, seed: config.seed },
    })
}
