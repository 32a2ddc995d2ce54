//! Batched evaluation-mode prediction and scoring.

use crate::corruption::{corrupt_batch, CorruptionSpec};
use crate::diffcore::Tensor2;
use crate::embedstore::{EmbeddingDataset, TaskKind};
use crate::error::Result;
use crate::fusion::{Batch, FusionParams};
use crate::metrics::{evaluate_scores, tune_thresholds, MetricsReport};

/// Rows per forward pass during evaluation; results do not depend on it.
pub const EVAL_BATCH: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub indices: Vec<usize>,
    /// `N × C` probabilities (sigmoid or softmax).
    pub probs: Tensor2<f64>,
    pub labels: Tensor2<f64>,
    /// Samples with no available modality, answered by the prior.
    pub empty: Vec<bool>,
    gate_sums: Vec<Vec<f64>>,
    gate_rows: Vec<usize>,
}

impl Predictions {
    /// Mean expert gate per modality over samples where it was routed.
    /// `None` for disabled modalities or when no sample reached them.
    pub fn mean_gates(&self) -> Vec<Option<Vec<f64>>> {
        self.gate_sums
            .iter()
            .zip(&self.gate_rows)
            .map(|(sums, &n)| (n > 0).then(|| sums.iter().map(|s| s / n as f64).collect()))
            .collect()
    }
}

pub fn predict(
    params: &FusionParams<f32>,
    dataset: &EmbeddingDataset,
    indices: &[usize],
    corruption: Option<&CorruptionSpec>,
) -> Result<Predictions> {
    let schema = dataset.schema();
    let c = dataset.num_classes;
    let mut probs = Vec::with_capacity(indices.len() * c);
    let mut empty = Vec::with_capacity(indices.len());
    let mut gate_sums: Vec<Vec<f64>> = schema.modalities.iter().map(|m| vec![0.0; m.expert_dims.len()]).collect();
    let mut gate_rows = vec![0usize; schema.num_modalities()];
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut batch = Batch::gather(dataset, chunk);
        if let Some(spec) = corruption {
            corrupt_batch(&mut batch, &schema, spec, 0);
        }
        let trace = params.forward(&batch, None)?;
        let p = params.probabilities(&trace.fused_logits);
        probs.extend(p.data().iter().map(|&v| v as f64));
        empty.extend_from_slice(&trace.empty);
        for (m, gates) in trace.intra.gates.iter().enumerate() {
            let Some(gates) = gates else { continue };
            for i in 0..batch.len() {
                if !trace.intra.gate_empty[m][i] {
                    gate_rows[m] += 1;
                    for (acc, &g) in gate_sums[m].iter_mut().zip(gates.row(i)) {
                        *acc += g as f64;
                    }
                }
            }
        }
    }
    Ok(Predictions {
        indices: indices.to_vec(),
        probs: Tensor2::from_vec(indices.len(), c, probs)?,
        labels: dataset.labels.gather_rows(indices).cast(),
        empty,
        gate_sums,
        gate_rows,
    })
}

/// Per-label thresholds tuned on clean predictions for `indices`;
/// `None` for multi-class tasks, which predict by argmax.
pub fn tune_on(params: &FusionParams<f32>, dataset: &EmbeddingDataset, indices: &[usize]) -> Result<Option<Vec<f64>>> {
    if dataset.task_kind == TaskKind::MultiClass || indices.is_empty() {
        return Ok(None);
    }
    let pred = predict(params, dataset, indices, None)?;
    Ok(Some(tune_thresholds(&pred.probs, &pred.labels)))
}

pub fn evaluate(
    params: &FusionParams<f32>,
    dataset: &EmbeddingDataset,
    indices: &[usize],
    corruption: Option<&CorruptionSpec>,
    thresholds: Option<&[f64]>,
) -> Result<MetricsReport> {
    let pred = predict(params, dataset, indices, corruption)?;
    let thresholds = thresholds.filter(|_| dataset.task_kind == TaskKind::MultiLabel);
    evaluate_scores(&pred.probs, &pred.labels, dataset.task_kind, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{generate_synthetic, Split, SyntheticSpec};
    use crate::fusion::{ModelConfig, VariantSpec};

    #[test]
    fn chunking_does_not_change_predictions() {
        let ds = generate_synthetic(&SyntheticSpec::small(EVAL_BATCH + 37, 1)).unwrap();
        let cfg = ModelConfig { latent_dim: 8, ..Default::default() };
        let params = FusionParams::<f32>::init(&ds.schema(), &cfg, &VariantSpec::default(), 3).unwrap();
        let idx: Vec<usize> = (0..ds.num_samples()).collect();
        let all = predict(&params, &ds, &idx, None).unwrap();
        let single = params.forward(&Batch::gather(&ds, &idx), None).unwrap();
        let direct: Vec<f64> = params.probabilities(&single.fused_logits).data().iter().map(|&v| v as f64).collect();
        assert_eq!(all.probs.data(), direct.as_slice());
        for g in all.mean_gates().into_iter().flatten() {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn thresholds_only_for_multilabel() {
        let ds = generate_synthetic(&SyntheticSpec::small(90, 2)).unwrap();
        let cfg = ModelConfig { latent_dim: 8, ..Default::default() };
        let params = FusionParams::<f32>::init(&ds.schema(), &cfg, &VariantSpec::default(), 3).unwrap();
        assert!(tune_on(&params, &ds, &ds.indices(Split::Val)).unwrap().is_none());
        let r = evaluate(&params, &ds, &ds.indices(Split::Test), None, None).unwrap();
        assert!(r.thresholds.is_empty());
        assert_eq!(r.n_evaluated, ds.indices(Split::Test).len());
    }
}
