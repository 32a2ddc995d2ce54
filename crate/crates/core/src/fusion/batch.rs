use crate::diffcore::{BitMatrix, Real, Tensor2};
use crate::embedstore::EmbeddingDataset;

/// A gathered mini-batch. Rows follow `indices`, which are dataset positions
/// (used to key per-sample random draws).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    /// One `B × d_k` matrix per expert in (modality, expert) order.
    pub embeddings: Vec<Tensor2<T>>,
    pub expert_mask: BitMatrix,
    pub available: BitMatrix,
    pub teachers: Vec<Option<Tensor2<T>>>,
    pub labels: Tensor2<T>,
}

impl Batch<f32> {
    pub fn gather(dataset: &EmbeddingDataset, indices: &[usize]) -> Self {
        Self {
            indices: indices.to_vec(),
            embeddings: dataset.embeddings.iter().map(|e| e.gather_rows(indices)).collect(),
            expert_mask: dataset.expert_mask.gather_rows(indices),
            available: dataset.modality_available.gather_rows(indices),
            teachers: dataset.teachers.iter().map(|t| t.as_ref().map(|t| t.gather_rows(indices))).collect(),
            labels: dataset.labels.gather_rows(indices),
        }
    }
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            indices: self.indices.clone(),
            embeddings: self.embeddings.iter().map(Tensor2::cast).collect(),
            expert_mask: self.expert_mask.clone(),
            available: self.available.clone(),
            teachers: self.teachers.iter().map(|t| t.as_ref().map(Tensor2::cast)).collect(),
            labels: self.labels.cast(),
        }
    }

    /// Marks modality `m` of row `i` missing, clearing its expert bits.
    /// `first_expert..first_expert + count` is the modality's expert range.
    pub fn drop_modality(&mut self, i: usize, m: usize, first_expert: usize, count: usize) {
        self.available.set(i, m, false);
        for j in first_expert..first_expert + count {
            self.expert_mask.set(i, j, false);
        }
    }
}
