//! Dataset model for cached expert embeddings.
//!
//! A dataset holds, for every sample, one embedding per (modality, expert)
//! pair, a presence bit per expert, an availability bit per modality, optional
//! teacher embeddings per modality, and a label vector. Storage is columnar:
//! one `N × d` matrix per expert so batches can be gathered cheaply.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{BitMatrix, Tensor2};
use crate::error::{MedmixError, Result};

mod format;
mod partition;
mod synthetic;

pub use format::{
    decode_mask, decode_matrix, encode_mask, encode_matrix, read_dataset, read_matrix, write_dataset, write_matrix,
    Manifest, ManifestExpert, ManifestModality, MASK_MAGIC, MATRIX_MAGIC,
};
pub use partition::{partition, split_sizes, DEFAULT_FRACTIONS};
pub use synthetic::{generate_synthetic, SyntheticExpert, SyntheticModality, SyntheticSpec};

/// Label semantics: independent sigmoids, or a single softmax over classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiLabel,
    MultiClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One embedding source within a modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub modality_id: usize,
    pub expert_id: usize,
    pub dim: usize,
    pub name: String,
}

/// A single sample in row form. Used to build datasets by hand and to inspect
/// them; the dataset itself stores columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[m][k]` → embedding of width `d_k^(m)`.
    pub expert_embeddings: Vec<Vec<Vec<f32>>>,
    pub expert_mask: Vec<Vec<bool>>,
    pub modality_available: Vec<bool>,
    /// `[m]` → teacher embedding, when the modality has a teacher.
    pub teacher_embeddings: Vec<Option<Vec<f32>>>,
    /// Length `C`: 0/1 per label (multi-label) or one-hot (multi-class).
    pub labels: Vec<f32>,
}

/// Shape information shared by a dataset and every model trained on it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub modalities: Vec<ModalitySchema>,
    pub num_classes: usize,
    pub task_kind: TaskKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub name: String,
    pub expert_dims: Vec<usize>,
    /// 0 when the modality has no teacher.
    pub teacher_dim: usize,
}

impl DatasetSchema {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn num_experts(&self) -> usize {
        self.modalities.iter().map(|m| m.expert_dims.len()).sum()
    }

    /// Hash over dimensions, class count, and task kind. Names are excluded so
    /// an external cohort with the same layout is accepted.
    pub fn hash(&self) -> String {
        let mut canon = format!("{:?}|{}|", self.task_kind, self.num_classes);
        for m in &self.modalities {
            canon.push_str(&format!("{:?}/{};", m.expert_dims, m.teacher_dim));
        }
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

/// Columnar multimodal embedding dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub modality_names: Vec<String>,
    /// Ordered by `(modality_id, expert_id)`.
    pub experts: Vec<ExpertSpec>,
    /// Per-modality teacher width, 0 when absent.
    pub teacher_dims: Vec<usize>,
    pub num_classes: usize,
    pub task_kind: TaskKind,
    /// One `N × dim` matrix per expert, same order as `experts`.
    pub embeddings: Vec<Tensor2<f32>>,
    /// `N × total_experts`.
    pub expert_mask: BitMatrix,
    /// `N × M`.
    pub modality_available: BitMatrix,
    pub teachers: Vec<Option<Tensor2<f32>>>,
    /// `N × C`.
    pub labels: Tensor2<f32>,
    pub splits: Vec<Split>,
}

impl EmbeddingDataset {
    pub fn num_samples(&self) -> usize {
        self.splits.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_names.len()
    }

    /// Number of experts of modality `m`.
    pub fn num_experts_of(&self, m: usize) -> usize {
        self.experts.iter().filter(|e| e.modality_id == m).count()
    }

    /// Flat column of expert `(m, k)` in the mask and `embeddings`.
    pub fn expert_index(&self, m: usize, k: usize) -> usize {
        self.experts.iter().position(|e| e.modality_id == m && e.expert_id == k).expect("expert exists")
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            modalities: (0..self.num_modalities())
                .map(|m| ModalitySchema {
                    name: self.modality_names[m].clone(),
                    expert_dims: self.experts.iter().filter(|e| e.modality_id == m).map(|e| e.dim).collect(),
                    teacher_dim: self.teacher_dims[m],
                })
                .collect(),
            num_classes: self.num_classes,
            task_kind: self.task_kind,
        }
    }

    /// Sample indices in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits.iter().enumerate().filter(|(_, &s)| s == split).map(|(i, _)| i).collect()
    }

    /// Class index of sample `i` (multi-class datasets).
    pub fn class_of(&self, i: usize) -> usize {
        self.labels.row(i).iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    /// Builds a dataset from row-form samples and validates it.
    pub fn from_samples(
        modality_names: Vec<String>,
        experts: Vec<ExpertSpec>,
        teacher_dims: Vec<usize>,
        num_classes: usize,
        task_kind: TaskKind,
        samples: &[Sample],
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = samples.len();
        let m_count = modality_names.len();
        if splits.len() != n {
            return Err(MedmixError::validation("split_assignment", format!("{} tags for {n} samples", splits.len())));
        }
        let mut embeddings = Vec::with_capacity(experts.len());
        let mut mask_rows = vec![Vec::with_capacity(experts.len()); n];
        for e in &experts {
            let mut data = Vec::with_capacity(n * e.dim);
            for (i, s) in samples.iter().enumerate() {
                let v = s.expert_embeddings.get(e.modality_id).and_then(|m| m.get(e.expert_id)).ok_or_else(|| {
                    MedmixError::validation(
                        "expert_embeddings",
                        format!("sample {i} lacks expert ({}, {})", e.modality_id, e.expert_id),
                    )
                })?;
                if v.len() != e.dim {
                    return Err(MedmixError::DimMismatch {
                        modality: e.modality_id,
                        expert: e.expert_id,
                        manifest: e.dim,
                        file: v.len(),
                    });
                }
                data.extend_from_slice(v);
                let bit = s
                    .expert_mask
                    .get(e.modality_id)
                    .and_then(|m| m.get(e.expert_id))
                    .copied()
                    .ok_or_else(|| MedmixError::validation("expert_mask", format!("sample {i} mask too short")))?;
                mask_rows[i].push(bit);
            }
            embeddings.push(Tensor2::from_vec(n, e.dim, data)?);
        }
        let avail_rows: Vec<Vec<bool>> = samples.iter().map(|s| s.modality_available.clone()).collect();
        let mut teachers = Vec::with_capacity(m_count);
        for (m, &td) in teacher_dims.iter().enumerate() {
            if td == 0 {
                teachers.push(None);
                continue;
            }
            let mut data = Vec::with_capacity(n * td);
            for (i, s) in samples.iter().enumerate() {
                match s.teacher_embeddings.get(m).and_then(Option::as_ref) {
                    Some(t) if t.len() == td => data.extend_from_slice(t),
                    Some(t) => {
                        return Err(MedmixError::validation(
                            "teacher_embeddings",
                            format!("sample {i} modality {m}: width {} != {td}", t.len()),
                        ))
                    }
                    None => data.extend(std::iter::repeat_n(0.0, td)),
                }
            }
            teachers.push(Some(Tensor2::from_vec(n, td, data)?));
        }
        let label_rows: Vec<Vec<f32>> = samples.iter().map(|s| s.labels.clone()).collect();
        let labels = if n == 0 { Tensor2::zeros(0, num_classes) } else { Tensor2::from_rows(&label_rows)? };
        let ds = Self {
            modality_names,
            experts,
            teacher_dims,
            num_classes,
            task_kind,
            embeddings,
            expert_mask: if n == 0 { BitMatrix::new(0, 0, false) } else { BitMatrix::from_rows(&mask_rows)? },
            modality_available: if n == 0 {
                BitMatrix::new(0, m_count, false)
            } else {
                BitMatrix::from_rows(&avail_rows)?
            },
            teachers,
            labels,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Row view of sample `i`.
    pub fn sample(&self, i: usize) -> Sample {
        let m_count = self.num_modalities();
        let mut expert_embeddings = vec![Vec::new(); m_count];
        let mut expert_mask = vec![Vec::new(); m_count];
        for (j, e) in self.experts.iter().enumerate() {
            expert_embeddings[e.modality_id].push(self.embeddings[j].row(i).to_vec());
            expert_mask[e.modality_id].push(self.expert_mask.get(i, j));
        }
        Sample {
            expert_embeddings,
            expert_mask,
            modality_available: self.modality_available.row(i).to_vec(),
            teacher_embeddings: self.teachers.iter().map(|t| t.as_ref().map(|t| t.row(i).to_vec())).collect(),
            labels: self.labels.row(i).to_vec(),
        }
    }

    /// Checks every structural invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_samples();
        let m_count = self.num_modalities();
        if m_count == 0 {
            return Err(MedmixError::validation("modalities", "at least one modality required"));
        }
        if self.teacher_dims.len() != m_count || self.teachers.len() != m_count {
            return Err(MedmixError::validation("teacher_dims", format!("expected {m_count} entries")));
        }
        if self.num_classes == 0 {
            return Err(MedmixError::validation("num_classes", "must be >= 1"));
        }
        // experts ordered by (m, k) with contiguous k starting at 0
        for (j, e) in self.experts.iter().enumerate() {
            let ordered = match j.checked_sub(1).map(|p| &self.experts[p]) {
                None => e.modality_id == 0 && e.expert_id == 0,
                Some(p) => {
                    (e.modality_id == p.modality_id && e.expert_id == p.expert_id + 1)
                        || (e.modality_id == p.modality_id + 1 && e.expert_id == 0)
                }
            };
            if !ordered || e.modality_id >= m_count {
                return Err(MedmixError::validation(
                    "experts",
                    format!(
                        "entry {j} is ({}, {}): experts must be ordered by (modality, expert) with contiguous ids",
                        e.modality_id, e.expert_id
                    ),
                ));
            }
            if e.dim == 0 {
                return Err(MedmixError::validation(
                    "experts.dim",
                    format!("expert ({}, {}) has dim 0", e.modality_id, e.expert_id),
                ));
            }
        }
        for m in 0..m_count {
            if self.num_experts_of(m) == 0 {
                return Err(MedmixError::validation("experts", format!("modality {m} has no experts")));
            }
        }
        if self.embeddings.len() != self.experts.len() {
            return Err(MedmixError::validation(
                "embeddings",
                format!("{} matrices for {} experts", self.embeddings.len(), self.experts.len()),
            ));
        }
        for (e, t) in self.experts.iter().zip(&self.embeddings) {
            if t.rows() != n || t.cols() != e.dim {
                if t.rows() == n {
                    return Err(MedmixError::DimMismatch {
                        modality: e.modality_id,
                        expert: e.expert_id,
                        manifest: e.dim,
                        file: t.cols(),
                    });
                }
                return Err(MedmixError::validation(
                    "embeddings",
                    format!("expert ({}, {}) has {} rows, expected {n}", e.modality_id, e.expert_id, t.rows()),
                ));
            }
        }
        if n > 0 && (self.expert_mask.rows() != n || self.expert_mask.cols() != self.experts.len()) {
            return Err(MedmixError::validation("expert_mask", "wrong shape"));
        }
        if self.modality_available.rows() != n || self.modality_available.cols() != m_count {
            return Err(MedmixError::validation("modality_available", "wrong shape"));
        }
        for i in 0..n {
            for m in 0..m_count {
                let any =
                    self.experts.iter().enumerate().any(|(j, e)| e.modality_id == m && self.expert_mask.get(i, j));
                if any != self.modality_available.get(i, m) {
                    return Err(MedmixError::validation(
                        "modality_available",
                        format!(
                            "mask/availability inconsistency at sample {i}, modality {m}: experts present = {any}, a = {}",
                            self.modality_available.get(i, m)
                        ),
                    ));
                }
            }
            for (j, e) in self.experts.iter().enumerate() {
                if self.expert_mask.get(i, j) && !self.embeddings[j].row(i).iter().all(|v| v.is_finite()) {
                    return Err(MedmixError::validation(
                        "expert_embeddings",
                        format!("non-finite value at sample {i}, expert ({}, {})", e.modality_id, e.expert_id),
                    ));
                }
            }
        }
        for (m, (t, &td)) in self.teachers.iter().zip(&self.teacher_dims).enumerate() {
            match t {
                None if td != 0 => {
                    return Err(MedmixError::validation(
                        "teacher_embeddings",
                        format!("modality {m} declares teacher_dim {td} but has no matrix"),
                    ))
                }
                Some(t) if t.rows() != n || t.cols() != td || td == 0 => {
                    return Err(MedmixError::validation(
                        "teacher_embeddings",
                        format!("modality {m}: matrix {:?}, declared dim {td}", t.shape()),
                    ))
                }
                _ => {}
            }
        }
        if self.labels.rows() != n || self.labels.cols() != self.num_classes {
            return Err(MedmixError::validation(
                "labels",
                format!("shape {:?}, expected ({n}, {})", self.labels.shape(), self.num_classes),
            ));
        }
        for i in 0..n {
            let row = self.labels.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(MedmixError::validation("labels", format!("sample {i}: values must be 0 or 1")));
            }
            if self.task_kind == TaskKind::MultiClass && row.iter().filter(|&&v| v == 1.0).count() != 1 {
                return Err(MedmixError::validation(
                    "labels",
                    format!("sample {i}: multi-class label must be one-hot"),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over every stored byte, in file order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.embeddings {
            h.update(encode_matrix(t));
        }
        h.update(encode_mask(&self.expert_mask));
        h.update(encode_mask(&self.modality_available));
        for t in self.teachers.iter().flatten() {
            h.update(encode_matrix(t));
        }
        h.update(encode_matrix(&self.labels));
        h.update(self.splits.iter().map(|s| s.to_byte()).collect::<Vec<_>>());
        hex::encode(h.finalize())
    }
}
