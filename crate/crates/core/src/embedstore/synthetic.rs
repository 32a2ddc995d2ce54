//! Synthetic multimodal data with planted structure.
//!
//! Generative model, for every sample `i`:
//!
//! ```text
//! y            ~ Uniform{0..C}
//! u^(m)        = snr_m · μ_y^(m) + ε,              ε ~ N(0, I_L)
//! e_k^(m)      = ι_{m,k} · A_{m,k} u^(m) + (1 − ι_{m,k}) · η,   η ~ N(0, I)
//! t^(m)        = B_m u_T^(m) + σ_T · ξ
//! ```
//!
//! `μ_y^(m)` are rows of a seeded random orthonormal `C × L` matrix, `A_{m,k}`
//! and `B_m` are fixed Gaussian maps with variance `1/L`, and `ι` is the expert
//! informativeness. The teacher latent `u_T` is `u^(m)` itself unless a teacher
//! SNR is given, in which case it is an independent draw
//! `teacher_snr · μ_y + ε'` (a cleaner view of the class). Each modality is
//! missing independently with its `missing_rate`; missing cells are stored as
//! zeros.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{partition, EmbeddingDataset, ExpertSpec, Split, TaskKind, DEFAULT_FRACTIONS};
use crate::diffcore::{BitMatrix, Tensor2};
use crate::error::{MedmixError, Result};
use crate::rng::{self, SYNTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticExpert {
    #[serde(default)]
    pub name: String,
    pub dim: usize,
    /// 1 = the view carries the modality latent, 0 = pure noise.
    pub informativeness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModality {
    #[serde(default)]
    pub name: String,
    pub snr: f64,
    /// Probability that the whole modality is missing for a sample.
    #[serde(default)]
    pub missing_rate: f64,
    pub experts: Vec<SyntheticExpert>,
    /// Teacher width; `None` means twice the latent width, `Some(0)` no teacher.
    #[serde(default)]
    pub teacher_dim: Option<usize>,
    #[serde(default)]
    pub teacher_snr: Option<f64>,
}

fn default_latent_dim() -> usize {
    16
}

fn default_classes() -> usize {
    2
}

fn default_teacher_noise() -> f64 {
    0.1
}

fn default_fractions() -> [f64; 3] {
    DEFAULT_FRACTIONS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub modalities: Vec<SyntheticModality>,
    #[serde(default = "default_teacher_noise")]
    pub teacher_noise: f64,
    #[serde(default = "default_fractions")]
    pub split: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two modalities with two 8-wide experts each, SNR 2, binary labels.
    pub fn small(num_samples: usize, seed: u64) -> Self {
        let modality = |name: &str| SyntheticModality {
            name: name.into(),
            snr: 2.0,
            missing_rate: 0.0,
            experts: vec![
                SyntheticExpert { name: "biomed".into(), dim: 8, informativeness: 1.0 },
                SyntheticExpert { name: "general".into(), dim: 8, informativeness: 0.5 },
            ],
            teacher_dim: None,
            teacher_snr: None,
        };
        Self {
            num_samples,
            num_classes: 2,
            latent_dim: 8,
            modalities: vec![modality("image"), modality("text")],
            teacher_noise: 0.1,
            split: DEFAULT_FRACTIONS,
            seed,
        }
    }

    /// True when no modality carries class signal.
    pub fn is_null(&self) -> bool {
        self.modalities.iter().all(|m| m.snr == 0.0 && m.teacher_snr.unwrap_or(0.0) == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, detail: String| Err(MedmixError::validation(field, detail));
        if self.num_samples == 0 {
            return err("num_samples", "must be >= 1".into());
        }
        if self.num_classes < 2 {
            return err("num_classes", "synthetic data needs at least 2 classes".into());
        }
        if self.latent_dim < self.num_classes {
            return err(
                "latent_dim",
                format!("{} < num_classes {}: prototypes cannot be orthonormal", self.latent_dim, self.num_classes),
            );
        }
        if self.modalities.is_empty() {
            return err("modalities", "at least one modality required".into());
        }
        if !(self.teacher_noise >= 0.0) {
            return err("teacher_noise", "must be >= 0".into());
        }
        for (m, md) in self.modalities.iter().enumerate() {
            if !(md.snr >= 0.0) || md.teacher_snr.is_some_and(|s| !(s >= 0.0)) {
                return err("snr", format!("modality {m}: snr must be >= 0"));
            }
            if !(0.0..=1.0).contains(&md.missing_rate) {
                return err("missing_rate", format!("modality {m}: {} outside [0, 1]", md.missing_rate));
            }
            if md.experts.is_empty() {
                return err("experts", format!("modality {m} has no experts"));
            }
            for (k, e) in md.experts.iter().enumerate() {
                if e.dim == 0 {
                    return err("dim", format!("expert ({m}, {k}) has dim 0"));
                }
                if !(0.0..=1.0).contains(&e.informativeness) {
                    return err("informativeness", format!("expert ({m}, {k}): {} outside [0, 1]", e.informativeness));
                }
            }
        }
        Ok(())
    }

    fn teacher_dim(&self, m: usize) -> usize {
        self.modalities[m].teacher_dim.unwrap_or(2 * self.latent_dim)
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `rows × cols` Gaussian matrix with entry variance `var`.
fn gaussian(rows: usize, cols: usize, var: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let sd = var.sqrt();
    (0..rows).map(|_| (0..cols).map(|_| sd * normal(rng)).collect()).collect()
}

/// `c` orthonormal rows of width `l` by Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(c: usize, l: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    while rows.len() < c {
        let mut v: Vec<f64> = (0..l).map(|_| normal(rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows
}

fn apply<'a>(map: &'a [Vec<f64>], u: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    map.iter().map(move |row| row.iter().zip(u).map(|(a, b)| a * b).sum())
}

/// Generates a dataset from `spec`. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let n = spec.num_samples;
    let l = spec.latent_dim;
    let c = spec.num_classes;
    let seed = spec.seed;
    let m_count = spec.modalities.len();

    let mut label_rng = rng::stream(seed, &[SYNTH, 4]);
    let classes: Vec<usize> = (0..n).map(|_| label_rng.random_range(0..c)).collect();

    let mut experts = Vec::new();
    let mut embeddings = Vec::new();
    let mut teachers = Vec::with_capacity(m_count);
    let mut teacher_dims = Vec::with_capacity(m_count);
    let mut available = BitMatrix::new(n, m_count, false);
    let mut mask_cols: Vec<Vec<bool>> = Vec::new();

    for (m, md) in spec.modalities.iter().enumerate() {
        let mu = orthonormal_rows(c, l, &mut rng::stream(seed, &[SYNTH, 1, m as u64]));

        let mut miss_rng = rng::stream(seed, &[SYNTH, 8, m as u64]);
        let present: Vec<bool> = (0..n).map(|_| miss_rng.random::<f64>() >= md.missing_rate).collect();
        for (i, &p) in present.iter().enumerate() {
            available.set(i, m, p);
        }

        let mut latent_rng = rng::stream(seed, &[SYNTH, 5, m as u64]);
        let latents: Vec<Vec<f64>> =
            classes.iter().map(|&y| (0..l).map(|j| md.snr * mu[y][j] + normal(&mut latent_rng)).collect()).collect();

        for (k, ex) in md.experts.iter().enumerate() {
            let a = gaussian(ex.dim, l, 1.0 / l as f64, &mut rng::stream(seed, &[SYNTH, 2, m as u64, k as u64]));
            let mut noise_rng = rng::stream(seed, &[SYNTH, 6, m as u64, k as u64]);
            let w = ex.informativeness;
            let mut data = Vec::with_capacity(n * ex.dim);
            for i in 0..n {
                // draw noise for every sample so missingness does not shift the stream
                let noise: Vec<f64> = (0..ex.dim).map(|_| normal(&mut noise_rng)).collect();
                if present[i] {
                    data.extend(apply(&a, &latents[i]).zip(&noise).map(|(s, e)| (w * s + (1.0 - w) * e) as f32));
                } else {
                    data.extend(std::iter::repeat_n(0.0f32, ex.dim));
                }
            }
            experts.push(ExpertSpec {
                modality_id: m,
                expert_id: k,
                dim: ex.dim,
                name: if ex.name.is_empty() { format!("expert{k}") } else { ex.name.clone() },
            });
            embeddings.push(Tensor2::from_vec(n, ex.dim, data)?);
            mask_cols.push(present.clone());
        }

        let td = spec.teacher_dim(m);
        teacher_dims.push(td);
        if td == 0 {
            teachers.push(None);
            continue;
        }
        let b = gaussian(td, l, 1.0 / l as f64, &mut rng::stream(seed, &[SYNTH, 3, m as u64]));
        let mut t_rng = rng::stream(seed, &[SYNTH, 7, m as u64]);
        let mut tl_rng = rng::stream(seed, &[SYNTH, 9, m as u64]);
        let mut data = Vec::with_capacity(n * td);
        for i in 0..n {
            let u_t: Vec<f64> = match md.teacher_snr {
                Some(s) => (0..l).map(|j| s * mu[classes[i]][j] + normal(&mut tl_rng)).collect(),
                None => latents[i].clone(),
            };
            let noise: Vec<f64> = (0..td).map(|_| normal(&mut t_rng)).collect();
            if present[i] {
                data.extend(apply(&b, &u_t).zip(&noise).map(|(s, e)| (s + spec.teacher_noise * e) as f32));
            } else {
                data.extend(std::iter::repeat_n(0.0f32, td));
            }
        }
        teachers.push(Some(Tensor2::from_vec(n, td, data)?));
    }

    let mut mask = BitMatrix::new(n, experts.len(), false);
    for (j, col) in mask_cols.iter().enumerate() {
        for (i, &b) in col.iter().enumerate() {
            mask.set(i, j, b);
        }
    }
    let mut labels = Tensor2::zeros(n, c);
    for (i, &y) in classes.iter().enumerate() {
        labels.set(i, y, 1.0);
    }
    let ds = EmbeddingDataset {
        modality_names: spec
            .modalities
            .iter()
            .enumerate()
            .map(|(m, md)| if md.name.is_empty() { format!("modality{m}") } else { md.name.clone() })
            .collect(),
        experts,
        teacher_dims,
        num_classes: c,
        task_kind: TaskKind::MultiClass,
        embeddings,
        expert_mask: mask,
        modality_available: available,
        teachers,
        labels,
        splits: vec![Split::Train; n],
    };
    ds.validate()?;
    if n < 3 && spec.split[1] + spec.split[2] > 0.0 {
        return Ok(ds);
    }
    partition(&ds, spec.split, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec::small(60, 11);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let mut other = spec.clone();
        other.seed = 12;
        assert_ne!(generate_synthetic(&other).unwrap().content_hash(), a.content_hash());
    }

    #[test]
    fn missing_modalities_follow_rate() {
        let mut spec = SyntheticSpec::small(4000, 2);
        spec.modalities[0].missing_rate = 0.3;
        let ds = generate_synthetic(&spec).unwrap();
        let missing = (0..4000).filter(|&i| !ds.modality_available.get(i, 0)).count() as f64 / 4000.0;
        assert!((missing - 0.3).abs() < 0.03, "{missing}");
        assert!((0..4000).all(|i| ds.modality_available.get(i, 1)));
        ds.validate().unwrap();
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let rows = orthonormal_rows(4, 6, &mut rng::stream(0, &[1]));
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::small(10, 0);
        spec.modalities[0].experts[0].informativeness = 1.5;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = SyntheticSpec::small(10, 0);
        spec.modalities[1].snr = -1.0;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = SyntheticSpec::small(10, 0);
        spec.latent_dim = 1;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn default_teacher_is_twice_latent() {
        let ds = generate_synthetic(&SyntheticSpec::small(10, 0)).unwrap();
        assert_eq!(ds.teacher_dims, vec![16, 16]);
        let mut spec = SyntheticSpec::small(10, 0);
        spec.modalities[0].teacher_dim = Some(0);
        let ds = generate_synthetic(&spec).unwrap();
        assert!(ds.teachers[0].is_none());
    }

    #[test]
    fn null_flag() {
        let mut spec = SyntheticSpec::small(10, 0);
        assert!(!spec.is_null());
        spec.modalities.iter_mut().for_each(|m| m.snr = 0.0);
        assert!(spec.is_null());
    }
}
