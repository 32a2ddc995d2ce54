//! On-disk embedding cache.
//!
//! A dataset directory holds `manifest.json` plus:
//!
//! ```text
//! matrix file   "MDXMAT01" | u32 rows | u32 cols | rows*cols f32, row-major
//! mask file     "MDXMSK01" | u32 rows | u32 cols | rows*cols bytes in {0,1}
//! split file    rows bytes, 0=train 1=val 2=test (no header)
//! ```
//!
//! All integers and reals are little-endian. Multi-class label files store a
//! single column of class indices.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingDataset, ExpertSpec, Split, TaskKind};
use crate::diffcore::{BitMatrix, Tensor2};
use crate::error::{MedmixError, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"MDXMAT01";
pub const MASK_MAGIC: &[u8; 8] = b"MDXMSK01";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestExpert {
    pub name: String,
    pub dim: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestModality {
    pub name: String,
    pub experts: Vec<ManifestExpert>,
    pub teacher_dim: usize,
    pub teacher_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub task_kind: TaskKind,
    pub num_classes: usize,
    pub modalities: Vec<ManifestModality>,
    pub mask_file: String,
    pub label_file: String,
    pub split_file: String,
    pub num_samples: usize,
    /// Per-modality availability bits in the mask format. Optional: when
    /// absent, availability is derived from the expert mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability_file: Option<String>,
}

fn header(magic: &[u8; 8], rows: usize, cols: usize, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out
}

fn parse_header(bytes: &[u8], magic: &[u8; 8], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(MedmixError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(MedmixError::Truncated { path: path.to_path_buf(), detail: "header shorter than 16 bytes".into() });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    Ok((rows, cols))
}

pub fn encode_matrix(t: &Tensor2<f32>) -> Vec<u8> {
    let mut out = header(MATRIX_MAGIC, t.rows(), t.cols(), t.data().len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Tensor2<f32>> {
    let (rows, cols) = parse_header(bytes, MATRIX_MAGIC, path)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 4 {
        return Err(MedmixError::Truncated {
            path: path.to_path_buf(),
            detail: format!("{rows}x{cols} matrix needs {} bytes, found {}", rows * cols * 4, body.len()),
        });
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor2::from_vec(rows, cols, data)
}

pub fn encode_mask(m: &BitMatrix) -> Vec<u8> {
    let mut out = header(MASK_MAGIC, m.rows(), m.cols(), m.bits().len());
    out.extend(m.bits().iter().map(|&b| b as u8));
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<BitMatrix> {
    let (rows, cols) = parse_header(bytes, MASK_MAGIC, path)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols {
        return Err(MedmixError::Truncated {
            path: path.to_path_buf(),
            detail: format!("{rows}x{cols} mask needs {} bytes, found {}", rows * cols, body.len()),
        });
    }
    let bits = body
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(MedmixError::validation("mask_file", format!("byte {i} is {b:#04x}, expected 0x00 or 0x01"))),
        })
        .collect::<Result<Vec<_>>>()?;
    BitMatrix::from_vec(rows, cols, bits)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MedmixError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MedmixError::io(path, e))
}

pub fn write_matrix(path: &Path, t: &Tensor2<f32>) -> Result<()> {
    write_bytes(path, &encode_matrix(t))
}

pub fn read_matrix(path: &Path) -> Result<Tensor2<f32>> {
    decode_matrix(&read_bytes(path)?, path)
}

fn expert_file(m: usize, k: usize) -> String {
    format!("expert_m{m}_k{k}.mat")
}

/// Writes `dataset` into directory `dir` (created if needed).
pub fn write_dataset(dataset: &EmbeddingDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| MedmixError::io(dir, e))?;
    let m_count = dataset.num_modalities();
    let mut modalities = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let mut experts = Vec::new();
        for (j, e) in dataset.experts.iter().enumerate().filter(|(_, e)| e.modality_id == m) {
            let file = expert_file(m, e.expert_id);
            write_matrix(&dir.join(&file), &dataset.embeddings[j])?;
            experts.push(ManifestExpert { name: e.name.clone(), dim: e.dim, file });
        }
        let teacher_file = match &dataset.teachers[m] {
            Some(t) => {
                let file = format!("teacher_m{m}.mat");
                write_matrix(&dir.join(&file), t)?;
                Some(file)
            }
            None => None,
        };
        modalities.push(ManifestModality {
            name: dataset.modality_names[m].clone(),
            experts,
            teacher_dim: dataset.teacher_dims[m],
            teacher_file,
        });
    }
    let n = dataset.num_samples();
    let mask = if n == 0 { BitMatrix::new(0, dataset.experts.len(), false) } else { dataset.expert_mask.clone() };
    write_bytes(&dir.join("mask.msk"), &encode_mask(&mask))?;
    write_bytes(&dir.join("availability.msk"), &encode_mask(&dataset.modality_available))?;
    let labels = match dataset.task_kind {
        TaskKind::MultiLabel => dataset.labels.clone(),
        TaskKind::MultiClass => Tensor2::from_vec(n, 1, (0..n).map(|i| dataset.class_of(i) as f32).collect())?,
    };
    write_matrix(&dir.join("labels.mat"), &labels)?;
    let split_bytes: Vec<u8> = dataset.splits.iter().map(|s| s.to_byte()).collect();
    write_bytes(&dir.join("split.bin"), &split_bytes)?;

    let manifest = Manifest {
        version: 1,
        task_kind: dataset.task_kind,
        num_classes: dataset.num_classes,
        modalities,
        mask_file: "mask.msk".into(),
        label_file: "labels.mat".into(),
        split_file: "split.bin".into(),
        num_samples: n,
        availability_file: Some("availability.msk".into()),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_bytes(&dir.join("manifest.json"), json.as_bytes())
}

/// Reads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<EmbeddingDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_bytes(&manifest_path)?)?;
    if manifest.version != 1 {
        return Err(MedmixError::validation("manifest.version", format!("unsupported version {}", manifest.version)));
    }
    let n = manifest.num_samples;
    let m_count = manifest.modalities.len();
    let mut experts = Vec::new();
    let mut embeddings = Vec::new();
    let mut teachers = Vec::with_capacity(m_count);
    let mut teacher_dims = Vec::with_capacity(m_count);
    for (m, md) in manifest.modalities.iter().enumerate() {
        for (k, e) in md.experts.iter().enumerate() {
            let path = dir.join(&e.file);
            let t = read_matrix(&path)?;
            if t.cols() != e.dim {
                return Err(MedmixError::DimMismatch { modality: m, expert: k, manifest: e.dim, file: t.cols() });
            }
            if t.rows() != n {
                return Err(MedmixError::validation(
                    "num_samples",
                    format!("{} has {} rows, manifest says {n}", e.file, t.rows()),
                ));
            }
            experts.push(ExpertSpec { modality_id: m, expert_id: k, dim: e.dim, name: e.name.clone() });
            embeddings.push(t);
        }
        match &md.teacher_file {
            Some(file) => {
                let t = read_matrix(&dir.join(file))?;
                if t.cols() != md.teacher_dim || t.rows() != n {
                    return Err(MedmixError::validation(
                        "teacher_dim",
                        format!(
                            "modality {m}: manifest says {n}x{}, {file} is {}x{}",
                            md.teacher_dim,
                            t.rows(),
                            t.cols()
                        ),
                    ));
                }
                teachers.push(Some(t));
                teacher_dims.push(md.teacher_dim);
            }
            None => {
                if md.teacher_dim != 0 {
                    return Err(MedmixError::validation(
                        "teacher_file",
                        format!("modality {m} declares teacher_dim {} without a file", md.teacher_dim),
                    ));
                }
                teachers.push(None);
                teacher_dims.push(0);
            }
        }
    }
    let mask_path = dir.join(&manifest.mask_file);
    let expert_mask = decode_mask(&read_bytes(&mask_path)?, &mask_path)?;
    if expert_mask.rows() != n || expert_mask.cols() != experts.len() {
        return Err(MedmixError::validation(
            "mask_file",
            format!("{}x{} mask for {n} samples and {} experts", expert_mask.rows(), expert_mask.cols(), experts.len()),
        ));
    }
    let modality_available = match &manifest.availability_file {
        Some(file) => {
            let path = dir.join(file);
            decode_mask(&read_bytes(&path)?, &path)?
        }
        None => {
            let mut a = BitMatrix::new(n, m_count, false);
            for i in 0..n {
                for (j, e) in experts.iter().enumerate() {
                    if expert_mask.get(i, j) {
                        a.set(i, e.modality_id, true);
                    }
                }
            }
            a
        }
    };
    let label_path = dir.join(&manifest.label_file);
    let raw_labels = read_matrix(&label_path)?;
    let labels = match manifest.task_kind {
        TaskKind::MultiLabel => raw_labels,
        TaskKind::MultiClass => {
            if raw_labels.cols() != 1 || raw_labels.rows() != n {
                return Err(MedmixError::validation(
                    "label_file",
                    format!("multi-class labels must be {n}x1, found {:?}", raw_labels.shape()),
                ));
            }
            let mut onehot = Tensor2::zeros(n, manifest.num_classes);
            for i in 0..n {
                let v = raw_labels.get(i, 0);
                if v.fract() != 0.0 || v < 0.0 || v as usize >= manifest.num_classes {
                    return Err(MedmixError::validation(
                        "label_file",
                        format!("sample {i}: class index {v} out of range"),
                    ));
                }
                onehot.set(i, v as usize, 1.0);
            }
            onehot
        }
    };
    let split_path = dir.join(&manifest.split_file);
    let split_bytes = read_bytes(&split_path)?;
    if split_bytes.len() != n {
        return Err(MedmixError::Truncated {
            path: split_path,
            detail: format!("{} split tags for {n} samples", split_bytes.len()),
        });
    }
    let splits = split_bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            Split::from_byte(b)
                .ok_or_else(|| MedmixError::validation("split_file", format!("sample {i}: tag {b} not in 0..=2")))
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = EmbeddingDataset {
        modality_names: manifest.modalities.iter().map(|m| m.name.clone()).collect(),
        experts,
        teacher_dims,
        num_classes: manifest.num_classes,
        task_kind: manifest.task_kind,
        embeddings,
        expert_mask,
        modality_available,
        teachers,
        labels,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::tests::tiny_dataset;
    use crate::embedstore::{Sample, TaskKind};

    fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn single_zero_vector_round_trips() {
        let ds = EmbeddingDataset::from_samples(
            vec!["m".into()],
            vec![ExpertSpec { modality_id: 0, expert_id: 0, dim: 2, name: "e".into() }],
            vec![0],
            1,
            TaskKind::MultiLabel,
            &[Sample {
                expert_embeddings: vec![vec![vec![0.0, 0.0]]],
                expert_mask: vec![vec![true]],
                modality_available: vec![true],
                teacher_embeddings: vec![None],
                labels: vec![1.0],
            }],
            vec![Split::Train],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.embeddings[0].data()[0].to_bits(), 0.0f32.to_bits());
        assert_eq!(back.embeddings[0].data()[1].to_bits(), 0.0f32.to_bits());
        assert_eq!(back, ds);
    }

    #[test]
    fn masked_cell_is_a_zero_byte() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("mask.msk")).unwrap();
        assert_eq!(&bytes[..8], MASK_MAGIC);
        // sample 1, expert (0,1) is masked: row 1, column 1 of a 3-column mask
        assert_eq!(bytes[16 + 3 + 1], 0x00);
        assert_eq!(bytes[16], 0x01);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ds = tiny_dataset();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&ds, a.path()).unwrap();
        let back = read_dataset(a.path()).unwrap();
        assert_eq!(back, ds);
        write_dataset(&back, b.path()).unwrap();
        assert_eq!(files_in(a.path()), files_in(b.path()));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("expert_m0_k0.mat");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, MedmixError::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn manifest_dim_mismatch_names_the_expert() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let mp = dir.path().join("manifest.json");
        let mut manifest: Manifest = serde_json::from_slice(&fs::read(&mp).unwrap()).unwrap();
        manifest.modalities[1].experts[0].dim = 768;
        fs::write(&mp, serde_json::to_vec(&manifest).unwrap()).unwrap();
        match read_dataset(dir.path()).unwrap_err() {
            MedmixError::DimMismatch { modality, expert, manifest, file } => {
                assert_eq!((modality, expert, manifest, file), (1, 0, 768, 4));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn availability_file_inconsistency_is_rejected() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("availability.msk");
        let mut bytes = fs::read(&p).unwrap();
        // sample 3 has no expert of modality 1; claim it is available
        bytes[16 + 3 * 2 + 1] = 1;
        fs::write(&p, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("inconsistency"), "{err}");
    }

    #[test]
    fn two_modalities_read_back() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap().num_modalities(), 2);
    }

    #[test]
    fn truncated_matrix_is_rejected() {
        let t = Tensor2::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let bytes = encode_matrix(&t);
        assert!(matches!(decode_matrix(&bytes[..bytes.len() - 1], Path::new("x")), Err(MedmixError::Truncated { .. })));
    }
}
