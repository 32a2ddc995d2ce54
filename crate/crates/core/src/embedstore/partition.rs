use rand::seq::SliceRandom;

use super::{EmbeddingDataset, Split, TaskKind};
use crate::error::{MedmixError, Result};
use crate::rng;

/// Default train/val/test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.65, 0.15, 0.20];

/// Split sizes for `n` samples: floor each share, then hand the remainder to
/// the largest fractional parts (earlier split wins ties).
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(MedmixError::validation("fractions", format!("{fractions:?} outside [0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MedmixError::validation("fractions", format!("{fractions:?} sum to {total}")));
    }
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(&raw) {
        // tolerate representation error such as 0.15 * 20 = 2.9999999999999996
        *s = (r + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - sizes[a] as f64;
        let fb = raw[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remainder = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            remainder -= 1;
        }
    }
    for (i, (&s, &f)) in sizes.iter().zip(&fractions).enumerate() {
        if f > 0.0 && s == 0 {
            return Err(MedmixError::validation(
                "fractions",
                format!("split {i} is empty for n={n} with fractions {fractions:?}"),
            ));
        }
    }
    Ok(sizes)
}

/// Returns a copy of `dataset` with a seeded split assignment.
///
/// Multi-class datasets are stratified: samples are grouped by class (shuffled
/// within class) and dealt to whichever split is furthest below its running
/// quota, which keeps every class close to the requested fractions while
/// hitting the global split sizes exactly.
pub fn partition(dataset: &EmbeddingDataset, fractions: [f64; 3], seed: u64) -> Result<EmbeddingDataset> {
    let n = dataset.num_samples();
    let sizes = split_sizes(n, fractions)?;
    let order: Vec<usize> = match dataset.task_kind {
        TaskKind::MultiLabel => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(seed, &[rng::PARTITION]));
            idx
        }
        TaskKind::MultiClass => {
            let mut by_class = vec![Vec::new(); dataset.num_classes];
            for i in 0..n {
                by_class[dataset.class_of(i)].push(i);
            }
            for (c, idx) in by_class.iter_mut().enumerate() {
                idx.shuffle(&mut rng::stream(seed, &[rng::PARTITION, c as u64]));
            }
            by_class.concat()
        }
    };
    let mut splits = vec![Split::Train; n];
    let tags = [Split::Train, Split::Val, Split::Test];
    match dataset.task_kind {
        TaskKind::MultiLabel => {
            for (pos, &i) in order.iter().enumerate() {
                splits[i] = if pos < sizes[0] {
                    Split::Train
                } else if pos < sizes[0] + sizes[1] {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        TaskKind::MultiClass => {
            let mut counts = [0usize; 3];
            for (step, &i) in order.iter().enumerate() {
                let j = (step + 1) as f64;
                let pick = (0..3)
                    .max_by(|&a, &b| {
                        let da = sizes[a] as f64 * j / n as f64 - counts[a] as f64;
                        let db = sizes[b] as f64 * j / n as f64 - counts[b] as f64;
                        // earlier split wins ties
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                counts[pick] += 1;
                splits[i] = tags[pick];
            }
            debug_assert_eq!(counts, sizes);
        }
    }
    let mut out = dataset.clone();
    out.splits = splits;
    Ok(out)
}
