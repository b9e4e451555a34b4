//! Datasets, federated partitioning, and auxiliary-set sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{dirichlet, mix, mix2, normal, rng_from};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("partitioning failed after {retries} retries: {hint}")]
    Partition { retries: usize, hint: String },
}

/// Feature matrix with optional labels. Labels are unused by SSL training;
/// they drive Dirichlet partitioning and evaluation.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub features: Tensor<T>,
    pub labels: Option<Vec<u32>>,
    pub provenance: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|&m| m as usize + 1))
            .unwrap_or(0)
    }

    /// Rows (and labels) at the given indices.
    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            provenance: format!("{}[subset {}]", self.provenance, indices.len()),
        }
    }
}

/// Disjoint per-client index lists over a parent dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub seed: u64,
    pub beta: Option<f64>,
    /// Index lists; position is the client id.
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    /// Disjointness, completeness over `n` indices, and non-emptiness.
    pub fn validate(&self, n: usize) -> Result<(), DataError> {
        let mut seen = vec![false; n];
        let mut total = 0;
        for (cid, list) in self.clients.iter().enumerate() {
            if list.is_empty() {
                return Err(DataError::Config(format!("client {cid} has no samples")));
            }
            for &i in list {
                if i >= n {
                    return Err(DataError::Config(format!("index {i} out of range {n}")));
                }
                if seen[i] {
                    return Err(DataError::Config(format!("index {i} assigned twice")));
                }
                seen[i] = true;
                total += 1;
            }
        }
        if total != n {
            return Err(DataError::Config(format!(
                "partition covers {total} of {n} indices"
            )));
        }
        Ok(())
    }
}

/// Gaussian blobs: one center per class on a seeded random sphere of radius
/// `cluster_sep`, unit noise. Deterministic in `seed`.
pub fn gen_synthetic<T: Scalar>(
    n: usize,
    classes: usize,
    dim: usize,
    cluster_sep: f64,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    if classes == 0 || n < classes {
        return Err(DataError::Config(format!(
            "need n >= classes >= 1, got n={n} classes={classes}"
        )));
    }
    let mut rng = rng_from(mix(seed, 0x53_594e));
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let dir: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        centers.push(dir.into_iter().map(|v| v / norm * cluster_sep).collect::<Vec<f64>>());
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u32);
        for j in 0..dim {
            data.push(T::of(centers[c][j] + normal(&mut rng)));
        }
    }
    Ok(Dataset {
        features: Tensor::from_vec(vec![n, dim], data).expect("shape matches"),
        labels: Some(labels),
        provenance: format!("synthetic(n={n},c={classes},d={dim},sep={cluster_sep},seed={seed})"),
    })
}

/// Load the standard CIFAR-10 binary layout: whole 3073-byte records, one
/// label byte then 3072 bytes of R, G, B planes. Features scale to [0, 1].
pub fn load_cifar10_bin<T: Scalar>(path: &Path) -> Result<Dataset<T>, DataError> {
    const RECORD: usize = 3073;
    const PIXELS: usize = 3072;
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(DataError::Format(format!(
            "file size {} is not a positive multiple of {RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0];
        if label > 9 {
            return Err(DataError::Format(format!("label byte {label} > 9")));
        }
        labels.push(label as u32);
        data.extend(rec[1..].iter().map(|&b| T::of(b as f64 / 255.0)));
    }
    Ok(Dataset {
        features: Tensor::from_vec(vec![n, PIXELS], data).expect("shape matches"),
        labels: Some(labels),
        provenance: format!("cifar10({})", path.display()),
    })
}

/// Seeded shuffle then contiguous split; sizes differ by at most one, with
/// earlier clients taking the remainder.
pub fn partition_uniform<T: Scalar>(
    ds: &Dataset<T>,
    num_clients: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    let n = ds.len();
    if num_clients == 0 || n < num_clients {
        return Err(DataError::Config(format!(
            "cannot split {n} samples across {num_clients} clients"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng_from(mix(seed, 0x50_4152)));
    let base = n / num_clients;
    let extra = n % num_clients;
    let mut clients = Vec::with_capacity(num_clients);
    let mut offset = 0;
    for c in 0..num_clients {
        let size = base + usize::from(c < extra);
        clients.push(indices[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(Partition { seed, beta: None, clients })
}

/// Largest-remainder apportionment of `count` units by the given weights.
fn largest_remainder(count: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let mut out = vec![count / weights.len(); weights.len()];
        let mut extra = count - out.iter().sum::<usize>();
        for slot in out.iter_mut() {
            if extra == 0 {
                break;
            }
            *slot += 1;
            extra -= 1;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| count as f64 * w / total).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Largest fractional part first; ties go to the earliest slot.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &slot in order.iter().take(count - assigned) {
        alloc[slot] += 1;
    }
    alloc
}

/// Label-skewed split: for each class, client shares are drawn from
/// Dirichlet(beta) and the class's shuffled indices are apportioned by
/// largest-remainder rounding. The whole partition is resampled (bounded
/// retries, derived seeds) until every client holds `min_per_client` samples.
pub fn partition_dirichlet<T: Scalar>(
    ds: &Dataset<T>,
    num_clients: usize,
    beta: f64,
    seed: u64,
    min_per_client: usize,
) -> Result<Partition, DataError> {
    const MAX_RETRIES: usize = 100;
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| DataError::Config("dirichlet partitioning needs labels".into()))?;
    if beta <= 0.0 {
        return Err(DataError::Config("beta must be > 0".into()));
    }
    if num_clients == 0 {
        return Err(DataError::Config("need at least one client".into()));
    }
    let classes = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }

    for attempt in 0..MAX_RETRIES {
        let attempt_seed = mix2(seed, 0x44_4952, attempt as u64);
        let mut rng = rng_from(attempt_seed);
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(&mut rng);
            let shares = dirichlet(&mut rng, beta, num_clients);
            let counts = largest_remainder(shuffled.len(), &shares);
            let mut offset = 0;
            for (c, &count) in counts.iter().enumerate() {
                clients[c].extend_from_slice(&shuffled[offset..offset + count]);
                offset += count;
            }
        }
        if clients.iter().all(|c| c.len() >= min_per_client) {
            return Ok(Partition { seed, beta: Some(beta), clients });
        }
    }
    Err(DataError::Partition {
        retries: MAX_RETRIES,
        hint: format!(
            "every client needs >= {min_per_client} samples; try a larger beta or fewer than {num_clients} clients"
        ),
    })
}

/// Class-stratified sample of `ceil(ratio * n)` rows with labels dropped.
/// Per-class counts follow largest-remainder rounding of `ratio * count_c`.
pub fn sample_auxiliary<T: Scalar>(
    ds: &Dataset<T>,
    ratio: f64,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DataError::Config(format!("aux ratio must be in (0, 1], got {ratio}")));
    }
    let n = ds.len();
    let target = (ratio * n as f64).ceil() as usize;
    if target == 0 {
        return Err(DataError::Config("auxiliary sample would be empty".into()));
    }
    let mut rng = rng_from(mix(seed, 0x41_5558));
    let chosen: Vec<usize> = match &ds.labels {
        Some(labels) => {
            let classes = ds.num_classes();
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &l) in labels.iter().enumerate() {
                by_class[l as usize].push(i);
            }
            let weights: Vec<f64> = by_class.iter().map(|c| c.len() as f64).collect();
            let counts = largest_remainder(target, &weights);
            let mut out = Vec::with_capacity(target);
            for (class_indices, &count) in by_class.iter().zip(&counts) {
                let mut shuffled = class_indices.clone();
                shuffled.shuffle(&mut rng);
                out.extend_from_slice(&shuffled[..count.min(shuffled.len())]);
            }
            out
        }
        None => {
            let mut indices: Vec<usize> = (0..n).collect();
            indices.shuffle(&mut rng);
            indices[..target].to_vec()
        }
    };
    let mut sub = ds.subset(&chosen);
    sub.labels = None;
    sub.provenance = format!("{}[aux ratio={ratio}]", ds.provenance);
    Ok(sub)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_single_class_labels_all_zero() {
        let ds = gen_synthetic::<f64>(10, 1, 4, 3.0, 1).unwrap();
        assert!(ds.labels.unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn synthetic_zero_separation_collapses_centers() {
        let ds = gen_synthetic::<f64>(40, 4, 8, 0.0, 2).unwrap();
        // All class-conditional means sit at the (shared) origin-centered blob.
        let labels = ds.labels.as_ref().unwrap();
        let mut means = vec![vec![0.0; 8]; 4];
        let mut counts = vec![0usize; 4];
        for i in 0..ds.len() {
            let c = labels[i] as usize;
            counts[c] += 1;
            for j in 0..8 {
                means[c][j] += ds.features.row(i)[j].widen();
            }
        }
        for c in 0..4 {
            for j in 0..8 {
                means[c][j] /= counts[c] as f64;
            }
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                let dist: f64 = (0..8)
                    .map(|j| (means[a][j] - means[b][j]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                // Pure sampling noise at sep 0.
                assert!(dist < 1.5, "centers {a},{b} separated by {dist}");
            }
        }
    }

    #[test]
    fn synthetic_separated_blobs_are_linearly_separable() {
        // Least-squares classifier on raw features as the oracle.
        let ds = gen_synthetic::<f64>(200, 2, 16, 6.0, 3).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        // One-dimensional projection onto the difference of class means.
        let mut mean0 = vec![0.0; 16];
        let mut mean1 = vec![0.0; 16];
        let (mut n0, mut n1) = (0, 0);
        for i in 0..ds.len() {
            let row = ds.features.row(i);
            if labels[i] == 0 {
                n0 += 1;
                for j in 0..16 {
                    mean0[j] += row[j];
                }
            } else {
                n1 += 1;
                for j in 0..16 {
                    mean1[j] += row[j];
                }
            }
        }
        mean0.iter_mut().for_each(|v| *v /= n0 as f64);
        mean1.iter_mut().for_each(|v| *v /= n1 as f64);
        let mut correct = 0;
        for i in 0..ds.len() {
            let row = ds.features.row(i);
            let d0: f64 = (0..16).map(|j| (row[j] - mean0[j]).powi(2)).sum();
            let d1: f64 = (0..16).map(|j| (row[j] - mean1[j]).powi(2)).sum();
            let pred = u32::from(d1 < d0);
            correct += usize::from(pred == labels[i]);
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn cifar_loader_round_trips_records() {
        let dir = std::env::temp_dir().join("lwfs_cifar_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("two_records.bin");
        let mut bytes = vec![0u8; 3073 * 2];
        bytes[0] = 3;
        for b in bytes[1..3073].iter_mut() {
            *b = 255;
        }
        bytes[3073] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_bin::<f32>(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels.as_ref().unwrap()[0], 3);
        assert_eq!(ds.labels.as_ref().unwrap()[1], 9);
        assert!(ds.features.row(0).iter().all(|&v| v == 1.0));
        assert!(ds.features.row(1).iter().all(|&v| v == 0.0));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn cifar_loader_rejects_truncation_and_bad_labels() {
        let dir = std::env::temp_dir().join("lwfs_cifar_test");
        std::fs::create_dir_all(&dir).unwrap();

        let truncated = dir.join("truncated.bin");
        std::fs::write(&truncated, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar10_bin::<f32>(&truncated), Err(DataError::Format(_))));

        let bad_label = dir.join("bad_label.bin");
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 10;
        std::fs::write(&bad_label, &bytes).unwrap();
        assert!(matches!(load_cifar10_bin::<f32>(&bad_label), Err(DataError::Format(_))));
    }

    #[test]
    fn uniform_partition_sizes() {
        let ds = gen_synthetic::<f64>(10, 2, 4, 1.0, 1).unwrap();
        let p = partition_uniform(&ds, 5, 7).unwrap();
        assert!(p.clients.iter().all(|c| c.len() == 2));
        p.validate(10).unwrap();

        let ds = gen_synthetic::<f64>(11, 2, 4, 1.0, 1).unwrap();
        let p = partition_uniform(&ds, 3, 7).unwrap();
        let mut sizes: Vec<usize> = p.clients.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 4, 4]);

        let p1 = partition_uniform(&ds, 1, 7).unwrap();
        assert_eq!(p1.clients.len(), 1);
        assert_eq!(p1.clients[0].len(), 11);
    }

    #[test]
    fn dirichlet_single_client_gets_everything() {
        let ds = gen_synthetic::<f64>(30, 3, 4, 1.0, 5).unwrap();
        let p = partition_dirichlet(&ds, 1, 0.01, 3, 2).unwrap();
        assert_eq!(p.clients[0].len(), 30);
        p.validate(30).unwrap();
    }

    #[test]
    fn dirichlet_conserves_counts() {
        let ds = gen_synthetic::<f64>(101, 7, 4, 1.0, 5).unwrap();
        let p = partition_dirichlet(&ds, 4, 0.5, 11, 2).unwrap();
        p.validate(101).unwrap();
    }

    #[test]
    fn largest_remainder_conserves_and_orders() {
        assert_eq!(largest_remainder(12, &[3.0, 2.0, 1.0]), vec![6, 4, 2]);
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        let alloc = largest_remainder(7, &[0.2, 0.5, 0.3]);
        assert_eq!(alloc.iter().sum::<usize>(), 7);
    }

    #[test]
    fn auxiliary_ratio_one_takes_all_and_strips_labels() {
        let ds = gen_synthetic::<f64>(20, 2, 4, 1.0, 9).unwrap();
        let aux = sample_auxiliary(&ds, 1.0, 1).unwrap();
        assert_eq!(aux.len(), 20);
        assert!(aux.labels.is_none());
    }

    #[test]
    fn auxiliary_counts_are_stratified() {
        let ds = gen_synthetic::<f64>(100, 4, 4, 1.0, 9).unwrap();
        let aux = sample_auxiliary(&ds, 0.1, 1).unwrap();
        assert_eq!(aux.len(), 10);
        // 25 per class, ratio 0.1: within +-1 of 2.5 per class. Counting via
        // nearest-center is unreliable here, so instead re-derive from the
        // subset indices embedded at generation time: class = index % 4 does
        // not survive subsetting, so just check the total.
    }

    #[test]
    fn auxiliary_per_class_counts_within_one() {
        // Rebuild with distinguishable labels by sampling a labeled subset
        // directly through the stratified path.
        let ds = gen_synthetic::<f64>(100, 4, 4, 1.0, 9).unwrap();
        let labels = ds.labels.clone().unwrap();
        let mut by_class_total = vec![0usize; 4];
        for &l in &labels {
            by_class_total[l as usize] += 1;
        }
        // Use the internal apportionment on the exact class weights.
        let counts =
            largest_remainder(10, &by_class_total.iter().map(|&c| c as f64).collect::<Vec<_>>());
        for (&count, &total) in counts.iter().zip(&by_class_total) {
            let expect = 0.1 * total as f64;
            assert!((count as f64 - expect).abs() <= 1.0);
        }
    }
}
