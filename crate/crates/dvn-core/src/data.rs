//! Synthetic task generators and dataset files.
//!
//! A dataset is a JSON manifest (task id, class count, feature shape, sample
//! count, seed, generator name and parameters) plus a flat binary of 64-bit
//! little-endian features followed by 32-bit little-endian labels. Files are
//! written atomically (temp + rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absolute spacing between neighbouring class means on the lattice.
const LATTICE_SPACING: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_id: usize,
    pub class_count: usize,
    pub feature_shape: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    pub generator: String,
    pub generator_params: serde_json::Value,
    /// Row-major `samples x feature_len`.
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples * self.feature_len() != self.features.len() {
            return Err(Error::Dataset(format!(
                "{} samples x {} features != {} stored values",
                self.samples,
                self.feature_len(),
                self.features.len()
            )));
        }
        if self.labels.len() != self.samples {
            return Err(Error::Dataset("one label per sample required".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.class_count) {
            return Err(Error::Dataset(format!(
                "label {} outside {} classes",
                bad, self.class_count
            )));
        }
        Ok(())
    }

    /// Stacks the given samples into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let flen = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * flen);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.samples {
                return Err(Error::Dataset(format!(
                    "sample {} out of {}",
                    i, self.samples
                )));
            }
            data.extend_from_slice(&self.features[i * flen..(i + 1) * flen]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_id: usize,
    pub class_count: usize,
    pub feature_shape: Vec<usize>,
    pub sample_count: usize,
    pub seed: u64,
    pub generator: String,
    pub generator_params: serde_json::Value,
    pub binary: String,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("dataset")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save(ds: &Dataset, stem: &Path) -> Result<()> {
    ds.validate()?;
    let bin_path = stem.with_extension("bin");
    let bin_name = bin_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidConfig("dataset stem has no file name".into()))?
        .to_string();
    let manifest = DatasetManifest {
        task_id: ds.task_id,
        class_count: ds.class_count,
        feature_shape: ds.feature_shape.clone(),
        sample_count: ds.samples,
        seed: ds.seed,
        generator: ds.generator.clone(),
        generator_params: ds.generator_params.clone(),
        binary: bin_name,
    };
    let mut blob = Vec::with_capacity(ds.features.len() * 8 + ds.labels.len() * 4);
    for v in &ds.features {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    for l in &ds.labels {
        blob.extend_from_slice(&l.to_le_bytes());
    }
    atomic_write(&bin_path, &blob)?;
    atomic_write(
        &stem.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

/// Loads a dataset from its manifest path (or stem).
pub fn load(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path = if manifest_path.extension().is_none() {
        manifest_path.with_extension("json")
    } else {
        manifest_path.to_path_buf()
    };
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let bin_path: PathBuf = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.binary);
    let blob = fs::read(&bin_path)?;
    let flen: usize = manifest.feature_shape.iter().product();
    let feature_bytes = manifest.sample_count * flen * 8;
    let label_bytes = manifest.sample_count * 4;
    if blob.len() != feature_bytes + label_bytes {
        return Err(Error::Dataset(format!(
            "binary holds {} bytes, manifest implies {}",
            blob.len(),
            feature_bytes + label_bytes
        )));
    }
    let features: Vec<f64> = blob[..feature_bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let labels: Vec<u32> = blob[feature_bytes..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let ds = Dataset {
        task_id: manifest.task_id,
        class_count: manifest.class_count,
        feature_shape: manifest.feature_shape,
        samples: manifest.sample_count,
        seed: manifest.seed,
        generator: manifest.generator,
        generator_params: manifest.generator_params,
        features,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

/// Standard-normal draw via Box-Muller; deterministic per rng stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Class mean: grid position `(c % side, c / side)` scaled by the lattice
/// spacing, broadcast over the two halves of the flattened feature vector.
fn class_mean(class: usize, classes: usize, flen: usize) -> Vec<f64> {
    let side = (classes as f64).sqrt().ceil() as usize;
    let mx = (class % side) as f64 * LATTICE_SPACING;
    let my = (class / side) as f64 * LATTICE_SPACING;
    let half = flen / 2;
    (0..flen)
        .map(|i| if i < half { mx } else { my })
        .collect()
}

/// Gaussian clusters with per-class means on a deterministic lattice and an
/// explicit per-class train/test sample count. Returns `(train, test)`.
pub fn gen_blobs_counts(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    shape: &[usize],
    spread: f64,
    seed: u64,
    task_id: usize,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Dataset("need at least 2 classes".into()));
    }
    if spread <= 0.0 {
        return Err(Error::Dataset("spread must be positive".into()));
    }
    let flen: usize = shape.iter().product();
    if flen < 2 {
        return Err(Error::Dataset("need at least 2 features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = train_per_class + test_per_class;
    let mut train_features = Vec::with_capacity(classes * train_per_class * flen);
    let mut train_labels = Vec::with_capacity(classes * train_per_class);
    let mut test_features = Vec::with_capacity(classes * test_per_class * flen);
    let mut test_labels = Vec::with_capacity(classes * test_per_class);
    for class in 0..classes {
        let mean = class_mean(class, classes, flen);
        for s in 0..per_class {
            let sample: Vec<f64> = mean.iter().map(|&m| m + spread * normal(&mut rng)).collect();
            if s < train_per_class {
                train_features.extend_from_slice(&sample);
                train_labels.push(class as u32);
            } else {
                test_features.extend_from_slice(&sample);
                test_labels.push(class as u32);
            }
        }
    }
    let params = json!({
        "classes": classes,
        "train_per_class": train_per_class,
        "test_per_class": test_per_class,
        "spread": spread,
    });
    let make = |features: Vec<f64>, labels: Vec<u32>| Dataset {
        task_id,
        class_count: classes,
        feature_shape: shape.to_vec(),
        samples: labels.len(),
        seed,
        generator: "blobs".into(),
        generator_params: params.clone(),
        features,
        labels,
    };
    Ok((
        make(train_features, train_labels),
        make(test_features, test_labels),
    ))
}

/// Gaussian clusters split 70/30 by deterministic interleaving: within each
/// class, sample positions `p` with `p % 10 < 7` go to train. Exact 70/30
/// when `samples_per_class` is a multiple of 10.
pub fn gen_blobs(
    classes: usize,
    samples_per_class: usize,
    shape: &[usize],
    spread: f64,
    seed: u64,
    task_id: usize,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Dataset("need at least 2 classes".into()));
    }
    if spread <= 0.0 {
        return Err(Error::Dataset("spread must be positive".into()));
    }
    let flen: usize = shape.iter().product();
    if flen < 2 {
        return Err(Error::Dataset("need at least 2 features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_features = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_features = Vec::new();
    let mut test_labels = Vec::new();
    for class in 0..classes {
        let mean = class_mean(class, classes, flen);
        for p in 0..samples_per_class {
            let sample: Vec<f64> = mean.iter().map(|&m| m + spread * normal(&mut rng)).collect();
            if p % 10 < 7 {
                train_features.extend_from_slice(&sample);
                train_labels.push(class as u32);
            } else {
                test_features.extend_from_slice(&sample);
                test_labels.push(class as u32);
            }
        }
    }
    let params = json!({
        "classes": classes,
        "samples_per_class": samples_per_class,
        "spread": spread,
    });
    let make = |features: Vec<f64>, labels: Vec<u32>| Dataset {
        task_id,
        class_count: classes,
        feature_shape: shape.to_vec(),
        samples: labels.len(),
        seed,
        generator: "blobs".into(),
        generator_params: params.clone(),
        features,
        labels,
    };
    Ok((
        make(train_features, train_labels),
        make(test_features, test_labels),
    ))
}

/// Splits a dataset into `m` tasks along class ranges: subset t takes an
/// equal share of the classes (remainder classes go to the earliest
/// subsets), labels reindexed from 0, sample sets disjoint.
pub fn split_classes(base: &Dataset, m: usize) -> Result<Vec<Dataset>> {
    base.validate()?;
    if m == 0 || m > base.class_count {
        return Err(Error::Dataset(format!(
            "cannot split {} classes into {} subsets",
            base.class_count, m
        )));
    }
    let sizes = crate::partition::equal_group_sizes(base.class_count, m);
    let flen = base.feature_len();
    let mut out = Vec::with_capacity(m);
    let mut class_start = 0;
    for (t, &size) in sizes.iter().enumerate() {
        let class_end = class_start + size;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..base.samples {
            let l = base.labels[i] as usize;
            if l >= class_start && l < class_end {
                features.extend_from_slice(&base.features[i * flen..(i + 1) * flen]);
                labels.push((l - class_start) as u32);
            }
        }
        out.push(Dataset {
            task_id: t + 1,
            class_count: size,
            feature_shape: base.feature_shape.clone(),
            samples: labels.len(),
            seed: base.seed,
            generator: "split_classes".into(),
            generator_params: json!({
                "parent": base.generator.clone(),
                "parts": m,
                "classes": [class_start, class_end],
            }),
            features,
            labels,
        });
        class_start = class_end;
    }
    Ok(out)
}

/// Two tasks over identical inputs: one labeled by the coarse grouping of
/// the fine labels, one by the fine labels themselves. `groups[fine]` is the
/// coarse label; the mapping must cover every fine class.
pub fn coarse_fine(base: &Dataset, groups: &[usize]) -> Result<(Dataset, Dataset)> {
    base.validate()?;
    if groups.len() != base.class_count {
        return Err(Error::Dataset(format!(
            "mapping covers {} of {} fine classes",
            groups.len(),
            base.class_count
        )));
    }
    let coarse_count = groups.iter().max().map(|&m| m + 1).unwrap_or(0);
    if coarse_count == 0 || (0..coarse_count).any(|c| !groups.contains(&c)) {
        return Err(Error::Dataset(
            "coarse labels must cover 0..=max contiguously".into(),
        ));
    }
    let coarse_labels: Vec<u32> = base
        .labels
        .iter()
        .map(|&l| groups[l as usize] as u32)
        .collect();
    let coarse = Dataset {
        task_id: 1,
        class_count: coarse_count,
        feature_shape: base.feature_shape.clone(),
        samples: base.samples,
        seed: base.seed,
        generator: "coarse_fine".into(),
        generator_params: json!({ "level": "coarse", "groups": groups }),
        features: base.features.clone(),
        labels: coarse_labels,
    };
    let fine = Dataset {
        task_id: 2,
        class_count: base.class_count,
        feature_shape: base.feature_shape.clone(),
        samples: base.samples,
        seed: base.seed,
        generator: "coarse_fine".into(),
        generator_params: json!({ "level": "fine", "groups": groups }),
        features: base.features.clone(),
        labels: base.labels.clone(),
    };
    Ok((coarse, fine))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_spread_is_linearly_separable() {
        let (train, test) = gen_blobs(4, 30, &[2], 1e-6, 11, 1).unwrap();
        // nearest-class-mean (a linear classifier) must be perfect
        let flen = 2;
        let mut means = vec![vec![0.0; flen]; 4];
        let mut counts = vec![0usize; 4];
        for i in 0..train.samples {
            let l = train.labels[i] as usize;
            for d in 0..flen {
                means[l][d] += train.features[i * flen + d];
            }
            counts[l] += 1;
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.samples {
            let x = &test.features[i * flen..(i + 1) * flen];
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = (0..flen).map(|d| (x[d] - means[a][d]).powi(2)).sum();
                    let db: f64 = (0..flen).map(|d| (x[d] - means[b][d]).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == test.labels[i] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, test.samples);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = gen_blobs(3, 20, &[2], 1.0, 7, 1).unwrap();
        let b = gen_blobs(3, 20, &[2], 1.0, 7, 1).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = gen_blobs(3, 20, &[2], 1.0, 8, 1).unwrap();
        assert_ne!(a.0.features, c.0.features);
    }

    #[test]
    fn class_histograms_are_balanced() {
        let (train, test) = gen_blobs(5, 40, &[3], 1.0, 3, 1).unwrap();
        assert!(train.class_histogram().iter().all(|&c| c == 28));
        assert!(test.class_histogram().iter().all(|&c| c == 12));
    }

    #[test]
    fn split_ten_classes_into_two() {
        let (base, _) = gen_blobs(10, 20, &[2], 1.0, 5, 1).unwrap();
        let parts = split_classes(&base, 2).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].class_count, 5);
        assert_eq!(parts[1].class_count, 5);
        let total: usize = parts.iter().map(|p| p.samples).sum();
        assert_eq!(total, base.samples);
        assert!(parts.iter().all(|p| p.labels.iter().all(|&l| l < 5)));
    }

    #[test]
    fn split_into_one_is_identity() {
        let (base, _) = gen_blobs(4, 20, &[2], 1.0, 5, 1).unwrap();
        let parts = split_classes(&base, 1).unwrap();
        assert_eq!(parts[0].features, base.features);
        assert_eq!(parts[0].labels, base.labels);
    }

    #[test]
    fn coarse_fine_groups_labels() {
        let (base, _) = gen_blobs(8, 20, &[2], 1.0, 5, 1).unwrap();
        let groups = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let (coarse, fine) = coarse_fine(&base, &groups).unwrap();
        assert_eq!(coarse.class_count, 4);
        assert_eq!(coarse.samples, fine.samples);
        for i in 0..base.samples {
            assert_eq!(coarse.labels[i] as usize, groups[fine.labels[i] as usize]);
        }
        assert!(coarse_fine(&base, &groups[..7]).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_bitwise() {
        let (train, _) = gen_blobs(3, 20, &[2, 3], 1.0, 13, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ds");
        save(&train, &stem).unwrap();
        let loaded = load(&stem.with_extension("json")).unwrap();
        assert_eq!(train, loaded);
    }
}
