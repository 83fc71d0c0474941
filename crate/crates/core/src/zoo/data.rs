//! Seeded synthetic classification data and batch streams.
//!
//! Everything is reproducible from the task seed through [`SplitMix64`]:
//! class centers, sample order, noise, and every epoch shuffle. Inputs are
//! standardized per feature with train-split statistics.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// Flat sample store: `n×features` row-major inputs plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    pub x: Vec<Real>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(features: usize, classes: usize, x: Vec<Real>, y: Vec<usize>) -> Result<Self> {
        if x.len() != y.len() * features {
            return Err(Error::contract(format!(
                "{} inputs do not tile {} samples of {} features",
                x.len(),
                y.len(),
                features
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            classes,
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Assemble a batch from sample indices.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(indices.len() * self.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&self.x[i * self.features..(i + 1) * self.features]);
            labels.push(self.y[i]);
        }
        Batch {
            inputs: Tensor::new(vec![indices.len(), self.features], x).expect("batch shape"),
            labels,
        }
    }
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Configuration of a mixture-of-Gaussians classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub classes: usize,
    pub features: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Gaussian centers per class.
    pub centers_per_class: usize,
    /// Scale of the class-center coordinates.
    pub mean_scale: Real,
    /// Isotropic noise standard deviation around each center.
    pub noise: Real,
    /// Explicit centers (class-major, `classes·centers_per_class` rows of
    /// `features`); generated from the seed when empty.
    pub explicit_means: Vec<Vec<Real>>,
}

impl SyntheticTask {
    pub fn new(classes: usize, features: usize, train: usize, test: usize, seed: u64) -> Self {
        SyntheticTask {
            classes,
            features,
            train,
            test,
            seed,
            centers_per_class: 1,
            mean_scale: 2.0,
            noise: 1.0,
            explicit_means: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub norm_mean: Vec<Real>,
    pub norm_std: Vec<Real>,
}

/// Generate the task's train/test split. Samples are drawn in one seeded
/// sequence (class, center, then noise per feature) and the first `train`
/// of them become the train split, so regeneration is bit-identical and the
/// splits are disjoint by construction.
pub fn gen_synthetic(task: &SyntheticTask) -> Result<SyntheticData> {
    if task.classes < 2 || task.features == 0 || task.train == 0 || task.test == 0 {
        return Err(Error::contract("synthetic task needs ≥2 classes and nonzero sizes"));
    }
    if task.centers_per_class == 0 {
        return Err(Error::contract("centers_per_class must be ≥ 1"));
    }
    let n_centers = task.classes * task.centers_per_class;
    let centers: Vec<Vec<Real>> = if task.explicit_means.is_empty() {
        let mut crng = SplitMix64::derive(task.seed, &[0xC3, 0x11]);
        (0..n_centers)
            .map(|_| {
                (0..task.features)
                    .map(|_| task.mean_scale * crng.normal())
                    .collect()
            })
            .collect()
    } else {
        if task.explicit_means.len() != n_centers
            || task.explicit_means.iter().any(|m| m.len() != task.features)
        {
            return Err(Error::contract(format!(
                "explicit_means must be {n_centers} rows of {} features",
                task.features
            )));
        }
        task.explicit_means.clone()
    };

    let total = task.train + task.test;
    let mut srng = SplitMix64::derive(task.seed, &[0xDA, 0x7A]);
    let mut x = Vec::with_capacity(total * task.features);
    let mut y = Vec::with_capacity(total);
    for _ in 0..total {
        let class = srng.below(task.classes);
        let center = &centers[class * task.centers_per_class + srng.below(task.centers_per_class)];
        for &c in center {
            x.push(c + task.noise * srng.normal());
        }
        y.push(class);
    }

    // Per-feature standardization with train statistics.
    let f = task.features;
    let mut mean = vec![0.0; f];
    for i in 0..task.train {
        for j in 0..f {
            mean[j] += x[i * f + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= task.train as Real;
    }
    let mut var = vec![0.0; f];
    for i in 0..task.train {
        for j in 0..f {
            let d = x[i * f + j] - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<Real> = var
        .iter()
        .map(|v| (v / task.train as Real).sqrt().max(1e-8))
        .collect();
    for i in 0..total {
        for j in 0..f {
            x[i * f + j] = (x[i * f + j] - mean[j]) / std[j];
        }
    }

    let train_x = x[..task.train * f].to_vec();
    let test_x = x[task.train * f..].to_vec();
    Ok(SyntheticData {
        train: Dataset::new(f, task.classes, train_x, y[..task.train].to_vec())?,
        test: Dataset::new(f, task.classes, test_x, y[task.train..].to_vec())?,
        norm_mean: mean,
        norm_std: std,
    })
}

/// Standardize a train/test pair in place using the train split's
/// per-feature statistics; returns (mean, std).
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) -> (Vec<Real>, Vec<Real>) {
    let f = train.features;
    let n = train.len();
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            mean[j] += train.x[i * f + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as Real;
    }
    let mut var = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            let d = train.x[i * f + j] - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<Real> = var.iter().map(|v| (v / n as Real).sqrt().max(1e-8)).collect();
    for ds in [train, test] {
        for i in 0..ds.len() {
            for j in 0..f {
                ds.x[i * f + j] = (ds.x[i * f + j] - mean[j]) / std[j];
            }
        }
    }
    (mean, std)
}

/// Epoch-shuffled fixed-size batch stream. When fewer than `batch_size`
/// samples remain, the order reshuffles (seeded) and a new epoch begins.
#[derive(Debug, Clone)]
pub struct BatchStream {
    data: Dataset,
    batch_size: usize,
    rng: SplitMix64,
    order: Vec<usize>,
    pos: usize,
    pub epoch: usize,
}

impl BatchStream {
    pub fn new(data: Dataset, batch_size: usize, rng: SplitMix64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("empty dataset"));
        }
        let batch_size = batch_size.max(1).min(data.len());
        let mut s = BatchStream {
            order: (0..data.len()).collect(),
            data,
            batch_size,
            rng,
            pos: 0,
            epoch: 0,
        };
        s.rng.shuffle(&mut s.order);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos + self.batch_size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        let b = self.data.batch(idx);
        self.pos += self.batch_size;
        b
    }
}
