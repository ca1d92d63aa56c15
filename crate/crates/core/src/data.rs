//! In-memory datasets, deterministic synthetic generators and batching.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// Samples of a common shape stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    data: Vec<f64>,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(sample_shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = sample_shape.iter().product();
        if len == 0 || !data.len().is_multiple_of(len) {
            return Err(Error::dim("dataset", &[sample_shape, &[data.len()]]));
        }
        Ok(Dataset { sample_shape: sample_shape.to_vec(), data, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::dim("dataset labels", &[&[self.len()], &[labels.len()]]));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stacks the given samples into a `B × sample_shape` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(&shape, data)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let batch = self.batch(indices)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Dataset { sample_shape: self.sample_shape.clone(), data: batch.into_data(), labels })
    }

    /// Random train/validation split; the validation part holds
    /// `ceil(len · fraction)` samples.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {validation_fraction}")));
        }
        let n = self.len();
        let n_val = libm::ceil(n as f64 * validation_fraction) as usize;
        if n_val == 0 || n_val >= n {
            return Err(Error::Config(format!("cannot split {n} samples with fraction {validation_fraction}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, Stream::Split));
        let (val, train) = order.split_at(n_val);
        Ok((self.subset(train)?, self.subset(val)?))
    }

    /// Same samples viewed with a different per-sample shape.
    pub fn reshaped(&self, sample_shape: &[usize]) -> Result<Dataset> {
        if sample_shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::dim("dataset reshape", &[&self.sample_shape, sample_shape]));
        }
        Ok(Dataset { sample_shape: sample_shape.to_vec(), data: self.data.clone(), labels: self.labels.clone() })
    }

    /// Per-element mean over samples.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.sample_len()];
        for i in 0..self.len() {
            m.iter_mut().zip(self.sample(i)).for_each(|(a, v)| *a += v);
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Endless shuffled passes over a dataset in fixed-size batches.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    len: usize,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpochSampler {
    /// Batch size is capped at the dataset size.
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::Config(String::from("sampler needs a non-empty dataset and batch size")));
        }
        let mut s = EpochSampler {
            len,
            batch_size: batch_size.min(len),
            order: (0..len).collect(),
            pos: 0,
            rng: stream(seed, Stream::Shuffle),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.len {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}

fn std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Isotropic Gaussian clusters around random centres.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianMixture {
    pub clusters: usize,
    pub dims: usize,
    pub samples: usize,
    pub sigma: f64,
    /// Standard deviation of the cluster centres.
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub center_scale: f64,
}

#[cfg(feature = "serde")]
fn one() -> f64 {
    1.0
}

/// Centres are drawn from `normal(0, center_scale²)`; sample `i` belongs to
/// cluster `i mod k`, so clusters are equally weighted.
pub fn gaussian_mixture(params: &GaussianMixture, seed: u64) -> Result<Dataset> {
    let GaussianMixture { clusters, dims, samples, sigma, center_scale } = *params;
    if clusters < 1 {
        return Err(Error::Config(String::from("gaussian mixture needs at least one cluster")));
    }
    if dims == 0 || samples == 0 || !(sigma >= 0.0) || !(center_scale >= 0.0) {
        return Err(Error::Config(format!("invalid gaussian mixture parameters {params:?}")));
    }
    let mut rng = stream(seed, Stream::Data);
    let centers: Vec<f64> = (0..clusters * dims).map(|_| center_scale * std_normal(&mut rng)).collect();
    let mut data = Vec::with_capacity(samples * dims);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let k = i % clusters;
        for c in &centers[k * dims..(k + 1) * dims] {
            data.push(c + sigma * std_normal(&mut rng));
        }
        labels.push(k as u32);
    }
    Dataset::new(&[dims], data)?.with_labels(labels)
}

/// Centres a mixture's generator would draw for `seed`.
pub fn mixture_centers(params: &GaussianMixture, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Data);
    (0..params.clusters * params.dims).map(|_| params.center_scale * std_normal(&mut rng)).collect()
}

/// Procedural single-channel images: stripes, checkerboards and blobs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatternSet {
    pub samples: usize,
    pub sigma: f64,
    #[cfg_attr(feature = "serde", serde(default = "eight"))]
    pub size: usize,
}

#[cfg(feature = "serde")]
fn eight() -> usize {
    8
}

pub fn patterns(params: &PatternSet, seed: u64) -> Result<Dataset> {
    let PatternSet { samples, sigma, size } = *params;
    if samples == 0 || size == 0 || !(sigma >= 0.0) {
        return Err(Error::Config(format!("invalid pattern parameters {params:?}")));
    }
    let mut rng = stream(seed, Stream::Data);
    let mut data = Vec::with_capacity(samples * size * size);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let family = i % 3;
        let mut img = vec![0.0; size * size];
        match family {
            0 => {
                let period = rng.random_range(2..=4usize);
                let phase = rng.random_range(0..period);
                let vertical = rng.random_bool(0.5);
                for r in 0..size {
                    for c in 0..size {
                        let k = if vertical { c } else { r };
                        img[r * size + c] = if (k + phase) % period < period / 2 + period % 2 { 1.0 } else { 0.0 };
                    }
                }
            }
            1 => {
                let cell = [1usize, 2, 4][rng.random_range(0..3)];
                let flip = rng.random_range(0..2usize);
                for r in 0..size {
                    for c in 0..size {
                        img[r * size + c] = ((r / cell + c / cell + flip) % 2) as f64;
                    }
                }
            }
            _ => {
                let cy = rng.random_range(0.0..size as f64);
                let cx = rng.random_range(0.0..size as f64);
                let width = rng.random_range(0.8..2.5);
                for r in 0..size {
                    for c in 0..size {
                        let d2 = (r as f64 - cy) * (r as f64 - cy) + (c as f64 - cx) * (c as f64 - cx);
                        img[r * size + c] = libm::exp(-d2 / (2.0 * width * width));
                    }
                }
            }
        }
        for v in &mut img {
            *v += sigma * std_normal(&mut rng);
        }
        data.extend_from_slice(&img);
        labels.push(family as u32);
    }
    Dataset::new(&[1, size, size], data)?.with_labels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture(k: usize, sigma: f64, n: usize) -> GaussianMixture {
        GaussianMixture { clusters: k, dims: 3, samples: n, sigma, center_scale: 1.0 }
    }

    #[test]
    fn zero_noise_single_cluster_is_constant() {
        let d = gaussian_mixture(&mixture(1, 0.0, 10), 5).unwrap();
        let first = d.sample(0).to_vec();
        assert!((0..d.len()).all(|i| d.sample(i) == &first[..]));
        assert_eq!(first, mixture_centers(&mixture(1, 0.0, 10), 5));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gaussian_mixture(&mixture(4, 0.3, 50), 9).unwrap();
        let b = gaussian_mixture(&mixture(4, 0.3, 50), 9).unwrap();
        assert_eq!(a, b);
        let c = gaussian_mixture(&mixture(4, 0.3, 50), 10).unwrap();
        assert_ne!(a, c);
        let p = PatternSet { samples: 12, sigma: 0.05, size: 8 };
        assert_eq!(patterns(&p, 1).unwrap(), patterns(&p, 1).unwrap());
    }

    #[test]
    fn zero_clusters_is_config_error() {
        assert!(matches!(gaussian_mixture(&mixture(0, 0.1, 10), 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_partitions_samples() {
        let d = gaussian_mixture(&mixture(2, 0.1, 20), 3).unwrap();
        let (train, val) = d.split(0.25, 7).unwrap();
        assert_eq!((train.len(), val.len()), (15, 5));
        assert!(d.split(1.0, 7).is_err());
    }

    #[test]
    fn sampler_caps_batch_and_cycles() {
        let mut s = EpochSampler::new(5, 64, 1).unwrap();
        assert_eq!(s.batch_size(), 5);
        let mut a = s.next_batch();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        let mut s = EpochSampler::new(10, 4, 1).unwrap();
        let seen: Vec<usize> = (0..2).flat_map(|_| s.next_batch()).collect();
        let mut uniq = seen.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
    }
}
