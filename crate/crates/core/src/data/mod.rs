//! Synthetic ordered domains and their sampling protocols.
//!
//! A [`DomainSuite`] is an ordered list of domains generated from one base
//! point set by rotation about the origin. Every domain holds the same base
//! points (identified by `base_id`), each perturbed by fresh per-domain
//! Gaussian noise, so samples sharing a `base_id` are near-rotations of each
//! other.

mod io;
mod sampler;

pub use io::{read_suite_csv, write_suite_csv};
pub use sampler::{
    stratified_folds, train_test_split, Batch, BatchSource, FoldSampler, StratifiedSampler,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{HirError, Result};

pub const DEFAULT_ANGLES: [f64; 6] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    /// Identity of the underlying base point, shared across domains.
    pub base_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn features(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.x.as_slice()).collect();
        Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, 0))
    }

    pub fn features_of(&self, indices: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.samples[i].x.as_slice()).collect();
        Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, 0))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn class_counts(&self, class_count: usize) -> Vec<usize> {
        let mut counts = vec![0; class_count];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self, class_count: usize) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); class_count];
        for (i, s) in self.samples.iter().enumerate() {
            cells[s.y].push(i);
        }
        cells
    }

    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSuite {
    pub domains: Vec<DomainDataset>,
    /// Rotation angle in degrees, one per domain.
    pub domain_params: Vec<f64>,
    pub class_count: usize,
}

impl DomainSuite {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.domains
            .iter()
            .map(DomainDataset::feature_dim)
            .find(|&d| d > 0)
            .unwrap_or(0)
    }

    /// Suite restricted to the given domains, in the given order.
    pub fn select(&self, keep: &[usize]) -> DomainSuite {
        DomainSuite {
            domains: keep.iter().map(|&d| self.domains[d].clone()).collect(),
            domain_params: keep.iter().map(|&d| self.domain_params[d]).collect(),
            class_count: self.class_count,
        }
    }

    /// Suite with one domain removed.
    pub fn without(&self, held_out: usize) -> DomainSuite {
        let keep: Vec<usize> = (0..self.len()).filter(|&d| d != held_out).collect();
        self.select(&keep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Two interleaved half circles, centered on the origin. Always 2 classes.
    TwoMoons,
    /// Isotropic Gaussian blobs with centers spaced along the x axis.
    Gaussians,
}

impl std::str::FromStr for GeneratorKind {
    type Err = HirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(GeneratorKind::TwoMoons),
            "gaussians" => Ok(GeneratorKind::Gaussians),
            other => Err(HirError::Config(format!("unknown generator kind {other:?}"))),
        }
    }
}

/// Per-domain class priors `P(Y | D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorShiftSpec {
    pub priors: Vec<Vec<f64>>,
}

impl PriorShiftSpec {
    pub fn uniform(domains: usize, classes: usize) -> Self {
        Self {
            priors: vec![vec![1.0 / classes as f64; classes]; domains],
        }
    }

    pub fn validate(&self, domains: usize, classes: usize) -> Result<()> {
        if self.priors.len() != domains {
            return Err(HirError::Config(format!(
                "prior shift lists {} domains, suite has {domains}",
                self.priors.len()
            )));
        }
        for (d, p) in self.priors.iter().enumerate() {
            if p.len() != classes {
                return Err(HirError::Config(format!(
                    "domain {d} prior has {} entries, expected {classes}",
                    p.len()
                )));
            }
            if p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(HirError::Config(format!("domain {d} prior {p:?} is not a distribution")));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(HirError::Config(format!(
                    "domain {d} prior sums to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to rebuild a suite; serialized as the suite manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub generator: GeneratorKind,
    pub n_per_class: usize,
    #[serde(default = "default_angles")]
    pub angles: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_shift: Option<PriorShiftSpec>,
}

fn default_angles() -> Vec<f64> {
    DEFAULT_ANGLES.to_vec()
}

fn default_class_count() -> usize {
    2
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::TwoMoons,
            n_per_class: 100,
            angles: default_angles(),
            noise_sd: 0.08,
            seed: 0,
            class_count: 2,
            prior_shift: None,
        }
    }
}

impl SuiteSpec {
    pub fn build(&self) -> Result<DomainSuite> {
        let suite = gen_rotated_suite(
            self.generator,
            self.class_count,
            self.n_per_class,
            &self.angles,
            self.noise_sd,
            self.seed,
        )?;
        match &self.prior_shift {
            Some(spec) => apply_prior_shift(&suite, spec, self.seed ^ 0x5052_494f_5253_4854),
            None => Ok(suite),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SuiteSpec = serde_json::from_str(text)?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn rotate(point: &[f64], degrees: f64) -> [f64; 2] {
    let (s, c) = degrees.to_radians().sin_cos();
    [point[0] * c - point[1] * s, point[0] * s + point[1] * c]
}

fn base_points(
    kind: GeneratorKind,
    class_count: usize,
    n_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(class_count * n_per_class);
    match kind {
        GeneratorKind::TwoMoons => {
            if class_count != 2 {
                return Err(HirError::Config(format!(
                    "two_moons has exactly 2 classes, got class_count {class_count}"
                )));
            }
            for y in 0..2 {
                for i in 0..n_per_class {
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    let (s, c) = t.sin_cos();
                    let p = if y == 0 { [c, s] } else { [1.0 - c, 0.5 - s] };
                    out.push(Sample {
                        x: vec![p[0] - 0.5, p[1] - 0.25],
                        y,
                        base_id: y * n_per_class + i,
                    });
                }
            }
        }
        GeneratorKind::Gaussians => {
            if class_count < 2 {
                return Err(HirError::Config("gaussians need at least 2 classes".into()));
            }
            let spread = Normal::new(0.0, 0.5).expect("valid sd");
            let mid = (class_count - 1) as f64 / 2.0;
            for y in 0..class_count {
                let center = [2.0 * (y as f64 - mid), 0.0];
                for i in 0..n_per_class {
                    out.push(Sample {
                        x: vec![
                            center[0] + spread.sample(rng),
                            center[1] + spread.sample(rng),
                        ],
                        y,
                        base_id: y * n_per_class + i,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Generates one domain per angle: the shared base set rotated by that angle
/// plus independent `N(0, noise_sd^2)` noise per coordinate.
pub fn gen_rotated_suite(
    kind: GeneratorKind,
    class_count: usize,
    n_per_class: usize,
    angles: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<DomainSuite> {
    if n_per_class == 0 {
        return Err(HirError::Config("n_per_class must be at least 1".into()));
    }
    if angles.is_empty() {
        return Err(HirError::Config("at least one angle required".into()));
    }
    for (i, a) in angles.iter().enumerate() {
        if !a.is_finite() {
            return Err(HirError::Config(format!("angle {a} is not finite")));
        }
        if angles[..i].contains(a) {
            return Err(HirError::Config(format!("angle {a} appears twice")));
        }
    }
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(HirError::Config(format!("noise_sd must be >= 0, got {noise_sd}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = base_points(kind, class_count, n_per_class, &mut rng)?;
    let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("valid sd"));

    let domains = angles
        .iter()
        .enumerate()
        .map(|(k, &angle)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let samples = base
                .iter()
                .map(|s| {
                    let mut p = rotate(&s.x, angle);
                    if let Some(n) = &noise {
                        p[0] += n.sample(&mut rng);
                        p[1] += n.sample(&mut rng);
                    }
                    Sample {
                        x: p.to_vec(),
                        y: s.y,
                        base_id: s.base_id,
                    }
                })
                .collect();
            DomainDataset { samples }
        })
        .collect();

    Ok(DomainSuite {
        domains,
        domain_params: angles.to_vec(),
        class_count,
    })
}

/// Subsamples every domain towards its class prior.
///
/// For a domain with class counts `n_c` and prior `p_c`, the largest total
/// `T = min_{p_c > 0} n_c / p_c` is kept and class `c` retains
/// `min(n_c, round(p_c * T))` randomly chosen samples in their original
/// order. A class with prior 0 is removed from the domain.
pub fn apply_prior_shift(suite: &DomainSuite, spec: &PriorShiftSpec, seed: u64) -> Result<DomainSuite> {
    let m = suite.class_count;
    spec.validate(suite.len(), m)?;
    let mut out = suite.clone();
    for (d, (domain, prior)) in out.domains.iter_mut().zip(&spec.priors).enumerate() {
        let cells = domain.indices_by_class(m);
        let total = prior
            .iter()
            .zip(&cells)
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, cell)| cell.len() as f64 / p)
            .fold(f64::INFINITY, f64::min);
        let total = if total.is_finite() { total } else { 0.0 };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d as u64);
        let mut keep = Vec::new();
        for (c, mut cell) in cells.into_iter().enumerate() {
            let target = ((prior[c] * total).round() as usize).min(cell.len());
            cell.shuffle(&mut rng);
            keep.extend_from_slice(&cell[..target]);
        }
        keep.sort_unstable();
        *domain = domain.subset(&keep);
    }
    Ok(out)
}
