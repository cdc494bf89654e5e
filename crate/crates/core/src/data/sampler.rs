//! Batch construction.
//!
//! [`StratifiedSampler`] draws a fixed number of samples from every
//! `(domain, class)` cell per batch. In paired mode the draws of one class
//! use the same base ids in every domain; in unpaired mode each domain
//! shuffles independently. [`FoldSampler`] splits each domain into
//! class-balanced folds and forms batch `b` from fold `b` of every domain.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DomainDataset, DomainSuite};
use crate::autodiff::Tensor;
use crate::error::{HirError, Result};
use crate::losses::BatchLabels;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: BatchLabels,
    pub base_ids: Vec<usize>,
    /// `(domain, sample index)` of every row.
    pub members: Vec<(usize, usize)>,
    pub paired: bool,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn assemble(suite: &DomainSuite, members: Vec<(usize, usize)>, paired: bool) -> Batch {
        let rows: Vec<&[f64]> = members
            .iter()
            .map(|&(d, i)| suite.domains[d].samples[i].x.as_slice())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, suite.feature_dim()));
        let sample = |&(d, i): &(usize, usize)| &suite.domains[d].samples[i];
        let labels: Vec<usize> = members.iter().map(|m| sample(m).y).collect();
        let domains: Vec<usize> = members.iter().map(|&(d, _)| d).collect();
        let base_ids: Vec<usize> = members.iter().map(|m| sample(m).base_id).collect();
        let mut batch_labels = BatchLabels::new(labels, domains);
        if paired {
            batch_labels.pair_id = Some(base_ids.clone());
        }
        Batch {
            x,
            labels: batch_labels,
            base_ids,
            members,
            paired,
        }
    }
}

/// Anything that yields the batches of an epoch.
pub trait BatchSource {
    fn batches_per_epoch(&self) -> usize;
    fn epoch(&self, epoch: u64) -> Box<dyn Iterator<Item = Batch> + '_>;
    fn warnings(&self) -> &[String];
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Endless sequence of shuffled passes over `items`.
struct Cycler<T> {
    items: Vec<T>,
    order: Vec<T>,
    pos: usize,
}

impl<T: Copy> Cycler<T> {
    fn new(items: Vec<T>) -> Self {
        Self {
            items,
            order: Vec::new(),
            pos: 0,
        }
    }

    /// Up to `k` items, fewer only if the cell itself is smaller.
    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        let want = k.min(self.items.len());
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.pos == self.order.len() {
                self.order = self.items.clone();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Class- and domain-stratified batches: `per_class_per_domain` samples from
/// every non-empty `(domain, class)` cell in each batch.
///
/// An epoch has `ceil(largest cell / per_class_per_domain)` batches. Cells
/// that run out are reshuffled and revisited, so within an epoch every sample
/// of a cell is drawn either `q` or `q + 1` times. Rows are ordered by domain,
/// then class.
#[derive(Debug, Clone)]
pub struct StratifiedSampler<'a> {
    suite: &'a DomainSuite,
    per_cell: usize,
    paired: bool,
    seed: u64,
    /// Unpaired: sample indices per `[domain][class]`.
    cells: Vec<Vec<Vec<usize>>>,
    /// Paired: base ids present in every domain, per class.
    shared_keys: Vec<Vec<usize>>,
    /// Paired: `base_id -> sample index`, per domain.
    lookup: Vec<HashMap<usize, usize>>,
    batches: usize,
    warnings: Vec<String>,
}

impl<'a> StratifiedSampler<'a> {
    pub fn new(suite: &'a DomainSuite, per_class_per_domain: usize, paired: bool, seed: u64) -> Result<Self> {
        if per_class_per_domain == 0 {
            return Err(HirError::Config("per_class_per_domain must be at least 1".into()));
        }
        if suite.is_empty() {
            return Err(HirError::Config("cannot sample from an empty suite".into()));
        }
        let m = suite.class_count;
        let cells: Vec<Vec<Vec<usize>>> = suite
            .domains
            .iter()
            .map(|d| d.indices_by_class(m))
            .collect();
        let mut warnings = Vec::new();
        for (d, per_class) in cells.iter().enumerate() {
            for (c, cell) in per_class.iter().enumerate() {
                if cell.is_empty() {
                    warnings.push(format!("domain {d}, class {c}: empty cell skipped"));
                } else if cell.len() < per_class_per_domain {
                    warnings.push(format!(
                        "domain {d}, class {c}: only {} samples, fewer than {per_class_per_domain} per batch",
                        cell.len()
                    ));
                }
            }
        }

        let lookup: Vec<HashMap<usize, usize>> = suite
            .domains
            .iter()
            .map(|d| {
                d.samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.base_id, i))
                    .collect()
            })
            .collect();
        let mut shared_keys = Vec::new();
        if paired {
            for c in 0..m {
                let mut common: Option<BTreeSet<usize>> = None;
                for (d, domain) in suite.domains.iter().enumerate() {
                    let ids: BTreeSet<usize> =
                        cells[d][c].iter().map(|&i| domain.samples[i].base_id).collect();
                    common = Some(match common {
                        None => ids,
                        Some(prev) => prev.intersection(&ids).copied().collect(),
                    });
                }
                let keys: Vec<usize> = common.unwrap_or_default().into_iter().collect();
                if keys.is_empty() {
                    warnings.push(format!("class {c}: no base id shared by all domains"));
                }
                shared_keys.push(keys);
            }
        }

        let largest = if paired {
            shared_keys.iter().map(Vec::len).max().unwrap_or(0)
        } else {
            cells.iter().flatten().map(Vec::len).max().unwrap_or(0)
        };
        if largest == 0 {
            return Err(HirError::Config("every (domain, class) cell is empty".into()));
        }
        Ok(Self {
            suite,
            per_cell: per_class_per_domain,
            paired,
            seed,
            cells,
            shared_keys,
            lookup,
            batches: largest.div_ceil(per_class_per_domain),
            warnings,
        })
    }

    pub fn batches(&self, epoch: u64) -> Vec<Batch> {
        self.epoch(epoch).collect()
    }

    fn epoch_members(&self, epoch: u64) -> Vec<Vec<(usize, usize)>> {
        let mut rng = epoch_rng(self.seed, epoch);
        let mut out = vec![Vec::new(); self.batches];
        if self.paired {
            let mut cyclers: Vec<Cycler<usize>> =
                self.shared_keys.iter().map(|k| Cycler::new(k.clone())).collect();
            let draws: Vec<Vec<Vec<usize>>> = (0..self.batches)
                .map(|_| cyclers.iter_mut().map(|c| c.take(self.per_cell, &mut rng)).collect())
                .collect();
            for (b, per_class) in draws.into_iter().enumerate() {
                for d in 0..self.suite.len() {
                    for keys in &per_class {
                        out[b].extend(keys.iter().map(|k| (d, self.lookup[d][k])));
                    }
                }
            }
        } else {
            let mut cyclers: Vec<Vec<Cycler<usize>>> = self
                .cells
                .iter()
                .map(|per_class| per_class.iter().map(|c| Cycler::new(c.clone())).collect())
                .collect();
            for members in out.iter_mut() {
                for (d, per_class) in cyclers.iter_mut().enumerate() {
                    for cycler in per_class.iter_mut() {
                        members.extend(cycler.take(self.per_cell, &mut rng).into_iter().map(|i| (d, i)));
                    }
                }
            }
        }
        out
    }
}

impl BatchSource for StratifiedSampler<'_> {
    fn batches_per_epoch(&self) -> usize {
        self.batches
    }

    fn epoch(&self, epoch: u64) -> Box<dyn Iterator<Item = Batch> + '_> {
        let paired = self.paired;
        Box::new(
            self.epoch_members(epoch)
                .into_iter()
                .map(move |m| Batch::assemble(self.suite, m, paired)),
        )
    }

    fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Partitions a dataset into `n_folds` class-balanced folds.
///
/// Each class is shuffled and dealt round-robin, starting where the previous
/// class stopped, so every fold holds `floor(n_c / F)` or `ceil(n_c / F)`
/// samples of class `c` and fold sizes differ by at most one per class.
pub fn stratified_folds(dataset: &DomainDataset, n_folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_folds == 0 {
        return Err(HirError::Config("n_folds must be at least 1".into()));
    }
    let m = dataset.samples.iter().map(|s| s.y + 1).max().unwrap_or(0);
    let cells = dataset.indices_by_class(m);
    let smallest = cells.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0);
    if n_folds > smallest {
        return Err(HirError::Config(format!(
            "{n_folds} folds requested but the smallest class has {smallest} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); n_folds];
    let mut offset = 0usize;
    for mut cell in cells {
        cell.shuffle(&mut rng);
        for (k, idx) in cell.iter().enumerate() {
            folds[(offset + k) % n_folds].push(*idx);
        }
        offset = (offset + cell.len()) % n_folds;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Class-stratified split; each class contributes `round(fraction * n_c)`
/// samples to the training part. Original order is kept within each part.
pub fn train_test_split(
    dataset: &DomainDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(HirError::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let m = dataset.samples.iter().map(|s| s.y + 1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut cell in dataset.indices_by_class(m) {
        cell.shuffle(&mut rng);
        let n_train = (train_fraction * cell.len() as f64).round() as usize;
        train.extend_from_slice(&cell[..n_train]);
        test.extend_from_slice(&cell[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Batch `b` is the union of fold `b` of every domain; folds are split once
/// and the batch order is reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct FoldSampler<'a> {
    suite: &'a DomainSuite,
    /// `[domain][fold] -> sample indices`.
    folds: Vec<Vec<Vec<usize>>>,
    n_folds: usize,
    seed: u64,
    warnings: Vec<String>,
}

impl<'a> FoldSampler<'a> {
    pub fn new(suite: &'a DomainSuite, n_folds: usize, seed: u64) -> Result<Self> {
        let mut folds = Vec::with_capacity(suite.len());
        let mut warnings = Vec::new();
        for (d, domain) in suite.domains.iter().enumerate() {
            if domain.is_empty() {
                warnings.push(format!("domain {d}: empty, contributes no folds"));
                folds.push(vec![Vec::new(); n_folds]);
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            folds.push(stratified_folds(domain, n_folds, rand::Rng::random(&mut rng))?);
        }
        Ok(Self {
            suite,
            folds,
            n_folds,
            seed,
            warnings,
        })
    }
}

impl BatchSource for FoldSampler<'_> {
    fn batches_per_epoch(&self) -> usize {
        self.n_folds
    }

    fn epoch(&self, epoch: u64) -> Box<dyn Iterator<Item = Batch> + '_> {
        let mut order: Vec<usize> = (0..self.n_folds).collect();
        order.shuffle(&mut epoch_rng(self.seed, epoch));
        Box::new(order.into_iter().map(move |b| {
            let members = self
                .folds
                .iter()
                .enumerate()
                .flat_map(|(d, f)| f[b].iter().map(move |&i| (d, i)))
                .collect();
            Batch::assemble(self.suite, members, false)
        }))
    }

    fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_prior_shift, gen_rotated_suite, GeneratorKind, PriorShiftSpec, Sample};

    fn gaussians(classes: usize, n: usize, domains: usize) -> DomainSuite {
        let angles: Vec<f64> = (0..domains).map(|d| 15.0 * d as f64).collect();
        gen_rotated_suite(GeneratorKind::Gaussians, classes, n, &angles, 0.05, 21).unwrap()
    }

    #[test]
    fn batch_sizes_follow_the_cell_grid() {
        let s = gaussians(10, 100, 5);
        let sampler = StratifiedSampler::new(&s, 5, false, 0).unwrap();
        assert_eq!(sampler.batches_per_epoch(), 20);
        let batches = sampler.batches(0);
        assert_eq!(batches.len(), 20);
        assert!(batches.iter().all(|b| b.len() == 250));

        let sampler = StratifiedSampler::new(&s, 1, true, 0).unwrap();
        let b = sampler.epoch(3).next().unwrap();
        assert_eq!(b.len(), 50);
        assert_eq!(b.labels.pair_id.as_ref().unwrap(), &b.base_ids);
    }

    #[test]
    fn every_cell_contributes_exactly_k() {
        let s = gaussians(3, 12, 4);
        for paired in [false, true] {
            let sampler = StratifiedSampler::new(&s, 4, paired, 7).unwrap();
            for b in sampler.batches(1) {
                let mut counts = vec![vec![0; 3]; 4];
                for (&d, &y) in b.labels.domains.iter().zip(&b.labels.labels) {
                    counts[d][y] += 1;
                }
                assert!(counts.iter().flatten().all(|&c| c == 4));
            }
        }
    }

    #[test]
    fn paired_batches_share_base_ids_across_domains() {
        let s = gaussians(4, 30, 5);
        let sampler = StratifiedSampler::new(&s, 3, true, 2).unwrap();
        for b in sampler.batches(0) {
            for c in 0..4 {
                let ids = |d: usize| -> BTreeSet<usize> {
                    (0..b.len())
                        .filter(|&i| b.labels.domains[i] == d && b.labels.labels[i] == c)
                        .map(|i| b.base_ids[i])
                        .collect()
                };
                for d in 1..5 {
                    assert_eq!(ids(d), ids(0));
                }
            }
        }
    }

    #[test]
    fn epoch_covers_full_cells_once() {
        let s = gaussians(2, 20, 3);
        let sampler = StratifiedSampler::new(&s, 5, false, 4).unwrap();
        let mut seen = HashMap::new();
        for b in sampler.batches(0) {
            for m in b.members {
                *seen.entry(m).or_insert(0) += 1;
            }
        }
        assert_eq!(seen.len(), 3 * 40);
        assert!(seen.values().all(|&v| v == 1));
    }

    #[test]
    fn uneven_cells_are_visited_evenly() {
        let s = gaussians(2, 40, 2);
        let spec = PriorShiftSpec {
            priors: vec![vec![0.8, 0.2], vec![0.5, 0.5]],
        };
        let s = apply_prior_shift(&s, &spec, 0).unwrap();
        assert_eq!(s.domains[0].class_counts(2), vec![40, 10]);
        let sampler = StratifiedSampler::new(&s, 3, false, 5).unwrap();
        assert_eq!(sampler.batches_per_epoch(), 14);
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        for b in sampler.batches(0) {
            for m in b.members {
                *seen.entry(m).or_default() += 1;
            }
        }
        // minority cell: 42 draws over 10 samples -> 4 or 5 visits each
        for i in s.domains[0].indices_by_class(2)[1].iter() {
            let v = seen[&(0, *i)];
            assert!(v == 4 || v == 5, "{v}");
        }
    }

    #[test]
    fn empty_cells_are_skipped_with_a_warning() {
        let s = gaussians(2, 10, 2);
        let spec = PriorShiftSpec {
            priors: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
        };
        let s = apply_prior_shift(&s, &spec, 0).unwrap();
        let sampler = StratifiedSampler::new(&s, 2, false, 0).unwrap();
        assert_eq!(sampler.warnings().len(), 1);
        let b = sampler.epoch(0).next().unwrap();
        assert_eq!(b.len(), 6);
        assert!(!b.labels.labels.iter().zip(&b.labels.domains).any(|(&y, &d)| y == 1 && d == 0));
    }

    #[test]
    fn sampling_is_deterministic_and_seed_dependent() {
        let s = gaussians(3, 20, 3);
        let a = StratifiedSampler::new(&s, 2, false, 9).unwrap().batches(4);
        let b = StratifiedSampler::new(&s, 2, false, 9).unwrap().batches(4);
        let c = StratifiedSampler::new(&s, 2, false, 10).unwrap().batches(4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let next_epoch = StratifiedSampler::new(&s, 2, false, 9).unwrap().batches(5);
        assert_ne!(a, next_epoch);
    }

    #[test]
    fn rejects_zero_per_cell() {
        let s = gaussians(2, 5, 2);
        assert!(matches!(
            StratifiedSampler::new(&s, 0, false, 0),
            Err(HirError::Config(_))
        ));
    }

    fn class_dataset(per_class: &[usize]) -> DomainDataset {
        let mut samples = Vec::new();
        for (y, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    x: vec![i as f64, y as f64],
                    y,
                    base_id: samples.len(),
                });
            }
        }
        DomainDataset::new(samples)
    }

    #[test]
    fn folds_partition_with_balanced_classes() {
        let data = class_dataset(&[100; 5]);
        let folds = stratified_folds(&data, 80, 3).unwrap();
        assert_eq!(folds.len(), 80);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        // 500 / 80: twenty folds of 7, sixty of 6
        assert_eq!(sizes.iter().filter(|&&s| s == 7).count(), 20);
        assert_eq!(sizes.iter().filter(|&&s| s == 6).count(), 60);
        for f in &folds {
            let sub = data.subset(f);
            assert!(sub.class_counts(5).iter().all(|&c| c == 1 || c == 2));
        }
    }

    #[test]
    fn single_fold_and_too_many_folds() {
        let data = class_dataset(&[4, 7]);
        let folds = stratified_folds(&data, 1, 0).unwrap();
        assert_eq!(folds, vec![(0..11).collect::<Vec<_>>()]);
        assert!(matches!(stratified_folds(&data, 5, 0), Err(HirError::Config(_))));
        assert!(matches!(stratified_folds(&data, 0, 0), Err(HirError::Config(_))));
    }

    #[test]
    fn split_is_stratified_and_partitions() {
        let data = class_dataset(&[100, 100, 100]);
        let (train, test) = train_test_split(&data, 0.7, 1).unwrap();
        assert_eq!(train.class_counts(3), vec![70; 3]);
        assert_eq!(test.class_counts(3), vec![30; 3]);
        let mut ids: Vec<usize> = train.samples.iter().chain(&test.samples).map(|s| s.base_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..300).collect::<Vec<_>>());
        let (train2, _) = train_test_split(&data, 0.7, 2).unwrap();
        assert_ne!(train, train2);
        for bad in [0.0, 1.0, -0.5, 1.5] {
            assert!(matches!(train_test_split(&data, bad, 0), Err(HirError::Config(_))));
        }
    }

    #[test]
    fn fold_batches_take_one_fold_per_domain() {
        let s = gaussians(2, 20, 3);
        let sampler = FoldSampler::new(&s, 4, 0).unwrap();
        let batches: Vec<Batch> = sampler.epoch(0).collect();
        assert_eq!(batches.len(), 4);
        let mut seen = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 30);
            for d in 0..3 {
                assert_eq!(b.labels.domains.iter().filter(|&&x| x == d).count(), 10);
            }
            seen.extend(b.members.iter().copied());
        }
        assert_eq!(seen.len(), 120);
    }
}
