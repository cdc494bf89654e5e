//! Invariance probes for a trained model.
//!
//! * [`prediction_agreement`]: share of paired probe points whose argmax
//!   prediction is the same in every domain.
//! * [`domain_alignment_matrix`]: pairwise MMD between the representations of
//!   different domains, optionally per class.
//! * [`posterior_kl_matrix`]: the individual KL terms of the alignment loss
//!   for one batch.
//! * [`paired_vs_unpaired_kl`]: mean alignment loss on paired and on unpaired
//!   batches of equal size.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Batch, BatchSource, DomainSuite, StratifiedSampler};
use crate::error::{HirError, Result};
use crate::losses::{self, kl_from_log, BatchLabels, HirOptions};
use crate::models::ModelParams;

/// Number of batches averaged by [`paired_vs_unpaired_kl`] in each mode.
pub const KL_PROBE_BATCHES: usize = 50;

/// Square matrix with `None` marking entries that could not be computed.
pub type Matrix = Vec<Vec<Option<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrices {
    pub bandwidth: f64,
    /// Class-agnostic matrix, or the entrywise mean of `per_class`.
    pub matrix: Matrix,
    pub per_class: Vec<Matrix>,
}

impl AlignmentMatrices {
    /// Mean of the present off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        mean_off_diagonal(&self.matrix)
    }
}

pub fn mean_off_diagonal(m: &Matrix) -> Option<f64> {
    let vals: Vec<f64> = m
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i))
        .filter_map(|(_, v)| *v)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEntry {
    pub i: usize,
    pub j: usize,
    pub class: usize,
    pub value: f64,
}

/// Upper-triangular KL terms of one batch; only same-class pairs are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlMatrix {
    pub n: usize,
    pub entries: Vec<KlEntry>,
}

impl KlMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.i == i && e.j == j)
            .map(|e| e.value)
    }

    pub fn present_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.value).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBundle {
    pub domain_params: Vec<f64>,
    pub bandwidth: f64,
    pub domain_mmd: Matrix,
    pub class_mmd: Vec<Matrix>,
    pub agreement: f64,
    pub paired_kl_mean: f64,
    pub unpaired_kl_mean: f64,
    pub posterior_kl_matrix: KlMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagOptions {
    pub probe_size: usize,
    pub per_class_per_domain: usize,
    pub seed: u64,
    pub bandwidth: Option<f64>,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self {
            probe_size: 200,
            per_class_per_domain: 1,
            seed: 0,
            bandwidth: None,
        }
    }
}

/// Base ids present in every domain of the suite.
fn common_base_ids(suite: &DomainSuite) -> Vec<usize> {
    let mut common: Option<BTreeSet<usize>> = None;
    for d in &suite.domains {
        let ids: BTreeSet<usize> = d.samples.iter().map(|s| s.base_id).collect();
        common = Some(match common {
            None => ids,
            Some(prev) => prev.intersection(&ids).copied().collect(),
        });
    }
    common.unwrap_or_default().into_iter().collect()
}

/// Fraction of `probe_size` shared base points (all of them if fewer) whose
/// predicted class is identical across every domain of the suite.
pub fn prediction_agreement(
    params: &ModelParams,
    suite: &DomainSuite,
    probe_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut ids = common_base_ids(suite);
    if ids.is_empty() || probe_size == 0 {
        return Err(HirError::DiagnosticUnavailable(
            "no base id is shared by all domains".into(),
        ));
    }
    if probe_size < ids.len() {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids.truncate(probe_size);
    }
    let mut preds: Vec<Vec<usize>> = Vec::with_capacity(suite.len());
    for domain in &suite.domains {
        let lookup: std::collections::HashMap<usize, usize> = domain
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.base_id, i))
            .collect();
        let rows: Vec<usize> = ids.iter().map(|id| lookup[id]).collect();
        preds.push(params.predict(&domain.features_of(&rows))?);
    }
    let agree = (0..ids.len())
        .filter(|&k| preds.iter().all(|p| p[k] == preds[0][k]))
        .count();
    Ok(agree as f64 / ids.len() as f64)
}

fn mmd_matrix(groups: &[Option<Tensor>], bandwidth: f64) -> Result<Matrix> {
    let n = groups.len();
    let mut m: Matrix = vec![vec![None; n]; n];
    for a in 0..n {
        let Some(za) = &groups[a] else { continue };
        m[a][a] = Some(0.0);
        for b in a + 1..n {
            let Some(zb) = &groups[b] else { continue };
            let v = losses::mmd_rbf_value(za, zb, bandwidth)?;
            m[a][b] = Some(v);
            m[b][a] = Some(v);
        }
    }
    Ok(m)
}

/// Pairwise MMD between domain representations. Domains (or class cells,
/// when `per_class`) with fewer than two rows are marked missing. The
/// bandwidth defaults to the median pairwise distance of the pooled
/// representations.
pub fn domain_alignment_matrix(
    params: &ModelParams,
    suite: &DomainSuite,
    per_class: bool,
    bandwidth: Option<f64>,
) -> Result<AlignmentMatrices> {
    let mut reps = Vec::with_capacity(suite.len());
    for d in &suite.domains {
        reps.push(if d.is_empty() {
            None
        } else {
            Some(params.infer(&d.features())?.0)
        });
    }
    let bandwidth = match bandwidth {
        Some(b) => b,
        None => {
            let pooled: Vec<&[f64]> = reps.iter().flatten().flat_map(|z| z.iter_rows()).collect();
            match Tensor::from_rows(&pooled) {
                Ok(t) => losses::median_bandwidth(&t),
                Err(_) => 1.0,
            }
        }
    };
    let usable = |z: Tensor| (z.rows() >= 2).then_some(z);

    if !per_class {
        let groups: Vec<Option<Tensor>> = reps.into_iter().map(|z| z.and_then(usable)).collect();
        return Ok(AlignmentMatrices {
            bandwidth,
            matrix: mmd_matrix(&groups, bandwidth)?,
            per_class: Vec::new(),
        });
    }

    let mut per_class_mats = Vec::with_capacity(suite.class_count);
    for c in 0..suite.class_count {
        let groups: Vec<Option<Tensor>> = suite
            .domains
            .iter()
            .zip(&reps)
            .map(|(d, z)| {
                let z = z.as_ref()?;
                let rows: Vec<usize> = (0..d.len()).filter(|&i| d.samples[i].y == c).collect();
                usable(z.select_rows(&rows))
            })
            .collect();
        per_class_mats.push(mmd_matrix(&groups, bandwidth)?);
    }
    let n = suite.len();
    let mut mean: Matrix = vec![vec![None; n]; n];
    for (a, row) in mean.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let vals: Vec<f64> = per_class_mats.iter().filter_map(|m| m[a][b]).collect();
            if !vals.is_empty() {
                *cell = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    Ok(AlignmentMatrices {
        bandwidth,
        matrix: mean,
        per_class: per_class_mats,
    })
}

/// KL terms `KL(p_i || p_j)` for `i < j` of the same class, from
/// log-posteriors.
pub fn kl_matrix_from_log_probs(log_probs: &Tensor, labels: &[usize]) -> KlMatrix {
    let n = log_probs.rows();
    let mut entries = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                entries.push(KlEntry {
                    i,
                    j,
                    class: labels[i],
                    value: kl_from_log(log_probs.row(i), log_probs.row(j)),
                });
            }
        }
    }
    KlMatrix { n, entries }
}

pub fn posterior_kl_matrix(params: &ModelParams, batch: &Batch) -> Result<KlMatrix> {
    if batch.is_empty() {
        return Err(HirError::Contract("posterior_kl_matrix needs a non-empty batch".into()));
    }
    let lp = params.logits(&batch.x)?.log_softmax();
    Ok(kl_matrix_from_log_probs(&lp, &batch.labels.labels))
}

/// Mean KL over same-class pairs `i < j` with at least one member in domain
/// `d`, for each `d < n_domains`. `None` for domains without such pairs.
pub fn per_domain_kl(log_probs: &Tensor, labels: &BatchLabels, n_domains: usize) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; n_domains];
    let mut counts = vec![0usize; n_domains];
    let n = labels.len();
    for i in 0..n {
        for j in i + 1..n {
            if labels.labels[i] != labels.labels[j] {
                continue;
            }
            let v = kl_from_log(log_probs.row(i), log_probs.row(j));
            let (di, dj) = (labels.domains[i], labels.domains[j]);
            sums[di] += v;
            counts[di] += 1;
            if dj != di {
                sums[dj] += v;
                counts[dj] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}

fn mean_batch_kl(params: &ModelParams, sampler: &StratifiedSampler<'_>, batches: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut seen = 0usize;
    let mut epoch = 0u64;
    while seen < batches {
        for batch in sampler.epoch(epoch) {
            if seen == batches {
                break;
            }
            let lp = params.logits(&batch.x)?.log_softmax();
            total += kl_matrix_from_log_probs(&lp, &batch.labels.labels).present_sum();
            seen += 1;
        }
        epoch += 1;
    }
    Ok(total / batches as f64)
}

/// Mean alignment loss (literal form) over [`KL_PROBE_BATCHES`] paired and
/// as many unpaired batches with the same cell size.
pub fn paired_vs_unpaired_kl(
    params: &ModelParams,
    suite: &DomainSuite,
    per_class_per_domain: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let paired = StratifiedSampler::new(suite, per_class_per_domain, true, seed)?;
    let unpaired = StratifiedSampler::new(suite, per_class_per_domain, false, seed)?;
    Ok((
        mean_batch_kl(params, &paired, KL_PROBE_BATCHES)?,
        mean_batch_kl(params, &unpaired, KL_PROBE_BATCHES)?,
    ))
}

/// All probes at once.
pub fn diagnose(params: &ModelParams, suite: &DomainSuite, opts: &DiagOptions) -> Result<DiagnosticsBundle> {
    let agnostic = domain_alignment_matrix(params, suite, false, opts.bandwidth)?;
    let per_class = domain_alignment_matrix(params, suite, true, Some(agnostic.bandwidth))?;
    let agreement = prediction_agreement(params, suite, opts.probe_size, opts.seed)?;
    let (paired_kl_mean, unpaired_kl_mean) =
        paired_vs_unpaired_kl(params, suite, opts.per_class_per_domain, opts.seed)?;
    let probe = StratifiedSampler::new(suite, opts.per_class_per_domain, false, opts.seed)?
        .epoch(0)
        .next()
        .ok_or_else(|| HirError::DiagnosticUnavailable("no probe batch".into()))?;
    Ok(DiagnosticsBundle {
        domain_params: suite.domain_params.clone(),
        bandwidth: agnostic.bandwidth,
        domain_mmd: agnostic.matrix,
        class_mmd: per_class.per_class,
        agreement,
        paired_kl_mean,
        unpaired_kl_mean,
        posterior_kl_matrix: posterior_kl_matrix(params, &probe)?,
    })
}

/// Scalar part of a bundle, written as `diag_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    pub agreement: f64,
    pub paired_kl_mean: f64,
    pub unpaired_kl_mean: f64,
    pub bandwidth: f64,
    pub domain_params: Vec<f64>,
    pub mean_off_diagonal_mmd: Option<f64>,
}

impl DiagnosticsBundle {
    pub fn summary(&self) -> DiagSummary {
        DiagSummary {
            agreement: self.agreement,
            paired_kl_mean: self.paired_kl_mean,
            unpaired_kl_mean: self.unpaired_kl_mean,
            bandwidth: self.bandwidth,
            domain_params: self.domain_params.clone(),
            mean_off_diagonal_mmd: mean_off_diagonal(&self.domain_mmd),
        }
    }
}

/// Square matrix with a header row of domain parameters; missing entries
/// are empty fields.
pub fn write_matrix_csv<W: Write>(m: &Matrix, domain_params: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(domain_params.iter().map(|p| p.to_string()))?;
    for row in m {
        w.write_record(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))?;
    }
    w.flush()?;
    Ok(())
}

/// `i,j,class,value`, one line per present entry.
pub fn write_posterior_kl_csv<W: Write>(m: &KlMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "class", "value"])?;
    for e in &m.entries {
        w.write_record([e.i.to_string(), e.j.to_string(), e.class.to_string(), e.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `domain_mmd.csv`, `posterior_kl.csv` and `diag_summary.json` into
/// `dir`.
pub fn write_bundle(bundle: &DiagnosticsBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(
        &bundle.domain_mmd,
        &bundle.domain_params,
        std::fs::File::create(dir.join("domain_mmd.csv"))?,
    )?;
    write_posterior_kl_csv(&bundle.posterior_kl_matrix, std::fs::File::create(dir.join("posterior_kl.csv"))?)?;
    std::fs::write(dir.join("diag_summary.json"), serde_json::to_string_pretty(&bundle.summary())?)?;
    Ok(())
}

/// Sanity hook used by tests: the literal alignment loss of a batch.
pub fn batch_hir_value(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let mut g = crate::autodiff::Graph::new();
    let lp = params.logits(&batch.x)?.log_softmax();
    let v = g.constant(lp);
    let (out, _) = losses::hir_kl(&mut g, v, &batch.labels, &HirOptions::default())?;
    g.value(out).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_rotated_suite, DomainDataset, GeneratorKind, Sample};
    use crate::models::{init, MlpSpec};

    fn sign_model() -> ModelParams {
        // logits (x0, -x0): class 0 iff x0 > 0
        let w = Tensor::from_rows(&[[1.0, -1.0], [0.0, 0.0]]).unwrap();
        ModelParams::from_layers(vec![(w, Tensor::zeros(1, 2))]).unwrap()
    }

    fn constant_model() -> ModelParams {
        let w = Tensor::zeros(2, 3);
        let b = Tensor::from_rows(&[[0.1, 0.7, 0.2]]).unwrap();
        ModelParams::from_layers(vec![(w, b)]).unwrap()
    }

    fn suite() -> DomainSuite {
        gen_rotated_suite(GeneratorKind::TwoMoons, 2, 30, &[0.0, 30.0, 60.0], 0.05, 4).unwrap()
    }

    #[test]
    fn constant_model_always_agrees() {
        assert_eq!(prediction_agreement(&constant_model(), &suite(), 40, 0).unwrap(), 1.0);
    }

    #[test]
    fn identical_domains_agree() {
        let s = suite();
        let twin = s.select(&[1, 1]);
        let p = init(&MlpSpec::new(vec![2, 8, 2], 3)).unwrap();
        assert_eq!(prediction_agreement(&p, &twin, 1000, 0).unwrap(), 1.0);
    }

    #[test]
    fn quarter_turn_flips_sign_predictions() {
        // x0 sign before and after a 90 degree turn (x, y) -> (-y, x)
        let pts = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0], [2.0, -0.5]];
        let mk = |angle: f64| DomainDataset {
            samples: pts
                .iter()
                .enumerate()
                .map(|(i, p)| Sample {
                    x: crate::data::rotate(p, angle).to_vec(),
                    y: 0,
                    base_id: i,
                })
                .collect(),
        };
        let s = DomainSuite {
            domains: vec![mk(0.0), mk(90.0)],
            domain_params: vec![0.0, 90.0],
            class_count: 2,
        };
        // rotated x0 = -y: agree iff sign(x) == sign(-y) -> points 1, 2, 4
        let a = prediction_agreement(&sign_model(), &s, 10, 0).unwrap();
        assert!((a - 3.0 / 5.0).abs() < 1e-12, "{a}");
    }

    #[test]
    fn agreement_needs_shared_base_ids() {
        let mut s = suite();
        for smp in &mut s.domains[1].samples {
            smp.base_id += 10_000;
        }
        assert!(matches!(
            prediction_agreement(&sign_model(), &s, 10, 0),
            Err(HirError::DiagnosticUnavailable(_))
        ));
    }

    #[test]
    fn agreement_ignores_logit_scale() {
        let s = suite();
        let p = init(&MlpSpec::new(vec![2, 16, 2], 8)).unwrap();
        let mut scaled = p.clone();
        let last = scaled.layer_count() - 1;
        for v in scaled.weight_mut(last).data_mut() {
            *v *= 3.7;
        }
        for v in scaled.bias_mut(last).data_mut() {
            *v *= 3.7;
        }
        assert_eq!(
            prediction_agreement(&p, &s, 60, 1).unwrap(),
            prediction_agreement(&scaled, &s, 60, 1).unwrap()
        );
    }

    #[test]
    fn mmd_matrix_properties() {
        let s = suite();
        let p = init(&MlpSpec::new(vec![2, 8, 2], 2)).unwrap();
        let m = domain_alignment_matrix(&p, &s, false, None).unwrap();
        assert!(m.bandwidth > 0.0);
        for a in 0..3 {
            assert_eq!(m.matrix[a][a], Some(0.0));
            for b in 0..3 {
                let v = m.matrix[a][b].unwrap();
                assert!(v >= -1e-12);
                assert_eq!(m.matrix[a][b], m.matrix[b][a]);
            }
        }
        let twin = s.select(&[0, 0, 0]);
        let m = domain_alignment_matrix(&p, &twin, false, None).unwrap();
        assert!(m.mean_off_diagonal().unwrap().abs() < 1e-12);
    }

    #[test]
    fn far_apart_domains_saturate_the_kernel() {
        // a single identity layer keeps z = x
        let ident = ModelParams::from_layers(vec![(Tensor::identity(2), Tensor::zeros(1, 2))]).unwrap();
        let mk = |shift: f64| DomainDataset {
            samples: (0..10)
                .map(|i| Sample {
                    x: vec![shift + 0.01 * i as f64, 0.0],
                    y: i % 2,
                    base_id: i,
                })
                .collect(),
        };
        let s = DomainSuite {
            domains: vec![mk(0.0), mk(1e4)],
            domain_params: vec![0.0, 1.0],
            class_count: 2,
        };
        let m = domain_alignment_matrix(&ident, &s, false, Some(1.0)).unwrap();
        let v = m.matrix[0][1].unwrap();
        assert!(v > 1.99 && v <= 2.0, "{v}");
    }

    #[test]
    fn per_class_matrix_marks_missing_cells() {
        let mut s = suite();
        s.domains[2].samples.retain(|smp| smp.y == 0);
        let p = init(&MlpSpec::new(vec![2, 8, 2], 2)).unwrap();
        let m = domain_alignment_matrix(&p, &s, true, None).unwrap();
        assert_eq!(m.per_class.len(), 2);
        assert!(m.per_class[1][0][2].is_none());
        assert!(m.per_class[1][2][2].is_none());
        assert!(m.per_class[0][0][2].is_some());
        // class-1 entries missing, so the mean falls back to class 0 alone
        assert_eq!(m.matrix[0][2], m.per_class[0][0][2]);
    }

    #[test]
    fn kl_matrix_matches_batch_loss() {
        let s = suite();
        let p = init(&MlpSpec::new(vec![2, 8, 2], 6)).unwrap();
        let sampler = StratifiedSampler::new(&s, 5, false, 0).unwrap();
        for batch in sampler.batches(0) {
            let m = posterior_kl_matrix(&p, &batch).unwrap();
            assert!((m.present_sum() - batch_hir_value(&p, &batch).unwrap()).abs() < 1e-10);
            assert!(m.entries.iter().all(|e| e.i < e.j && e.value >= -1e-15));
        }
    }

    #[test]
    fn five_sample_single_class_batch_has_ten_entries() {
        let lp = Tensor::from_rows(&[[0.2, 0.8], [0.3, 0.7], [0.5, 0.5], [0.6, 0.4], [0.9, 0.1]])
            .unwrap()
            .map(f64::ln);
        let m = kl_matrix_from_log_probs(&lp, &[1; 5]);
        assert_eq!(m.entries.len(), 10);
        assert!(m.get(0, 4).is_some() && m.get(4, 0).is_none());

        let same = Tensor::filled(4, 3, -(3f64).ln());
        let m = kl_matrix_from_log_probs(&same, &[0, 0, 1, 1]);
        assert_eq!(m.entries.len(), 2);
        assert!(m.entries.iter().all(|e| e.value == 0.0));
        assert!(m.get(0, 2).is_none());
    }

    #[test]
    fn paired_kl_vanishes_for_noise_free_identical_domains() {
        let base = gen_rotated_suite(GeneratorKind::TwoMoons, 2, 20, &[10.0], 0.0, 1).unwrap();
        let twin = base.select(&[0, 0, 0]);
        let p = init(&MlpSpec::new(vec![2, 8, 2], 4)).unwrap();
        let (paired, unpaired) = paired_vs_unpaired_kl(&p, &twin, 1, 3).unwrap();
        assert!(paired.abs() < 1e-12);
        assert!(unpaired >= 0.0);
    }

    #[test]
    fn per_domain_kl_counts_pairs_touching_each_domain() {
        let lp = Tensor::from_rows(&[[0.5, 0.5], [0.25, 0.75], [0.5, 0.5]]).unwrap().map(f64::ln);
        let labels = BatchLabels::new(vec![0, 0, 1], vec![0, 1, 2]);
        let v = per_domain_kl(&lp, &labels, 3);
        let k = kl_from_log(lp.row(0), lp.row(1));
        assert_eq!(v, vec![Some(k), Some(k), None]);
    }

    #[test]
    fn bundle_files() {
        let s = suite();
        let p = init(&MlpSpec::new(vec![2, 8, 2], 1)).unwrap();
        let b = diagnose(&p, &s, &DiagOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let mmd = std::fs::read_to_string(dir.path().join("domain_mmd.csv")).unwrap();
        assert_eq!(mmd.lines().next().unwrap(), "0,30,60");
        assert_eq!(mmd.lines().count(), 4);
        let kl = std::fs::read_to_string(dir.path().join("posterior_kl.csv")).unwrap();
        assert_eq!(kl.lines().count(), 1 + b.posterior_kl_matrix.entries.len());
        let summary: DiagSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("diag_summary.json")).unwrap()).unwrap();
        assert_eq!(summary, b.summary());
    }

    #[test]
    fn full_bundle() {
        let s = suite();
        let p = init(&MlpSpec::new(vec![2, 8, 2], 1)).unwrap();
        let b = diagnose(&p, &s, &DiagOptions::default()).unwrap();
        assert_eq!(b.domain_mmd.len(), 3);
        assert_eq!(b.class_mmd.len(), 2);
        assert!((0.0..=1.0).contains(&b.agreement));
        assert!(b.paired_kl_mean >= 0.0 && b.unpaired_kl_mean >= 0.0);
        assert_eq!(b.posterior_kl_matrix.n, 6);
    }
}
