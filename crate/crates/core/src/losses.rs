//! Training objectives.
//!
//! * [`cross_entropy`]: mean negative log-likelihood of the true class.
//! * [`hir_kl`]: posterior alignment. For every pair of same-class samples
//!   `i < j` in the batch it adds `KL(p_i || p_j)`, one direction per pair,
//!   the earlier sample being the reference.
//! * [`combined_loss`]: `L_c + alpha * L_h`.
//! * [`mmd_rbf`] / [`domain_mmd_penalty`]: class-agnostic representation
//!   alignment baseline.
//! * [`class_conditional_align`]: class-conditional representation alignment
//!   baseline (squared feature distance of same-class, cross-domain pairs).
//!
//! All KL terms are computed from log-posteriors, so no clamping is needed.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{HirError, Result};

/// Labels, domain indices and optional pairing keys of one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLabels {
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub pair_id: Option<Vec<usize>>,
}

impl BatchLabels {
    pub fn new(labels: Vec<usize>, domains: Vec<usize>) -> Self {
        Self {
            labels,
            domains,
            pair_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.domains.len() != self.labels.len() {
            return Err(HirError::Contract(format!(
                "{} labels but {} domain entries",
                self.labels.len(),
                self.domains.len()
            )));
        }
        if let Some(p) = &self.pair_id {
            if p.len() != self.labels.len() {
                return Err(HirError::Contract(format!(
                    "{} labels but {} pair ids",
                    self.labels.len(),
                    p.len()
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= class_count) {
            return Err(HirError::Contract(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy only.
    Agg,
    /// Cross-entropy plus posterior alignment.
    Hir,
    /// Cross-entropy plus class-agnostic MMD on representations.
    Mmd,
    /// Cross-entropy plus class-conditional feature distance.
    Ccsa,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Agg => "agg",
            LossKind::Hir => "hir",
            LossKind::Mmd => "mmd",
            LossKind::Ccsa => "ccsa",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = HirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agg" => Ok(LossKind::Agg),
            "hir" => Ok(LossKind::Hir),
            "mmd" => Ok(LossKind::Mmd),
            "ccsa" => Ok(LossKind::Ccsa),
            other => Err(HirError::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Variants of the posterior-alignment term. The default is the literal sum
/// over all same-class pairs, one direction each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HirOptions {
    /// Only pair samples drawn from different domains.
    #[serde(default)]
    pub cross_domain_only: bool,
    /// Divide by the number of KL terms.
    #[serde(default)]
    pub normalize: bool,
    /// Sum both directions of every pair.
    #[serde(default)]
    pub symmetric: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub hir: f64,
    pub combined: f64,
    pub alpha: f64,
    pub pair_count: usize,
}

/// `KL(p || q)` from log-probabilities.
pub fn kl_from_log(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Pairs `(i, j)` entering the alignment term, in row-major order.
pub fn hir_pairs(labels: &BatchLabels, opts: &HirOptions) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let ordered = if opts.symmetric { i != j } else { i < j };
            if !ordered || labels.labels[i] != labels.labels[j] {
                continue;
            }
            if opts.cross_domain_only && labels.domains[i] == labels.domains[j] {
                continue;
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// `-(1/n) * sum_i log_probs[i][label_i]`.
pub fn cross_entropy(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, m) = log_probs.shape();
    if n == 0 || labels.len() != n {
        return Err(HirError::Contract(format!(
            "cross_entropy needs one label per row ({n} rows, {} labels)",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(HirError::Contract(format!("label {y} out of range for {m} classes")));
    }
    // picking rather than masking keeps -inf off-target entries out of the sum
    let picked = g.pick_cols(log_probs, labels)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Posterior-alignment term and the number of KL terms it sums.
///
/// With `P = exp(log_probs)`, `KL(p_i || p_j) = a_i - (P log_probsᵀ)[i][j]`
/// where `a_i = sum_k P[i][k] log_probs[i][k]`; the selected pairs are picked
/// out of that matrix by a constant mask.
pub fn hir_kl(
    g: &mut Graph,
    log_probs: Var,
    labels: &BatchLabels,
    opts: &HirOptions,
) -> Result<(Var, usize)> {
    let n = log_probs.rows();
    if labels.len() != n {
        return Err(HirError::Contract(format!(
            "{} labels for {n} posterior rows",
            labels.len()
        )));
    }
    labels.validate(log_probs.cols())?;
    let pairs = hir_pairs(labels, opts);
    if pairs.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let mut mask = Tensor::zeros(n, n);
    for &(i, j) in &pairs {
        mask.set(i, j, 1.0);
    }

    let probs = g.exp(log_probs);
    let plogp = g.mul(probs, log_probs)?;
    let self_term = g.sum_cols(plogp);
    let ones_row = g.constant(Tensor::ones(1, n));
    let self_term = g.matmul(self_term, ones_row)?;
    let lp_t = g.transpose(log_probs);
    let cross = g.matmul(probs, lp_t)?;
    let kl = g.sub(self_term, cross)?;
    let mask = g.constant(mask);
    let selected = g.mul(kl, mask)?;
    let mut total = g.sum(selected);
    if opts.normalize {
        total = g.scale(total, 1.0 / pairs.len() as f64);
    }
    Ok((total, pairs.len()))
}

/// `L_c + alpha * L_h`. With `alpha == 0` the returned node is the
/// cross-entropy node itself, so gradients match a cross-entropy-only build.
pub fn combined_loss(
    g: &mut Graph,
    log_probs: Var,
    labels: &BatchLabels,
    alpha: f64,
    opts: &HirOptions,
) -> Result<(Var, LossBreakdown)> {
    check_weight(alpha)?;
    let ce = cross_entropy(g, log_probs, &labels.labels)?;
    let (hir, pair_count) = hir_kl(g, log_probs, labels, opts)?;
    let combined = add_weighted(g, ce, hir, alpha)?;
    let breakdown = LossBreakdown {
        classification: g.value(ce).item()?,
        hir: g.value(hir).item()?,
        combined: g.value(combined).item()?,
        alpha,
        pair_count,
    };
    Ok((combined, breakdown))
}

pub(crate) fn check_weight(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(HirError::Config(format!(
            "loss weight must be finite and non-negative, got {alpha}"
        )));
    }
    Ok(())
}

pub(crate) fn add_weighted(g: &mut Graph, base: Var, term: Var, weight: f64) -> Result<Var> {
    if weight == 0.0 {
        return Ok(base);
    }
    let scaled = g.scale(term, weight);
    g.add(base, scaled)
}

/// Matrix of squared Euclidean distances between rows of `a` and rows of `b`.
fn sq_dists(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (p, q) = (a.rows(), b.rows());
    let a2 = g.mul(a, a)?;
    let a2 = g.sum_cols(a2);
    let ones_q = g.constant(Tensor::ones(1, q));
    let a2 = g.matmul(a2, ones_q)?;
    let b2 = g.mul(b, b)?;
    let b2 = g.sum_cols(b2);
    let b2 = g.transpose(b2);
    let ones_p = g.constant(Tensor::ones(p, 1));
    let b2 = g.matmul(ones_p, b2)?;
    let bt = g.transpose(b);
    let ab = g.matmul(a, bt)?;
    let ab = g.scale(ab, -2.0);
    let d = g.add(a2, b2)?;
    g.add(d, ab)
}

fn mean_kernel(g: &mut Graph, a: Var, b: Var, bandwidth: f64) -> Result<Var> {
    let d = sq_dists(g, a, b)?;
    let scaled = g.scale(d, -1.0 / (2.0 * bandwidth * bandwidth));
    let k = g.exp(scaled);
    Ok(g.mean(k))
}

/// Biased (V-statistic) MMD² with a Gaussian kernel of the given bandwidth.
pub fn mmd_rbf(g: &mut Graph, z_a: Var, z_b: Var, bandwidth: f64) -> Result<Var> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(HirError::Config(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    if z_a.rows() == 0 || z_b.rows() == 0 {
        return Err(HirError::Contract("mmd_rbf needs non-empty sets".into()));
    }
    if z_a.cols() != z_b.cols() {
        return Err(HirError::Shape(format!(
            "mmd_rbf on {} and {} features",
            z_a.cols(),
            z_b.cols()
        )));
    }
    let kaa = mean_kernel(g, z_a, z_a, bandwidth)?;
    let kbb = mean_kernel(g, z_b, z_b, bandwidth)?;
    let kab = mean_kernel(g, z_a, z_b, bandwidth)?;
    let within = g.add(kaa, kbb)?;
    let cross = g.scale(kab, -2.0);
    g.add(within, cross)
}

/// [`mmd_rbf`] on plain tensors.
pub fn mmd_rbf_value(z_a: &Tensor, z_b: &Tensor, bandwidth: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(z_a.clone());
    let b = g.constant(z_b.clone());
    let out = mmd_rbf(&mut g, a, b, bandwidth)?;
    g.value(out).item()
}

/// Median pairwise Euclidean distance between rows, falling back to 1.0 when
/// there are fewer than two rows or the median is zero. At most 512 rows are
/// used, taken at an even stride.
pub fn median_bandwidth(z: &Tensor) -> f64 {
    const MAX_ROWS: usize = 512;
    let n = z.rows();
    if n < 2 {
        return 1.0;
    }
    let stride = n.div_ceil(MAX_ROWS);
    let rows: Vec<&[f64]> = (0..n).step_by(stride).map(|i| z.row(i)).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

/// Mean of [`mmd_rbf`] over every pair of domains present in the batch.
/// Zero when fewer than two domains are present.
pub fn domain_mmd_penalty(
    g: &mut Graph,
    z: Var,
    domains: &[usize],
    bandwidth: f64,
) -> Result<Var> {
    if domains.len() != z.rows() {
        return Err(HirError::Contract(format!(
            "{} domain entries for {} rows",
            domains.len(),
            z.rows()
        )));
    }
    let mut ids: Vec<usize> = domains.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let groups = ids
        .iter()
        .map(|&d| {
            let rows: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == d).collect();
            g.select_rows(z, &rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            terms.push(mmd_rbf(g, groups[a], groups[b], bandwidth)?);
        }
    }
    let count = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Mean squared Euclidean distance between representations of all
/// same-class, different-domain pairs; zero when there are none.
pub fn class_conditional_align(g: &mut Graph, z: Var, labels: &BatchLabels) -> Result<Var> {
    let n = z.rows();
    if labels.len() != n {
        return Err(HirError::Contract(format!(
            "{} labels for {n} representation rows",
            labels.len()
        )));
    }
    let mut mask = Tensor::zeros(n, n);
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if labels.labels[i] == labels.labels[j] && labels.domains[i] != labels.domains[j] {
                mask.set(i, j, 1.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let d = sq_dists(g, z, z)?;
    let mask = g.constant(mask);
    let selected = g.mul(d, mask)?;
    let total = g.sum(selected);
    Ok(g.scale(total, 1.0 / count as f64))
}
