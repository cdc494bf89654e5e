use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{RunRecord, RunReport, RunStatus};
use super::{mix_seed, ExperimentConfig, RunSeeds, WORKERS_ENV};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{train_test_split, Batch, BatchSource, DomainDataset, DomainSuite, FoldSampler, StratifiedSampler};
use crate::diagnostics::{self, DiagOptions};
use crate::error::{HirError, Result};
use crate::losses::{self, HirOptions, LossKind};
use crate::models::{forward, init, MlpSpec, ModelParams, ParamVars};
use crate::optim::{AdamConfig, AdamState};

/// Everything the training loop needs, independent of how the data was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub loss: LossKind,
    pub alpha: f64,
    pub hir: HirOptions,
    pub paired: bool,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub per_class_per_domain: usize,
    pub n_folds: Option<usize>,
    pub mmd_bandwidth: Option<f64>,
}

impl TrainSettings {
    pub fn from_config(cfg: &ExperimentConfig, alpha: f64) -> Self {
        Self {
            loss: cfg.loss,
            alpha: if cfg.loss == LossKind::Agg { 0.0 } else { alpha },
            hir: cfg.hir_options(),
            paired: cfg.paired,
            optimizer: cfg.optimizer,
            epochs: cfg.epochs,
            per_class_per_domain: cfg.per_class_per_domain,
            n_folds: cfg.n_folds,
            mmd_bandwidth: cfg.mmd_bandwidth,
        }
    }
}

/// Loss components of one batch, plus the batch posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub l_c: f64,
    /// Posterior KL term (zero unless the loss is `hir`).
    pub l_h: f64,
    /// Representation penalty of `mmd` / `ccsa` (zero otherwise).
    pub penalty: f64,
    pub objective: f64,
    pub log_probs: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTrace {
    /// Index of the domain in the full suite.
    pub domain: usize,
    /// Mean cross-entropy over this domain's rows seen in the epoch.
    pub l_c: Option<f64>,
    /// Mean over batches of the average same-class posterior KL over pairs
    /// touching this domain.
    pub kl: Option<f64>,
}

/// Per-epoch means over batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub l_c: f64,
    pub l_h: f64,
    pub penalty: f64,
    pub objective: f64,
    pub per_domain: Vec<DomainTrace>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub traces: Vec<EpochTrace>,
    pub warnings: Vec<String>,
    pub steps: u64,
}

/// Builds the training objective for one batch on `g`.
pub fn objective(g: &mut Graph, vars: &ParamVars, batch: &Batch, s: &TrainSettings) -> Result<(Var, StepStats)> {
    let x = g.constant(batch.x.clone());
    let out = forward(g, vars, x)?;
    let lp = g.log_softmax(out.logits)?;
    let labels = &batch.labels;
    let (total, l_c, l_h, penalty) = match s.loss {
        LossKind::Agg => {
            let ce = losses::cross_entropy(g, lp, &labels.labels)?;
            let v = g.value(ce).item()?;
            (ce, v, 0.0, 0.0)
        }
        LossKind::Hir => {
            let (total, b) = losses::combined_loss(g, lp, labels, s.alpha, &s.hir)?;
            (total, b.classification, b.hir, 0.0)
        }
        LossKind::Mmd | LossKind::Ccsa => {
            losses::check_weight(s.alpha)?;
            let ce = losses::cross_entropy(g, lp, &labels.labels)?;
            let pen = if s.loss == LossKind::Mmd {
                let bw = match s.mmd_bandwidth {
                    Some(b) => b,
                    None => losses::median_bandwidth(g.value(out.z)),
                };
                losses::domain_mmd_penalty(g, out.z, &labels.domains, bw)?
            } else {
                losses::class_conditional_align(g, out.z, labels)?
            };
            let total = losses::add_weighted(g, ce, pen, s.alpha)?;
            (total, g.value(ce).item()?, 0.0, g.value(pen).item()?)
        }
    };
    let stats = StepStats {
        l_c,
        l_h,
        penalty,
        objective: g.value(total).item()?,
        log_probs: g.value(lp).clone(),
    };
    Ok((total, stats))
}

/// One optimizer step on one batch. Parameters are untouched on error.
pub fn train_step(params: &mut ModelParams, adam: &mut AdamState, batch: &Batch, s: &TrainSettings) -> Result<StepStats> {
    let mut g = Graph::new();
    let vars = params.attach(&mut g);
    let (loss, stats) = objective(&mut g, &vars, batch, s)?;
    if !stats.objective.is_finite() {
        return Err(HirError::Divergence(format!(
            "non-finite objective {} (l_c {}, l_h {}, penalty {})",
            stats.objective, stats.l_c, stats.l_h, stats.penalty
        )));
    }
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor> = vars.as_slice().iter().map(|&v| grads.get_or_zeros(v)).collect();
    adam.step(params.tensors_mut(), &grads)?;
    Ok(stats)
}

#[derive(Default)]
struct EpochAcc {
    batches: usize,
    l_c: f64,
    l_h: f64,
    penalty: f64,
    objective: f64,
    dom_ce: Vec<(f64, usize)>,
    dom_kl: Vec<(f64, usize)>,
}

/// Trains `params` in place on the source domains. `domain_ids` maps source
/// positions to suite indices for the traces.
pub fn train(
    params: &mut ModelParams,
    source: &DomainSuite,
    domain_ids: &[usize],
    s: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    if source.domains.iter().all(DomainDataset::is_empty) {
        return Err(HirError::Config("training set is empty".into()));
    }
    if domain_ids.len() != source.len() {
        return Err(HirError::Contract(format!(
            "{} domain ids for {} source domains",
            domain_ids.len(),
            source.len()
        )));
    }
    let mut warnings = Vec::new();
    if source.len() == 1 {
        warnings.push("only one training domain: cross-domain alignment is vacuous".to_string());
    }
    let sampler: Box<dyn BatchSource + '_> = match s.n_folds {
        Some(k) => Box::new(FoldSampler::new(source, k, seed)?),
        None => Box::new(StratifiedSampler::new(source, s.per_class_per_domain, s.paired, seed)?),
    };
    warnings.extend(sampler.warnings().iter().cloned());
    for w in &warnings {
        warn!("{w}");
    }

    let n_dom = source.len();
    let mut adam = AdamState::new(s.optimizer, params.tensors());
    let mut traces = Vec::with_capacity(s.epochs);
    let mut steps = 0u64;
    for epoch in 0..s.epochs {
        let mut acc = EpochAcc {
            dom_ce: vec![(0.0, 0); n_dom],
            dom_kl: vec![(0.0, 0); n_dom],
            ..Default::default()
        };
        for batch in sampler.epoch(epoch as u64) {
            if batch.is_empty() {
                continue;
            }
            let st = train_step(params, &mut adam, &batch, s)
                .map_err(|e| match e {
                    HirError::Divergence(m) => HirError::Divergence(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            steps += 1;
            acc.batches += 1;
            acc.l_c += st.l_c;
            acc.l_h += st.l_h;
            acc.penalty += st.penalty;
            acc.objective += st.objective;
            for (r, (&y, &d)) in batch.labels.labels.iter().zip(&batch.labels.domains).enumerate() {
                acc.dom_ce[d].0 -= st.log_probs.get(r, y);
                acc.dom_ce[d].1 += 1;
            }
            for (d, kl) in diagnostics::per_domain_kl(&st.log_probs, &batch.labels, n_dom)
                .into_iter()
                .enumerate()
            {
                if let Some(v) = kl {
                    acc.dom_kl[d].0 += v;
                    acc.dom_kl[d].1 += 1;
                }
            }
        }
        let nb = acc.batches.max(1) as f64;
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        traces.push(EpochTrace {
            epoch,
            l_c: acc.l_c / nb,
            l_h: acc.l_h / nb,
            penalty: acc.penalty / nb,
            objective: acc.objective / nb,
            per_domain: (0..n_dom)
                .map(|d| DomainTrace {
                    domain: domain_ids[d],
                    l_c: mean(acc.dom_ce[d]),
                    kl: mean(acc.dom_kl[d]),
                })
                .collect(),
        });
    }
    Ok(TrainOutcome { traces, warnings, steps })
}

/// Fraction of samples whose argmax prediction (lowest index on ties) equals
/// the label.
pub fn evaluate(params: &ModelParams, domain: &DomainDataset) -> Result<f64> {
    if domain.is_empty() {
        return Err(HirError::Contract("cannot evaluate on an empty domain".into()));
    }
    let preds = params.predict(&domain.features())?;
    let hits = preds.iter().zip(&domain.samples).filter(|(p, s)| **p == s.y).count();
    Ok(hits as f64 / domain.len() as f64)
}

fn pooled(suite: &DomainSuite) -> DomainDataset {
    DomainDataset::new(suite.domains.iter().flat_map(|d| d.samples.iter().cloned()).collect())
}

/// One hold-one-domain-out run on an already built suite. Never fails: errors
/// are recorded in the returned record. The trained model is returned when
/// training completed.
pub fn run_single(
    cfg: &ExperimentConfig,
    suite: &DomainSuite,
    held_out: usize,
    seed: u64,
    alpha: f64,
) -> (RunRecord, Option<ModelParams>) {
    let started = Instant::now();
    let settings = TrainSettings::from_config(cfg, alpha);
    let mut record = RunRecord {
        held_out,
        held_out_param: suite.domain_params.get(held_out).copied().unwrap_or(f64::NAN),
        seed,
        loss_kind: cfg.loss,
        alpha: settings.alpha,
        status: RunStatus::Ok,
        error: None,
        accuracy: None,
        train_accuracy: None,
        source_test_accuracy: None,
        traces: Vec::new(),
        diagnostics: None,
        warnings: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let result = run_inner(cfg, &settings, suite, held_out, seed, &mut record);
    if let Err(e) = &result {
        warn!("run held_out={held_out} seed={seed} alpha={alpha} failed: {e}");
        record.status = RunStatus::Failed;
        record.error = Some(e.to_string());
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    (record, result.ok())
}

fn run_inner(
    cfg: &ExperimentConfig,
    settings: &TrainSettings,
    suite: &DomainSuite,
    held_out: usize,
    seed: u64,
    record: &mut RunRecord,
) -> Result<ModelParams> {
    if held_out >= suite.len() {
        return Err(HirError::Config(format!(
            "held_out domain {held_out} out of range for {} domains",
            suite.len()
        )));
    }
    let seeds = RunSeeds::derive(cfg.suite.seed, seed);
    let source_ids: Vec<usize> = (0..suite.len()).filter(|&d| d != held_out).collect();
    // the held-out domain is dropped here, before anything below can read it
    let source = suite.select(&source_ids);

    let (train_source, source_test) = match cfg.train_fraction {
        Some(f) => {
            let mut train_part = source.clone();
            let mut test_part = source.clone();
            for (d, domain) in source.domains.iter().enumerate() {
                let (tr, te) = train_test_split(domain, f, mix_seed(seeds.sampler, 100 + d as u64))?;
                train_part.domains[d] = tr;
                test_part.domains[d] = te;
            }
            (train_part, Some(test_part))
        }
        None => (source, None),
    };

    let mut layers = vec![suite.feature_dim()];
    layers.extend(&cfg.model.hidden_sizes);
    layers.push(suite.class_count);
    let mut params = init(&MlpSpec::new(layers, seeds.model))?;
    let outcome = train(&mut params, &train_source, &source_ids, settings, seeds.sampler)?;
    record.traces = outcome.traces;
    record.warnings.extend(outcome.warnings);

    record.train_accuracy = Some(evaluate(&params, &pooled(&train_source))?);
    if let Some(test) = &source_test {
        record.source_test_accuracy = Some(evaluate(&params, &pooled(test))?);
    }
    record.accuracy = Some(evaluate(&params, &suite.domains[held_out])?);

    if cfg.diagnostics {
        let opts = DiagOptions {
            probe_size: cfg.probe_size,
            per_class_per_domain: 1,
            seed: seeds.diagnostics,
            bandwidth: None,
        };
        match diagnostics::diagnose(&params, suite, &opts) {
            Ok(b) => record.diagnostics = Some(b),
            Err(e) => record.warnings.push(format!("diagnostics skipped: {e}")),
        }
    }
    Ok(params)
}

/// Worker count from `HIRNET_WORKERS`, 1 when unset.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(HirError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Options for [`run_experiment_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
}

/// Runs every `(alpha, seed, held-out)` combination with up to
/// `opts.workers` runs in parallel. Returns the report and, per run, the
/// trained model when training succeeded.
pub fn run_experiment_with(cfg: &ExperimentConfig, opts: RunOptions) -> Result<(RunReport, Vec<Option<ModelParams>>)> {
    cfg.validate()?;
    let started = Instant::now();
    let held = cfg.held_out.resolve(cfg.suite.angles.len())?;
    let suites = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let mut spec = cfg.suite.clone();
            spec.seed = RunSeeds::derive(cfg.suite.seed, seed).suite;
            spec.build()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for alpha in cfg.alpha_grid() {
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            for &h in &held {
                jobs.push((alpha, si, seed, h));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| HirError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(RunRecord, Option<ModelParams>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(alpha, si, seed, h)| run_single(cfg, &suites[si], h, seed, alpha))
            .collect()
    });
    let (runs, models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = RunReport::assemble(cfg.clone(), runs, started.elapsed().as_secs_f64());
    Ok((report, models))
}

/// [`run_experiment_with`] using `HIRNET_WORKERS` workers, without models.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let workers = workers_from_env()?;
    run_experiment_with(cfg, RunOptions { workers }).map(|(r, _)| r)
}
