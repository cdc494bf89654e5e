//! Acceptance checks, one line per criterion. Runs as a plain binary
//! (`harness = false`) so the lines are always printed.
//!
//! `ACCEPTANCE_ONLY=<n>` runs a single criterion.

use std::process::ExitCode;
use std::time::Instant;

use hirnet_core::autodiff::{grad_check, Graph, Tensor};
use hirnet_core::data::{BatchSource, DomainSuite, PriorShiftSpec, StratifiedSampler, SuiteSpec};
use hirnet_core::diagnostics::{self, mean_off_diagonal};
use hirnet_core::harness::{
    self, deterministic_json, run_single, train, train_step, ExperimentConfig, HeldOut, RunOptions, RunSeeds,
    RunStatus, TrainSettings,
};
use hirnet_core::losses::{self, BatchLabels, HirOptions, LossKind};
use hirnet_core::models::{forward, init, MlpSpec, ModelParams};
use hirnet_core::optim::AdamState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn log_softmax_rows(logits: &Tensor) -> Tensor {
    // reference log-softmax, written independently of the library
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for c in 0..logits.cols() {
            out.set(r, c, row[c] - lse);
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for b in 0..10 {
        let classes = 3;
        let params = init(&MlpSpec::new(vec![2, 12, 10, classes], 500 + b)).unwrap();
        let x = randn(&mut rng, 20, 2);
        let labels = BatchLabels::new(
            (0..20).map(|_| rng.random_range(0..classes)).collect(),
            (0..20).map(|_| rng.random_range(0..4)).collect(),
        );
        let f = |g: &mut Graph, vars: &[hirnet_core::autodiff::Var]| {
            let xv = g.constant(x.clone());
            let pv = hirnet_core::models::ParamVars::from_vars(vars.to_vec());
            let out = forward(g, &pv, xv)?;
            let lp = g.log_softmax(out.logits)?;
            Ok(losses::combined_loss(g, lp, &labels, 1e-3, &HirOptions::default())?.0)
        };
        worst = worst.max(grad_check(f, params.tensors(), 1e-5).unwrap());
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: worst < 1e-4 && secs < 10.0,
        detail: format!("max relative error {worst:.2e} (< 1e-4), {secs:.2} s (< 10 s)"),
    }
}

// 2 ------------------------------------------------------------------------

fn naive_hir(lp: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] != labels[j] {
                continue;
            }
            for k in 0..lp.cols() {
                let pi = lp.get(i, k).exp();
                total += pi * (lp.get(i, k) - lp.get(j, k));
            }
        }
    }
    total
}

fn naive_ccsa(z: &Tensor, labels: &[usize], domains: &[usize]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] && domains[i] != domains[j] {
                total += (0..z.cols()).map(|c| (z.get(i, c) - z.get(j, c)).powi(2)).sum::<f64>();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut edge_cases = 0;
    for b in 0..100 {
        let n = if b < 5 { 1 } else { rng.random_range(1..=60) };
        let m = rng.random_range(1..=10);
        let dcount = rng.random_range(1..=6);
        // restrict labels to a subset so some classes are empty
        let used = rng.random_range(1..=m);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..used)).collect();
        let domains: Vec<usize> = (0..n).map(|_| rng.random_range(0..dcount)).collect();
        if n == 1 || used < m {
            edge_cases += 1;
        }
        let lp = log_softmax_rows(&randn(&mut rng, n, m).map(|v| 3.0 * v));
        let h = rng.random_range(1..=8);
        let z = randn(&mut rng, n, h);
        let bl = BatchLabels::new(labels.clone(), domains.clone());

        let mut g = Graph::new();
        let lpv = g.constant(lp.clone());
        let (h, _) = losses::hir_kl(&mut g, lpv, &bl, &HirOptions::default()).unwrap();
        let zv = g.constant(z.clone());
        let c = losses::class_conditional_align(&mut g, zv, &bl).unwrap();
        worst = worst
            .max((g.value(h).item().unwrap() - naive_hir(&lp, &labels)).abs())
            .max((g.value(c).item().unwrap() - naive_ccsa(&z, &labels, &domains)).abs());
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("max abs deviation {worst:.2e} (<= 1e-10) over 100 batches, {edge_cases} with empty classes or one sample"),
    }
}

// 3 ------------------------------------------------------------------------

fn agg_equivalence() -> Outcome {
    let suite = SuiteSpec::default().build().unwrap();
    let batch = StratifiedSampler::new(&suite, 5, false, 3).unwrap().epoch(0).next().unwrap();
    let start = init(&MlpSpec::new(vec![2, 32, 32, 2], 9)).unwrap();
    let cfg = ExperimentConfig::default();

    // alpha = 0 through the combined objective
    let mut hir = start.clone();
    let settings = TrainSettings::from_config(&cfg, 0.0);
    let mut adam = AdamState::new(settings.optimizer, hir.tensors());
    train_step(&mut hir, &mut adam, &batch, &settings).unwrap();

    // cross-entropy only, assembled here without any alignment node
    let mut plain = start.clone();
    let mut g = Graph::new();
    let vars = plain.attach(&mut g);
    let xv = g.constant(batch.x.clone());
    let out = forward(&mut g, &vars, xv).unwrap();
    let lp = g.log_softmax(out.logits).unwrap();
    let ce = losses::cross_entropy(&mut g, lp, &batch.labels.labels).unwrap();
    let grads = g.backward(ce).unwrap();
    let grads: Vec<Tensor> = vars.as_slice().iter().map(|&v| grads.get_or_zeros(v)).collect();
    let mut adam = AdamState::new(settings.optimizer, plain.tensors());
    adam.step(plain.tensors_mut(), &grads).unwrap();

    let bits = |p: &ModelParams| -> Vec<u64> { p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    let identical = bits(&hir) == bits(&plain);
    let moved = bits(&hir) != bits(&start);
    Outcome {
        pass: identical && moved,
        detail: format!("first Adam step bitwise identical: {identical} ({} parameters)", bits(&hir).len()),
    }
}

// 4 ------------------------------------------------------------------------

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ALPHAS: [f64; 3] = [1e-3, 1e-2, 1e-1];

fn default_experiment(loss: LossKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.loss = loss;
    c.seeds = SEEDS.to_vec();
    c.diagnostics = false;
    c
}

fn directional_table() -> Outcome {
    let started = Instant::now();
    let opts = RunOptions { workers: workers() };
    let agg = harness::run_experiment_with(&default_experiment(LossKind::Agg), opts).unwrap().0;
    let mut hir_cfg = default_experiment(LossKind::Hir);
    hir_cfg.alphas = Some(ALPHAS.to_vec());
    let hir = harness::run_experiment_with(&hir_cfg, opts).unwrap().0;
    let secs = started.elapsed().as_secs_f64();

    let interior = [1usize, 2, 3, 4];
    let edges = [0usize, 5];
    let acc = |r: &harness::RunReport, a: f64, d: usize| r.mean_accuracy(a, d).unwrap_or(f64::NAN);
    // one alpha for all domains: the best mean over the interior domains
    let best = ALPHAS
        .iter()
        .copied()
        .max_by(|&a, &b| {
            let ma = mean(&interior.map(|d| acc(&hir, a, d)));
            let mb = mean(&interior.map(|d| acc(&hir, b, d)));
            ma.total_cmp(&mb)
        })
        .unwrap();
    let per_domain: Vec<String> = (0..6)
        .map(|d| format!("{:.4}/{:.4}", acc(&agg, 0.0, d), acc(&hir, best, d)))
        .collect();
    let part_a = interior.iter().all(|&d| acc(&hir, best, d) >= acc(&agg, 0.0, d));
    let edge_vs_interior = |r: &harness::RunReport, a: f64| {
        (mean(&edges.map(|d| acc(r, a, d))), mean(&interior.map(|d| acc(r, a, d))))
    };
    let (agg_e, agg_i) = edge_vs_interior(&agg, 0.0);
    let (hir_e, hir_i) = edge_vs_interior(&hir, best);
    let part_b = agg_e < agg_i && hir_e < hir_i;
    Outcome {
        pass: part_a && part_b && secs < 300.0,
        detail: format!(
            "(a) {} HIR(alpha={best:e}) >= AGG on 15-60 deg; AGG/HIR per domain [{}]; \
             (b) {} edges {agg_e:.4}/{hir_e:.4} < interior {agg_i:.4}/{hir_i:.4}; {secs:.0} s (< 300 s)",
            yes(part_a),
            per_domain.join(", "),
            yes(part_b),
        ),
    }
}

fn yes(b: bool) -> &'static str {
    if b {
        "holds:"
    } else {
        "fails:"
    }
}

// 5 ------------------------------------------------------------------------

fn prior_shift() -> Outcome {
    let angles = SuiteSpec::default().angles;
    let mut acc = [Vec::new(), Vec::new()];
    for held in 0..angles.len() {
        let mut priors = Vec::new();
        let mut k = 0;
        for d in 0..angles.len() {
            if d == held {
                priors.push(vec![0.5, 0.5]);
            } else {
                priors.push(if k % 2 == 0 { vec![0.8, 0.2] } else { vec![0.2, 0.8] });
                k += 1;
            }
        }
        for (slot, loss) in [LossKind::Agg, LossKind::Hir].into_iter().enumerate() {
            let mut c = default_experiment(loss);
            c.suite.prior_shift = Some(PriorShiftSpec { priors: priors.clone() });
            c.held_out = HeldOut::Domains(vec![held]);
            let r = harness::run_experiment_with(&c, RunOptions { workers: workers() }).unwrap().0;
            acc[slot].extend(r.runs.iter().filter_map(|run| run.accuracy));
        }
    }
    let (agg, hir) = (mean(&acc[0]), mean(&acc[1]));
    Outcome {
        pass: hir >= agg && acc[0].len() == 30 && acc[1].len() == 30,
        detail: format!("mean HIR {hir:.4} >= AGG {agg:.4} over 6 held-out domains x 5 seeds"),
    }
}

// 6, 7 shared --------------------------------------------------------------

/// Trains on every domain of the seed's default suite.
fn train_all_domains(loss: LossKind, alpha: f64, seed: u64) -> (DomainSuite, ModelParams, ModelParams) {
    let cfg = ExperimentConfig::default();
    let seeds = RunSeeds::derive(cfg.suite.seed, seed);
    let mut spec = cfg.suite.clone();
    spec.seed = seeds.suite;
    let suite = spec.build().unwrap();
    let mut c = cfg.clone();
    c.loss = loss;
    let settings = TrainSettings::from_config(&c, alpha);
    let start = init(&MlpSpec::new(vec![2, 32, 32, 2], seeds.model)).unwrap();
    let mut params = start.clone();
    let ids: Vec<usize> = (0..suite.len()).collect();
    train(&mut params, &suite, &ids, &settings, seeds.sampler).unwrap();
    (suite, start, params)
}

fn paired_unpaired() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let (suite, _, params) = train_all_domains(LossKind::Agg, 0.0, seed);
        let (p, u) = diagnostics::paired_vs_unpaired_kl(&params, &suite, 1, seed).unwrap();
        if u > p {
            wins += 1;
        }
        pairs.push(format!("{p:.3}/{u:.3}"));
    }
    Outcome {
        pass: wins >= 4,
        detail: format!("unpaired > paired in {wins}/5 seeds (>= 4); paired/unpaired [{}]", pairs.join(", ")),
    }
}

fn domain_mmd(params: &ModelParams, suite: &DomainSuite) -> f64 {
    let m = diagnostics::domain_alignment_matrix(params, suite, false, None).unwrap();
    mean_off_diagonal(&m.matrix).unwrap()
}

fn structure_preservation() -> Outcome {
    // tune the baseline weight on the first seed: smallest weight that halves
    // the representation MMD relative to initialization
    let grid = [0.1, 1.0, 10.0, 100.0];
    let mut weight = None;
    let mut tuning = Vec::new();
    for &w in &grid {
        let (suite, start, params) = train_all_domains(LossKind::Mmd, w, SEEDS[0]);
        let ratio = domain_mmd(&params, &suite) / domain_mmd(&start, &suite);
        tuning.push(format!("{w}:{ratio:.2}"));
        if ratio <= 0.5 {
            weight = Some(w);
            break;
        }
    }
    let Some(weight) = weight else {
        return Outcome {
            pass: false,
            detail: format!("no baseline weight in {grid:?} halves MMD (final/init {})", tuning.join(", ")),
        };
    };

    let (mut mmd_wins, mut agree_ok, mut both) = (0, 0, 0);
    let mut rows = Vec::new();
    let mut reductions = Vec::new();
    for seed in SEEDS {
        let (suite, start, hir) = train_all_domains(LossKind::Hir, 1e-3, seed);
        let (_, _, base) = train_all_domains(LossKind::Mmd, weight, seed);
        let (m_hir, m_base, m_init) = (domain_mmd(&hir, &suite), domain_mmd(&base, &suite), domain_mmd(&start, &suite));
        reductions.push(1.0 - m_base / m_init);
        let a_hir = diagnostics::prediction_agreement(&hir, &suite, 200, seed).unwrap();
        let a_init = diagnostics::prediction_agreement(&start, &suite, 200, seed).unwrap();
        mmd_wins += usize::from(m_hir > m_base);
        agree_ok += usize::from(a_hir >= a_init);
        both += usize::from(m_hir > m_base && a_hir >= a_init);
        rows.push(format!("{m_hir:.3}/{m_base:.3} agr {a_hir:.2}/{a_init:.2}"));
    }
    // a seed counts when both conditions hold on it
    Outcome {
        pass: both >= 4,
        detail: format!(
            "both conditions in {both}/5 seeds (>= 4): HIR MMD > baseline (weight {weight}, mean reduction {:.0}%) \
             in {mmd_wins}/5, HIR agreement >= init in {agree_ok}/5; HIR/base MMD, agreement HIR/init [{}]",
            100.0 * mean(&reductions),
            rows.join("; ")
        ),
    }
}

// 8 ------------------------------------------------------------------------

fn target_isolation() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs = 30;
    let held = 2;
    let seed = 11;
    let seeds = RunSeeds::derive(cfg.suite.seed, seed);
    let mut spec = cfg.suite.clone();
    spec.seed = seeds.suite;
    let clean = spec.build().unwrap();
    let mut poisoned = clean.clone();
    for s in &mut poisoned.domains[held].samples {
        s.x.iter_mut().for_each(|v| *v = f64::NAN);
    }
    let (a, ma) = run_single(&cfg, &clean, held, seed, 1e-3);
    let (b, mb) = run_single(&cfg, &poisoned, held, seed, 1e-3);
    let finite = b
        .traces
        .iter()
        .all(|t| t.l_c.is_finite() && t.l_h.is_finite() && t.objective.is_finite());
    let same = a.traces == b.traces && ma.is_some() && ma == mb;
    Outcome {
        pass: b.status == RunStatus::Ok && finite && same && b.traces.len() == cfg.epochs,
        detail: format!(
            "poisoned run status {:?}, all losses finite: {finite}, traces and weights identical to clean run: {same}",
            b.status
        ),
    }
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs = 20;
    cfg.seeds = vec![4, 5];
    cfg.alphas = Some(vec![1e-3, 1e-2]);
    let a = harness::run_experiment_with(&cfg, RunOptions { workers: 1 }).unwrap().0;
    let b = harness::run_experiment_with(&cfg, RunOptions { workers: workers().max(2) }).unwrap().0;
    let (ja, jb) = (deterministic_json(&a).unwrap(), deterministic_json(&b).unwrap());
    Outcome {
        pass: ja == jb,
        detail: format!("{} runs, report JSON identical without wall-clock fields: {} ({} bytes)", a.runs.len(), ja == jb, ja.len()),
    }
}

/// Exact properties gate the exit status. Seed-statistical comparisons
/// (4 to 7) are reported and gate it only with `ACCEPTANCE_STRICT=1`.
const STATISTICAL: [usize; 4] = [4, 5, 6, 7];

fn main() -> ExitCode {
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("loss oracle equivalence", loss_oracles),
        ("AGG equivalence", agg_equivalence),
        ("directional held-out accuracy", directional_table),
        ("prior shift", prior_shift),
        ("paired vs unpaired KL", paired_unpaired),
        ("structure preservation", structure_preservation),
        ("target isolation", target_isolation),
        ("determinism", determinism),
    ];
    let (mut ran, mut red, mut gating) = (0, Vec::new(), 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let o = check();
        ran += 1;
        if !o.pass {
            red.push(n);
            if strict || !STATISTICAL.contains(&n) {
                gating += 1;
            }
        }
        println!(
            "[{}] {n} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria pass; failing: {red:?}", ran - red.len());
    if gating > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
