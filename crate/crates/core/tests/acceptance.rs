//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any hard criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use mmf_online::config::{parse_config_str, ExperimentConfig};
use mmf_online::env::{stream, Purpose, ReportPolicy};
use mmf_online::experiment::{bench_tree, normalized_scenario, run_cells, BENCH_CHECKPOINTS};
use mmf_online::mechanism::{simulate, MechanismKind};
use mmf_online::metrics::{coverage_rate, cumulative_loss, final_fairness_gap, loss_components, strategy_gap};
use mmf_online::mmf::allocate;
use mmf_online::par;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

const TANH5: &str = "name = \"tanh-5\"\nn_agents = 5\npayoff = \"tanh\"\n";

fn tanh5(extra: &str) -> ExperimentConfig {
    parse_config_str(&format!("{TANH5}{extra}")).expect("tanh-5 config is valid")
}

// 1. MMF exact example

fn mmf_example() -> Outcome {
    let a = allocate(&[0.25; 4], &[0.1, 0.28, 0.4, 0.5]).expect("valid instance");
    let want = [0.1, 0.28, 0.31, 0.31];
    let err = a.as_slice().iter().zip(want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Outcome::new(err <= 1e-9, format!("allocation {:?}, max error {err:.2e} (tol 1e-9)", a.as_slice()))
}

// 2. MMF properties on random instances

fn mmf_properties() -> Outcome {
    const TOL: f64 = 1e-9;
    const INSTANCES: u64 = 10_000;
    let mut violations = Vec::new();
    for seed in 0..INSTANCES {
        let mut rng = stream(seed, 0, 0, Purpose::Setup, 0);
        let n = rng.gen_range(1..=12usize);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let e: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let a = allocate(&e, &d).expect("valid instance").into_inner();
        let mut bad = |what: &str| violations.push(format!("seed {seed}: {what}"));
        for i in 0..n {
            if d[i] < e[i] && (a[i] - d[i]).abs() > TOL {
                bad("P1");
            }
            if d[i] >= e[i] && a[i] < e[i] - TOL {
                bad("P2");
            }
            if a[i] > d[i] + TOL {
                bad("P3");
            }
        }
        if loss_components(&d, &a).lot > TOL {
            bad("efficiency");
        }
        let i = rng.gen_range(0..n);
        if a[i] < d[i] - TOL {
            let mut d2 = d.clone();
            d2[i] = a[i] + rng.gen_range(0.0..2.0);
            let a2 = allocate(&e, &d2).expect("valid instance");
            if (a2[i] - a[i]).abs() > TOL {
                bad("P4");
            }
        }
        let mut d3 = d.clone();
        d3[i] += rng.gen_range(0.0..1.0);
        let a3 = allocate(&e, &d3).expect("valid instance");
        if a3[i] < a[i] - TOL {
            bad("P5");
        }
    }
    let detail = format!(
        "{INSTANCES} instances, {} violations{}",
        violations.len(),
        violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
    );
    Outcome::new(violations.is_empty(), detail)
}

// 3. deterministic round-by-round bisection: loss and fairness bounds

fn nsp_bisection_bounds() -> Outcome {
    let jobs: Vec<(usize, u64)> = [2usize, 5, 10]
        .into_iter()
        .flat_map(|n| (0..20u64).map(move |s| (n, s)))
        .collect();
    let results = par::map(jobs, |(n, seed)| {
        let scn = normalized_scenario(n, 5000, seed);
        let trace = simulate(&scn, MechanismKind::DetNspBs).expect("valid scenario");
        let v_max = scn.load_range.1;
        let loss_bound = 1.0 + 2.0 * n as f64 * v_max * scn.udmax;
        let loss = cumulative_loss(&trace);
        let gaps = final_fairness_gap(&trace, &scn.profiles);
        let worst_fair = scn
            .profiles
            .iter()
            .zip(&gaps)
            .map(|(p, g)| g - p.utility_lipschitz * scn.udmax)
            .fold(f64::NEG_INFINITY, f64::max);
        (n, seed, loss, loss_bound, worst_fair)
    });
    let fails: Vec<String> = results
        .iter()
        .filter(|r| r.2 > r.3 || r.4 > 0.0)
        .map(|r| format!("n={} seed={} loss={:.4} bound={} fairness excess={:.3e}", r.0, r.1, r.2, r.3, r.4))
        .collect();
    let max_ratio = results.iter().map(|r| r.2 / r.3).fold(0.0, f64::max);
    Outcome::new(
        fails.is_empty(),
        format!(
            "{} runs, max loss/bound {max_ratio:.3}, max fairness excess {:.3e}{}",
            results.len(),
            results.iter().map(|r| r.4).fold(f64::NEG_INFINITY, f64::max),
            fails.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    )
}

// 4. strategy battery on the bracketed mechanisms

fn policy_battery() -> Vec<ReportPolicy> {
    vec![
        ReportPolicy::LoadScale(0.5),
        ReportPolicy::LoadScale(2.0),
        ReportPolicy::RewardShift(0.1),
        ReportPolicy::RewardShift(-0.1),
        ReportPolicy::ThresholdShift(0.05),
        ReportPolicy::ThresholdShift(-0.05),
        ReportPolicy::RandomMisreport(0.2),
    ]
}

fn strategy_proofness() -> Outcome {
    let mut jobs = Vec::new();
    for kind in [MechanismKind::DetSpGrid, MechanismKind::DetSpBs] {
        for n in [2usize, 5] {
            for seed in 0..10u64 {
                for target in 0..n {
                    for policy in policy_battery() {
                        jobs.push((kind, n, seed, target, policy));
                    }
                }
            }
        }
    }
    let total = jobs.len();
    let results = par::map(jobs, |(kind, n, seed, target, policy)| {
        let scn = normalized_scenario(n, 2000, seed);
        let gap = strategy_gap(&scn, kind, target, policy).expect("valid scenario");
        let allowed = match kind {
            MechanismKind::DetSpGrid => 0.0,
            _ => scn.profiles[target].utility_lipschitz * scn.udmax,
        };
        (kind, n, seed, target, policy, gap, allowed)
    });
    let mut lines = Vec::new();
    for kind in [MechanismKind::DetSpGrid, MechanismKind::DetSpBs] {
        let mine: Vec<_> = results.iter().filter(|r| r.0 == kind).collect();
        let bad: Vec<_> = mine.iter().filter(|r| r.5 > r.6).collect();
        let mut by_policy: Vec<String> = policy_battery()
            .iter()
            .filter_map(|p| {
                let hits: Vec<_> = bad.iter().filter(|r| r.4 == *p).collect();
                let worst = hits.iter().map(|r| r.5 - r.6).fold(0.0, f64::max);
                (!hits.is_empty()).then(|| format!("{} x{} (worst excess {worst:.3e})", p.label(), hits.len()))
            })
            .collect();
        if by_policy.is_empty() {
            by_policy.push("none".into());
        }
        lines.push(format!("{}: {}/{} violations [{}]", kind, bad.len(), mine.len(), by_policy.join(", ")));
    }
    let pass = results.iter().all(|r| r.5 <= r.6);
    Outcome::new(pass, format!("{total} paired runs; {}", lines.join("; ")))
}

// 5. grid search loss bound

fn grid_loss_bound() -> Outcome {
    let t = 10_000u64;
    let jobs: Vec<(usize, u64)> = [2usize, 5]
        .into_iter()
        .flat_map(|n| (0..20u64).map(move |s| (n, s)))
        .collect();
    let results = par::map(jobs, |(n, seed)| {
        let scn = normalized_scenario(n, t, seed);
        let loss = cumulative_loss(&simulate(&scn, MechanismKind::DetSpGrid).expect("valid scenario"));
        let bound = 10.0 * (n as f64).powf(1.5) * (t as f64).sqrt();
        (n, seed, loss, bound)
    });
    let worst = results.iter().map(|r| r.2 / r.3).fold(0.0, f64::max);
    let pass = results.iter().all(|r| r.2 <= r.3);
    Outcome::new(pass, format!("{} runs at T={t}, max loss/bound {worst:.3}", results.len()))
}

// 6. confidence coverage with the theoretical radius

fn coverage() -> Outcome {
    let cfg = tanh5(
        "horizon = 1000\nruns = 100\nbeta_scale = 1.0\ndelta = 1e-3\nfeedback = \"bernoulli_aggregate\"\nmethod = [\"glm_nsp\", \"tree_nsp\"]\n",
    );
    let profiles = cfg.profiles().expect("valid profiles");
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [MechanismKind::GlmNsp, MechanismKind::TreeNsp] {
        let runs: Vec<u64> = (0..cfg.runs).collect();
        let per_run = par::map(runs, |run| {
            let scn = cfg.scenario(kind, run).expect("valid scenario");
            let trace = simulate(&scn, kind).expect("valid scenario");
            let cov = coverage_rate(&trace, &profiles).expect("learner has intervals");
            let mut band = (0u64, 0u64);
            for (i, l) in trace.learners.iter().enumerate() {
                if let Some(tree) = l.as_tree() {
                    for j in 1..=50 {
                        let a = cfg.udmax * j as f64 / 50.0;
                        let f = profiles[i].payoff.eval(a);
                        let (lo, hi) = tree.conf_interval(a);
                        band.1 += 1;
                        if lo <= f && f <= hi {
                            band.0 += 1;
                        }
                    }
                }
            }
            (cov, band)
        });
        let cov = per_run.iter().map(|r| r.0).sum::<f64>() / per_run.len() as f64;
        pass &= cov >= 0.99;
        parts.push(format!("{kind} interval coverage {cov:.4}"));
        if kind == MechanismKind::TreeNsp {
            let (hit, total) = per_run.iter().fold((0, 0), |acc, r| (acc.0 + r.1 .0, acc.1 + r.1 .1));
            let band = hit as f64 / total as f64;
            pass &= band >= 0.99;
            parts.push(format!("tree band coverage {band:.4} over {total} grid points"));
        }
    }
    Outcome::new(pass, format!("{} (need >= 0.99)", parts.join(", ")))
}

// 7. ordering against the entitlement baseline and baseline linearity

fn r_squared(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xs: Vec<f64> = (1..=ys.len()).map(|t| t as f64).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn figure_ordering() -> Outcome {
    let cfg = tanh5("horizon = 2000\nruns = 5\n");
    let results = run_cells(&cfg).expect("valid config");
    let horizon = cfg.horizon as usize;
    let mean_curve = |kind: MechanismKind| -> Vec<f64> {
        let runs: Vec<_> = results.iter().filter(|r| r.kind == kind).collect();
        (0..horizon)
            .map(|t| runs.iter().map(|r| r.series.cum_loss[t]).sum::<f64>() / runs.len() as f64)
            .collect()
    };
    let base = mean_curve(MechanismKind::Entitlement);
    let base_final = base[horizon - 1];
    let r2 = r_squared(&base);
    let mut pass = r2 >= 0.999;
    let mut parts = vec![format!("entitlement {base_final:.2} (R^2 {r2:.5})")];
    for kind in MechanismKind::ALL.into_iter().filter(|k| k.is_learning()) {
        let fin = mean_curve(kind)[horizon - 1];
        let below = fin < base_final;
        pass &= below;
        parts.push(format!("{kind} {fin:.2}{}", if below { "" } else { " NOT below" }));
    }
    Outcome::new(pass, parts.join(", "))
}

// 8. tree invariants after every mutation, and trace determinism

fn tree_invariants() -> Outcome {
    let mut cfg = tanh5("horizon = 2000\nruns = 10\n");
    cfg.learners.tree_checks = Some(true);
    cfg.learners.tree_trace = true;
    let runs: Vec<u64> = (0..cfg.runs).collect();
    let results = par::map(runs, |run| {
        let scn = cfg.scenario(MechanismKind::TreeNsp, run).expect("valid scenario");
        let once = catch_unwind(AssertUnwindSafe(|| simulate(&scn, MechanismKind::TreeNsp)));
        let twice = catch_unwind(AssertUnwindSafe(|| simulate(&scn, MechanismKind::TreeNsp)));
        match (once, twice) {
            (Ok(Ok(a)), Ok(Ok(b))) => {
                let final_ok = a
                    .learners
                    .iter()
                    .filter_map(|l| l.as_tree())
                    .map(|t| t.check_invariants())
                    .collect::<Result<Vec<_>, _>>();
                if let Err(e) = final_ok {
                    return Err(format!("run {run}: {e}"));
                }
                let same_rounds = a.rounds == b.rounds;
                let same_logs = a
                    .learners
                    .iter()
                    .zip(&b.learners)
                    .all(|(x, y)| x.as_tree().and_then(|t| t.trace()) == y.as_tree().and_then(|t| t.trace()));
                let lines: usize = a
                    .learners
                    .iter()
                    .filter_map(|l| l.as_tree().and_then(|t| t.trace()).map(|t| t.len()))
                    .sum();
                if same_rounds && same_logs {
                    Ok(lines)
                } else {
                    Err(format!("run {run}: repeated run diverged"))
                }
            }
            (Ok(Err(e)), _) | (_, Ok(Err(e))) => Err(format!("run {run}: {e}")),
            _ => Err(format!("run {run}: invariant check panicked")),
        }
    });
    let errors: Vec<&String> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    let mutations: usize = results.iter().filter_map(|r| r.as_ref().ok()).sum();
    Outcome::new(
        errors.is_empty(),
        format!(
            "{} runs, {mutations} logged mutations checked{}",
            results.len(),
            errors.first().map(|e| format!("; {e}")).unwrap_or_default()
        ),
    )
}

// 9. recommendation latency growth (soft)

fn tree_latency() -> Outcome {
    let cfg = tanh5("");
    let points = bench_tree(&cfg, &BENCH_CHECKPOINTS, 200).expect("valid config");
    let ratio = points[2].mean_secs / points[1].mean_secs;
    let timings: Vec<String> = points
        .iter()
        .map(|p| format!("{}: {:.2e}s", p.points, p.mean_secs))
        .collect();
    Outcome::new(ratio <= 15.0, format!("{}; ratio 10000/1000 = {ratio:.2} (need <= 15)", timings.join(", ")))
}

/// id, name, soft, check
type Criterion = (u32, &'static str, bool, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "mmf exact example", false, mmf_example),
        (2, "mmf property suite", false, mmf_properties),
        (3, "round-by-round bisection loss and fairness", false, nsp_bisection_bounds),
        (4, "bracketed strategy-proofness battery", false, strategy_proofness),
        (5, "grid search loss bound", false, grid_loss_bound),
        (6, "confidence coverage", false, coverage),
        (7, "ordering against the entitlement baseline", false, figure_ordering),
        (8, "tree invariants and determinism", false, tree_invariants),
        (9, "tree recommendation latency", true, tree_latency),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix("criterion=").and_then(|n| n.parse().ok()))
        .collect();
    let mut failed = 0;
    for (id, name, soft, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(check).unwrap_or_else(|_| Outcome::new(false, "panicked"));
        let secs = start.elapsed().as_secs_f64();
        let status = match (outcome.pass, soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => {
                failed += 1;
                "FAIL"
            }
        };
        println!("criterion {id} {status} [{secs:.1}s] {name}: {}", outcome.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
