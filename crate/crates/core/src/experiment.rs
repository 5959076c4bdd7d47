//! Seeded multi-run experiments, their CSV outputs and the aggregate report.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::env::{sample_reward, stream, AgentProfile, FeedbackMode, PayoffKind, PayoffSpec, Purpose};
use crate::error::{Error, Result};
use crate::learners::{TreeParams, TreeState};
use crate::mechanism::{simulate, LearnerSettings, MechanismKind, Scenario, SimulationTrace};
use crate::metrics::{coverage_rate, MetricSeries};
use crate::par;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const AGENTS_FILE: &str = "agents.csv";
pub const METADATA_FILE: &str = "metadata.json";
const DIGEST_PREFIX: &str = "# config_digest=";

/// Outcome of one `(method, run)` cell.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub kind: MechanismKind,
    pub run: u64,
    pub series: MetricSeries,
    pub coverage: Option<f64>,
    pub trace: SimulationTrace,
}

/// Runs every `(method, run)` cell of `cfg`, in parallel when enabled.
pub fn run_cells(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let profiles = cfg.profiles()?;
    let cells: Vec<(MechanismKind, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&k| (0..cfg.runs).map(move |r| (k, r)))
        .collect();
    par::try_map(cells, |(kind, run)| {
        let scn = cfg.scenario(kind, run)?;
        let trace = simulate(&scn, kind)?;
        Ok(RunResult {
            kind,
            run,
            series: MetricSeries::from_trace(&trace, &profiles),
            coverage: coverage_rate(&trace, &profiles),
            trace,
        })
    })
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    name: &'a str,
    config_digest: String,
    seed: u64,
    runs: u64,
    version: &'static str,
    parallel: bool,
    config: &'a ExperimentConfig,
    coverage: BTreeMap<String, Vec<Option<f64>>>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Runs the experiment and writes the summary CSV, the per-agent CSV and
/// the metadata record into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunResult>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = run_cells(cfg)?;
    let digest = cfg.digest();
    let profiles = cfg.profiles()?;
    write_summary(&out_dir.join(SUMMARY_FILE), &digest, &results)?;
    write_agents(&out_dir.join(AGENTS_FILE), &digest, cfg, &profiles, &results)?;

    let mut coverage: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in &results {
        coverage.entry(r.kind.name().to_string()).or_default().push(r.coverage);
    }
    let meta = Metadata {
        name: &cfg.name,
        config_digest: digest,
        seed: cfg.seed,
        runs: cfg.runs,
        version: env!("CARGO_PKG_VERSION"),
        parallel: par::PARALLEL,
        config: cfg,
        coverage,
    };
    let path = out_dir.join(METADATA_FILE);
    let mut text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

fn create(path: &Path, digest: &str) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{DIGEST_PREFIX}{digest}").map_err(|e| Error::io(path, e))?;
    Ok(w)
}

fn write_summary(path: &Path, digest: &str, results: &[RunResult]) -> Result<()> {
    let w = create(path, digest)?;
    let mut csv = csv::Writer::from_writer(w);
    let err = |e| Error::csv(path, e);
    csv.write_record(["method", "run", "t", "round_loss", "cum_loss"]).map_err(err)?;
    for r in results {
        for (i, (rl, cl)) in r.series.round_loss.iter().zip(&r.series.cum_loss).enumerate() {
            csv.write_record([
                r.kind.name().to_string(),
                r.run.to_string(),
                (i + 1).to_string(),
                rl.to_string(),
                cl.to_string(),
            ])
            .map_err(err)?;
        }
    }
    csv.flush().map_err(|e| Error::io(path, e))
}

fn write_agents(
    path: &Path,
    digest: &str,
    cfg: &ExperimentConfig,
    profiles: &[AgentProfile],
    results: &[RunResult],
) -> Result<()> {
    let w = create(path, digest)?;
    let mut csv = csv::Writer::from_writer(w);
    let err = |e| Error::csv(path, e);
    csv.write_record([
        "method",
        "run",
        "t",
        "agent",
        "true_unit_demand",
        "load",
        "reported_load",
        "allocation",
        "reward",
        "ud_estimate",
        "ud_lb",
        "ud_ub",
        "fairness_gap",
    ])
    .map_err(err)?;
    let truth: Vec<f64> = profiles.iter().map(AgentProfile::unit_demand).collect();
    for r in results {
        let last = r.trace.rounds.len();
        for (j, round) in r.trace.rounds.iter().enumerate() {
            let t = j + 1;
            if t % cfg.detail_stride as usize != 0 && t != last {
                continue;
            }
            for (i, a) in round.agents.iter().enumerate() {
                csv.write_record([
                    r.kind.name().to_string(),
                    r.run.to_string(),
                    t.to_string(),
                    i.to_string(),
                    truth[i].to_string(),
                    a.load.to_string(),
                    a.reported_load.to_string(),
                    a.allocation.to_string(),
                    a.reward.to_string(),
                    fmt_opt(a.ud_estimate),
                    fmt_opt(a.ud_lb),
                    fmt_opt(a.ud_ub),
                    r.series.fairness[i][j].to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    csv.flush().map_err(|e| Error::io(path, e))
}

/// Mean and standard error of cumulative loss at one `(method, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub t: u64,
    pub runs: usize,
    pub mean: f64,
    pub stderr: f64,
}

fn summary_files(in_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = fs::read_dir(in_dir).map_err(|e| Error::io(in_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(in_dir, e))?.path();
        let is_summary = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(SUMMARY_FILE));
        if is_summary {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {SUMMARY_FILE} in {}",
            in_dir.display()
        )));
    }
    Ok(files)
}

/// Aggregates every summary CSV in `in_dir`. All of them must come from the
/// same configuration.
pub fn aggregate(in_dir: &Path) -> Result<Vec<ReportRow>> {
    let mut digest: Option<String> = None;
    // (method, t) -> run -> cum_loss
    let mut cells: BTreeMap<(String, u64), BTreeMap<u64, f64>> = BTreeMap::new();
    for path in summary_files(in_dir)? {
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut reader = BufReader::new(f);
        let mut first = String::new();
        reader.read_line(&mut first).map_err(|e| Error::io(&path, e))?;
        let d = first
            .trim_end()
            .strip_prefix(DIGEST_PREFIX)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: missing digest line", path.display())))?
            .to_string();
        match &digest {
            None => digest = Some(d),
            Some(prev) if *prev != d => {
                return Err(Error::Mixed(format!(
                    "{} has config digest {d}, expected {prev}",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        let mut csv = csv::Reader::from_reader(reader);
        for rec in csv.records() {
            let rec = rec.map_err(|e| Error::csv(&path, e))?;
            let bad = || Error::InvalidArgument(format!("{}: malformed row {rec:?}", path.display()));
            let method = rec.get(0).ok_or_else(bad)?.to_string();
            let run: u64 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let t: u64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let cum: f64 = rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if cells.entry((method.clone(), t)).or_default().insert(run, cum).is_some() {
                return Err(Error::Mixed(format!("run {run} of {method} appears twice")));
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|((method, t), runs)| {
            let xs: Vec<f64> = runs.into_values().collect();
            let k = xs.len();
            let mean = xs.iter().sum::<f64>() / k as f64;
            let stderr = if k > 1 {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
                (var / k as f64).sqrt()
            } else {
                0.0
            };
            ReportRow {
                method,
                t,
                runs: k,
                mean,
                stderr,
            }
        })
        .collect())
}

/// Writes the aggregate of `in_dir` to `out` in long format.
pub fn report(in_dir: &Path, out: &Path) -> Result<Vec<ReportRow>> {
    let rows = aggregate(in_dir)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut csv = csv::Writer::from_path(out).map_err(|e| Error::csv(out, e))?;
    let err = |e| Error::csv(out, e);
    csv.write_record(["method", "t", "runs", "mean_cum_loss", "stderr_cum_loss"]).map_err(err)?;
    for r in &rows {
        csv.write_record([
            r.method.clone(),
            r.t.to_string(),
            r.runs.to_string(),
            r.mean.to_string(),
            r.stderr.to_string(),
        ])
        .map_err(err)?;
    }
    csv.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

/// Mean recommendation latency after a number of recorded points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyPoint {
    pub points: u64,
    pub mean_secs: f64,
}

pub const BENCH_CHECKPOINTS: [u64; 3] = [100, 1000, 10000];

/// Feeds one tree learner the rewards of agent 0 at its own
/// recommendations and times `get_ud_rec` at each checkpoint.
pub fn bench_tree(cfg: &ExperimentConfig, checkpoints: &[u64], reps: u32) -> Result<Vec<LatencyPoint>> {
    let profiles = cfg.profiles()?;
    let p = &profiles[0];
    let l = cfg.lipschitz.as_ref().map(|ls| ls[0]).unwrap_or(p.payoff.lipschitz_l);
    let mut tree = TreeState::new(TreeParams {
        alpha: p.payoff.alpha,
        udmax: cfg.udmax,
        l,
        n_agents: cfg.n_agents,
        delta: cfg.learners.delta,
        beta_scale: cfg.learners.tree_beta_scale,
    })?;
    tree.set_invariant_checks(false);
    let mode = match cfg.feedback.for_method(MechanismKind::TreeNsp) {
        FeedbackMode::Deterministic => FeedbackMode::BernoulliAggregate,
        m => m,
    };
    let mut sorted: Vec<u64> = checkpoints.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    let mut recorded = 0u64;
    for &target in &sorted {
        while recorded < target {
            let t = recorded + 1;
            tree.begin_round(t);
            let mut rng = stream(cfg.seed, 0, 0, Purpose::Load, t);
            let v = rng.gen_range(cfg.load_range.0..=cfg.load_range.1);
            // jitter around the recommendation so the whole range gets data
            let a = (tree.get_ud_rec() * rng.gen_range(0.5..1.5)).min(cfg.udmax);
            let fb = sample_reward(&p.payoff, mode, a * v, v, &mut stream(cfg.seed, 0, 0, Purpose::Reward, t));
            tree.record_fb(a, fb.x, fb.sigma)?;
            recorded += 1;
        }
        let start = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps.max(1) {
            sink += std::hint::black_box(tree.get_ud_rec());
        }
        std::hint::black_box(sink);
        out.push(LatencyPoint {
            points: target,
            mean_secs: start.elapsed().as_secs_f64() / reps.max(1) as f64,
        });
    }
    Ok(out)
}

/// A small random environment with `udmax = 1` and loads in `[0.5, 1]`:
/// unit demands uniform on `[0.05, 1]`, thresholds uniform on `[0.6, 0.95]`,
/// tanh or algebraic payoffs, random entitlements, deterministic feedback.
pub fn normalized_scenario(n: usize, horizon: u64, seed: u64) -> Scenario {
    let mut rng = stream(seed, u64::MAX, n as u64, Purpose::Setup, 0);
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let profiles = raw
        .iter()
        .map(|&r| {
            let w = rng.gen_range(0.05..=1.0);
            let alpha = rng.gen_range(0.6..=0.95);
            let kind = if rng.gen::<bool>() {
                PayoffKind::Tanh
            } else {
                PayoffKind::Algebraic
            };
            let spec = PayoffSpec::with_unit_demand(kind, w, alpha, 1.0).expect("ranges are valid");
            AgentProfile::new(r / total, spec)
        })
        .collect();
    Scenario {
        profiles,
        horizon,
        feedback: FeedbackMode::Deterministic,
        load_range: (0.5, 1.0),
        udmax: 1.0,
        learners: LearnerSettings::default(),
        seed,
        run: 0,
        digest: String::new(),
    }
}
