//! Loss, fairness, strategy and coverage numbers computed from traces.

use serde::Serialize;

use crate::env::{AgentProfile, ReportPolicy};
use crate::error::{Error, Result};
use crate::mechanism::{simulate, MechanismKind, Scenario, SimulationTrace};

/// Resources left on the table in one round.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossComponents {
    /// Unallocated resource.
    pub lambda_ur: f64,
    /// Allocation above true demand, summed over agents.
    pub lambda_or: f64,
    /// True demand left unmet, summed over agents.
    pub lambda_ud: f64,
    /// `min(lambda_ur + lambda_or, lambda_ud)`
    pub lot: f64,
}

pub fn loss_components(true_demands: &[f64], allocations: &[f64]) -> LossComponents {
    debug_assert_eq!(true_demands.len(), allocations.len());
    let total: f64 = allocations.iter().sum();
    let lambda_ur = (1.0 - total).max(0.0);
    let mut lambda_or = 0.0;
    let mut lambda_ud = 0.0;
    for (&d, &a) in true_demands.iter().zip(allocations) {
        lambda_or += (a - d).max(0.0);
        lambda_ud += (d - a).max(0.0);
    }
    LossComponents {
        lambda_ur,
        lambda_or,
        lambda_ud,
        lot: (lambda_ur + lambda_or).min(lambda_ud),
    }
}

/// Per-round and cumulative loss plus per-agent cumulative fairness gaps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricSeries {
    pub round_loss: Vec<f64>,
    pub cum_loss: Vec<f64>,
    /// `fairness[i][t]` is agent `i`'s gap summed over rounds `1..=t+1`.
    pub fairness: Vec<Vec<f64>>,
}

impl MetricSeries {
    pub fn from_trace(trace: &SimulationTrace, profiles: &[AgentProfile]) -> Self {
        let round_loss: Vec<f64> = trace.rounds.iter().map(|r| r.loss.lot).collect();
        let cum_loss = round_loss
            .iter()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        Self {
            round_loss,
            cum_loss,
            fairness: fairness_gap(trace, profiles),
        }
    }

    pub fn total_loss(&self) -> f64 {
        self.cum_loss.last().copied().unwrap_or(0.0)
    }
}

pub fn cumulative_loss(trace: &SimulationTrace) -> f64 {
    trace.rounds.iter().map(|r| r.loss.lot).sum()
}

/// Cumulative `u_i(e_i / v) - u_i(a_i / v)` per agent, round by round.
pub fn fairness_gap(trace: &SimulationTrace, profiles: &[AgentProfile]) -> Vec<Vec<f64>> {
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut acc = 0.0;
            trace
                .rounds
                .iter()
                .map(|r| {
                    let a = &r.agents[i];
                    acc += p.utility(p.entitlement / a.load) - p.utility(a.allocation / a.load);
                    acc
                })
                .collect()
        })
        .collect()
}

/// Final fairness gap per agent.
pub fn final_fairness_gap(trace: &SimulationTrace, profiles: &[AgentProfile]) -> Vec<f64> {
    fairness_gap(trace, profiles)
        .into_iter()
        .map(|s| s.last().copied().unwrap_or(0.0))
        .collect()
}

/// Realized utility summed over the trace, per agent.
pub fn utility_sums(trace: &SimulationTrace, profiles: &[AgentProfile]) -> Vec<f64> {
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            trace
                .rounds
                .iter()
                .map(|r| p.utility(r.agents[i].allocation / r.agents[i].load))
                .sum()
        })
        .collect()
}

/// Utility agent `target` gains by following `policy` instead of reporting
/// truthfully, everyone else truthful and all randomness shared.
pub fn strategy_gap(scn: &Scenario, kind: MechanismKind, target: usize, policy: ReportPolicy) -> Result<f64> {
    if target >= scn.n() {
        return Err(Error::InvalidArgument(format!(
            "target agent {target} out of range for {} agents",
            scn.n()
        )));
    }
    let mut honest = scn.clone();
    for p in &mut honest.profiles {
        p.policy = ReportPolicy::Truthful;
    }
    let mut deviant = honest.clone();
    deviant.profiles[target].policy = policy;
    // utilities are always measured against the true profiles
    let truth = honest.profiles.clone();
    let u_honest = utility_sums(&simulate(&honest, kind)?, &truth)[target];
    let u_dev = utility_sums(&simulate(&deviant, kind)?, &truth)[target];
    Ok(u_dev - u_honest)
}

/// Relative slack for coverage checks. Deterministic bisection pins the
/// interval down to a few ulps of the demand, where rounding in `a / v`
/// can put the truth just outside.
pub const COVERAGE_RTOL: f64 = 1e-9;

/// Fraction of `(round, agent)` samples whose true unit demand lies inside
/// the learner's interval, up to [`COVERAGE_RTOL`]. `None` when the trace
/// carries no intervals.
pub fn coverage_rate(trace: &SimulationTrace, profiles: &[AgentProfile]) -> Option<f64> {
    let truth: Vec<f64> = profiles.iter().map(AgentProfile::unit_demand).collect();
    let (mut hit, mut total) = (0u64, 0u64);
    for r in &trace.rounds {
        for (i, a) in r.agents.iter().enumerate() {
            let (lb, ub) = (a.ud_lb?, a.ud_ub?);
            total += 1;
            let slack = COVERAGE_RTOL * truth[i];
            if lb <= truth[i] + slack && truth[i] - slack <= ub {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}
