//! Multi-round allocation: the bracketed strategy-proof loop, the
//! round-by-round loop and the fixed-entitlement baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{
    report_load, report_reward, sample_load, sample_reward, stream, AgentProfile, FeedbackMode, Purpose,
};
use crate::error::{Error, Result};
use crate::learners::{
    grid_point, rprime_det, rprime_det_sp, rprime_glm, rprime_tree, BinarySearchState, GlmParams, GlmState,
    GridState, KappaSource, LearnerState, Link, LowerRule, TreeParams, TreeState,
};
use crate::metrics::{loss_components, LossComponents};
use crate::mmf::{allocate, validate_entitlements};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Entitlement,
    DetSpGrid,
    DetSpBs,
    DetNspBs,
    GlmSp,
    GlmNsp,
    TreeSp,
    TreeNsp,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 8] = [
        MechanismKind::Entitlement,
        MechanismKind::DetSpGrid,
        MechanismKind::DetSpBs,
        MechanismKind::DetNspBs,
        MechanismKind::GlmSp,
        MechanismKind::GlmNsp,
        MechanismKind::TreeSp,
        MechanismKind::TreeNsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Entitlement => "entitlement",
            MechanismKind::DetSpGrid => "det_sp_grid",
            MechanismKind::DetSpBs => "det_sp_bs",
            MechanismKind::DetNspBs => "det_nsp_bs",
            MechanismKind::GlmSp => "glm_sp",
            MechanismKind::GlmNsp => "glm_nsp",
            MechanismKind::TreeSp => "tree_sp",
            MechanismKind::TreeNsp => "tree_nsp",
        }
    }

    pub fn is_sp(self) -> bool {
        matches!(
            self,
            MechanismKind::DetSpGrid | MechanismKind::DetSpBs | MechanismKind::GlmSp | MechanismKind::TreeSp
        )
    }

    pub fn is_learning(self) -> bool {
        self != MechanismKind::Entitlement
    }

    pub fn needs_deterministic(self) -> bool {
        matches!(
            self,
            MechanismKind::DetSpGrid | MechanismKind::DetSpBs | MechanismKind::DetNspBs
        )
    }

    pub fn needs_stochastic(self) -> bool {
        matches!(
            self,
            MechanismKind::GlmSp | MechanismKind::GlmNsp | MechanismKind::TreeSp | MechanismKind::TreeNsp
        )
    }

    /// Deterministic rewards for the deterministic learners, Bernoulli
    /// aggregates for everything else.
    pub fn default_feedback(self) -> FeedbackMode {
        if self.needs_deterministic() {
            FeedbackMode::Deterministic
        } else {
            FeedbackMode::BernoulliAggregate
        }
    }

    pub fn check_feedback(self, mode: FeedbackMode) -> Result<()> {
        if self.needs_deterministic() && !mode.is_deterministic() {
            return Err(Error::Incompatible(format!(
                "{} needs deterministic feedback, got {}",
                self.name(),
                mode.name()
            )));
        }
        if self.needs_stochastic() && mode.is_deterministic() {
            return Err(Error::Incompatible(format!(
                "{} needs stochastic feedback, got {}",
                self.name(),
                mode.name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MechanismKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Estimator constants shared by every agent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnerSettings {
    pub delta: f64,
    pub glm_beta_scale: f64,
    pub tree_beta_scale: f64,
    /// Defaults to `mu^-1(alpha) / udmax` per agent.
    pub theta_min: Option<f64>,
    /// Defaults to `1000 theta_min`.
    pub theta_max: Option<f64>,
    pub kappa: KappaSource,
    pub lower_rule: LowerRule,
    /// Payoff variation bound handed to the tree; each agent's own when unset.
    pub tree_l: Option<f64>,
    pub tree_trace: bool,
    /// Overrides the build-dependent default for per-mutation tree checks.
    pub tree_checks: Option<bool>,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            glm_beta_scale: 0.2,
            tree_beta_scale: 1.0,
            theta_min: None,
            theta_max: None,
            kappa: KappaSource::Literal,
            lower_rule: LowerRule::Floor,
            tree_l: None,
            tree_trace: false,
            tree_checks: None,
        }
    }
}

/// Everything one simulation run needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub profiles: Vec<AgentProfile>,
    pub horizon: u64,
    pub feedback: FeedbackMode,
    pub load_range: (f64, f64),
    pub udmax: f64,
    pub learners: LearnerSettings,
    pub seed: u64,
    pub run: u64,
    /// Digest of the configuration this scenario came from.
    pub digest: String,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.profiles.len()
    }

    pub fn entitlements(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.entitlement).collect()
    }

    pub fn unit_demands(&self) -> Vec<f64> {
        self.profiles.iter().map(AgentProfile::unit_demand).collect()
    }

    pub fn validate(&self) -> Result<()> {
        validate_entitlements(&self.entitlements())?;
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let (lo, hi) = self.load_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid load range [{lo}, {hi}]")));
        }
        if !(self.udmax > 0.0 && self.udmax.is_finite()) {
            return Err(Error::InvalidArgument(format!("udmax {} must be positive", self.udmax)));
        }
        if let FeedbackMode::Gaussian { sigma } = self.feedback {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidArgument(format!("gaussian sigma {sigma} must be positive")));
            }
        }
        for (i, p) in self.profiles.iter().enumerate() {
            p.policy.validate()?;
            let w = p.payoff.unit_demand()?;
            if w > self.udmax {
                return Err(Error::Domain(format!("agent {i}: unit demand {w} above udmax")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Explore,
    Exploit,
}

/// One agent's view of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentRound {
    pub load: f64,
    pub reported_load: f64,
    pub reported_demand: f64,
    pub allocation: f64,
    pub reward: f64,
    pub reported_reward: f64,
    pub sigma: f64,
    /// Unit demand the mechanism acted on, if it used one.
    pub ud_estimate: Option<f64>,
    /// Learner interval at the start of the round.
    pub ud_lb: Option<f64>,
    pub ud_ub: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: u64,
    pub bracket: Option<u64>,
    pub phase: Phase,
    pub agents: Vec<AgentRound>,
    pub loss: LossComponents,
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub kind: MechanismKind,
    pub digest: String,
    pub rounds: Vec<RoundRecord>,
    /// Learner states after the last round; empty for the baseline.
    pub learners: Vec<LearnerState>,
}

fn build_learner(kind: MechanismKind, scn: &Scenario, profile: &AgentProfile) -> Result<Option<LearnerState>> {
    let udmax = scn.udmax;
    let alpha = profile.policy.reported_threshold(profile.payoff.alpha);
    let s = &scn.learners;
    let learner = match kind {
        MechanismKind::Entitlement => return Ok(None),
        MechanismKind::DetSpGrid => LearnerState::Grid(GridState::new(udmax, alpha)),
        MechanismKind::DetSpBs | MechanismKind::DetNspBs => {
            LearnerState::Binary(BinarySearchState::new(udmax, alpha))
        }
        MechanismKind::GlmSp | MechanismKind::GlmNsp => {
            let link = Link::from_payoff(profile.payoff.kind).ok_or_else(|| {
                Error::Incompatible(format!(
                    "{} needs tanh or algebraic payoffs, got {}",
                    kind.name(),
                    profile.payoff.kind.name()
                ))
            })?;
            let mut p = GlmParams::new(link, alpha, udmax, scn.n());
            if let Some(tm) = s.theta_min {
                p.theta_min = tm;
                p.theta_max = 1000.0 * tm;
            }
            if let Some(tx) = s.theta_max {
                p.theta_max = tx;
            }
            p.kappa = s.kappa;
            p.delta = s.delta;
            p.beta_scale = s.glm_beta_scale;
            p.lower_rule = s.lower_rule;
            LearnerState::Glm(Box::new(GlmState::new(p)?))
        }
        MechanismKind::TreeSp | MechanismKind::TreeNsp => {
            let l = s.tree_l.unwrap_or(profile.payoff.lipschitz_l);
            let mut t = TreeState::new(TreeParams {
                alpha,
                udmax,
                l,
                n_agents: scn.n(),
                delta: s.delta,
                beta_scale: s.tree_beta_scale,
            })?;
            if s.tree_trace {
                t = t.with_trace();
            }
            if let Some(on) = s.tree_checks {
                t.set_invariant_checks(on);
            }
            LearnerState::Tree(Box::new(t))
        }
    };
    Ok(Some(learner))
}

struct Sim<'a> {
    scn: &'a Scenario,
    entitlements: Vec<f64>,
    true_ud: Vec<f64>,
    learners: Vec<LearnerState>,
    rounds: Vec<RoundRecord>,
}

/// Draws of one round before any allocation is made.
struct Draws {
    loads: Vec<f64>,
    reported: Vec<f64>,
    intervals: Vec<(Option<f64>, Option<f64>)>,
}

impl<'a> Sim<'a> {
    fn t(&self) -> u64 {
        self.rounds.len() as u64 + 1
    }

    fn done(&self) -> bool {
        self.rounds.len() as u64 >= self.scn.horizon
    }

    fn draw(&mut self) -> Result<Draws> {
        let t = self.t();
        let scn = self.scn;
        for l in &mut self.learners {
            l.begin_round(t);
        }
        let mut loads = Vec::with_capacity(scn.n());
        let mut reported = Vec::with_capacity(scn.n());
        for (i, p) in scn.profiles.iter().enumerate() {
            let i = i as u64;
            let v = sample_load(
                scn.load_range.0,
                scn.load_range.1,
                &mut stream(scn.seed, scn.run, i, Purpose::Load, t),
            )?;
            let rv = report_load(&p.policy, v, &mut stream(scn.seed, scn.run, i, Purpose::PolicyLoad, t));
            loads.push(v);
            reported.push(rv);
        }
        let intervals = (0..scn.n())
            .map(|i| match self.learners.get(i) {
                Some(l) => match l.interval() {
                    Some((lb, ub)) => (Some(lb), Some(ub)),
                    None => (None, Some(l.ud_ub())),
                },
                None => (None, None),
            })
            .collect();
        Ok(Draws {
            loads,
            reported,
            intervals,
        })
    }

    /// Rewards, learner updates and bookkeeping for one round.
    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        draws: Draws,
        demands: Vec<f64>,
        alloc: Vec<f64>,
        estimates: Vec<Option<f64>>,
        learn_from: &[usize],
        bracket: Option<u64>,
        phase: Phase,
    ) -> Result<()> {
        let t = self.t();
        let scn = self.scn;
        let n = scn.n();
        let mut agents = Vec::with_capacity(n);
        for i in 0..n {
            let p = &scn.profiles[i];
            let id = i as u64;
            let fb = sample_reward(
                &p.payoff,
                scn.feedback,
                alloc[i],
                draws.loads[i],
                &mut stream(scn.seed, scn.run, id, Purpose::Reward, t),
            );
            let rx = report_reward(&p.policy, fb.x, &mut stream(scn.seed, scn.run, id, Purpose::PolicyReward, t));
            agents.push(AgentRound {
                load: draws.loads[i],
                reported_load: draws.reported[i],
                reported_demand: demands[i],
                allocation: alloc[i],
                reward: fb.x,
                reported_reward: rx,
                sigma: fb.sigma,
                ud_estimate: estimates[i],
                ud_lb: draws.intervals[i].0,
                ud_ub: draws.intervals[i].1,
            });
        }
        for &i in learn_from {
            let a = &agents[i];
            let normalloc = (a.allocation / a.reported_load).clamp(0.0, scn.udmax);
            self.learners[i].record(normalloc, a.reported_reward, a.sigma)?;
        }
        let true_demand: Vec<f64> = (0..n).map(|i| draws.loads[i] * self.true_ud[i]).collect();
        let loss = loss_components(&true_demand, &alloc);
        self.rounds.push(RoundRecord {
            t,
            bracket,
            phase,
            agents,
            loss,
        });
        Ok(())
    }

    fn entitlement_round(&mut self, learn: bool, bracket: Option<u64>, phase: Phase) -> Result<()> {
        let draws = self.draw()?;
        let alloc = self.entitlements.clone();
        let demands = alloc.clone();
        let n = self.scn.n();
        let learn_from: Vec<usize> = if learn { (0..n).collect() } else { Vec::new() };
        self.finish(draws, demands, alloc, vec![None; n], &learn_from, bracket, phase)
    }

    fn solo_round(&mut self, agent: usize, probe: f64, q: u64) -> Result<()> {
        let draws = self.draw()?;
        let n = self.scn.n();
        let mut demands = vec![0.0; n];
        let mut alloc = vec![0.0; n];
        let mut estimates = vec![None; n];
        demands[agent] = probe * draws.reported[agent];
        alloc[agent] = demands[agent].min(1.0);
        estimates[agent] = Some(probe);
        self.finish(draws, demands, alloc, estimates, &[agent], Some(q), Phase::Explore)
    }

    fn mmf_round(&mut self, unit: &[f64], learn: bool, bracket: Option<u64>, phase: Phase) -> Result<()> {
        let draws = self.draw()?;
        let n = self.scn.n();
        let demands: Vec<f64> = (0..n).map(|i| draws.reported[i] * unit[i]).collect();
        let alloc = allocate(&self.entitlements, &demands)?.into_inner();
        let learn_from: Vec<usize> = if learn { (0..n).collect() } else { Vec::new() };
        let estimates = unit.iter().map(|&w| Some(w)).collect();
        self.finish(draws, demands, alloc, estimates, &learn_from, bracket, phase)
    }

    fn explore(&mut self, kind: MechanismKind, q: u64) -> Result<()> {
        let n = self.scn.n();
        match kind {
            MechanismKind::DetSpGrid => {
                let probe = grid_point(q, self.scn.udmax);
                for i in 0..n {
                    if self.done() {
                        break;
                    }
                    self.solo_round(i, probe, q)?;
                }
            }
            MechanismKind::DetSpBs => {
                for j in 0..2 * n {
                    if self.done() {
                        break;
                    }
                    let i = j % n;
                    let probe = self.learners[i].recommend();
                    self.solo_round(i, probe, q)?;
                }
            }
            MechanismKind::GlmSp => {
                if !self.done() {
                    self.entitlement_round(true, Some(q), Phase::Explore)?;
                }
            }
            MechanismKind::TreeSp => {
                for i in 0..n {
                    if self.done() {
                        break;
                    }
                    // refresh for this round before the probe is chosen
                    let t = self.t();
                    self.learners[i].begin_round(t);
                    let probe = match &mut self.learners[i] {
                        LearnerState::Tree(s) => s.get_ud_rec_for_ub(),
                        _ => unreachable!("tree mechanism holds tree learners"),
                    };
                    self.solo_round(i, probe, q)?;
                }
            }
            _ => unreachable!("only bracketed kinds explore"),
        }
        Ok(())
    }

    fn run_sp(&mut self, kind: MechanismKind, observe: &mut dyn FnMut(&RoundRecord, &[LearnerState])) -> Result<()> {
        let n = self.scn.n();
        let mut q = 1u64;
        while !self.done() {
            let before = self.rounds.len();
            self.explore(kind, q)?;
            self.notify(before, observe);
            let snapshot: Vec<f64> = self.learners.iter().map(LearnerState::ud_ub).collect();
            let exploit = match kind {
                MechanismKind::DetSpGrid => rprime_det_sp(q, n),
                MechanismKind::DetSpBs => rprime_det(q),
                MechanismKind::GlmSp => rprime_glm(q),
                MechanismKind::TreeSp => rprime_tree(q, n),
                _ => unreachable!("bracketed kinds only"),
            };
            let mut r = 0;
            while r < exploit && !self.done() {
                let before = self.rounds.len();
                self.mmf_round(&snapshot, false, Some(q), Phase::Exploit)?;
                self.notify(before, observe);
                r += 1;
            }
            q += 1;
        }
        Ok(())
    }

    fn run_nsp(&mut self, observe: &mut dyn FnMut(&RoundRecord, &[LearnerState])) -> Result<()> {
        if !self.done() {
            self.entitlement_round(true, None, Phase::Exploit)?;
            self.notify(0, observe);
        }
        while !self.done() {
            let t = self.t();
            for l in &mut self.learners {
                l.begin_round(t);
            }
            let unit: Vec<f64> = self.learners.iter().map(LearnerState::recommend).collect();
            let before = self.rounds.len();
            self.mmf_round(&unit, true, None, Phase::Exploit)?;
            self.notify(before, observe);
        }
        Ok(())
    }

    fn run_baseline(&mut self, observe: &mut dyn FnMut(&RoundRecord, &[LearnerState])) -> Result<()> {
        while !self.done() {
            let before = self.rounds.len();
            self.entitlement_round(false, None, Phase::Exploit)?;
            self.notify(before, observe);
        }
        Ok(())
    }

    fn notify(&self, from: usize, observe: &mut dyn FnMut(&RoundRecord, &[LearnerState])) {
        for r in &self.rounds[from..] {
            observe(r, &self.learners);
        }
    }
}

/// Runs one simulation of `kind` on `scn`.
pub fn simulate(scn: &Scenario, kind: MechanismKind) -> Result<SimulationTrace> {
    simulate_with_observer(scn, kind, |_, _| {})
}

/// As [`simulate`], handing every finished round and the learner states to
/// `observe`. Exploration rounds of one bracket are reported together once
/// the bracket's exploration ends.
pub fn simulate_with_observer(
    scn: &Scenario,
    kind: MechanismKind,
    mut observe: impl FnMut(&RoundRecord, &[LearnerState]),
) -> Result<SimulationTrace> {
    scn.validate()?;
    kind.check_feedback(scn.feedback)?;
    let learners = scn
        .profiles
        .iter()
        .map(|p| build_learner(kind, scn, p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut sim = Sim {
        scn,
        entitlements: scn.entitlements(),
        true_ud: scn.unit_demands(),
        learners,
        rounds: Vec::with_capacity(scn.horizon.min(1 << 20) as usize),
    };
    match kind {
        MechanismKind::Entitlement => sim.run_baseline(&mut observe)?,
        k if k.is_sp() => sim.run_sp(k, &mut observe)?,
        _ => sim.run_nsp(&mut observe)?,
    }
    debug_assert_eq!(sim.rounds.len() as u64, scn.horizon);
    Ok(SimulationTrace {
        kind,
        digest: scn.digest.clone(),
        rounds: sim.rounds,
        learners: sim.learners,
    })
}
