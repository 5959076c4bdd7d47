//! Ground truth for simulations: payoff curves, utilities, loads, rewards and
//! the reporting policies agents may follow.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a payoff curve as a function of resource per unit load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    /// `tanh(theta x)`
    Tanh,
    /// `1 - 1 / (1 + theta x)`
    Algebraic,
    /// `1 / (1 + exp(-theta (x - b)))`
    Logistic,
}

impl PayoffKind {
    pub fn name(self) -> &'static str {
        match self {
            PayoffKind::Tanh => "tanh",
            PayoffKind::Algebraic => "algebraic",
            PayoffKind::Logistic => "logistic",
        }
    }
}

/// A monotone payoff curve together with the agent's target payoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    pub kind: PayoffKind,
    /// Scale parameter. For the logistic curve this is the steepness.
    pub theta: f64,
    /// Offset of the logistic curve; unused otherwise.
    pub b: f64,
    /// Target payoff, in (0, 1).
    pub alpha: f64,
    /// Largest resource per unit load that can ever be needed.
    pub udmax: f64,
    /// The payoff is `(lipschitz_l / udmax)`-Lipschitz on `[0, udmax]`.
    pub lipschitz_l: f64,
}

impl PayoffSpec {
    pub fn tanh(theta: f64, alpha: f64, udmax: f64) -> Result<Self> {
        Self::new(PayoffKind::Tanh, theta, 0.0, alpha, udmax)
    }

    pub fn algebraic(theta: f64, alpha: f64, udmax: f64) -> Result<Self> {
        Self::new(PayoffKind::Algebraic, theta, 0.0, alpha, udmax)
    }

    pub fn logistic(theta: f64, b: f64, alpha: f64, udmax: f64) -> Result<Self> {
        Self::new(PayoffKind::Logistic, theta, b, alpha, udmax)
    }

    /// Builds a curve with the Lipschitz scale implied by its steepest slope.
    pub fn new(kind: PayoffKind, theta: f64, b: f64, alpha: f64, udmax: f64) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::Domain(format!("theta must be positive, got {theta}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("threshold must lie in (0,1), got {alpha}")));
        }
        if !(udmax.is_finite() && udmax > 0.0) {
            return Err(Error::Domain(format!("udmax must be positive, got {udmax}")));
        }
        if !b.is_finite() {
            return Err(Error::Domain("logistic offset must be finite".into()));
        }
        let max_slope = match kind {
            PayoffKind::Tanh | PayoffKind::Algebraic => theta,
            PayoffKind::Logistic => theta / 4.0,
        };
        Ok(Self {
            kind,
            theta,
            b,
            alpha,
            udmax,
            lipschitz_l: max_slope * udmax,
        })
    }

    /// Curve of the given family whose threshold is crossed exactly at `unit_demand`.
    ///
    /// Logistic curves put their midpoint at `0.6 * unit_demand` and pick the
    /// steepness so the threshold lands on `unit_demand`.
    pub fn with_unit_demand(kind: PayoffKind, unit_demand: f64, alpha: f64, udmax: f64) -> Result<Self> {
        if !(unit_demand > 0.0 && unit_demand <= udmax) {
            return Err(Error::Domain(format!(
                "unit demand {unit_demand} outside (0, {udmax}]"
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("threshold must lie in (0,1), got {alpha}")));
        }
        match kind {
            PayoffKind::Tanh => Self::tanh(alpha.atanh() / unit_demand, alpha, udmax),
            PayoffKind::Algebraic => Self::algebraic(alpha / (1.0 - alpha) / unit_demand, alpha, udmax),
            PayoffKind::Logistic => {
                let logit = (alpha / (1.0 - alpha)).ln();
                if logit <= 0.0 {
                    return Err(Error::Domain(
                        "logistic payoffs need a threshold above 0.5".into(),
                    ));
                }
                let b = 0.6 * unit_demand;
                Self::logistic(logit / (unit_demand - b), b, alpha, udmax)
            }
        }
    }

    /// Replace the Lipschitz scale (it must still dominate the true slope).
    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz_l = l;
        self
    }

    /// Expected reward at resource per unit load `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match self.kind {
            PayoffKind::Tanh => (self.theta * x).tanh(),
            PayoffKind::Algebraic => 1.0 - 1.0 / (1.0 + self.theta * x),
            PayoffKind::Logistic => 1.0 / (1.0 + (-self.theta * (x - self.b)).exp()),
        }
    }

    /// The resource per unit load at which the payoff reaches the threshold.
    pub fn unit_demand(&self) -> Result<f64> {
        let a = self.alpha;
        let w = match self.kind {
            PayoffKind::Tanh => a.atanh() / self.theta,
            PayoffKind::Algebraic => a / (1.0 - a) / self.theta,
            PayoffKind::Logistic => self.b + (a / (1.0 - a)).ln() / self.theta,
        };
        // small slack for the round trip through the closed forms
        if !(w > 0.0 && w <= self.udmax * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!(
                "threshold {a} is not reached on (0, {}] (inverse is {w})",
                self.udmax
            )));
        }
        Ok(w.min(self.udmax))
    }
}

/// How an agent reports its load and reward to the mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum ReportPolicy {
    Truthful,
    /// Reported load is the true load times `c`.
    LoadScale(f64),
    /// Reported reward is the true reward minus `eps`, clipped to `[0, 1]`.
    RewardShift(f64),
    /// Threshold declared at setup is the true one plus `eps`.
    ThresholdShift(f64),
    /// With probability `p` per round the load is scaled by a factor drawn
    /// from `[0.5, 2]` and the reward replaced by a uniform draw.
    RandomMisreport(f64),
}

impl ReportPolicy {
    pub fn is_truthful(&self) -> bool {
        matches!(self, ReportPolicy::Truthful)
    }

    pub fn label(&self) -> String {
        match self {
            ReportPolicy::Truthful => "truthful".into(),
            ReportPolicy::LoadScale(c) => format!("load_scale({c})"),
            ReportPolicy::RewardShift(e) => format!("reward_shift({e})"),
            ReportPolicy::ThresholdShift(e) => format!("threshold_shift({e})"),
            ReportPolicy::RandomMisreport(p) => format!("random_misreport({p})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ReportPolicy::Truthful => true,
            ReportPolicy::LoadScale(c) => c.is_finite() && c > 0.0,
            ReportPolicy::RewardShift(e) | ReportPolicy::ThresholdShift(e) => e.is_finite(),
            ReportPolicy::RandomMisreport(p) => (0.0..=1.0).contains(&p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid policy {}", self.label())))
        }
    }

    /// Threshold the agent declares at setup.
    pub fn reported_threshold(&self, alpha: f64) -> f64 {
        match *self {
            ReportPolicy::ThresholdShift(eps) => (alpha + eps).clamp(1e-6, 1.0 - 1e-6),
            _ => alpha,
        }
    }
}

/// Rewards drawn for one agent-round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSample {
    /// Observed reward in `[0, 1]`.
    pub x: f64,
    /// Sub-Gaussian constant of the reward noise; zero for noiseless feedback.
    pub sigma: f64,
}

/// Reward model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeedbackMode {
    /// The reward is the payoff itself.
    Deterministic,
    /// Fraction of `floor(v)` independent queries that succeed.
    BernoulliAggregate,
    /// Payoff plus clipped Gaussian noise of the given standard deviation.
    Gaussian { sigma: f64 },
}

impl FeedbackMode {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, FeedbackMode::Deterministic)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeedbackMode::Deterministic => "deterministic",
            FeedbackMode::BernoulliAggregate => "bernoulli_aggregate",
            FeedbackMode::Gaussian { .. } => "gaussian",
        }
    }
}

/// Ground truth for one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub entitlement: f64,
    pub payoff: PayoffSpec,
    /// Lipschitz constant of the utility in resource per unit load.
    pub utility_lipschitz: f64,
    pub policy: ReportPolicy,
}

impl AgentProfile {
    /// Truthful agent whose utility slope bound defaults to the payoff's.
    pub fn new(entitlement: f64, payoff: PayoffSpec) -> Self {
        Self {
            entitlement,
            payoff,
            utility_lipschitz: payoff.lipschitz_l / payoff.udmax,
            policy: ReportPolicy::Truthful,
        }
    }

    pub fn with_policy(mut self, policy: ReportPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn unit_demand(&self) -> f64 {
        self.payoff
            .unit_demand()
            .expect("profiles are built from reachable thresholds")
    }

    /// Utility capped at the threshold.
    pub fn utility(&self, x: f64) -> f64 {
        utility_eval(self, x)
    }
}

pub fn payoff_eval(spec: &PayoffSpec, x: f64) -> f64 {
    spec.eval(x)
}

pub fn unit_demand(spec: &PayoffSpec) -> Result<f64> {
    spec.unit_demand()
}

/// `min(f(x), alpha)`: payoff below the unit demand, flat at the threshold above it.
pub fn utility_eval(profile: &AgentProfile, x: f64) -> f64 {
    let p = &profile.payoff;
    p.eval(x).min(p.alpha)
}

/// Uniform load on `[lo, hi]`.
pub fn sample_load(lo: f64, hi: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        return Err(Error::InvalidArgument(format!("invalid load range [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.gen_range(lo..=hi))
}

/// Draws the reward for allocation `a` under load `v`.
pub fn sample_reward(
    spec: &PayoffSpec,
    mode: FeedbackMode,
    a: f64,
    v: f64,
    rng: &mut impl Rng,
) -> FeedbackSample {
    let mean = spec.eval(a / v).clamp(0.0, 1.0);
    match mode {
        FeedbackMode::Deterministic => FeedbackSample { x: mean, sigma: 0.0 },
        FeedbackMode::BernoulliAggregate => {
            let queries = v.floor().max(1.0);
            let sigma = 1.0 / (2.0 * v.sqrt());
            let hits = Binomial::new(queries as u64, mean)
                .expect("probability is clamped to [0,1]")
                .sample(rng);
            FeedbackSample {
                x: hits as f64 / queries,
                sigma,
            }
        }
        FeedbackMode::Gaussian { sigma } => {
            let noise = if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
            } else {
                0.0
            };
            FeedbackSample {
                x: (mean + noise).clamp(0.0, 1.0),
                sigma,
            }
        }
    }
}

/// Load the agent reports for this round.
pub fn report_load(policy: &ReportPolicy, true_load: f64, rng: &mut impl Rng) -> f64 {
    match *policy {
        ReportPolicy::LoadScale(c) => true_load * c,
        ReportPolicy::RandomMisreport(p) => {
            if rng.gen::<f64>() < p {
                true_load * rng.gen_range(0.5..=2.0)
            } else {
                true_load
            }
        }
        _ => true_load,
    }
}

/// Reward the agent reports for this round.
pub fn report_reward(policy: &ReportPolicy, true_reward: f64, rng: &mut impl Rng) -> f64 {
    match *policy {
        ReportPolicy::RewardShift(eps) => (true_reward - eps).clamp(0.0, 1.0),
        ReportPolicy::RandomMisreport(p) => {
            if rng.gen::<f64>() < p {
                rng.gen::<f64>()
            } else {
                true_reward
            }
        }
        _ => true_reward,
    }
}

/// Both reports for one round. Load and reward draws come from separate
/// streams so the simulator can report the load before the reward exists.
pub fn apply_policy(
    policy: &ReportPolicy,
    true_load: f64,
    true_reward: f64,
    load_rng: &mut impl Rng,
    reward_rng: &mut impl Rng,
) -> (f64, f64) {
    (
        report_load(policy, true_load, load_rng),
        report_reward(policy, true_reward, reward_rng),
    )
}

/// What a random stream is used for. The label enters the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Load,
    Reward,
    PolicyLoad,
    PolicyReward,
    Setup,
}

impl Purpose {
    pub fn label(self) -> &'static str {
        match self {
            Purpose::Load => "load",
            Purpose::Reward => "reward",
            Purpose::PolicyLoad => "policy-load",
            Purpose::PolicyReward => "policy-reward",
            Purpose::Setup => "setup",
        }
    }
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream id for `(base_seed, run, agent, purpose, round)`.
///
/// Each field is folded in with `state = splitmix64(state ^ field)`; the
/// purpose label enters through its FNV-1a hash. Every field changes the id.
pub fn stream_id(base_seed: u64, run: u64, agent: u64, purpose: Purpose, round: u64) -> u64 {
    [run, agent, fnv1a(purpose.label()), round]
        .into_iter()
        .fold(splitmix64(base_seed), |state, field| splitmix64(state ^ field))
}

/// A fresh generator for one `(run, agent, purpose, round)` cell.
///
/// Streams are cut per round so that two paired simulations see identical
/// randomness at round `t` no matter how many draws earlier rounds consumed.
pub fn stream(base_seed: u64, run: u64, agent: u64, purpose: Purpose, round: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(stream_id(base_seed, run, agent, purpose, round))
}
