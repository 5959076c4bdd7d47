//! Nonparametric estimator on a dyadic tree over `[0, udmax]`.
//!
//! Node `(h, k)` covers `[udmax (k-1) / 2^h, udmax k / 2^h)`. Each node keeps
//! the inverse-variance weight of the rewards assigned to it, their weighted
//! mean, a band `f_lb..f_ub` built from that data alone, and a band
//! `B_lb..B_ub` tightened using the children and the monotonicity of the
//! payoff. A node's children appear once its weight passes `tau(h, t)`.
//!
//! The tree holds the materialized nodes; a leaf is a materialized node
//! without children.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use crate::error::{Error, Result};

/// Deepest height a node may be split at.
pub const MAX_DEPTH: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub h: u32,
    pub k: u64,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { h: 0, k: 1 };

    pub fn new(h: u32, k: u64) -> Self {
        debug_assert!(k >= 1 && (h >= 64 || k <= 1u64 << h));
        Self { h, k }
    }

    pub fn left(self) -> Self {
        Self::new(self.h + 1, 2 * self.k - 1)
    }

    pub fn right(self) -> Self {
        Self::new(self.h + 1, 2 * self.k)
    }

    pub fn parent(self) -> Option<Self> {
        (self.h > 0).then(|| Self::new(self.h - 1, self.k.div_ceil(2)))
    }
}

/// `[l, r)` covered by `id`; the last node of each height is also closed on
/// the right.
pub fn node_interval(id: NodeId, udmax: f64) -> (f64, f64, bool) {
    let width = udmax / pow2(id.h);
    let l = width * (id.k - 1) as f64;
    let r = width * id.k as f64;
    (l, r, id.k == 1u64 << id.h)
}

fn pow2(h: u32) -> f64 {
    2f64.powi(h as i32)
}

fn midpoint(id: NodeId, udmax: f64) -> f64 {
    udmax * (id.k as f64 - 0.5) / pow2(id.h)
}

/// `2^ceil(log2 t)`
pub fn t_tilde(t: u64) -> u64 {
    t.max(1).next_power_of_two()
}

/// `sqrt((4 + 2 ln 2) ln(n pi^2 t^3 / (6 delta)))`
pub fn tree_beta(t: u64, n: usize, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    let inner = (n as f64 * PI * PI * t * t * t / (6.0 * delta)).ln();
    ((4.0 + 2.0 * LN_2) * inner.max(0.0)).sqrt()
}

/// `beta^2 4^h / L^2`
pub fn tau(h: u32, beta: f64, l: f64) -> f64 {
    beta * beta * 4f64.powi(h as i32) / (l * l)
}

/// `floor(5 n sqrt(q) / 6)`
pub fn rprime_tree(q: u64, n: usize) -> u64 {
    (5.0 * n as f64 * (q as f64).sqrt() / 6.0).floor() as u64
}

/// Why a node has children.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expansion {
    /// The root is split at construction.
    Initial,
    /// Split when its weight was `vs` against a threshold `tau`.
    Gated { vs: f64, tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub vs: f64,
    pub f_bar: f64,
    pub f_lb: f64,
    pub f_ub: f64,
    pub b_lb: f64,
    pub b_ub: f64,
    pub expansion: Option<Expansion>,
}

impl NodeStats {
    fn fresh(b_lb: f64, b_ub: f64) -> Self {
        Self {
            vs: 0.0,
            f_bar: 0.0,
            f_lb: f64::NEG_INFINITY,
            f_ub: f64::INFINITY,
            b_lb,
            b_ub,
            expansion: None,
        }
    }

    pub fn is_internal(&self) -> bool {
        self.expansion.is_some()
    }

    /// `min(B_ub - alpha, alpha - B_lb)`
    pub fn b_val(&self, alpha: f64) -> f64 {
        (self.b_ub - alpha).min(alpha - self.b_lb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeParams {
    pub alpha: f64,
    pub udmax: f64,
    /// The payoff moves by at most `l` over `[0, udmax]`.
    pub l: f64,
    pub n_agents: usize,
    pub delta: f64,
    pub beta_scale: f64,
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.alpha < 1.0
            && self.udmax > 0.0
            && self.udmax.is_finite()
            && self.l > 0.0
            && self.l.is_finite()
            && self.n_agents > 0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.beta_scale > 0.0
            && self.beta_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid tree parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TreeState {
    params: TreeParams,
    rows: Vec<BTreeMap<u64, NodeStats>>,
    t: u64,
    t_tilde: u64,
    beta_tilde: f64,
    refreshed_at: u64,
    hub: NodeId,
    trace: Option<Vec<String>>,
    check_each_mutation: bool,
}

impl TreeState {
    pub fn new(params: TreeParams) -> Result<Self> {
        params.validate()?;
        let mut root_row = BTreeMap::new();
        root_row.insert(1, NodeStats::fresh(0.0, 1.0));
        let mut s = Self {
            beta_tilde: tree_beta(1, params.n_agents, params.delta) * params.beta_scale,
            params,
            rows: vec![root_row],
            t: 1,
            t_tilde: 1,
            refreshed_at: 0,
            hub: NodeId::ROOT,
            trace: None,
            check_each_mutation: cfg!(debug_assertions),
        };
        s.expand(NodeId::ROOT, Expansion::Initial);
        Ok(s)
    }

    /// Keep one text line per mutation.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Turn the after-every-mutation invariant check on or off.
    pub fn set_invariant_checks(&mut self, on: bool) {
        self.check_each_mutation = on;
    }

    pub fn trace(&self) -> Option<&[String]> {
        self.trace.as_deref()
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn beta_tilde(&self) -> f64 {
        self.beta_tilde
    }

    /// Current `beta_t` with the configured scale.
    pub fn beta_t(&self) -> f64 {
        tree_beta(self.t, self.params.n_agents, self.params.delta) * self.params.beta_scale
    }

    pub fn tau_at(&self, h: u32) -> f64 {
        tau(h, self.beta_t(), self.params.l)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeStats> {
        self.rows.get(id.h as usize)?.get(&id.k)
    }

    fn node_mut(&mut self, id: NodeId) -> &mut NodeStats {
        self.rows[id.h as usize]
            .get_mut(&id.k)
            .expect("node is materialized")
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Height of the deepest materialized node.
    pub fn h_max(&self) -> u32 {
        (self.rows.len() - 1) as u32
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &NodeStats)> {
        self.rows.iter().enumerate().flat_map(|(h, row)| {
            row.iter().map(move |(&k, s)| (NodeId::new(h as u32, k), s))
        })
    }

    /// Advances the round counter; refreshes every band when `t` reaches a
    /// power of two.
    pub fn begin_round(&mut self, t: u64) {
        let t = t.max(1);
        self.t = t;
        let tt = t_tilde(t);
        if tt != self.t_tilde {
            self.t_tilde = tt;
            self.beta_tilde = tree_beta(tt, self.params.n_agents, self.params.delta) * self.params.beta_scale;
        }
        if t == tt && self.refreshed_at != t {
            self.refresh();
            self.refreshed_at = t;
        }
    }

    fn band(&self, s: &NodeStats, h: u32) -> (f64, f64) {
        if s.vs > 0.0 {
            let w = self.beta_tilde / s.vs.sqrt() + self.params.l / pow2(h);
            (s.f_bar - w, s.f_bar + w)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        }
    }

    fn assign(&mut self, id: NodeId, x: f64, sigma: f64) {
        let w = 1.0 / (sigma * sigma);
        let s = self.node_mut(id);
        if s.vs == 0.0 {
            s.f_bar = x;
            s.vs = w;
        } else {
            s.f_bar = (s.vs * s.f_bar + x * w) / (s.vs + w);
            s.vs += w;
        }
        let snapshot = s.clone();
        let (lo, hi) = self.band(&snapshot, id.h);
        let s = self.node_mut(id);
        s.f_lb = lo;
        s.f_ub = hi;
    }

    /// Bounds for a node that is not materialized, from materialized
    /// neighbours at its own and every deeper height along its left edge.
    pub fn bounds_for_unexpanded(&self, id: NodeId) -> (f64, f64) {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let (mut h, mut k) = (id.h, id.k);
        while h <= self.h_max() {
            let row = &self.rows[h as usize];
            if let Some((_, s)) = row.range(..k).next_back() {
                lo = lo.max(s.b_lb);
            }
            if let Some((_, s)) = row.range(k + 1..).next() {
                hi = hi.min(s.b_ub);
            }
            h += 1;
            k = 2 * k - 1;
        }
        (lo, hi)
    }

    fn same_depth(&mut self, id: NodeId) {
        let row = &mut self.rows[id.h as usize];
        let (lb, ub) = {
            let s = &row[&id.k];
            (s.b_lb, s.b_ub)
        };
        for (_, s) in row.range_mut(id.k + 1..) {
            if s.b_lb < lb {
                s.b_lb = lb;
            } else {
                break;
            }
        }
        for (_, s) in row.range_mut(..id.k).rev() {
            if s.b_ub > ub {
                s.b_ub = ub;
            } else {
                break;
            }
        }
    }

    fn update_path_to_root(&mut self, stop: NodeId) {
        let mut cur = Some(stop);
        if !self.node(stop).expect("stop node exists").is_internal() {
            let (l, u) = self.bounds_for_unexpanded(stop.left());
            let s = self.node_mut(stop);
            s.b_lb = s.f_lb.max(s.b_lb).max(l);
            s.b_ub = s.f_ub.min(s.b_ub).min(u);
            self.same_depth(stop);
            cur = stop.parent();
        }
        while let Some(id) = cur {
            let left_lb = self.node(id.left()).expect("internal node has children").b_lb;
            let right_ub = self.node(id.right()).expect("internal node has children").b_ub;
            let s = self.node_mut(id);
            s.b_lb = s.f_lb.max(s.b_lb).max(left_lb);
            s.b_ub = s.f_ub.min(s.b_ub).min(right_ub);
            self.same_depth(id);
            cur = id.parent();
        }
    }

    fn expand(&mut self, id: NodeId, why: Expansion) {
        let (l, u) = self.bounds_for_unexpanded(id.left());
        let h = id.h as usize + 1;
        if self.rows.len() <= h {
            self.rows.push(BTreeMap::new());
        }
        self.rows[h].insert(id.left().k, NodeStats::fresh(l, u));
        self.rows[h].insert(id.right().k, NodeStats::fresh(l, u));
        self.node_mut(id).expansion = Some(why);
        self.same_depth(id.left());
        self.same_depth(id.right());
        let t = self.t;
        self.log(|| format!("t={t} expand ({},{}) bounds=({l:.6},{u:.6})", id.h, id.k));
    }

    /// Folds one observation into the nodes on the path of `a` and tightens
    /// the bands up to the root.
    pub fn record_fb(&mut self, a: f64, x: f64, sigma: f64) -> Result<()> {
        let udmax = self.params.udmax;
        if !(a >= 0.0 && a <= udmax) {
            return Err(Error::InvalidArgument(format!(
                "allocation per unit load {a} outside [0, {udmax}]"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise scale must be positive, got {sigma}"
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!("reward {x} is not finite")));
        }
        let mut id = NodeId::ROOT;
        loop {
            self.assign(id, x, sigma);
            let s = self.node(id).expect("path stays in the tree");
            if s.is_internal() && s.vs >= self.tau_at(id.h) {
                id = if a < midpoint(id, udmax) { id.left() } else { id.right() };
            } else {
                break;
            }
        }
        self.update_path_to_root(id);
        let s = self.node(id).expect("stop node exists").clone();
        let tau_stop = self.tau_at(id.h);
        let t = self.t;
        self.log(|| {
            format!(
                "t={t} record a={a:.6e} x={x:.6} stop=({},{}) vs={:.6e} fbar={:.6} blb={:.6} bub={:.6}",
                id.h, id.k, s.vs, s.f_bar, s.b_lb, s.b_ub
            )
        });
        let vs = s.vs;
        if !s.is_internal() && vs >= tau_stop && id.h < MAX_DEPTH {
            self.expand(id, Expansion::Gated { vs, tau: tau_stop });
        }
        self.after_mutation();
        Ok(())
    }

    /// Recomputes every data band with the current radius, then rebuilds the
    /// propagated bands bottom-up with running extrema along each height.
    pub fn refresh(&mut self) {
        for h in 0..self.rows.len() {
            let keys: Vec<u64> = self.rows[h].keys().copied().collect();
            for k in keys {
                let id = NodeId::new(h as u32, k);
                let snapshot = self.node(id).expect("listed key").clone();
                let (lo, hi) = self.band(&snapshot, id.h);
                let s = self.node_mut(id);
                s.f_lb = lo;
                s.f_ub = hi;
            }
        }
        for h in (0..self.rows.len()).rev() {
            let checks: Vec<(u64, f64, f64)> = self.rows[h]
                .iter()
                .map(|(&k, s)| {
                    let id = NodeId::new(h as u32, k);
                    let (l, u) = if s.is_internal() {
                        (
                            self.node(id.left()).expect("child").b_lb,
                            self.node(id.right()).expect("child").b_ub,
                        )
                    } else {
                        self.bounds_for_unexpanded(id.left())
                    };
                    (k, s.f_lb.max(s.b_lb).max(l), s.f_ub.min(s.b_ub).min(u))
                })
                .collect();
            let row = &mut self.rows[h];
            let mut run_max = 0.0f64;
            for &(k, lb, _) in &checks {
                let s = row.get_mut(&k).expect("listed key");
                s.b_lb = run_max.max(lb);
                run_max = s.b_lb;
            }
            let mut run_min = 1.0f64;
            for &(k, _, ub) in checks.iter().rev() {
                let s = row.get_mut(&k).expect("listed key");
                s.b_ub = run_min.min(ub);
                run_min = s.b_ub;
            }
        }
        let (t, beta) = (self.t, self.beta_tilde);
        self.log(|| format!("t={t} refresh beta={beta:.6}"));
        self.after_mutation();
    }

    fn descend_while_informed(&self, mut step: impl FnMut(NodeId) -> NodeId) -> NodeId {
        let mut id = NodeId::ROOT;
        loop {
            let s = self.node(id).expect("walk stays in the tree");
            if s.is_internal() && s.vs >= self.tau_at(id.h) {
                id = step(id);
            } else {
                return id;
            }
        }
    }

    /// Node the recommendation walk ends at.
    pub fn rec_node(&self) -> NodeId {
        let alpha = self.params.alpha;
        self.descend_while_informed(|id| {
            let l = self.node(id.left()).expect("child").b_val(alpha);
            let r = self.node(id.right()).expect("child").b_val(alpha);
            if l >= r {
                id.left()
            } else {
                id.right()
            }
        })
    }

    /// Midpoint of the node whose band straddles the threshold most
    /// confidently.
    pub fn get_ud_rec(&self) -> f64 {
        midpoint(self.rec_node(), self.params.udmax)
    }

    /// Walk that keeps the true unit demand at or left of the node's right
    /// end.
    pub fn ub_traverse(&self) -> NodeId {
        let alpha = self.params.alpha;
        self.descend_while_informed(|id| {
            if self.node(id.right()).expect("child").b_lb >= alpha {
                id.left()
            } else {
                id.right()
            }
        })
    }

    /// Mirror walk that keeps the true unit demand at or right of the node's
    /// left end.
    pub fn lb_traverse(&self) -> NodeId {
        let alpha = self.params.alpha;
        self.descend_while_informed(|id| {
            if self.node(id.left()).expect("child").b_ub < alpha {
                id.right()
            } else {
                id.left()
            }
        })
    }

    /// Stores the upper-bound node and returns its midpoint as a probe.
    pub fn get_ud_rec_for_ub(&mut self) -> f64 {
        self.hub = self.ub_traverse();
        midpoint(self.hub, self.params.udmax)
    }

    /// Right end of the stored upper-bound node.
    pub fn get_ud_ub(&self) -> f64 {
        self.params.udmax * self.hub.k as f64 / pow2(self.hub.h)
    }

    /// Left end of the lower-bound walk's final node.
    pub fn get_ud_lb(&self) -> f64 {
        let id = self.lb_traverse();
        self.params.udmax * (id.k - 1) as f64 / pow2(id.h)
    }

    /// Band on the payoff at `a` from the nodes on its path.
    pub fn conf_interval(&self, a: f64) -> (f64, f64) {
        let udmax = self.params.udmax;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut id = NodeId::ROOT;
        while let Some(s) = self.node(id) {
            lo = lo.max(s.b_lb);
            hi = hi.min(s.b_ub);
            id = if a < midpoint(id, udmax) { id.left() } else { id.right() };
        }
        let (l, u) = self.bounds_for_unexpanded(id);
        (lo.max(l), hi.min(u))
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if let Some(tr) = &mut self.trace {
            tr.push(line());
        }
    }

    fn after_mutation(&self) {
        if self.check_each_mutation {
            if let Err(e) = self.check_invariants() {
                panic!("tree invariant broken at t={}: {e}", self.t);
            }
        }
    }

    /// Monotone bands along every height, weight nesting, split gating.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let root = self.node(NodeId::ROOT).ok_or("root missing")?;
        if !root.is_internal() {
            return Err("root is not split".into());
        }
        for (h, row) in self.rows.iter().enumerate() {
            let mut prev: Option<(u64, &NodeStats)> = None;
            for (&k, s) in row {
                if !(0.0..=1.0).contains(&s.b_lb) || !(0.0..=1.0).contains(&s.b_ub) {
                    return Err(format!("({h},{k}) band ({}, {}) leaves [0,1]", s.b_lb, s.b_ub));
                }
                if let Some((pk, p)) = prev {
                    if p.b_lb > s.b_lb || p.b_ub > s.b_ub {
                        return Err(format!(
                            "height {h}: ({pk}) ({}, {}) vs ({k}) ({}, {})",
                            p.b_lb, p.b_ub, s.b_lb, s.b_ub
                        ));
                    }
                }
                prev = Some((k, s));
                let id = NodeId::new(h as u32, k);
                match s.expansion {
                    Some(why) => {
                        let l = self.node(id.left()).ok_or(format!("({h},{k}) lost a child"))?;
                        let r = self.node(id.right()).ok_or(format!("({h},{k}) lost a child"))?;
                        let kids = l.vs + r.vs;
                        if kids > s.vs * (1.0 + 1e-12) {
                            return Err(format!("({h},{k}) weight {} below children {kids}", s.vs));
                        }
                        if let Expansion::Gated { vs, tau } = why {
                            if vs < tau {
                                return Err(format!("({h},{k}) split at weight {vs} < {tau}"));
                            }
                        }
                    }
                    None => {
                        if self.contains(id.left()) || self.contains(id.right()) {
                            return Err(format!("leaf ({h},{k}) has children"));
                        }
                    }
                }
                if h > 0 {
                    let parent = id.parent().expect("h > 0");
                    if !self.node(parent).is_some_and(NodeStats::is_internal) {
                        return Err(format!("({h},{k}) has no split parent"));
                    }
                }
            }
        }
        Ok(())
    }
}
