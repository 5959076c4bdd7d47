//! Per-agent unit-demand estimators.

pub mod binary;
pub mod glm;
pub mod grid;
pub mod tree;

pub use binary::{rprime_det, BinarySearchState};
pub use glm::{rprime_glm, GlmInterval, GlmParams, GlmState, KappaSource, Link, LowerRule};
pub use grid::{grid_point, rprime_det_sp, GridState};
pub use tree::{rprime_tree, NodeId, TreeParams, TreeState};

use crate::error::Result;

/// One agent's estimator.
#[derive(Debug, Clone)]
pub enum LearnerState {
    Grid(GridState),
    Binary(BinarySearchState),
    Glm(Box<GlmState>),
    Tree(Box<TreeState>),
}

impl LearnerState {
    pub fn begin_round(&mut self, t: u64) {
        if let LearnerState::Tree(s) = self {
            s.begin_round(t);
        }
    }

    pub fn record(&mut self, normalloc: f64, x: f64, sigma: f64) -> Result<()> {
        match self {
            LearnerState::Grid(s) => s.record(normalloc, x),
            LearnerState::Binary(s) => s.record(normalloc, x),
            LearnerState::Glm(s) => s.record(normalloc, x, sigma)?,
            LearnerState::Tree(s) => s.record_fb(normalloc, x, sigma)?,
        }
        Ok(())
    }

    /// Unit demand to bid for in round-by-round allocation.
    pub fn recommend(&self) -> f64 {
        match self {
            LearnerState::Grid(s) => s.ud_ub(),
            LearnerState::Binary(s) => s.recommend(),
            LearnerState::Glm(s) => s.recommend(),
            LearnerState::Tree(s) => s.get_ud_rec(),
        }
    }

    pub fn ud_ub(&self) -> f64 {
        match self {
            LearnerState::Grid(s) => s.ud_ub(),
            LearnerState::Binary(s) => s.ud_ub(),
            LearnerState::Glm(s) => s.ud_ub(),
            LearnerState::Tree(s) => s.get_ud_ub(),
        }
    }

    /// Lower bound, where the estimator keeps one.
    pub fn ud_lb(&self) -> Option<f64> {
        match self {
            LearnerState::Grid(_) => None,
            LearnerState::Binary(s) => Some(s.ud_lb()),
            LearnerState::Glm(s) => Some(s.ud_lb()),
            LearnerState::Tree(s) => Some(s.get_ud_lb()),
        }
    }

    /// Both ends of the unit-demand interval. For the tree this is the pair
    /// of bound walks, not the stored exploration node.
    pub fn interval(&self) -> Option<(f64, f64)> {
        match self {
            LearnerState::Grid(_) => None,
            LearnerState::Binary(s) => Some((s.ud_lb(), s.ud_ub())),
            LearnerState::Glm(s) => {
                let iv = s.glm_interval();
                Some((iv.ud_lb, iv.ud_ub))
            }
            LearnerState::Tree(s) => {
                let id = s.ub_traverse();
                let ub = s.params().udmax * id.k as f64 / 2f64.powi(id.h as i32);
                Some((s.get_ud_lb(), ub))
            }
        }
    }

    pub fn as_tree(&self) -> Option<&TreeState> {
        match self {
            LearnerState::Tree(s) => Some(s),
            _ => None,
        }
    }
}
