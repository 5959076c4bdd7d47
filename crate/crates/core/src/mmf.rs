//! Single-round weighted max-min fair allocation of a unit resource.
//!
//! Agents are visited in ascending order of demand per unit of entitlement.
//! An agent whose demand is below its proportional share of what is left
//! receives its demand in full; at the first agent that cannot be satisfied,
//! everything that remains is split in proportion to the entitlements of the
//! agents still waiting.

use crate::error::{Error, Result};

/// Tolerance on the entitlement sum.
pub const ENTITLEMENT_SUM_TOL: f64 = 1e-9;

/// Entitlements and reported demands for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    entitlements: Vec<f64>,
    demands: Vec<f64>,
}

impl AllocationProblem {
    pub fn new(entitlements: Vec<f64>, demands: Vec<f64>) -> Result<Self> {
        validate_entitlements(&entitlements)?;
        if demands.len() != entitlements.len() {
            return Err(Error::LengthMismatch {
                expected: entitlements.len(),
                found: demands.len(),
            });
        }
        for (index, &d) in demands.iter().enumerate() {
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::InvalidEntry {
                    what: "demand",
                    index,
                    value: d,
                });
            }
        }
        Ok(Self {
            entitlements,
            demands,
        })
    }

    pub fn entitlements(&self) -> &[f64] {
        &self.entitlements
    }

    pub fn demands(&self) -> &[f64] {
        &self.demands
    }

    pub fn len(&self) -> usize {
        self.demands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demands.is_empty()
    }
}

/// Checks that entitlements are positive, finite and sum to one.
pub fn validate_entitlements(entitlements: &[f64]) -> Result<()> {
    if entitlements.is_empty() {
        return Err(Error::InvalidArgument("no agents".into()));
    }
    for (index, &e) in entitlements.iter().enumerate() {
        if !(e.is_finite() && e > 0.0) {
            return Err(Error::InvalidEntry {
                what: "entitlement",
                index,
                value: e,
            });
        }
    }
    let sum: f64 = entitlements.iter().sum();
    if (sum - 1.0).abs() > ENTITLEMENT_SUM_TOL {
        return Err(Error::EntitlementSum(sum));
    }
    Ok(())
}

/// Per-agent amounts of the resource for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationVector(pub Vec<f64>);

impl AllocationVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for AllocationVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Runs max-min fairness on a validated problem.
///
/// Ties in `d_j / e_j` are broken by agent index.
pub fn mmf_allocate(problem: &AllocationProblem) -> AllocationVector {
    let e = &problem.entitlements;
    let d = &problem.demands;
    let n = d.len();

    let mut order: Vec<usize> = (0..n).collect();
    // sort_by is stable, so equal ratios keep index order
    order.sort_by(|&i, &j| (d[i] / e[i]).total_cmp(&(d[j] / e[j])));

    // remaining entitlement of the agents from position p onwards
    let mut suffix = vec![0.0; n + 1];
    for p in (0..n).rev() {
        suffix[p] = suffix[p + 1] + e[order[p]];
    }

    let mut alloc = vec![0.0; n];
    let mut remaining = 1.0;
    for (p, &j) in order.iter().enumerate() {
        let ent = suffix[p];
        if d[j] < remaining * e[j] / ent {
            alloc[j] = d[j];
            remaining -= d[j];
        } else {
            for &k in &order[p..] {
                alloc[k] = remaining * e[k] / ent;
            }
            break;
        }
    }
    AllocationVector(alloc)
}

/// Convenience wrapper: validate then allocate.
pub fn allocate(entitlements: &[f64], demands: &[f64]) -> Result<AllocationVector> {
    let problem = AllocationProblem::new(entitlements.to_vec(), demands.to_vec())?;
    Ok(mmf_allocate(&problem))
}
