//! Dyadic grid search for deterministic feedback.
//!
//! Bracket `q` probes one odd dyadic point of `[0, udmax]`; the upper bound
//! only ever moves down to a probe where the threshold was met.

/// Probe used in bracket `q` (1-based).
///
/// With `h = ceil(log2(q + 1))` and `k = 2q - 2^h + 1` the probe is
/// `udmax * k / 2^h`, so brackets `2^(h-1) .. 2^h - 1` sweep the odd
/// multiples of `udmax / 2^h` from left to right.
pub fn grid_point(q: u64, udmax: f64) -> f64 {
    assert!(q >= 1, "bracket index starts at 1");
    let h = 64 - q.leading_zeros();
    let pow = 1u128 << h;
    let k = 2 * q as u128 + 1 - pow;
    udmax * k as f64 / pow as f64
}

/// Exploitation length of bracket `q` for `n` agents.
pub fn rprime_det_sp(q: u64, n: usize) -> u64 {
    q.saturating_mul(n as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    ud_ub: f64,
    udmax: f64,
    alpha: f64,
}

impl GridState {
    pub fn new(udmax: f64, alpha: f64) -> Self {
        Self {
            ud_ub: udmax,
            udmax,
            alpha,
        }
    }

    pub fn ud_ub(&self) -> f64 {
        self.ud_ub
    }

    pub fn udmax(&self) -> f64 {
        self.udmax
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Moves the upper bound down to `normalloc` if the threshold was met there.
    pub fn record(&mut self, normalloc: f64, x: f64) {
        if x >= self.alpha {
            self.ud_ub = self.ud_ub.min(normalloc);
        }
    }
}
