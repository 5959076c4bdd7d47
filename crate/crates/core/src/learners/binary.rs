//! Bisection on the unit demand for deterministic feedback.

/// Exploitation length of bracket `q`: `floor(e^q)`, saturating.
pub fn rprime_det(q: u64) -> u64 {
    let v = (q as f64).exp().floor();
    if v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySearchState {
    ud_lb: f64,
    ud_ub: f64,
    udmax: f64,
    alpha: f64,
}

impl BinarySearchState {
    pub fn new(udmax: f64, alpha: f64) -> Self {
        Self {
            ud_lb: 0.0,
            ud_ub: udmax,
            udmax,
            alpha,
        }
    }

    pub fn ud_lb(&self) -> f64 {
        self.ud_lb
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

    /// Midpoint of the current bracket.
    pub fn recommend(&self) -> f64 {
        0.5 * (self.ud_lb + self.ud_ub)
    }

    pub fn record(&mut self, normalloc: f64, x: f64) {
        if x < self.alpha {
            self.ud_lb = self.ud_lb.max(normalloc);
        } else {
            self.ud_ub = self.ud_ub.min(normalloc);
        }
    }
}
