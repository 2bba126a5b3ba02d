//! Open-circuit potential curves for the two electrodes.
//!
//! Both curves share one closed form:
//!
//! ```text
//! U(θ) = a·exp(b·θ) + m·θ + c + Σ_j k_j·tanh(s_j·(θ − θ_j))
//! ```
//!
//! The graphite/SiOx negative electrode uses the exponential term and three
//! tanh steps; the NMC positive electrode uses the linear term and three tanh
//! steps. The form is total, so sigma points that wander slightly outside
//! `[0, 1]` still get a finite potential.

use serde::{Deserialize, Serialize};

/// Which half-cell a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Electrode {
    Negative,
    Positive,
}

impl Electrode {
    pub fn tag(self) -> &'static str {
        match self {
            Electrode::Negative => "n",
            Electrode::Positive => "p",
        }
    }
}

impl std::fmt::Display for Electrode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Electrode::Negative => "negative",
            Electrode::Positive => "positive",
        })
    }
}

/// One `k·tanh(s·(θ − θ0))` step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TanhTerm {
    pub amplitude: f64,
    pub steepness: f64,
    pub center: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpCurve {
    pub electrode: Electrode,
    #[serde(default)]
    pub exp_amplitude: f64,
    #[serde(default)]
    pub exp_rate: f64,
    #[serde(default)]
    pub slope: f64,
    pub offset: f64,
    pub tanh_terms: Vec<TanhTerm>,
}

impl OcpCurve {
    /// LG M50 graphite/SiOx negative electrode.
    pub fn lg_m50_negative() -> Self {
        Self {
            electrode: Electrode::Negative,
            exp_amplitude: 1.9793,
            exp_rate: -39.3631,
            slope: 0.0,
            offset: 0.2482,
            tanh_terms: vec![
                TanhTerm {
                    amplitude: -0.0909,
                    steepness: 29.8538,
                    center: 0.1234,
                },
                TanhTerm {
                    amplitude: -0.04478,
                    steepness: 14.9159,
                    center: 0.2769,
                },
                TanhTerm {
                    amplitude: -0.0205,
                    steepness: 30.4444,
                    center: 0.6103,
                },
            ],
        }
    }

    /// LG M50 NMC811 positive electrode.
    pub fn lg_m50_positive() -> Self {
        Self {
            electrode: Electrode::Positive,
            exp_amplitude: 0.0,
            exp_rate: 0.0,
            slope: -0.809,
            offset: 4.4875,
            tanh_terms: vec![
                TanhTerm {
                    amplitude: -0.0428,
                    steepness: 18.5138,
                    center: 0.5542,
                },
                TanhTerm {
                    amplitude: -17.7326,
                    steepness: 15.789,
                    center: 0.3117,
                },
                TanhTerm {
                    amplitude: 17.5842,
                    steepness: 15.9308,
                    center: 0.312,
                },
            ],
        }
    }

    pub fn lg_m50(electrode: Electrode) -> Self {
        match electrode {
            Electrode::Negative => Self::lg_m50_negative(),
            Electrode::Positive => Self::lg_m50_positive(),
        }
    }

    /// Potential (V vs. Li/Li+) at state of lithiation `theta`.
    #[inline]
    pub fn ocp(&self, theta: f64) -> f64 {
        let mut u = self.slope * theta + self.offset;
        if self.exp_amplitude != 0.0 {
            u += self.exp_amplitude * (self.exp_rate * theta).exp();
        }
        for t in &self.tanh_terms {
            u += t.amplitude * (t.steepness * (theta - t.center)).tanh();
        }
        u
    }

    /// Analytic derivative dU/dθ.
    pub fn slope_at(&self, theta: f64) -> f64 {
        let mut d = self.slope;
        if self.exp_amplitude != 0.0 {
            d += self.exp_amplitude * self.exp_rate * (self.exp_rate * theta).exp();
        }
        for t in &self.tanh_terms {
            let th = (t.steepness * (theta - t.center)).tanh();
            d += t.amplitude * t.steepness * (1.0 - th * th);
        }
        d
    }
}
