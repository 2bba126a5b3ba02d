//! Electrode-level equivalent-circuit model.
//!
//! Each electrode is a half-cell: OCP(θ) in series with R0 and two RC
//! branches. Current is positive on discharge. The positive electrode
//! potential is `OCP_p − vC1 − vC2 − R0·i`, the negative one
//! `OCP_n + vC1 + vC2 + R0·i`, and the cell voltage is their difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::Electrode;
use crate::params::{EsohParams, HalfCellParamTable, ParamPack, RcElements};

/// RC-branch voltages and SOL of one electrode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElectrodeState {
    pub vc1: f64,
    pub vc2: f64,
    pub theta: f64,
}

impl ElectrodeState {
    pub fn at_rest(theta: f64) -> Self {
        Self {
            vc1: 0.0,
            vc2: 0.0,
            theta,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.vc1, self.vc2, self.theta]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            vc1: a[0],
            vc2: a[1],
            theta: a[2],
        }
    }
}

/// Full model state: both electrodes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EecmState {
    pub pos: ElectrodeState,
    pub neg: ElectrodeState,
}

impl EecmState {
    pub fn at_rest(thp: f64, thn: f64) -> Self {
        Self {
            pos: ElectrodeState::at_rest(thp),
            neg: ElectrodeState::at_rest(thn),
        }
    }

    pub fn electrode(&self, e: Electrode) -> &ElectrodeState {
        match e {
            Electrode::Positive => &self.pos,
            Electrode::Negative => &self.neg,
        }
    }

    pub fn electrode_mut(&mut self, e: Electrode) -> &mut ElectrodeState {
        match e {
            Electrode::Positive => &mut self.pos,
            Electrode::Negative => &mut self.neg,
        }
    }
}

/// Potential of one electrode (V vs. Li/Li+).
#[inline]
pub fn electrode_potential(
    pack: &ParamPack,
    electrode: Electrode,
    s: &ElectrodeState,
    current: f64,
) -> f64 {
    let u = pack.ocp(electrode).ocp(s.theta);
    let r0 = pack.table(electrode).interpolate(s.theta).r0;
    match electrode {
        Electrode::Positive => u - s.vc1 - s.vc2 - r0 * current,
        Electrode::Negative => u + s.vc1 + s.vc2 + r0 * current,
    }
}

/// Terminal voltage: positive minus negative electrode potential.
#[inline]
pub fn cell_voltage(pack: &ParamPack, state: &EecmState, current: f64) -> f64 {
    electrode_voltage_pair(pack, &state.pos, &state.neg, current)
}

#[inline]
pub(crate) fn electrode_voltage_pair(
    pack: &ParamPack,
    pos: &ElectrodeState,
    neg: &ElectrodeState,
    current: f64,
) -> f64 {
    electrode_potential(pack, Electrode::Positive, pos, current)
        - electrode_potential(pack, Electrode::Negative, neg, current)
}

/// Zero-order-hold discretization of one half-cell: `x⁺ = diag(a)·x + b·i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretized {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl Discretized {
    pub fn new(electrode: Electrode, rc: &RcElements, capacity_ah: f64, eta: f64, dt: f64) -> Self {
        let e1 = (-dt / rc.tau1()).exp();
        let e2 = (-dt / rc.tau2()).exp();
        let dtheta = eta * dt / (3600.0 * capacity_ah);
        let b3 = match electrode {
            Electrode::Positive => dtheta,
            Electrode::Negative => -dtheta,
        };
        Self {
            a: [e1, e2, 1.0],
            b: [rc.r1 * (1.0 - e1), rc.r2 * (1.0 - e2), b3],
        }
    }

    pub fn for_state(
        electrode: Electrode,
        table: &HalfCellParamTable,
        s: &ElectrodeState,
        capacity_ah: f64,
        eta: f64,
        dt: f64,
    ) -> Self {
        Self::new(electrode, &table.interpolate(s.theta), capacity_ah, eta, dt)
    }

    #[inline]
    pub fn apply(&self, x: [f64; 3], current: f64) -> [f64; 3] {
        [
            self.a[0] * x[0] + self.b[0] * current,
            self.a[1] * x[1] + self.b[1] * current,
            self.a[2] * x[2] + self.b[2] * current,
        ]
    }
}

/// Result of one propagation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stepped {
    pub state: EecmState,
    /// Number of SOLs that had to be clamped back into `[0, 1]`.
    pub clamped: u32,
}

fn clamp_unit(x: &mut f64) -> u32 {
    if *x < 0.0 {
        *x = 0.0;
        1
    } else if *x > 1.0 {
        *x = 1.0;
        1
    } else {
        0
    }
}

/// Propagates the state over `dt` seconds of constant current.
///
/// RC branches use exact ZOH with elements taken at the SOL at the start of
/// the step; SOLs follow coulomb counting and are clamped to `[0, 1]`.
pub fn step_state(
    pack: &ParamPack,
    esoh: &EsohParams,
    state: &EecmState,
    current: f64,
    dt: f64,
) -> Result<Stepped> {
    if !(dt > 0.0) {
        return Err(Error::argument(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let mut next = *state;
    let mut clamped = 0;
    for (e, q) in [
        (Electrode::Positive, esoh.qp),
        (Electrode::Negative, esoh.qn),
    ] {
        let s = state.electrode(e);
        let d = Discretized::for_state(e, pack.table(e), s, q, esoh.eta, dt);
        let mut x = ElectrodeState::from_array(d.apply(s.to_array(), current));
        clamped += clamp_unit(&mut x.theta);
        *next.electrode_mut(e) = x;
    }
    Ok(Stepped {
        state: next,
        clamped,
    })
}
