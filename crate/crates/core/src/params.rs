//! Parameter packs: SOL-indexed passive-element tables, OCP constants and
//! electrode state-of-health parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{Electrode, OcpCurve};

/// Faraday constant (C/mol).
pub const FARADAY: f64 = 96_485.332_12;

/// Passive circuit elements of one half-cell at a given SOL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcElements {
    pub r0: f64,
    pub r1: f64,
    pub c1: f64,
    pub r2: f64,
    pub c2: f64,
}

impl RcElements {
    pub fn tau1(&self) -> f64 {
        self.r1 * self.c1
    }

    pub fn tau2(&self) -> f64 {
        self.r2 * self.c2
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.r0, self.r1, self.c1, self.r2, self.c2]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            r0: a[0],
            r1: a[1],
            c1: a[2],
            r2: a[3],
            c2: a[4],
        }
    }

    fn all_positive(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

/// One row of a half-cell table, in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcRow {
    pub sol: f64,
    pub r0_ohm: f64,
    pub r1_ohm: f64,
    pub c1_f: f64,
    pub r2_ohm: f64,
    pub c2_f: f64,
}

impl RcRow {
    pub fn elements(&self) -> RcElements {
        RcElements {
            r0: self.r0_ohm,
            r1: self.r1_ohm,
            c1: self.c1_f,
            r2: self.r2_ohm,
            c2: self.c2_f,
        }
    }

    pub fn new(sol: f64, e: RcElements) -> Self {
        Self {
            sol,
            r0_ohm: e.r0,
            r1_ohm: e.r1,
            c1_f: e.c1,
            r2_ohm: e.r2,
            c2_f: e.c2,
        }
    }
}

/// SOL-indexed R0/R1/C1/R2/C2 table for one electrode, interpolated
/// piecewise-linearly in SOL, each element independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfCellParamTable {
    pub electrode: Electrode,
    pub rows: Vec<RcRow>,
}

impl HalfCellParamTable {
    pub fn new(electrode: Electrode, rows: Vec<RcRow>) -> Result<Self> {
        let t = Self { electrode, rows };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() < 2 {
            return Err(Error::config(format!(
                "{} table needs at least two breakpoints",
                self.electrode
            )));
        }
        for w in self.rows.windows(2) {
            if !(w[1].sol > w[0].sol) {
                return Err(Error::config(format!(
                    "{} table breakpoints not strictly increasing at sol={}",
                    self.electrode, w[1].sol
                )));
            }
        }
        let first = self.rows[0].sol;
        let last = self.rows[self.rows.len() - 1].sol;
        if first.abs() > 1e-12 || (last - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "{} table must span [0, 1], got [{first}, {last}]",
                self.electrode
            )));
        }
        for r in &self.rows {
            if !r.elements().all_positive() {
                return Err(Error::config(format!(
                    "{} table has a nonpositive element at sol={}",
                    self.electrode, r.sol
                )));
            }
        }
        Ok(())
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.sol)
    }

    /// Elements at `theta`, clamped to the table span.
    #[inline]
    pub fn interpolate(&self, theta: f64) -> RcElements {
        let rows = &self.rows;
        let lo = rows[0].sol;
        let hi = rows[rows.len() - 1].sol;
        let t = if theta.is_nan() {
            lo
        } else {
            theta.clamp(lo, hi)
        };
        // index of the first breakpoint strictly greater than t
        let j = rows
            .partition_point(|r| r.sol <= t)
            .clamp(1, rows.len() - 1);
        let a = &rows[j - 1];
        let b = &rows[j];
        let w = (t - a.sol) / (b.sol - a.sol);
        let lerp = |x: f64, y: f64| x + w * (y - x);
        RcElements {
            r0: lerp(a.r0_ohm, b.r0_ohm),
            r1: lerp(a.r1_ohm, b.r1_ohm),
            c1: lerp(a.c1_f, b.c1_f),
            r2: lerp(a.r2_ohm, b.r2_ohm),
            c2: lerp(a.c2_f, b.c2_f),
        }
    }

    /// Applies `f` to every row's elements.
    pub fn map_elements(&self, mut f: impl FnMut(usize, RcElements) -> RcElements) -> Self {
        Self {
            electrode: self.electrode,
            rows: self
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| RcRow::new(r.sol, f(i, r.elements())))
                .collect(),
        }
    }
}

/// Electrode capacities and stoichiometric windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsohParams {
    /// Positive electrode total capacity (Ah).
    pub qp: f64,
    /// Negative electrode total capacity (Ah).
    pub qn: f64,
    /// PE SOL at 0 % SOC.
    pub thp0: f64,
    /// PE SOL at 100 % SOC.
    pub thp100: f64,
    /// NE SOL at 0 % SOC.
    pub thn0: f64,
    /// NE SOL at 100 % SOC.
    pub thn100: f64,
    #[serde(default = "unit_efficiency")]
    pub eta: f64,
}

fn unit_efficiency() -> f64 {
    1.0
}

/// Tolerance on the useful-capacity agreement of the two electrodes.
pub const USEFUL_CAPACITY_TOL_AH: f64 = 1e-6;

impl EsohParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.qp > 0.0 && self.qn > 0.0) {
            return Err(Error::config("electrode capacities must be positive"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("coulombic efficiency must lie in (0, 1]"));
        }
        for (name, v) in [
            ("thp0", self.thp0),
            ("thp100", self.thp100),
            ("thn0", self.thn0),
            ("thn100", self.thn100),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name}={v} outside [0, 1]")));
            }
        }
        if !(self.thp0 > self.thp100) {
            return Err(Error::config("PE window must satisfy thp0 > thp100"));
        }
        if !(self.thn100 > self.thn0) {
            return Err(Error::config("NE window must satisfy thn100 > thn0"));
        }
        let gap = (self.useful_capacity_p() - self.useful_capacity_n()).abs();
        if gap > USEFUL_CAPACITY_TOL_AH {
            return Err(Error::config(format!(
                "useful capacities disagree by {gap:.3e} Ah"
            )));
        }
        Ok(())
    }

    /// Qp·(thp0 − thp100).
    pub fn useful_capacity_p(&self) -> f64 {
        self.qp * (self.thp0 - self.thp100)
    }

    /// Qn·(thn100 − thn0).
    pub fn useful_capacity_n(&self) -> f64 {
        self.qn * (self.thn100 - self.thn0)
    }

    /// Cell capacity between the voltage limits (Ah).
    pub fn cell_capacity(&self) -> f64 {
        self.useful_capacity_p()
    }

    /// SOC from the NE state of lithiation.
    pub fn soc_from_sol(&self, thn: f64) -> Result<f64> {
        let span = self.thn100 - self.thn0;
        if span.abs() < 1e-12 {
            return Err(Error::config("degenerate NE window (thn100 == thn0)"));
        }
        Ok((thn - self.thn0) / span)
    }

    /// Both electrode SOLs at a given SOC: `(thp, thn)`.
    pub fn sol_from_soc(&self, soc: f64) -> Result<(f64, f64)> {
        if (self.thn100 - self.thn0).abs() < 1e-12 {
            return Err(Error::config("degenerate NE window (thn100 == thn0)"));
        }
        let thn = self.thn0 + soc * (self.thn100 - self.thn0);
        let thp = self.thp0 + soc * (self.thp100 - self.thp0);
        Ok((thp, thn))
    }

    pub fn with_windows(mut self, w: Windows) -> Self {
        self.thp0 = w.thp0;
        self.thp100 = w.thp100;
        self.thn0 = w.thn0;
        self.thn100 = w.thn100;
        self
    }

    pub fn windows(&self) -> Windows {
        Windows {
            thp0: self.thp0,
            thp100: self.thp100,
            thn0: self.thn0,
            thn100: self.thn100,
        }
    }
}

/// The four stoichiometric-window endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Windows {
    pub thp0: f64,
    pub thp100: f64,
    pub thn0: f64,
    pub thn100: f64,
}

impl Windows {
    pub fn to_array(&self) -> [f64; 4] {
        [self.thp0, self.thp100, self.thn0, self.thn100]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            thp0: a[0],
            thp100: a[1],
            thn0: a[2],
            thn100: a[3],
        }
    }
}

/// Theoretical electrode capacity (Ah) from porous-electrode geometry.
///
/// `cs_max` is the maximum solid-phase concentration in mol/m³.
pub fn capacity_from_geometry(
    eps_s: f64,
    thickness_m: f64,
    area_m2: f64,
    cs_max: f64,
) -> Result<f64> {
    for (name, v) in [
        ("eps_s", eps_s),
        ("thickness", thickness_m),
        ("area", area_m2),
        ("cs_max", cs_max),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::argument(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(FARADAY * eps_s * thickness_m * area_m2 * cs_max / 3600.0)
}

/// Everything the cell model needs: OCP curves, both half-cell tables and
/// the eSOH parameters of the cell the pack describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPack {
    #[serde(default)]
    pub name: String,
    pub ocp_negative: OcpCurve,
    pub ocp_positive: OcpCurve,
    pub table_negative: HalfCellParamTable,
    pub table_positive: HalfCellParamTable,
    pub esoh: EsohParams,
}

const LG_M50_PACK: &str = include_str!("../data/lg_m50_pack.json");

impl ParamPack {
    /// Built-in LG M50 pack (fitted half-cell tables, closed-form OCPs, BOL windows).
    pub fn lg_m50() -> Self {
        serde_json::from_str(LG_M50_PACK).expect("built-in parameter pack is valid JSON")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pack: Self = serde_json::from_str(s)?;
        pack.validate()?;
        Ok(pack)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::config(format!(
                "cannot read parameter pack {}: {e}",
                path.as_ref().display()
            ))
        })?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ocp_negative.electrode != Electrode::Negative
            || self.ocp_positive.electrode != Electrode::Positive
            || self.table_negative.electrode != Electrode::Negative
            || self.table_positive.electrode != Electrode::Positive
        {
            return Err(Error::config("parameter pack electrode tags are mixed up"));
        }
        self.table_negative.validate()?;
        self.table_positive.validate()?;
        self.esoh.validate()
    }

    pub fn ocp(&self, e: Electrode) -> &OcpCurve {
        match e {
            Electrode::Negative => &self.ocp_negative,
            Electrode::Positive => &self.ocp_positive,
        }
    }

    pub fn table(&self, e: Electrode) -> &HalfCellParamTable {
        match e {
            Electrode::Negative => &self.table_negative,
            Electrode::Positive => &self.table_positive,
        }
    }

    /// Open-circuit cell voltage at the given SOLs.
    pub fn ocv(&self, thp: f64, thn: f64) -> f64 {
        self.ocp_positive.ocp(thp) - self.ocp_negative.ocp(thn)
    }

    /// `(vmin, vmax)` implied by the pack's own windows.
    pub fn voltage_limits(&self) -> (f64, f64) {
        let e = &self.esoh;
        (self.ocv(e.thp0, e.thn0), self.ocv(e.thp100, e.thn100))
    }
}
