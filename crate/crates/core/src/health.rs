//! Degradation modes (LAM per electrode, LLI) and capacity-based SOH.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{EsohParams, FARADAY};

/// Loss of active material of one electrode, in percent.
pub fn lam(q_aged: f64, q_fresh: f64) -> Result<f64> {
    if !(q_fresh > 0.0) {
        return Err(Error::argument(format!(
            "fresh capacity must be positive, got {q_fresh}"
        )));
    }
    Ok((1.0 - q_aged / q_fresh) * 100.0)
}

/// Cyclable lithium (mol), evaluated with both SOLs taken at the same `soc`.
/// The result does not depend on `soc` when the windows are consistent.
pub fn lithium_inventory(esoh: &EsohParams, soc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&soc) {
        return Err(Error::argument(format!("soc {soc} outside [0, 1]")));
    }
    if !(esoh.thp0 > esoh.thp100 && esoh.thn100 > esoh.thn0) {
        return Err(Error::config("invalid stoichiometric windows"));
    }
    let (thp, thn) = esoh.sol_from_soc(soc)?;
    Ok(3600.0 / FARADAY * (thp * esoh.qp + thn * esoh.qn))
}

/// Cyclable lithium at 0 % SOC.
pub fn lithium_inventory_at_windows(esoh: &EsohParams) -> f64 {
    3600.0 / FARADAY * (esoh.thp0 * esoh.qp + esoh.thn0 * esoh.qn)
}

/// Loss of lithium inventory in percent. Negative values are returned as-is.
pub fn lli(n_aged: f64, n_fresh: f64) -> Result<f64> {
    if !(n_fresh > 0.0) {
        return Err(Error::argument(format!(
            "fresh lithium inventory must be positive, got {n_fresh}"
        )));
    }
    Ok((1.0 - n_aged / n_fresh) * 100.0)
}

/// Capacity-based state of health.
pub fn soh(aged: &EsohParams, q_fresh: f64) -> Result<f64> {
    if !(q_fresh > 0.0) {
        return Err(Error::argument("fresh cell capacity must be positive"));
    }
    Ok(aged.cell_capacity() / q_fresh)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub t_s: f64,
    pub lam_p: f64,
    pub lam_n: f64,
    pub lli: f64,
    /// Cell capacity between the voltage limits (Ah).
    pub q_cell: f64,
    pub soh: f64,
    /// Cyclable lithium (mol).
    pub n_li: f64,
}

/// Percentages below this are treated as estimation noise but still flagged.
pub const NEGATIVE_MODE_FLOOR: f64 = -1.0;

impl HealthReport {
    /// Report for `aged` against the fresh reference parameters.
    pub fn new(t_s: f64, aged: &EsohParams, fresh: &EsohParams) -> Result<Self> {
        let n_li = lithium_inventory_at_windows(aged);
        Ok(Self {
            t_s,
            lam_p: lam(aged.qp, fresh.qp)?,
            lam_n: lam(aged.qn, fresh.qn)?,
            lli: lli(n_li, lithium_inventory_at_windows(fresh))?,
            q_cell: aged.cell_capacity(),
            soh: soh(aged, fresh.cell_capacity())?,
            n_li,
        })
    }

    /// True if any mode is negative (physically a gain, so estimation noise).
    pub fn flagged(&self) -> bool {
        self.lam_p < 0.0 || self.lam_n < 0.0 || self.lli < 0.0
    }

    /// True if the report lies outside its plausible range.
    pub fn implausible(&self) -> bool {
        !(self.soh > 0.0 && self.soh <= 1.2)
            || !(self.q_cell > 0.0)
            || [self.lam_p, self.lam_n, self.lli]
                .iter()
                .any(|v| *v < NEGATIVE_MODE_FLOOR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamPack;

    #[test]
    fn lam_values() {
        assert_eq!(lam(5.0, 5.0).unwrap(), 0.0);
        assert!((lam(0.8 * 7.0, 7.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((lam(0.9 * 7.0, 7.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(lam(1.0, 0.0).is_err());
    }

    #[test]
    fn lli_values() {
        assert_eq!(lli(0.3, 0.3).unwrap(), 0.0);
        assert!((lli(0.84 * 0.3, 0.3).unwrap() - 16.0).abs() < 1e-12);
        assert!(lli(0.33, 0.3).unwrap() < 0.0);
    }

    #[test]
    fn inventory_is_soc_invariant() {
        let e = ParamPack::lg_m50().esoh;
        let n: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&z| lithium_inventory(&e, z).unwrap())
            .collect();
        assert!((n[0] - n[1]).abs() < 1e-9 && (n[0] - n[2]).abs() < 1e-9);
        // 3600/F·(0.987·Qp + 0.008·Qn) with the pack capacities
        assert!((n[0] - 0.27513).abs() < 1e-4, "{}", n[0]);
    }

    #[test]
    fn inventory_is_linear_in_capacity() {
        let e = ParamPack::lg_m50().esoh;
        let mut d = e;
        d.qp *= 2.0;
        d.qn *= 2.0;
        let a = lithium_inventory(&e, 0.3).unwrap();
        let b = lithium_inventory(&d, 0.3).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        let mut bad = e;
        bad.thn100 = bad.thn0 - 0.1;
        assert!(lithium_inventory(&bad, 0.3).is_err());
    }

    #[test]
    fn fresh_report() {
        let e = ParamPack::lg_m50().esoh;
        let r = HealthReport::new(0.0, &e, &e).unwrap();
        assert_eq!(r.soh, 1.0);
        assert_eq!(r.lam_p, 0.0);
        assert_eq!(r.lli, 0.0);
        assert!(!r.flagged() && !r.implausible());
        assert!((e.useful_capacity_p() - e.useful_capacity_n()).abs() < 1e-9);
    }
}
