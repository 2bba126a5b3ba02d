//! HPPC-based identification of half-cell R0/R1/C1/R2/C2 tables.
//!
//! Each breakpoint is fitted from its own pulse block with a seeded
//! differential-evolution search on log-elements, then polished with
//! Levenberg-Marquardt. The scalarized cost is `w1·J1 + w2·J2`. An optional
//! joint pass refines the whole table at once against the full series, using
//! the same SOL interpolation as the cell model.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::HppcRow;
use crate::model::Discretized;
use crate::ocp::{Electrode, OcpCurve};
use crate::params::{HalfCellParamTable, RcElements, RcRow};
use crate::truth::{generate_profile, Magnitude, ProfileSpec, Segment};

/// RMS voltage error (V).
pub fn cost_j1(model_v: &[f64], test_v: &[f64]) -> Result<f64> {
    check_lengths(model_v.len(), test_v.len(), 1)?;
    let ss: f64 = model_v
        .iter()
        .zip(test_v)
        .map(|(m, t)| (m - t).powi(2))
        .sum();
    Ok((ss / model_v.len() as f64).sqrt())
}

/// RMS error of the sample-to-sample voltage slope (V/s). `t_s` holds the
/// sample times; the first sample only anchors the differences.
pub fn cost_j2(model_v: &[f64], test_v: &[f64], t_s: &[f64]) -> Result<f64> {
    check_lengths(model_v.len(), test_v.len(), 2)?;
    check_lengths(model_v.len(), t_s.len(), 2)?;
    let mut ss = 0.0;
    for k in 1..model_v.len() {
        let dt = t_s[k] - t_s[k - 1];
        if !(dt > 0.0) {
            return Err(Error::argument(format!(
                "time not increasing at sample {k}"
            )));
        }
        let dm = model_v[k] - model_v[k - 1];
        let dd = test_v[k] - test_v[k - 1];
        ss += ((dm - dd) / dt).powi(2);
    }
    Ok((ss / (model_v.len() - 1) as f64).sqrt())
}

fn check_lengths(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::argument(format!(
            "series lengths differ ({a} vs {b})"
        )));
    }
    if a < min {
        return Err(Error::argument(format!(
            "need at least {min} samples, got {a}"
        )));
    }
    Ok(())
}

/// Contiguous samples around one breakpoint: its pulses and the rests after them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HppcBlock {
    /// SOL at the first pulse.
    pub sol: f64,
    /// First sample (inclusive).
    pub start: usize,
    /// One past the last sample.
    pub end: usize,
    pub pulses: usize,
    pub rests: usize,
}

/// One electrode's HPPC record plus its pulse segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct HppcDataset {
    pub electrode: Electrode,
    pub rows: Vec<HppcRow>,
    pub blocks: Vec<HppcBlock>,
}

impl HppcDataset {
    /// Splits the record into blocks. A current run no longer than
    /// `max_pulse_s` is a pulse; longer runs move the SOL between blocks.
    /// A block starts at its first pulse and ends with the last rest before
    /// the next move.
    pub fn segment(electrode: Electrode, rows: Vec<HppcRow>, max_pulse_s: f64) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Fitting(
                "HPPC dataset has fewer than two samples".into(),
            ));
        }
        for (k, w) in rows.windows(2).enumerate() {
            if !(w[1].t_s > w[0].t_s) {
                return Err(Error::Data {
                    row: k + 2,
                    msg: "time not increasing".into(),
                });
            }
        }
        if let Some(k) = rows.iter().position(|r| {
            !(r.t_s.is_finite()
                && r.current_a.is_finite()
                && r.potential_v.is_finite()
                && r.sol.is_finite())
        }) {
            return Err(Error::Data {
                row: k + 1,
                msg: "non-finite value".into(),
            });
        }

        // runs of equal activity: (start, end, active)
        let mut runs: Vec<(usize, usize, bool)> = Vec::new();
        for (k, r) in rows.iter().enumerate() {
            let active = r.current_a != 0.0;
            match runs.last_mut() {
                Some(last) if last.2 == active => last.1 = k + 1,
                _ => runs.push((k, k + 1, active)),
            }
        }
        let span = |s: usize, e: usize| rows[e.min(rows.len() - 1)].t_s - rows[s].t_s;

        let mut blocks = Vec::new();
        let mut open: Option<HppcBlock> = None;
        for &(s, e, active) in &runs {
            let is_move = active && span(s, e) > max_pulse_s;
            match (active, is_move, open.as_mut()) {
                (_, true, _) => {
                    if let Some(b) = open.take() {
                        blocks.push(b);
                    }
                }
                (true, false, Some(b)) => {
                    b.pulses += 1;
                    b.end = e;
                }
                (true, false, None) => {
                    open = Some(HppcBlock {
                        sol: rows[s].sol,
                        start: s,
                        end: e,
                        pulses: 1,
                        rests: 0,
                    });
                }
                (false, _, Some(b)) => {
                    b.rests += 1;
                    b.end = e;
                }
                (false, _, None) => {}
            }
        }
        if let Some(b) = open {
            blocks.push(b);
        }
        blocks.retain(|b| b.pulses >= 1 && b.rests >= 1);
        Ok(Self {
            electrode,
            rows,
            blocks,
        })
    }

    /// The block whose starting SOL lies within `tol` of `sol`.
    pub fn block_at(&self, sol: f64, tol: f64) -> Option<&HppcBlock> {
        self.blocks
            .iter()
            .filter(|b| (b.sol - sol).abs() <= tol)
            .min_by(|a, b| (a.sol - sol).abs().total_cmp(&(b.sol - sol).abs()))
    }
}

/// Box bounds on each element, in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementBounds {
    pub lower: RcElements,
    pub upper: RcElements,
}

impl Default for ElementBounds {
    fn default() -> Self {
        Self {
            lower: RcElements {
                r0: 1e-4,
                r1: 1e-4,
                c1: 100.0,
                r2: 1e-4,
                c2: 100.0,
            },
            upper: RcElements {
                r0: 0.1,
                r1: 0.1,
                c1: 2e5,
                r2: 0.1,
                c2: 2e5,
            },
        }
    }
}

impl ElementBounds {
    fn log_box(&self) -> Result<([f64; 5], [f64; 5])> {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        if lo.iter().zip(&hi).any(|(l, h)| !(*l > 0.0 && h > l)) {
            return Err(Error::config(
                "element bounds must satisfy 0 < lower < upper",
            ));
        }
        Ok((lo.map(f64::ln), hi.map(f64::ln)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Each breakpoint from its own block with constant elements.
    Local,
    /// Local fits, then one joint refinement of the whole table.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub w1: f64,
    /// Weight on J2 (s).
    pub w2: f64,
    pub population: usize,
    pub generations: usize,
    /// Differential weight.
    pub de_f: f64,
    /// Crossover probability.
    pub de_cr: f64,
    pub seed: u64,
    pub bounds: ElementBounds,
    /// SOLs at which the table is fitted.
    pub breakpoints: Vec<f64>,
    /// Largest distance between a block's SOL and its breakpoint.
    pub sol_tol: f64,
    /// Current runs longer than this are SOL moves, not pulses (s).
    pub max_pulse_s: f64,
    pub mode: FitMode,
    /// Levenberg-Marquardt refinement after the population search.
    pub polish: bool,
    /// Joint mode: most passes of row searches on the full model. Stops
    /// early once a pass no longer lowers the cost.
    pub joint_sweeps: usize,
    /// Generations of each per-row search in a joint sweep.
    pub joint_generations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 100.0,
            population: 64,
            generations: 500,
            de_f: 0.7,
            de_cr: 0.9,
            seed: 0,
            bounds: ElementBounds::default(),
            breakpoints: (0..=10).map(|k| k as f64 / 10.0).collect(),
            sol_tol: 0.01,
            max_pulse_s: 120.0,
            mode: FitMode::Local,
            polish: true,
            joint_sweeps: 4,
            joint_generations: 60,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1 + self.w2 > 0.0) {
            return Err(Error::config(
                "cost weights must be nonnegative and not both zero",
            ));
        }
        if self.population < 4 {
            return Err(Error::config("population must hold at least 4 members"));
        }
        if !(self.de_f > 0.0 && self.de_f <= 2.0) || !(0.0..=1.0).contains(&self.de_cr) {
            return Err(Error::config(
                "differential-evolution F must be in (0, 2] and CR in [0, 1]",
            ));
        }
        if self.breakpoints.len() < 2 {
            return Err(Error::config("need at least two breakpoints"));
        }
        self.bounds.log_box()?;
        Ok(())
    }
}

/// Costs achieved on one breakpoint's block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockFit {
    pub sol: f64,
    pub j1: f64,
    pub j2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub electrode: Electrode,
    /// One row per breakpoint, branches ordered by time constant.
    pub rows: Vec<RcRow>,
    /// Costs over all fitted blocks (V, V/s).
    pub j1: f64,
    pub j2: f64,
    pub blocks: Vec<BlockFit>,
    pub population: usize,
    pub generations: usize,
    pub seed: u64,
    pub mode: FitMode,
}

impl FitResult {
    pub fn table(&self) -> Result<HalfCellParamTable> {
        HalfCellParamTable::new(self.electrode, self.rows.clone())
    }
}

/// Samples of one block with the OCP already evaluated.
struct BlockData {
    t: Vec<f64>,
    i: Vec<f64>,
    v: Vec<f64>,
    ocp: Vec<f64>,
}

impl BlockData {
    fn new(rows: &[HppcRow], ocp: &OcpCurve) -> Self {
        Self {
            t: rows.iter().map(|r| r.t_s).collect(),
            i: rows.iter().map(|r| r.current_a).collect(),
            v: rows.iter().map(|r| r.potential_v).collect(),
            ocp: rows.iter().map(|r| ocp.ocp(r.sol)).collect(),
        }
    }
}

/// Sign applied to the overpotential: the PE sits below its OCP on
/// discharge, the NE above.
fn overpotential_sign(e: Electrode) -> f64 {
    match e {
        Electrode::Positive => -1.0,
        Electrode::Negative => 1.0,
    }
}

/// Half-cell potential with constant elements, starting relaxed. The state
/// moves with the current of the previous sample.
fn simulate_constant(e: Electrode, rc: &RcElements, d: &BlockData, out: &mut Vec<f64>) {
    out.clear();
    let sign = overpotential_sign(e);
    let (tau1, tau2) = (rc.tau1(), rc.tau2());
    let (mut v1, mut v2) = (0.0, 0.0);
    let mut last_dt = f64::NAN;
    let (mut e1, mut e2) = (0.0, 0.0);
    for k in 0..d.t.len() {
        if k > 0 {
            let dt = d.t[k] - d.t[k - 1];
            if dt != last_dt {
                e1 = (-dt / tau1).exp();
                e2 = (-dt / tau2).exp();
                last_dt = dt;
            }
            let ip = d.i[k - 1];
            v1 = e1 * v1 + rc.r1 * (1.0 - e1) * ip;
            v2 = e2 * v2 + rc.r2 * (1.0 - e2) * ip;
        }
        out.push(d.ocp[k] + sign * (v1 + v2 + rc.r0 * d.i[k]));
    }
}

/// Half-cell potential with elements interpolated at each sample's SOL.
fn simulate_table(
    e: Electrode,
    table: &HalfCellParamTable,
    rows: &[HppcRow],
    ocp: &[f64],
) -> Vec<f64> {
    simulate_table_from(e, table, rows, ocp, [0.0; 3])
}

fn simulate_table_from(
    e: Electrode,
    table: &HalfCellParamTable,
    rows: &[HppcRow],
    ocp: &[f64],
    x0: [f64; 3],
) -> Vec<f64> {
    let sign = overpotential_sign(e);
    let mut x = x0;
    let mut out = Vec::with_capacity(rows.len());
    for k in 0..rows.len() {
        if k > 0 {
            x = advance(e, table, &rows[k - 1], rows[k].t_s - rows[k - 1].t_s, x);
        }
        let rc = table.interpolate(rows[k].sol);
        out.push(ocp[k] + sign * (x[0] + x[1] + rc.r0 * rows[k].current_a));
    }
    out
}

fn advance(
    e: Electrode,
    table: &HalfCellParamTable,
    row: &HppcRow,
    dt: f64,
    x: [f64; 3],
) -> [f64; 3] {
    // capacity only drives the SOL channel, which the data supply
    Discretized::new(e, &table.interpolate(row.sol), 1.0, 1.0, dt).apply(x, row.current_a)
}

/// RC state just before sample `idx`, starting relaxed at sample 0.
fn state_at(e: Electrode, table: &HalfCellParamTable, rows: &[HppcRow], idx: usize) -> [f64; 3] {
    (1..=idx).fold([0.0; 3], |x, k| {
        advance(e, table, &rows[k - 1], rows[k].t_s - rows[k - 1].t_s, x)
    })
}

fn scalar_cost(w1: f64, w2: f64, model: &[f64], test: &[f64], t: &[f64]) -> f64 {
    let j1 = cost_j1(model, test).unwrap_or(f64::INFINITY);
    let j2 = cost_j2(model, test, t).unwrap_or(f64::INFINITY);
    let c = w1 * j1 + w2 * j2;
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

/// Stacked residuals whose squared norm is `(w1·J1)² + (w2·J2)²`.
fn residuals(w1: f64, w2: f64, model: &[f64], test: &[f64], t: &[f64]) -> DVector<f64> {
    let n = model.len();
    let a = w1 / (n as f64).sqrt();
    let b = w2 / ((n - 1) as f64).sqrt();
    DVector::from_iterator(
        2 * n - 1,
        (0..n)
            .map(|k| a * (model[k] - test[k]))
            .chain((1..n).map(|k| {
                b * ((model[k] - model[k - 1]) - (test[k] - test[k - 1])) / (t[k] - t[k - 1])
            })),
    )
}

fn elements_from_log(p: &[f64]) -> RcElements {
    RcElements::from_array([p[0].exp(), p[1].exp(), p[2].exp(), p[3].exp(), p[4].exp()])
}

/// Seeded rand/1/bin differential evolution inside a box. Trial costs are
/// evaluated in parallel; all random draws happen on one thread, so the
/// result only depends on the seed. Returns the final population, best first.
#[allow(clippy::too_many_arguments)]
fn differential_evolution<F>(
    lo: &[f64],
    hi: &[f64],
    population: usize,
    generations: usize,
    cfg: &FitConfig,
    seed: u64,
    start: &[Vec<f64>],
    cost: F,
) -> Vec<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = lo.len();
    let np = population;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|i| match start.get(i) {
            Some(p) => p
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (l, h))| x.clamp(*l, *h))
                .collect(),
            None => (0..dim).map(|j| rng.random_range(lo[j]..=hi[j])).collect(),
        })
        .collect();
    let mut costs: Vec<f64> = pop.par_iter().map(|p| cost(p)).collect();
    for _ in 0..generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let mut pick = || loop {
                    let r = rng.random_range(0..np);
                    if r != i {
                        break r;
                    }
                };
                let (a, mut b, mut c) = (pick(), pick(), pick());
                while b == a {
                    b = pick();
                }
                while c == a || c == b {
                    c = pick();
                }
                let jrand = rng.random_range(0..dim);
                (0..dim)
                    .map(|j| {
                        if j == jrand || rng.random::<f64>() < cfg.de_cr {
                            (pop[a][j] + cfg.de_f * (pop[b][j] - pop[c][j])).clamp(lo[j], hi[j])
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_costs: Vec<f64> = trials.par_iter().map(|p| cost(p)).collect();
        for (i, (t, c)) in trials.into_iter().zip(trial_costs).enumerate() {
            if c <= costs[i] {
                pop[i] = t;
                costs[i] = c;
            }
        }
    }
    let mut ranked: Vec<(Vec<f64>, f64)> = pop.into_iter().zip(costs).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranked
}

/// Least-squares problem over log-parameters with a forward-difference Jacobian.
struct LogProblem<F: Fn(&[f64]) -> DVector<f64> + Sync> {
    p: DVector<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    model: F,
}

impl<F: Fn(&[f64]) -> DVector<f64> + Sync> LogProblem<F> {
    fn clamped(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| x.clamp(*l, *h))
            .collect()
    }
}

impl<F: Fn(&[f64]) -> DVector<f64> + Sync> LeastSquaresProblem<f64, Dyn, Dyn> for LogProblem<F> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.p = DVector::from_vec(self.clamped(x.as_slice()));
    }

    fn params(&self) -> DVector<f64> {
        self.p.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let r = (self.model)(self.p.as_slice());
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let h = 1e-6;
        let cols: Vec<DVector<f64>> = (0..self.p.len())
            .into_par_iter()
            .map(|j| {
                let mut q = self.p.as_slice().to_vec();
                q[j] += h;
                let up = (self.model)(&q);
                q[j] -= 2.0 * h;
                (up - (self.model)(&q)) / (2.0 * h)
            })
            .collect();
        let j = DMatrix::from_columns(&cols);
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

fn polish<F>(p0: Vec<f64>, lo: &[f64], hi: &[f64], model: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> DVector<f64> + Sync,
{
    let problem = LogProblem {
        p: DVector::from_vec(p0),
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        model,
    };
    let (done, report) = LevenbergMarquardt::new()
        .with_patience(200)
        .with_xtol(1e-14)
        .with_ftol(1e-14)
        .with_gtol(1e-14)
        .minimize(problem);
    debug!(
        "LM polish: {:?} after {} evaluations, objective {:.3e}",
        report.termination, report.number_of_evaluations, report.objective_function
    );
    done.p.as_slice().to_vec()
}

/// Fits the electrode's table from its HPPC dataset.
pub fn fit_half_cell(data: &HppcDataset, ocp: &OcpCurve, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if ocp.electrode != data.electrode {
        return Err(Error::argument(format!(
            "{} OCP given for {} data",
            ocp.electrode, data.electrode
        )));
    }
    if data.rows.is_empty() {
        return Err(Error::Fitting("empty HPPC dataset".into()));
    }
    let mut blocks = Vec::with_capacity(config.breakpoints.len());
    let mut missing = Vec::new();
    let mut breakpoints = config.breakpoints.clone();
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();
    for &sol in &breakpoints {
        match data.block_at(sol, config.sol_tol) {
            Some(b) => blocks.push((sol, *b)),
            None => missing.push(format!("{sol}")),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Fitting(format!(
            "no pulse block reaches breakpoints [{}]",
            missing.join(", ")
        )));
    }
    for (sol, b) in &blocks {
        let rows = &data.rows[b.start..b.end];
        if rows.iter().all(|r| r.current_a == rows[0].current_a) || rows.len() < 3 {
            return Err(Error::Fitting(format!(
                "block at sol={sol} carries no excitation"
            )));
        }
    }

    let (lo, hi) = config.bounds.log_box()?;
    let e = data.electrode;
    let (w1, w2) = (config.w1, config.w2);
    let mut elements = Vec::with_capacity(blocks.len());
    for (k, (sol, b)) in blocks.iter().enumerate() {
        let d = BlockData::new(&data.rows[b.start..b.end], ocp);
        let cost = |p: &[f64]| {
            let mut out = Vec::with_capacity(d.t.len());
            simulate_constant(e, &elements_from_log(p), &d, &mut out);
            scalar_cost(w1, w2, &out, &d.v, &d.t)
        };
        let seed = config.seed.wrapping_add(k as u64);
        let (mut best, mut best_cost) = differential_evolution(
            &lo,
            &hi,
            config.population,
            config.generations,
            config,
            seed,
            &[],
            cost,
        )
        .swap_remove(0);
        if config.polish {
            let p = polish(best.clone(), &lo, &hi, |p: &[f64]| {
                let mut out = Vec::with_capacity(d.t.len());
                simulate_constant(e, &elements_from_log(p), &d, &mut out);
                residuals(w1, w2, &out, &d.v, &d.t)
            });
            let c = cost(&p);
            if c < best_cost {
                best = p;
                best_cost = c;
            }
        }
        debug!("{e} sol={sol}: cost {best_cost:.3e}");
        elements.push(elements_from_log(&best));
    }

    let mut table = HalfCellParamTable {
        electrode: e,
        rows: blocks
            .iter()
            .zip(&elements)
            .map(|((sol, _), rc)| RcRow::new(*sol, order_branches(*rc)))
            .collect(),
    };
    let spans_unit = table.validate().is_ok();
    if config.mode == FitMode::Joint {
        if spans_unit {
            table = joint_refine(data, ocp, table, &blocks, &lo, &hi, config);
        } else {
            warn!("joint refinement needs breakpoints spanning [0, 1]; keeping local fits");
        }
    }

    let mut rows = table.rows;
    rows.sort_by(|a, b| a.sol.total_cmp(&b.sol));
    let fitted = HalfCellParamTable {
        electrode: e,
        rows: rows.clone(),
    };

    // report costs over the fitted blocks, each simulated from rest
    let mut model_all = Vec::new();
    let mut test_all = Vec::new();
    let mut t_all = Vec::new();
    let mut per_block = Vec::with_capacity(blocks.len());
    for (sol, b) in &blocks {
        let rows = &data.rows[b.start..b.end];
        let d = BlockData::new(rows, ocp);
        let model = if spans_unit && config.mode == FitMode::Joint {
            simulate_table(e, &fitted, rows, &d.ocp)
        } else {
            let mut out = Vec::new();
            simulate_constant(e, &fitted.interpolate(*sol), &d, &mut out);
            out
        };
        per_block.push(BlockFit {
            sol: *sol,
            j1: cost_j1(&model, &d.v)?,
            j2: cost_j2(&model, &d.v, &d.t)?,
        });
        // offset times so the concatenated series stays increasing
        let shift = t_all.last().map_or(0.0, |t: &f64| t + 1.0) - d.t[0];
        t_all.extend(d.t.iter().map(|t| t + shift));
        model_all.extend(model);
        test_all.extend(d.v);
    }
    Ok(FitResult {
        electrode: e,
        rows,
        j1: cost_j1(&model_all, &test_all)?,
        j2: cost_j2(&model_all, &test_all, &t_all)?,
        blocks: per_block,
        population: config.population,
        generations: config.generations,
        seed: config.seed,
        mode: config.mode,
    })
}

fn swap_branches(rc: RcElements) -> RcElements {
    RcElements {
        r0: rc.r0,
        r1: rc.r2,
        c1: rc.c2,
        r2: rc.r1,
        c2: rc.c1,
    }
}

/// Puts the faster branch first. Locally the two RC branches are
/// interchangeable, so local fits are reported in this order.
fn order_branches(rc: RcElements) -> RcElements {
    if rc.tau1() <= rc.tau2() {
        rc
    } else {
        swap_branches(rc)
    }
}

const JOINT_POLISH_STARTS: usize = 8;

/// A fit can merge two branches with close time constants into one and let
/// the other collapse. These starts split each branch back into two halves
/// with time constants 10 % apart, in both label orders.
fn split_candidates(rc: RcElements) -> Vec<RcElements> {
    [(rc.r1, rc.tau1()), (rc.r2, rc.tau2())]
        .into_iter()
        .flat_map(|(r, tau)| {
            let h = 0.5 * r;
            let a = RcElements {
                r0: rc.r0,
                r1: h,
                c1: 0.9 * tau / h,
                r2: h,
                c2: 1.1 * tau / h,
            };
            [a, swap_branches(a)]
        })
        .collect()
}

/// Branch labels only matter between rows, where elements are interpolated
/// branch by branch. Flips single rows, or every row from one end up to a
/// row, while that lowers the cost. Returns the final cost.
fn relabel<C>(table: &mut HalfCellParamTable, cost: &C) -> f64
where
    C: Fn(&HalfCellParamTable) -> f64 + Sync,
{
    let n = table.rows.len();
    let flip = |tbl: &HalfCellParamTable, rows: std::ops::Range<usize>| {
        let mut out = tbl.clone();
        for r in &mut out.rows[rows] {
            *r = RcRow::new(r.sol, swap_branches(r.elements()));
        }
        out
    };
    let moves: Vec<std::ops::Range<usize>> = (0..n)
        .map(|k| k..k + 1)
        .chain((1..n).map(|k| 0..k))
        .chain((1..n).map(|k| k..n))
        .collect();
    let mut best = cost(table);
    loop {
        let trial = moves
            .par_iter()
            .map(|m| (m.clone(), cost(&flip(table, m.clone()))))
            .min_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then(a.0.start.cmp(&b.0.start))
                    .then(a.0.end.cmp(&b.0.end))
            });
        match trial {
            Some((m, c)) if c < best => {
                *table = flip(table, m);
                best = c;
            }
            _ => return best,
        }
    }
}

fn joint_refine(
    data: &HppcDataset,
    ocp: &OcpCurve,
    start: HalfCellParamTable,
    blocks: &[(f64, HppcBlock)],
    lo: &[f64; 5],
    hi: &[f64; 5],
    config: &FitConfig,
) -> HalfCellParamTable {
    let e = data.electrode;
    let ocp_v: Vec<f64> = data.rows.iter().map(|r| ocp.ocp(r.sol)).collect();
    let test: Vec<f64> = data.rows.iter().map(|r| r.potential_v).collect();
    let t: Vec<f64> = data.rows.iter().map(|r| r.t_s).collect();
    let (w1, w2) = (config.w1, config.w2);
    let cost = |table: &HalfCellParamTable| {
        scalar_cost(
            w1,
            w2,
            &simulate_table(e, table, &data.rows, &ocp_v),
            &test,
            &t,
        )
    };

    let mut table = start;
    let mut best = relabel(&mut table, &cost);

    // Global searches over single rows, then adjacent pairs, on the exact
    // model over the neighbouring blocks with all other rows held. Samples
    // before the window never see these rows.
    let nb = blocks.len();
    let groups: Vec<std::ops::Range<usize>> = (0..nb)
        .map(|k| k..k + 1)
        .chain((0..nb.saturating_sub(1)).map(|k| k..k + 2))
        .collect();
    let mut last = cost(&table);
    for sweep in 0..config.joint_sweeps {
        for (g, rows) in groups.iter().enumerate() {
            let seed = config.seed.wrapping_add(((sweep + 1) * 1000 + g) as u64);
            table = search_rows(
                data,
                &ocp_v,
                &test,
                &t,
                blocks,
                table,
                rows.clone(),
                lo,
                hi,
                config,
                seed,
            );
        }
        let c = cost(&table);
        debug!("joint sweep {sweep}: cost {c:.3e}");
        if !(c < 0.999 * last) {
            break;
        }
        last = c;
    }
    best = best.min(relabel(&mut table, &cost));

    let refined = refine_all(data, &ocp_v, &table, lo, hi, config);
    if cost(&refined) < best {
        refined
    } else {
        table
    }
}

/// Seeded search over the rows in `rows`, then Levenberg-Marquardt from the
/// best members. Keeps the table unless the window cost drops.
#[allow(clippy::too_many_arguments)]
fn search_rows(
    data: &HppcDataset,
    ocp_v: &[f64],
    test: &[f64],
    t: &[f64],
    blocks: &[(f64, HppcBlock)],
    table: HalfCellParamTable,
    rows: std::ops::Range<usize>,
    lo: &[f64; 5],
    hi: &[f64; 5],
    config: &FitConfig,
    seed: u64,
) -> HalfCellParamTable {
    let e = data.electrode;
    let (w1, w2) = (config.w1, config.w2);
    let nb = blocks.len();
    let first = &blocks[rows.start.saturating_sub(1)].1;
    let last = &blocks[rows.end.min(nb - 1)].1;
    let (a, b) = (first.start.min(last.start), first.end.max(last.end));
    let x0 = state_at(e, &table, &data.rows, a);
    let window =
        |tbl: &HalfCellParamTable| simulate_table_from(e, tbl, &data.rows[a..b], &ocp_v[a..b], x0);
    let window_cost =
        |tbl: &HalfCellParamTable| scalar_cost(w1, w2, &window(tbl), &test[a..b], &t[a..b]);
    let with_rows = |p: &[f64]| {
        let mut tbl = table.clone();
        for (j, k) in rows.clone().enumerate() {
            tbl.rows[k] = RcRow::new(tbl.rows[k].sol, elements_from_log(&p[5 * j..5 * j + 5]));
        }
        tbl
    };

    // every combination of each row's current value, its flip and its splits
    let mut seeds: Vec<Vec<f64>> = vec![Vec::new()];
    for k in rows.clone() {
        let here = table.rows[k].elements();
        let options: Vec<[f64; 5]> = [here, swap_branches(here)]
            .into_iter()
            .chain(split_candidates(here))
            .map(|rc| rc.to_array().map(f64::ln))
            .collect();
        seeds = seeds
            .iter()
            .flat_map(|s| options.iter().map(move |o| [s.as_slice(), o].concat()))
            .collect();
    }
    seeds.truncate(config.population);

    let los: Vec<f64> = rows.clone().flat_map(|_| *lo).collect();
    let his: Vec<f64> = rows.clone().flat_map(|_| *hi).collect();
    let ranked = differential_evolution(
        &los,
        &his,
        config.population,
        config.joint_generations,
        config,
        seed,
        &seeds,
        |p: &[f64]| window_cost(&with_rows(p)),
    );
    // the valleys are long and narrow; polish several members
    let (p, c) = ranked
        .par_iter()
        .take(JOINT_POLISH_STARTS)
        .map(|(p0, _)| {
            let p = polish(p0.clone(), &los, &his, |p: &[f64]| {
                residuals(w1, w2, &window(&with_rows(p)), &test[a..b], &t[a..b])
            });
            let c = window_cost(&with_rows(&p));
            (p, c)
        })
        .chain(ranked.first().cloned())
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("nonempty population");
    if c < window_cost(&table) {
        with_rows(&p)
    } else {
        table
    }
}

/// Levenberg-Marquardt over every entry of the table on the full series.
fn refine_all(
    data: &HppcDataset,
    ocp_v: &[f64],
    table: &HalfCellParamTable,
    lo: &[f64; 5],
    hi: &[f64; 5],
    config: &FitConfig,
) -> HalfCellParamTable {
    let e = data.electrode;
    let test: Vec<f64> = data.rows.iter().map(|r| r.potential_v).collect();
    let t: Vec<f64> = data.rows.iter().map(|r| r.t_s).collect();
    let (w1, w2) = (config.w1, config.w2);
    let sols: Vec<f64> = table.rows.iter().map(|r| r.sol).collect();
    let n = sols.len();
    let to_table = |p: &[f64]| HalfCellParamTable {
        electrode: e,
        rows: (0..n)
            .map(|k| RcRow::new(sols[k], elements_from_log(&p[5 * k..5 * k + 5])))
            .collect(),
    };
    let p0: Vec<f64> = table
        .rows
        .iter()
        .flat_map(|r| r.elements().to_array().map(f64::ln))
        .collect();
    let los: Vec<f64> = (0..n).flat_map(|_| *lo).collect();
    let his: Vec<f64> = (0..n).flat_map(|_| *hi).collect();
    let residual = |p: &[f64]| {
        let model = simulate_table(e, &to_table(p), &data.rows, ocp_v);
        residuals(w1, w2, &model, &test, &t)
    };
    // restarts reopen a collapsed trust region
    let mut p = p0;
    let mut last = residual(&p).norm_squared();
    for _ in 0..20 {
        let q = polish(p.clone(), &los, &his, residual);
        let r = residual(&q).norm_squared();
        if !(r < last) {
            break;
        }
        let done = r > 0.999 * last;
        p = q;
        last = r;
        if done {
            break;
        }
    }
    to_table(&p)
}

/// HPPC test plan for one electrode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HppcScheduleConfig {
    pub electrode: Electrode,
    /// Electrode capacity (Ah); C-rates refer to it.
    pub capacity_ah: f64,
    pub sol_lo: f64,
    pub sol_hi: f64,
    pub step: f64,
    pub pulse_crate: f64,
    pub pulse_s: f64,
    /// Rest after each pulse (s).
    pub rest_s: f64,
    pub move_crate: f64,
    /// Rest before each block (s).
    pub relax_s: f64,
    pub dt_s: f64,
    pub noise_std_v: f64,
    pub seed: u64,
}

impl Default for HppcScheduleConfig {
    fn default() -> Self {
        Self {
            electrode: Electrode::Positive,
            capacity_ah: 5.0,
            sol_lo: 0.0,
            sol_hi: 1.0,
            step: 0.1,
            pulse_crate: 1.0,
            pulse_s: 10.0,
            rest_s: 600.0,
            move_crate: 1.0,
            relax_s: 1800.0,
            dt_s: 1.0,
            noise_std_v: 0.0,
            seed: 0,
        }
    }
}

/// Current sign that raises the electrode's SOL.
fn raising_current(e: Electrode) -> f64 {
    match e {
        Electrode::Positive => 1.0,
        Electrode::Negative => -1.0,
    }
}

/// Relax, pulse block, then a move of `step` in SOL, from `sol_lo` up to
/// `sol_hi`. Each block's first pulse heads into the interior of `[0, 1]`.
pub fn hppc_schedule(cfg: &HppcScheduleConfig) -> Result<ProfileSpec> {
    if !(0.0..=1.0).contains(&cfg.sol_lo)
        || !(0.0..=1.0).contains(&cfg.sol_hi)
        || cfg.sol_hi < cfg.sol_lo
    {
        return Err(Error::argument("SOL range must satisfy 0 <= lo <= hi <= 1"));
    }
    if !(cfg.step > 0.0 && cfg.pulse_crate > 0.0 && cfg.move_crate > 0.0 && cfg.capacity_ah > 0.0) {
        return Err(Error::argument(
            "step, C-rates and capacity must be positive",
        ));
    }
    let n_steps = ((cfg.sol_hi - cfg.sol_lo) / cfg.step).round() as usize;
    let up = raising_current(cfg.electrode);
    let mut segments = Vec::with_capacity(3 * (n_steps + 1));
    for k in 0..=n_steps {
        let sol = cfg.sol_lo + k as f64 * cfg.step;
        segments.push(Segment::Rest {
            duration_s: cfg.relax_s,
        });
        let first_raises = sol < 0.5;
        // `discharge_first` flips the sign of the first pulse
        segments.push(Segment::Hppc {
            pulse: Magnitude::CRate(cfg.pulse_crate),
            pulse_s: cfg.pulse_s,
            rest_s: cfg.rest_s,
            discharge_first: (up > 0.0) == first_raises,
        });
        if k < n_steps {
            segments.push(Segment::ConstantCurrent {
                current: Magnitude::CRate(up * cfg.move_crate),
                duration_s: cfg.step * 3600.0 / cfg.move_crate,
                termination_v: None,
            });
        }
    }
    Ok(ProfileSpec {
        segments,
        dt_s: cfg.dt_s,
        nominal_capacity_ah: cfg.capacity_ah,
        repeat: 1,
        noise_std_v: cfg.noise_std_v,
        seed: cfg.seed,
    })
}

/// Simulates a half-cell under `spec` from `theta0` at rest, with the SOL
/// coulomb-counted against `capacity_ah` and additive Gaussian noise.
pub fn synthesize_hppc(
    electrode: Electrode,
    ocp: &OcpCurve,
    table: &HalfCellParamTable,
    capacity_ah: f64,
    theta0: f64,
    spec: &ProfileSpec,
) -> Result<Vec<HppcRow>> {
    if !(capacity_ah > 0.0) || !(0.0..=1.0).contains(&theta0) {
        return Err(Error::argument(
            "capacity must be positive and the initial SOL in [0, 1]",
        ));
    }
    let profile = generate_profile(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5bd1_e995);
    let noise = Normal::new(0.0, spec.noise_std_v).map_err(|e| Error::argument(e.to_string()))?;
    let sign = overpotential_sign(electrode);
    let mut x = [0.0, 0.0, theta0];
    let mut out = Vec::with_capacity(profile.len());
    for (k, &i) in profile.current.iter().enumerate() {
        let rc = table.interpolate(x[2]);
        let v = ocp.ocp(x[2]) + sign * (x[0] + x[1] + rc.r0 * i);
        let n = if spec.noise_std_v > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        out.push(HppcRow {
            t_s: k as f64 * profile.dt_s,
            current_a: i,
            potential_v: v + n,
            sol: x[2],
        });
        x = Discretized::new(electrode, &rc, capacity_ah, 1.0, profile.dt_s).apply(x, i);
        x[2] = x[2].clamp(0.0, 1.0);
    }
    Ok(out)
}
