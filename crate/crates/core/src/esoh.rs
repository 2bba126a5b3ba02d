//! Stoichiometric-window solver.
//!
//! Given electrode capacities, the current SOL of each electrode and the
//! cell voltage limits, the four window endpoints satisfy
//!
//! ```text
//! OCPp(thp0)   − OCPn(thn0)   = vmin
//! OCPp(thp100) − OCPn(thn100) = vmax
//! Qn·(thn − thn0)   = Qp·(thp0 − thp)
//! Qn·(thn100 − thn) = Qp·(thp − thp100)
//! ```
//!
//! The system is solved with Newton's method on a central-difference
//! Jacobian, falling back to a damped Newton with backtracking and finally
//! to bisection on the two voltage equations once the capacity equations
//! have been substituted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamPack, Windows};

/// Residual threshold every accepted solution must meet (V and Ah).
pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Central-difference step for the Jacobian.
    pub fd_step: f64,
    /// Stop once the max-norm of the residual is below this.
    pub tol: f64,
    /// Backtracking line search on ‖F‖².
    pub damped: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            fd_step: 1e-7,
            tol: 1e-12,
            damped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOutcome<const N: usize> {
    pub x: [f64; N],
    pub residual: [f64; N],
    pub iterations: usize,
}

fn max_abs<const N: usize>(r: &[f64; N]) -> f64 {
    r.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn sq_norm<const N: usize>(r: &[f64; N]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Newton iteration for `F(x) = 0` with a numerically differenced Jacobian.
pub fn newton_solve<const N: usize>(
    f: impl Fn(&[f64; N]) -> [f64; N],
    x0: [f64; N],
    opts: &NewtonOptions,
) -> Result<NewtonOutcome<N>> {
    let mut x = x0;
    let mut r = f(&x);
    for it in 0..opts.max_iter {
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver("non-finite residual".into()));
        }
        if max_abs(&r) < opts.tol {
            return Ok(NewtonOutcome {
                x,
                residual: r,
                iterations: it,
            });
        }
        let mut jac = DMatrix::<f64>::zeros(N, N);
        for j in 0..N {
            let h = opts.fd_step * (1.0 + x[j].abs());
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..N {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let rhs = DVector::<f64>::from_column_slice(&r);
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("singular Jacobian".into()))?;

        let mut lambda = 1.0;
        let base = sq_norm(&r);
        loop {
            let mut trial = x;
            for i in 0..N {
                trial[i] -= lambda * step[i];
            }
            let rt = f(&trial);
            let accept = !opts.damped
                || (rt.iter().all(|v| v.is_finite())
                    && sq_norm(&rt) <= (1.0 - 1e-4 * lambda) * base);
            if accept {
                x = trial;
                r = rt;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-10 {
                return Err(Error::Solver("line search stalled".into()));
            }
        }
    }
    if max_abs(&r) < opts.tol {
        Ok(NewtonOutcome {
            x,
            residual: r,
            iterations: opts.max_iter,
        })
    } else {
        Err(Error::Solver(format!(
            "no convergence in {} iterations (|F|={:.3e})",
            opts.max_iter,
            max_abs(&r)
        )))
    }
}

/// Inputs to one window solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSolveInput {
    pub qp: f64,
    pub qn: f64,
    pub thp: f64,
    pub thn: f64,
    pub vmin: f64,
    pub vmax: f64,
    /// Warm start; also the fallback answer when every method fails.
    pub previous: Windows,
}

/// Which method produced the reported windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Newton,
    DampedNewton,
    Bisection,
    /// Every method failed; the previous windows are returned unchanged.
    Failed,
}

impl SolveStatus {
    pub fn code(self) -> u8 {
        match self {
            SolveStatus::Newton => 0,
            SolveStatus::DampedNewton => 1,
            SolveStatus::Bisection => 2,
            SolveStatus::Failed => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSolution {
    pub windows: Windows,
    pub residual: [f64; 4],
    pub status: SolveStatus,
}

impl WindowSolution {
    pub fn failed(&self) -> bool {
        self.status == SolveStatus::Failed
    }
}

/// Residuals of the window system, ordered (vmin, vmax, discharge capacity, charge capacity).
pub fn window_residuals(pack: &ParamPack, input: &WindowSolveInput, w: &[f64; 4]) -> [f64; 4] {
    let [thp0, thp100, thn0, thn100] = *w;
    let (qp, qn, thp, thn) = (input.qp, input.qn, input.thp, input.thn);
    [
        pack.ocv(thp0, thn0) - input.vmin,
        pack.ocv(thp100, thn100) - input.vmax,
        qn * (thn - thn0) - qp * (thp0 - thp),
        qn * (thn100 - thn) - qp * (thp - thp100),
    ]
}

fn admissible(w: &[f64; 4]) -> bool {
    let [thp0, thp100, thn0, thn100] = *w;
    w.iter().all(|v| (0.0..=1.0).contains(v)) && thp0 > thp100 && thn100 > thn0
}

const NUDGE: f64 = 1e-6;

/// Moves a SOL sitting on a previous window endpoint slightly inward.
fn regularize(input: &WindowSolveInput) -> WindowSolveInput {
    let mut out = *input;
    let p = input.previous;
    if (out.thn - p.thn0).abs() < NUDGE {
        out.thn = p.thn0 + NUDGE;
    } else if (out.thn - p.thn100).abs() < NUDGE {
        out.thn = p.thn100 - NUDGE;
    }
    if (out.thp - p.thp0).abs() < NUDGE {
        out.thp = p.thp0 - NUDGE;
    } else if (out.thp - p.thp100).abs() < NUDGE {
        out.thp = p.thp100 + NUDGE;
    }
    out
}

/// Solves for the four window endpoints. Never fails hard: when every
/// method fails the previous windows come back with [`SolveStatus::Failed`].
pub fn solve_windows(pack: &ParamPack, input: &WindowSolveInput) -> WindowSolution {
    let failed = WindowSolution {
        windows: input.previous,
        residual: window_residuals(pack, input, &input.previous.to_array()),
        status: SolveStatus::Failed,
    };
    let valid_input = [
        input.qp, input.qn, input.thp, input.thn, input.vmin, input.vmax,
    ]
    .iter()
    .all(|v| v.is_finite())
        && input.qp > 0.0
        && input.qn > 0.0
        && input.vmax > input.vmin;
    if !valid_input {
        return failed;
    }
    let inp = regularize(input);
    let f = |w: &[f64; 4]| window_residuals(pack, &inp, w);
    let x0 = inp.previous.to_array();

    let accept =
        |out: &NewtonOutcome<4>| admissible(&out.x) && max_abs(&out.residual) < RESIDUAL_TOL;
    for (status, damped) in [
        (SolveStatus::Newton, false),
        (SolveStatus::DampedNewton, true),
    ] {
        let opts = NewtonOptions {
            damped,
            ..Default::default()
        };
        if let Ok(out) = newton_solve(f, x0, &opts) {
            if accept(&out) {
                return WindowSolution {
                    windows: Windows::from_array(out.x),
                    residual: out.residual,
                    status,
                };
            }
        }
    }
    match bisection_windows(pack, &inp) {
        Some(w) => {
            let r = f(&w);
            if admissible(&w) && max_abs(&r) < RESIDUAL_TOL {
                WindowSolution {
                    windows: Windows::from_array(w),
                    residual: r,
                    status: SolveStatus::Bisection,
                }
            } else {
                failed
            }
        }
        None => failed,
    }
}

/// Bisection on a bracketing interval; `None` without a sign change.
pub(crate) fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let mut glo = g(lo);
    let ghi = g(hi);
    if glo == 0.0 {
        return Some(lo);
    }
    if ghi == 0.0 {
        return Some(hi);
    }
    if !(glo.is_finite() && ghi.is_finite()) || glo.signum() == ghi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return Some(mid);
        }
        if gm.signum() == glo.signum() {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn bisection_windows(pack: &ParamPack, inp: &WindowSolveInput) -> Option<[f64; 4]> {
    let (qp, qn, thp, thn) = (inp.qp, inp.qn, inp.thp, inp.thn);
    // thp0 and thp100 as functions of the NE endpoint through the capacity equations
    let pe_at = |thn_end: f64| thp + qn * (thn - thn_end) / qp;
    // keep the substituted PE endpoint inside [0, 1]
    let lo = (thn - qp * (1.0 - thp) / qn).max(0.0);
    let hi = (thn + qp * thp / qn).min(1.0);
    if !(hi > lo) {
        return None;
    }
    let thn0 = bisect(|x| pack.ocv(pe_at(x), x) - inp.vmin, lo, hi)?;
    let thn100 = bisect(|x| pack.ocv(pe_at(x), x) - inp.vmax, lo, hi)?;
    Some([pe_at(thn0), pe_at(thn100), thn0, thn100])
}

/// Fires once at run start and then every `period_s` seconds of data time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSchedule {
    pub period_s: f64,
    #[serde(skip)]
    next_fire: Option<f64>,
}

pub const DEFAULT_SOLVER_PERIOD_S: f64 = 10_000.0;

impl Default for SolverSchedule {
    fn default() -> Self {
        Self::new(DEFAULT_SOLVER_PERIOD_S)
    }
}

impl SolverSchedule {
    pub fn new(period_s: f64) -> Self {
        Self {
            period_s,
            next_fire: None,
        }
    }

    /// True if a solve is due at data time `t`.
    pub fn due(&mut self, t: f64) -> bool {
        match self.next_fire {
            None => {
                self.next_fire = Some(t + self.period_s);
                true
            }
            Some(next) if t >= next => {
                let mut n = next;
                while n <= t {
                    n += self.period_s;
                }
                self.next_fire = Some(n);
                true
            }
            Some(_) => false,
        }
    }
}
