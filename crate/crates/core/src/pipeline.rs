//! Streaming estimation pipeline: filter, capacity regression, window solve
//! and health report, driven one sample at a time.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::awtls::{
    AwtlsAccumulator, AwtlsConfig, CapacityPair, HarvestConfig, HarvestSample, PairHarvester,
    PushOutcome,
};
use crate::error::{Error, Result};
use crate::esoh::{
    solve_windows, SolveStatus, SolverSchedule, WindowSolveInput, DEFAULT_SOLVER_PERIOD_S,
};
use crate::health::HealthReport;
use crate::io::{CyclingRecord, EstimateRow, PairRow, ReportRow, WindowRow};
use crate::ocp::Electrode;
use crate::params::{EsohParams, ParamPack, Windows};
use crate::spkf::{Estimator, EstimatorConfig, StepOutput};
use crate::truth::{DEFAULT_VMAX, DEFAULT_VMIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub period_s: f64,
    pub vmin: f64,
    pub vmax: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            period_s: DEFAULT_SOLVER_PERIOD_S,
            vmin: DEFAULT_VMIN,
            vmax: DEFAULT_VMAX,
        }
    }
}

/// Everything the pipeline needs besides the parameter pack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub awtls: AwtlsConfig,
    pub harvest: HarvestConfig,
    pub solver: SolverConfig,
    /// Accepted pairs needed before a capacity estimate reaches the filter.
    pub min_pairs: usize,
    /// Initial PE capacity (Ah); the fresh value when absent.
    pub initial_qp_ah: Option<f64>,
    /// Initial NE capacity (Ah); the fresh value when absent.
    pub initial_qn_ah: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            awtls: AwtlsConfig::default(),
            harvest: HarvestConfig::default(),
            solver: SolverConfig::default(),
            min_pairs: 2,
            initial_qp_ah: None,
            initial_qn_ah: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.noise.validate()?;
        self.awtls.validate()?;
        if !(self.solver.period_s > 0.0) {
            return Err(Error::config("solver period must be positive"));
        }
        if !(self.solver.vmax > self.solver.vmin) {
            return Err(Error::config("solver vmax must exceed vmin"));
        }
        for q in [self.initial_qp_ah, self.initial_qn_ah]
            .into_iter()
            .flatten()
        {
            if !(q > 0.0) {
                return Err(Error::config(format!(
                    "initial capacity {q} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Everything produced for one input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineStep {
    pub estimate: EstimateRow,
    pub pairs: Vec<PairRow>,
    pub window: Option<WindowRow>,
    pub report: Option<HealthReport>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    estimator: Estimator,
    acc_p: AwtlsAccumulator,
    acc_n: AwtlsAccumulator,
    harvester: PairHarvester,
    schedule: SolverSchedule,
    solver: SolverConfig,
    min_pairs: usize,
    fresh: EsohParams,
    skipped: u64,
    failed_solves: u64,
    last_report: Option<HealthReport>,
}

impl Pipeline {
    /// `fresh` is the BOL reference at the solver's voltage limits; it also
    /// provides the initial windows.
    pub fn new(pack: ParamPack, fresh: EsohParams, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        fresh.validate()?;
        let mut init = fresh;
        init.qp = config.initial_qp_ah.unwrap_or(fresh.qp);
        init.qn = config.initial_qn_ah.unwrap_or(fresh.qn);
        let estimator = Estimator::new(pack, fresh, &config.estimator)?;
        let mut pipeline = Self {
            estimator,
            acc_p: AwtlsAccumulator::new(config.awtls)?.with_prior(init.qp),
            acc_n: AwtlsAccumulator::new(config.awtls)?.with_prior(init.qn),
            harvester: PairHarvester::new(HarvestConfig {
                eta: fresh.eta,
                ..config.harvest
            })?,
            schedule: SolverSchedule::new(config.solver.period_s),
            solver: config.solver,
            min_pairs: config.min_pairs.max(1),
            fresh,
            skipped: 0,
            failed_solves: 0,
            last_report: None,
        };
        pipeline.estimator.set_capacities(init.qp, init.qn);
        Ok(pipeline)
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn esoh(&self) -> &EsohParams {
        self.estimator.esoh()
    }

    pub fn fresh(&self) -> &EsohParams {
        &self.fresh
    }

    pub fn skipped_rows(&self) -> u64 {
        self.skipped
    }

    pub fn failed_solves(&self) -> u64 {
        self.failed_solves
    }

    pub fn last_report(&self) -> Option<&HealthReport> {
        self.last_report.as_ref()
    }

    /// Processes one sample. Rows with a NaN voltage are skipped (`None`).
    pub fn push(&mut self, record: &CyclingRecord) -> Result<Option<PipelineStep>> {
        if record.voltage_v.is_nan() {
            warn!("skipping sample at t={} with NaN voltage", record.t_s);
            self.skipped += 1;
            return Ok(None);
        }
        let out = self.estimator.step(record)?;
        let pairs = self.update_capacities(record, &out)?;
        let (window, report) = if self.schedule.due(record.t_s) {
            let (w, r) = self.solve(record.t_s, &out)?;
            (Some(w), Some(r))
        } else {
            (None, None)
        };
        let e = self.estimator.esoh();
        let estimate = EstimateRow {
            t_s: record.t_s,
            current_a: record.current_a,
            voltage_v: record.voltage_v,
            vhat_v: out.vhat,
            soc: e.soc_from_sol(out.thn)?,
            thp: out.thp,
            thn: out.thn,
            qp_ah: e.qp,
            qn_ah: e.qn,
            thp0: e.thp0,
            thp100: e.thp100,
            thn0: e.thn0,
            thn100: e.thn100,
        };
        Ok(Some(PipelineStep {
            estimate,
            pairs,
            window,
            report,
        }))
    }

    fn update_capacities(
        &mut self,
        record: &CyclingRecord,
        out: &StepOutput,
    ) -> Result<Vec<PairRow>> {
        let sample = HarvestSample {
            t_s: record.t_s,
            current_a: record.current_a,
            thp: out.thp,
            thn: out.thn,
            var_thp: out.pos.cov[(2, 2)],
            var_thn: out.neg.cov[(2, 2)],
            clamped: out.clamped,
        };
        let Some(pairs) = self.harvester.push(&sample) else {
            return Ok(vec![]);
        };
        let mut rows = Vec::with_capacity(2);
        for pair in pairs {
            rows.push(self.absorb(pair)?);
        }
        Ok(rows)
    }

    fn absorb(&mut self, pair: CapacityPair) -> Result<PairRow> {
        let min_pairs = self.min_pairs;
        let acc = match pair.electrode {
            Electrode::Positive => &mut self.acc_p,
            Electrode::Negative => &mut self.acc_n,
        };
        let accepted = pair.usable
            && acc.push_pair(pair.dtheta, pair.dq_ah, pair.var_x, pair.var_y)?
                == PushOutcome::Accepted;
        let mut q_hat = f64::NAN;
        if accepted && acc.count() >= min_pairs {
            match acc.estimate_capacity() {
                Ok(est) => {
                    q_hat = est.q;
                    let e = *self.estimator.esoh();
                    match pair.electrode {
                        Electrode::Positive => self.estimator.set_capacities(est.q, e.qn),
                        Electrode::Negative => self.estimator.set_capacities(e.qp, est.q),
                    }
                    debug!(
                        "t={} {} capacity {:.4} ± {:.4} Ah",
                        pair.t_s, pair.electrode, est.q, est.sigma_q
                    );
                }
                Err(e) => warn!(
                    "t={} {} capacity estimate kept: {e}",
                    pair.t_s, pair.electrode
                ),
            }
        }
        Ok(PairRow {
            t_s: pair.t_s,
            electrode: pair.electrode.tag().to_string(),
            dtheta: pair.dtheta,
            dq_ah: pair.dq_ah,
            var_x: pair.var_x,
            var_y: pair.var_y,
            accepted: u8::from(accepted),
            q_hat_ah: q_hat,
        })
    }

    fn solve(&mut self, t_s: f64, out: &StepOutput) -> Result<(WindowRow, HealthReport)> {
        let e = *self.estimator.esoh();
        let input = WindowSolveInput {
            qp: e.qp,
            qn: e.qn,
            thp: out.thp,
            thn: out.thn,
            vmin: self.solver.vmin,
            vmax: self.solver.vmax,
            previous: e.windows(),
        };
        let sol = solve_windows(self.estimator.pack(), &input);
        if sol.status == SolveStatus::Failed {
            self.failed_solves += 1;
            warn!("t={t_s} window solve failed; keeping previous windows");
        } else {
            self.estimator.set_esoh(e.with_windows(sol.windows));
        }
        let w: Windows = sol.windows;
        let row = WindowRow {
            t_s,
            thp0: w.thp0,
            thp100: w.thp100,
            thn0: w.thn0,
            thn100: w.thn100,
            flag: sol.status.code(),
        };
        let report = HealthReport::new(t_s, self.estimator.esoh(), &self.fresh)?;
        if report.flagged() {
            debug!("t={t_s} negative degradation mode in report: {report:?}");
        }
        self.last_report = Some(report);
        Ok((row, report))
    }
}

impl From<&HealthReport> for ReportRow {
    fn from(r: &HealthReport) -> Self {
        Self {
            t_s: r.t_s,
            lam_p_pct: r.lam_p,
            lam_n_pct: r.lam_n,
            lli_pct: r.lli,
            q_cell_ah: r.q_cell,
            soh: r.soh,
        }
    }
}

/// Runs the pipeline over in-memory records and returns every step.
pub fn run_records(
    pack: ParamPack,
    fresh: EsohParams,
    config: &PipelineConfig,
    records: &[CyclingRecord],
) -> Result<(Pipeline, Vec<PipelineStep>)> {
    let mut p = Pipeline::new(pack, fresh, config)?;
    let mut steps = Vec::with_capacity(records.len());
    for r in records {
        if let Some(s) = p.push(r)? {
            steps.push(s);
        }
    }
    Ok((p, steps))
}
