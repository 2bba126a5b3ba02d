//! The four subcommands.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eecm_core::characterization::{
    fit_half_cell, hppc_schedule, synthesize_hppc, FitResult, HppcDataset, HppcScheduleConfig,
};
use eecm_core::health::HealthReport;
use eecm_core::io::{
    CsvSink, CsvSource, CyclingRecord, EstimateRow, HppcRow, ReportRow, TruthRecord,
    ESTIMATE_HEADER, HPPC_HEADER, MEASUREMENT_HEADER, PAIR_HEADER, REPORT_HEADER, TRUTH_HEADER,
    WINDOW_HEADER,
};
use eecm_core::pipeline::{Pipeline, PipelineStep};
use eecm_core::truth::{fresh_at_limits, Scenario};
use eecm_core::{EsohParams, ParamPack};
use log::{info, warn};
use plotters::style::{BLACK, BLUE, RED};
use serde::Serialize;

use crate::config::{config_error, read_json, RunConfig, Source};
use crate::plot::{line_chart, Decimated, Line};

const PLOT_POINTS: usize = 2000;

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut scen: Scenario = read_json(path, "scenario")?;
    if let Some(seed) = seed {
        scen.profile.seed = seed;
    }
    Ok(scen)
}

#[derive(Serialize)]
struct TruthSummary {
    fresh: EsohParams,
    aged: EsohParams,
    lam_p_pct: f64,
    lam_n_pct: f64,
    lli_pct: f64,
}

/// Writes `measurements.csv`, `truth.csv` and `truth_esoh.json`.
pub fn simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let Source::Scenario(path) = cfg.require_source(true, false)? else {
        unreachable!()
    };
    let pack = cfg.load_pack()?;
    let scen = load_scenario(&path, cfg.seed)?;
    let out = cfg.create_output_dir()?;
    let (cell, traj) = scen.run(&pack)?;
    let fresh = scen.fresh(&pack)?;

    let meas = out.join("measurements.csv");
    let mut sink = CsvSink::create(&meas, MEASUREMENT_HEADER)?;
    for r in &traj.records {
        sink.write(r)?;
    }
    sink.flush()?;
    let truth = out.join("truth.csv");
    let mut sink = CsvSink::create(&truth, TRUTH_HEADER)?;
    for r in &traj.truth {
        sink.write(r)?;
    }
    sink.flush()?;

    let report = HealthReport::new(0.0, &cell.esoh, &fresh)?;
    let summary = TruthSummary {
        fresh,
        aged: cell.esoh,
        lam_p_pct: report.lam_p,
        lam_n_pct: report.lam_n,
        lli_pct: report.lli,
    };
    let esoh = out.join("truth_esoh.json");
    std::fs::write(&esoh, serde_json::to_string_pretty(&summary)? + "\n")?;
    info!(
        "{} samples, {} clamp events",
        traj.records.len(),
        traj.clamp_events
    );
    Ok(vec![meas, truth, esoh])
}

struct Sinks {
    estimates: CsvSink<std::io::BufWriter<std::fs::File>>,
    windows: CsvSink<std::io::BufWriter<std::fs::File>>,
    report: CsvSink<std::io::BufWriter<std::fs::File>>,
    pairs: CsvSink<std::io::BufWriter<std::fs::File>>,
}

impl Sinks {
    fn write(&mut self, step: &PipelineStep) -> Result<()> {
        self.estimates.write(&step.estimate)?;
        for p in &step.pairs {
            self.pairs.write(p)?;
        }
        if let Some(w) = &step.window {
            self.windows.write(w)?;
        }
        if let Some(r) = &step.report {
            self.report.write(&ReportRow::from(r))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.estimates.flush()?;
        self.windows.flush()?;
        self.report.flush()?;
        Ok(self.pairs.flush()?)
    }
}

/// Series kept for the optional plots.
struct Traces {
    soc: Decimated,
    soc_true: Decimated,
    v: Decimated,
    vhat: Decimated,
    qp: Decimated,
    qn: Decimated,
    qp_true: Decimated,
    qn_true: Decimated,
}

impl Traces {
    fn new() -> Self {
        let d = || Decimated::new(PLOT_POINTS);
        Self {
            soc: d(),
            soc_true: d(),
            v: d(),
            vhat: d(),
            qp: d(),
            qn: d(),
            qp_true: d(),
            qn_true: d(),
        }
    }

    fn push(&mut self, e: &EstimateRow, truth: Option<&TruthRecord>, q_true: Option<(f64, f64)>) {
        self.soc.push(e.t_s, 100.0 * e.soc);
        self.v.push(e.t_s, e.voltage_v);
        self.vhat.push(e.t_s, e.vhat_v);
        self.qp.push(e.t_s, e.qp_ah);
        self.qn.push(e.t_s, e.qn_ah);
        if let Some(t) = truth {
            self.soc_true.push(t.t_s, 100.0 * t.soc);
        }
        if let Some((qp, qn)) = q_true {
            self.qp_true.push(e.t_s, qp);
            self.qn_true.push(e.t_s, qn);
        }
    }

    fn draw(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let soc = dir.join("soc.svg");
        line_chart(
            &soc,
            "State of charge",
            "SOC (%)",
            &[
                Line {
                    label: "estimate",
                    data: &self.soc,
                    color: BLUE,
                },
                Line {
                    label: "truth",
                    data: &self.soc_true,
                    color: BLACK,
                },
            ],
        )?;
        let voltage = dir.join("voltage.svg");
        line_chart(
            &voltage,
            "Terminal voltage",
            "voltage (V)",
            &[
                Line {
                    label: "measured",
                    data: &self.v,
                    color: BLACK,
                },
                Line {
                    label: "predicted",
                    data: &self.vhat,
                    color: BLUE,
                },
            ],
        )?;
        let cap = dir.join("capacity.svg");
        line_chart(
            &cap,
            "Electrode capacities",
            "capacity (Ah)",
            &[
                Line {
                    label: "Qp estimate",
                    data: &self.qp,
                    color: RED,
                },
                Line {
                    label: "Qn estimate",
                    data: &self.qn,
                    color: BLUE,
                },
                Line {
                    label: "Qp truth",
                    data: &self.qp_true,
                    color: BLACK,
                },
                Line {
                    label: "Qn truth",
                    data: &self.qn_true,
                    color: BLACK,
                },
            ],
        )?;
        Ok(vec![soc, voltage, cap])
    }
}

/// Streams samples through the pipeline. Writes `estimates.csv`,
/// `windows.csv`, `report.csv`, `pairs.csv` and, with plots on, SVG charts.
pub fn estimate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let source = cfg.require_source(true, true)?;
    if cfg.truth.is_some() && matches!(source, Source::Scenario(_)) {
        return Err(config_error("a truth sidecar only goes with an input file"));
    }
    let pack = cfg.load_pack()?;
    cfg.pipeline
        .validate()
        .map_err(|e| config_error(e.to_string()))?;
    let solver = cfg.pipeline.solver;
    let fresh = fresh_at_limits(&pack, solver.vmin, solver.vmax)?;
    let mut pipeline = Pipeline::new(pack.clone(), fresh, &cfg.pipeline)?;
    let out = cfg.create_output_dir()?;
    let mut sinks = Sinks {
        estimates: CsvSink::create(out.join("estimates.csv"), ESTIMATE_HEADER)?,
        windows: CsvSink::create(out.join("windows.csv"), WINDOW_HEADER)?,
        report: CsvSink::create(out.join("report.csv"), REPORT_HEADER)?,
        pairs: CsvSink::create(out.join("pairs.csv"), PAIR_HEADER)?,
    };
    let mut traces = cfg.plots.then(Traces::new);
    let mut samples = 0usize;

    match source {
        Source::Scenario(path) => {
            let scen = load_scenario(&path, cfg.seed)?;
            if (scen.vmin, scen.vmax) != (solver.vmin, solver.vmax) {
                warn!(
                    "scenario SOC limits {}/{} V differ from the solver's {}/{} V",
                    scen.vmin, scen.vmax, solver.vmin, solver.vmax
                );
            }
            let (cell, traj) = scen.run(&pack)?;
            let q_true = Some((cell.esoh.qp, cell.esoh.qn));
            for (r, t) in traj.records.iter().zip(&traj.truth) {
                samples += 1;
                if let Some(step) = pipeline.push(r)? {
                    sinks.write(&step)?;
                    if let Some(tr) = traces.as_mut() {
                        tr.push(&step.estimate, Some(t), q_true);
                    }
                }
            }
        }
        Source::Input(path) => {
            let mut truth = match &cfg.truth {
                Some(p) => Some(CsvSource::<_, TruthRecord>::open(p)?),
                None => None,
            };
            for row in CsvSource::<_, CyclingRecord>::open(&path)? {
                let (_, r) = row.with_context(|| format!("reading {}", path.display()))?;
                samples += 1;
                let t = match truth.as_mut().and_then(Iterator::next) {
                    Some(t) => Some(t?.1),
                    None => None,
                };
                if let Some(step) = pipeline.push(&r)? {
                    sinks.write(&step)?;
                    if let Some(tr) = traces.as_mut() {
                        tr.push(&step.estimate, t.as_ref(), None);
                    }
                }
            }
        }
    }
    sinks.flush()?;
    info!(
        "{samples} samples, {} skipped, {} failed window solves",
        pipeline.skipped_rows(),
        pipeline.failed_solves()
    );
    let mut written: Vec<_> = ["estimates.csv", "windows.csv", "report.csv", "pairs.csv"]
        .iter()
        .map(|f| out.join(f))
        .collect();
    if let Some(tr) = traces {
        written.extend(tr.draw(&out)?);
    }
    if let Some(r) = pipeline.last_report() {
        println!("{}", summary_line(r));
    }
    Ok(written)
}

fn summary_line(r: &HealthReport) -> String {
    format!(
        "t = {:.0} s: LAMp {:.2} %, LAMn {:.2} %, LLI {:.2} %, Q {:.4} Ah, SOH {:.4}",
        r.t_s, r.lam_p, r.lam_n, r.lli, r.q_cell, r.soh
    )
}

fn read_hppc(path: &Path) -> Result<Vec<HppcRow>> {
    let mut first = String::new();
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f).read_line(&mut first)?;
    let header: Vec<_> = first.trim_end().split(',').map(str::trim).collect();
    let missing: Vec<_> = HPPC_HEADER.iter().filter(|h| !header.contains(h)).collect();
    if !missing.is_empty() {
        return Err(eecm_core::Error::Fitting(format!(
            "{} lacks column(s) {missing:?}; the fitter needs {HPPC_HEADER:?}",
            path.display()
        ))
        .into());
    }
    Ok(eecm_core::io::read_all(path)?)
}

/// Fits one electrode's RC table. Writes `fit.json` (table, costs, settings)
/// and, when the breakpoints span [0, 1], `fitted_pack.json`: the input pack
/// with that table replaced.
pub fn fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let source = cfg.require_source(true, true)?;
    let pack = cfg.load_pack()?;
    let mut fit_cfg = cfg.fit.clone();
    if let Some(seed) = cfg.seed {
        fit_cfg.seed = seed;
    }
    fit_cfg
        .validate()
        .map_err(|e| config_error(e.to_string()))?;
    let (electrode, rows) = match source {
        Source::Scenario(path) => {
            let mut sched: HppcScheduleConfig = read_json(&path, "HPPC schedule")?;
            if let Some(seed) = cfg.seed {
                sched.seed = seed;
            }
            if cfg.electrode.is_some_and(|e| e != sched.electrode) {
                return Err(config_error("electrode differs from the HPPC schedule's"));
            }
            let e = sched.electrode;
            let spec = hppc_schedule(&sched).map_err(|e| config_error(e.to_string()))?;
            let rows = synthesize_hppc(
                e,
                pack.ocp(e),
                pack.table(e),
                sched.capacity_ah,
                sched.sol_lo,
                &spec,
            )?;
            (e, rows)
        }
        Source::Input(path) => {
            let e = cfg
                .electrode
                .ok_or_else(|| config_error("fitting a recorded HPPC file needs an electrode"))?;
            (e, read_hppc(&path)?)
        }
    };
    let out = cfg.create_output_dir()?;
    let data = HppcDataset::segment(electrode, rows, fit_cfg.max_pulse_s)?;
    info!("{} pulse blocks found", data.blocks.len());
    let result = fit_half_cell(&data, pack.ocp(electrode), &fit_cfg)?;
    let mut written = Vec::new();
    let fit_path = out.join("fit.json");
    std::fs::write(&fit_path, serde_json::to_string_pretty(&result)? + "\n")?;
    written.push(fit_path);
    match with_table(&pack, &result) {
        Ok(fitted) => {
            let pack_path = out.join("fitted_pack.json");
            std::fs::write(&pack_path, fitted.to_json()? + "\n")?;
            written.push(pack_path);
        }
        Err(e) => warn!("fitted_pack.json not written: {e}"),
    }
    println!(
        "{} electrode: J1 {:.3} mV, J2 {:.3} mV/s over {} blocks",
        electrode,
        1e3 * result.j1,
        1e3 * result.j2,
        result.blocks.len()
    );
    Ok(written)
}

fn with_table(pack: &ParamPack, fit: &FitResult) -> Result<ParamPack> {
    let mut p = pack.clone();
    let table = fit.table()?;
    match fit.electrode {
        eecm_core::Electrode::Positive => p.table_positive = table,
        eecm_core::Electrode::Negative => p.table_negative = table,
    }
    Ok(p)
}

/// Health report over an estimates CSV: one row whenever the estimated
/// capacities or windows change, plus `summary.txt`.
pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let Source::Input(path) = cfg.require_source(false, true)? else {
        unreachable!()
    };
    let pack = cfg.load_pack()?;
    let solver = cfg.pipeline.solver;
    let fresh = fresh_at_limits(&pack, solver.vmin, solver.vmax)?;
    let out = cfg.create_output_dir()?;
    let report_path = out.join("report.csv");
    let mut sink = CsvSink::create(&report_path, REPORT_HEADER)?;
    let mut last_key: Option<[f64; 6]> = None;
    let mut last: Option<HealthReport> = None;
    let mut rows = 0usize;
    for row in CsvSource::<_, EstimateRow>::open(&path)? {
        let (_, e) = row.with_context(|| format!("reading {}", path.display()))?;
        rows += 1;
        let key = [e.qp_ah, e.qn_ah, e.thp0, e.thp100, e.thn0, e.thn100];
        if last_key == Some(key) {
            continue;
        }
        last_key = Some(key);
        let aged = EsohParams {
            qp: e.qp_ah,
            qn: e.qn_ah,
            thp0: e.thp0,
            thp100: e.thp100,
            thn0: e.thn0,
            thn100: e.thn100,
            eta: fresh.eta,
        };
        let r = HealthReport::new(e.t_s, &aged, &fresh)?;
        if r.implausible() {
            warn!("implausible health report at t={}: {r:?}", e.t_s);
        }
        sink.write(&ReportRow::from(&r))?;
        last = Some(r);
    }
    sink.flush()?;
    let mut summary = String::new();
    writeln!(summary, "estimate rows: {rows}")?;
    match &last {
        Some(r) => writeln!(summary, "{}", summary_line(r))?,
        None => writeln!(summary, "no estimates")?,
    }
    print!("{summary}");
    let summary_path = out.join("summary.txt");
    std::fs::write(&summary_path, summary)?;
    Ok(vec![report_path, summary_path])
}
