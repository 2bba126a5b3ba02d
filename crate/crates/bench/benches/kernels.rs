use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use eecm_core::awtls::{AwtlsAccumulator, AwtlsConfig};
use eecm_core::characterization::{
    fit_half_cell, hppc_schedule, synthesize_hppc, FitConfig, HppcDataset, HppcScheduleConfig,
};
use eecm_core::esoh::{solve_windows, WindowSolveInput};
use eecm_core::io::CyclingRecord;
use eecm_core::pipeline::{Pipeline, PipelineConfig};
use eecm_core::spkf::{Estimator, EstimatorConfig};
use eecm_core::truth::{
    apply_degradation, fresh_at_limits, DegradationSpec, DEFAULT_VMAX, DEFAULT_VMIN,
};
use eecm_core::{Electrode, ParamPack};
use std::hint::black_box;

fn spkf_step(c: &mut Criterion) {
    let pack = ParamPack::lg_m50();
    let esoh = pack.esoh;
    let cfg = EstimatorConfig {
        initial_soc: 0.6,
        ..Default::default()
    };
    let est = Estimator::new(pack, esoh, &cfg).unwrap();
    let record = CyclingRecord {
        t_s: 1.0,
        current_a: 2.0,
        voltage_v: 3.7,
        temperature_c: None,
    };
    c.bench_function("spkf_step", |b| {
        b.iter_batched_ref(
            || est.clone(),
            |e| e.step(black_box(&record)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn pipeline_hour(c: &mut Criterion) {
    let pack = ParamPack::lg_m50();
    let fresh = fresh_at_limits(&pack, DEFAULT_VMIN, DEFAULT_VMAX).unwrap();
    let records: Vec<_> = (0..3600)
        .map(|k| CyclingRecord {
            t_s: k as f64,
            current_a: 2.5 + 2.0 * (k as f64 / 60.0).sin(),
            voltage_v: 4.0 - 0.2 * k as f64 / 3600.0,
            temperature_c: None,
        })
        .collect();
    c.bench_function("pipeline_3600_samples", |b| {
        b.iter(|| {
            let mut p = Pipeline::new(pack.clone(), fresh, &PipelineConfig::default()).unwrap();
            for r in &records {
                black_box(p.push(r).unwrap());
            }
        })
    });
}

fn awtls_estimate(c: &mut Criterion) {
    let mut acc = AwtlsAccumulator::new(AwtlsConfig::default()).unwrap();
    for k in 0..50 {
        let x = 0.1 + 0.01 * k as f64;
        acc.push_pair(x, 5.0 * x + 1e-3 * (k as f64).sin(), 1e-5, 1e-4)
            .unwrap();
    }
    c.bench_function("awtls_estimate", |b| {
        b.iter_batched_ref(
            || acc,
            |a| a.estimate_capacity().unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn window_solve(c: &mut Criterion) {
    let pack = ParamPack::lg_m50();
    let fresh = fresh_at_limits(&pack, DEFAULT_VMIN, DEFAULT_VMAX).unwrap();
    let spec = DegradationSpec {
        lam_p: 20.0,
        lam_n: 10.0,
        lli: 16.0,
    };
    let aged = apply_degradation(&pack, &fresh, &spec, DEFAULT_VMIN, DEFAULT_VMAX).unwrap();
    let (thp, thn) = aged.sol_from_soc(0.5).unwrap();
    let input = WindowSolveInput {
        qp: aged.qp,
        qn: aged.qn,
        thp,
        thn,
        vmin: DEFAULT_VMIN,
        vmax: DEFAULT_VMAX,
        previous: fresh.windows(),
    };
    c.bench_function("window_solve", |b| {
        b.iter(|| solve_windows(&pack, black_box(&input)))
    });
}

fn local_fit(c: &mut Criterion) {
    let pack = ParamPack::lg_m50();
    let sched = HppcScheduleConfig {
        capacity_ah: pack.esoh.qp,
        sol_lo: 0.4,
        sol_hi: 0.6,
        relax_s: 600.0,
        ..Default::default()
    };
    let spec = hppc_schedule(&sched).unwrap();
    let rows = synthesize_hppc(
        Electrode::Positive,
        &pack.ocp_positive,
        &pack.table_positive,
        sched.capacity_ah,
        0.4,
        &spec,
    )
    .unwrap();
    let config = FitConfig {
        breakpoints: vec![0.4, 0.5, 0.6],
        population: 16,
        generations: 40,
        ..Default::default()
    };
    let data = HppcDataset::segment(Electrode::Positive, rows, config.max_pulse_s).unwrap();
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("local_3_blocks", |b| {
        b.iter(|| fit_half_cell(&data, &pack.ocp_positive, &config).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    spkf_step,
    pipeline_hour,
    awtls_estimate,
    window_solve,
    local_fit
);
criterion_main!(benches);
