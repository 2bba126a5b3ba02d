//! Synthetic ground truth: aged cells, current profiles and noisy
//! measurements generated with an independently perturbed eECM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esoh::{bisect, newton_solve, NewtonOptions, RESIDUAL_TOL};
use crate::health::lithium_inventory_at_windows;
use crate::io::{CyclingRecord, TruthRecord};
use crate::model::{cell_voltage, step_state, EecmState};
use crate::params::{EsohParams, ParamPack, Windows, FARADAY};

/// Degradation modes, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub lam_p: f64,
    pub lam_n: f64,
    pub lli: f64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lam_p", self.lam_p),
            ("lam_n", self.lam_n),
            ("lli", self.lli),
        ] {
            if !(0.0..80.0).contains(&v) {
                return Err(Error::argument(format!("{name}={v} outside [0, 80)")));
            }
        }
        Ok(())
    }

    pub fn is_fresh(&self) -> bool {
        self.lam_p == 0.0 && self.lam_n == 0.0 && self.lli == 0.0
    }
}

/// Ages a fresh cell: scales the electrode capacities and the lithium
/// inventory, then solves for the windows that satisfy both voltage limits,
/// the useful-capacity equality and the reduced inventory at 0 % SOC.
pub fn apply_degradation(
    pack: &ParamPack,
    fresh: &EsohParams,
    spec: &DegradationSpec,
    vmin: f64,
    vmax: f64,
) -> Result<EsohParams> {
    fresh.validate()?;
    spec.validate()?;
    let qp = (1.0 - spec.lam_p / 100.0) * fresh.qp;
    let qn = (1.0 - spec.lam_n / 100.0) * fresh.qn;
    let n_li = (1.0 - spec.lli / 100.0) * lithium_inventory_at_windows(fresh);
    // inventory in Ah-equivalents keeps all four residuals on a similar scale
    let inv_ah = n_li * FARADAY / 3600.0;

    let f = |w: &[f64; 4]| {
        let [thp0, thp100, thn0, thn100] = *w;
        [
            pack.ocv(thp0, thn0) - vmin,
            pack.ocv(thp100, thn100) - vmax,
            qp * (thp0 - thp100) - qn * (thn100 - thn0),
            thp0 * qp + thn0 * qn - inv_ah,
        ]
    };
    let ok = |w: &[f64; 4]| {
        let r = f(w);
        w.iter().all(|v| (0.0..=1.0).contains(v))
            && w[0] > w[1]
            && w[3] > w[2]
            && r.iter().all(|v| v.abs() < RESIDUAL_TOL)
    };

    let x0 = fresh.windows().to_array();
    let mut solution = None;
    for damped in [false, true] {
        if let Ok(out) = newton_solve(
            f,
            x0,
            &NewtonOptions {
                damped,
                ..Default::default()
            },
        ) {
            if ok(&out.x) {
                solution = Some(out.x);
                break;
            }
        }
    }
    if solution.is_none() {
        solution = degradation_by_bisection(pack, qp, qn, inv_ah, vmin, vmax).filter(|w| ok(w));
    }
    let w = solution.ok_or_else(|| {
        Error::InfeasibleDegradation(format!(
            "no stoichiometric windows in [0,1]^4 for LAMp={} LAMn={} LLI={}",
            spec.lam_p, spec.lam_n, spec.lli
        ))
    })?;
    Ok(EsohParams {
        qp,
        qn,
        eta: fresh.eta,
        ..fresh.with_windows(Windows::from_array(w))
    })
}

fn degradation_by_bisection(
    pack: &ParamPack,
    qp: f64,
    qn: f64,
    inv_ah: f64,
    vmin: f64,
    vmax: f64,
) -> Option<[f64; 4]> {
    // inventory equation gives thp0(thn0); useful capacity gives thp100(thn100)
    let thp0_of = |thn0: f64| (inv_ah - thn0 * qn) / qp;
    let thn0 = bisect(|x| pack.ocv(thp0_of(x), x) - vmin, 0.0, 1.0)?;
    let thp0 = thp0_of(thn0);
    let thp100_of = |thn100: f64| thp0 - qn * (thn100 - thn0) / qp;
    let thn100 = bisect(|x| pack.ocv(thp100_of(x), x) - vmax, thn0, 1.0)?;
    Some([thp0, thp100_of(thn100), thn0, thn100])
}

/// Default cell voltage limits defining 0 % and 100 % SOC in synthetic
/// scenarios and in the window solver.
pub const DEFAULT_VMIN: f64 = 3.0;
pub const DEFAULT_VMAX: f64 = 4.2;

/// Fresh eSOH parameters re-based onto the given voltage limits, keeping the
/// pack's electrode capacities and cyclable lithium.
pub fn fresh_at_limits(pack: &ParamPack, vmin: f64, vmax: f64) -> Result<EsohParams> {
    apply_degradation(pack, &pack.esoh, &DegradationSpec::default(), vmin, vmax)
}

/// Scales every passive element of both tables by an independent factor
/// drawn uniformly from `[1 − mismatch, 1 + mismatch]`.
pub fn perturb_tables(pack: &ParamPack, mismatch: f64, seed: u64) -> Result<ParamPack> {
    if !(0.0..1.0).contains(&mismatch) {
        return Err(Error::argument(format!(
            "mismatch factor {mismatch} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factor = |v: f64| {
        if mismatch == 0.0 {
            v
        } else {
            v * (1.0 + rng.random_range(-mismatch..=mismatch))
        }
    };
    let mut out = pack.clone();
    for table in [&mut out.table_negative, &mut out.table_positive] {
        for row in &mut table.rows {
            row.r0_ohm = factor(row.r0_ohm);
            row.r1_ohm = factor(row.r1_ohm);
            row.c1_f = factor(row.c1_f);
            row.r2_ohm = factor(row.r2_ohm);
            row.c2_f = factor(row.c2_f);
        }
    }
    Ok(out)
}

/// Current magnitude: absolute or relative to the profile's nominal capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    Amps(f64),
    CRate(f64),
}

impl Magnitude {
    pub fn amps(&self, nominal_ah: f64) -> f64 {
        match *self {
            Magnitude::Amps(a) => a,
            Magnitude::CRate(c) => c * nominal_ah,
        }
    }
}

/// One block of a test profile. Positive current discharges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    ConstantCurrent {
        current: Magnitude,
        duration_s: f64,
        #[serde(default)]
        termination_v: Option<f64>,
    },
    Rest {
        duration_s: f64,
    },
    /// Seeded band-limited random current with a given RMS and fraction of
    /// samples in regeneration (negative current).
    DriveCycle {
        rms: Magnitude,
        regen_fraction: f64,
        duration_s: f64,
        #[serde(default = "default_band_tau")]
        band_tau_s: f64,
        #[serde(default)]
        termination_v: Option<f64>,
    },
    /// Pulse, rest, opposite pulse, rest. `discharge_first` picks the order.
    Hppc {
        pulse: Magnitude,
        pulse_s: f64,
        rest_s: f64,
        #[serde(default = "yes")]
        discharge_first: bool,
    },
}

fn default_band_tau() -> f64 {
    20.0
}

fn yes() -> bool {
    true
}

impl Segment {
    fn duration(&self) -> f64 {
        match self {
            Segment::ConstantCurrent { duration_s, .. }
            | Segment::Rest { duration_s }
            | Segment::DriveCycle { duration_s, .. } => *duration_s,
            Segment::Hppc {
                pulse_s, rest_s, ..
            } => 2.0 * (pulse_s + rest_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub segments: Vec<Segment>,
    pub dt_s: f64,
    /// Reference capacity for C-rate magnitudes (Ah).
    pub nominal_capacity_ah: f64,
    /// The segment list is played this many times.
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default)]
    pub noise_std_v: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Stop condition attached to a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cutoff {
    /// Stop once the terminal voltage is at or below this value.
    Below(f64),
    /// Stop once the terminal voltage is at or above this value.
    Above(f64),
}

impl Cutoff {
    pub fn hit(&self, v: f64) -> bool {
        match *self {
            Cutoff::Below(x) => v <= x,
            Cutoff::Above(x) => v >= x,
        }
    }
}

/// Sampled current profile; `segment[k]` indexes `cutoffs`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Profile {
    pub dt_s: f64,
    pub current: Vec<f64>,
    pub segment: Vec<usize>,
    pub cutoffs: Vec<Option<Cutoff>>,
}

impl Profile {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }
}

/// Samples the profile. Deterministic given the spec's seed.
pub fn generate_profile(spec: &ProfileSpec) -> Result<Profile> {
    if !(spec.dt_s > 0.0) {
        return Err(Error::argument("profile sample period must be positive"));
    }
    if !(spec.noise_std_v >= 0.0) {
        return Err(Error::argument("noise std must be nonnegative"));
    }
    if !(spec.nominal_capacity_ah > 0.0) {
        return Err(Error::argument("nominal capacity must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Profile {
        dt_s: spec.dt_s,
        ..Default::default()
    };
    let dt = spec.dt_s;
    let cap = spec.nominal_capacity_ah;
    for _ in 0..spec.repeat {
        for seg in &spec.segments {
            let d = seg.duration();
            if !(d >= 0.0) {
                return Err(Error::argument("segment duration must be nonnegative"));
            }
            let n = |s: f64| (s / dt).round() as usize;
            let idx = out.cutoffs.len();
            let samples: Vec<f64> = match seg {
                Segment::ConstantCurrent {
                    current,
                    duration_s,
                    termination_v,
                } => {
                    let i = current.amps(cap);
                    out.cutoffs.push(termination_v.map(|v| {
                        if i < 0.0 {
                            Cutoff::Above(v)
                        } else {
                            Cutoff::Below(v)
                        }
                    }));
                    vec![i; n(*duration_s)]
                }
                Segment::Rest { duration_s } => {
                    out.cutoffs.push(None);
                    vec![0.0; n(*duration_s)]
                }
                Segment::DriveCycle {
                    rms,
                    regen_fraction,
                    duration_s,
                    band_tau_s,
                    termination_v,
                } => {
                    out.cutoffs.push(termination_v.map(Cutoff::Below));
                    drive_cycle(
                        &mut rng,
                        n(*duration_s),
                        dt,
                        rms.amps(cap),
                        *regen_fraction,
                        *band_tau_s,
                    )?
                }
                Segment::Hppc {
                    pulse,
                    pulse_s,
                    rest_s,
                    discharge_first,
                } => {
                    out.cutoffs.push(None);
                    let i = pulse.amps(cap).abs() * if *discharge_first { 1.0 } else { -1.0 };
                    let mut v = vec![i; n(*pulse_s)];
                    v.extend(std::iter::repeat_n(0.0, n(*rest_s)));
                    v.extend(std::iter::repeat_n(-i, n(*pulse_s)));
                    v.extend(std::iter::repeat_n(0.0, n(*rest_s)));
                    v
                }
            };
            out.segment.extend(std::iter::repeat_n(idx, samples.len()));
            out.current.extend(samples);
        }
    }
    Ok(out)
}

/// Low-pass filtered Gaussian noise, shifted and scaled so that the
/// in-sample RMS and regeneration fraction match the request exactly.
fn drive_cycle(
    rng: &mut ChaCha8Rng,
    n: usize,
    dt: f64,
    rms: f64,
    regen_fraction: f64,
    band_tau_s: f64,
) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&regen_fraction) {
        return Err(Error::argument("regen fraction must lie in [0, 0.5)"));
    }
    if !(rms >= 0.0) || !(band_tau_s > 0.0) {
        return Err(Error::argument(
            "drive cycle needs rms >= 0 and a positive band time constant",
        ));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let a = (-dt / band_tau_s).exp();
    let mut x = Vec::with_capacity(n);
    let mut state: f64 = normal.sample(rng);
    for _ in 0..n {
        state = a * state + (1.0 - a * a).sqrt() * normal.sample(rng);
        x.push(state);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-12);
    for v in &mut x {
        *v = (*v - mean) / sd;
    }
    // choose offset m and scale s so that a fraction `regen_fraction` of
    // samples falls below zero and mean square equals rms²
    let mut sorted = x.clone();
    sorted.sort_by(f64::total_cmp);
    let q = if regen_fraction == 0.0 {
        sorted[0] - 1e-9
    } else {
        sorted[((regen_fraction * n as f64) as usize).min(n - 1)]
    };
    let s = rms / (1.0 + q * q).sqrt();
    let m = -s * q;
    Ok(x.into_iter().map(|v| m + s * v).collect())
}

/// Cycler voltage window; a sample outside it ends the running segment.
pub const CYCLER_VMIN: f64 = 2.0;
pub const CYCLER_VMAX: f64 = 4.4;

/// Measurements plus the hidden truth they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub records: Vec<CyclingRecord>,
    pub truth: Vec<TruthRecord>,
    pub final_state: EecmState,
    pub clamp_events: u64,
}

/// Simulates the truth model over a profile.
///
/// At each sample the measured voltage is the model voltage under the
/// sample's current plus Gaussian noise; the state then advances with that
/// current. A sample that reaches its segment's cutoff (or leaves the
/// cycler window) is recorded and the profile jumps to the next segment.
pub fn simulate_trajectory(
    pack: &ParamPack,
    esoh: &EsohParams,
    initial: EecmState,
    profile: &Profile,
    noise_std_v: f64,
    seed: u64,
) -> Result<Trajectory> {
    if !(noise_std_v >= 0.0) {
        return Err(Error::argument("noise std must be nonnegative"));
    }
    let noise = Normal::new(0.0, noise_std_v.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = initial;
    let mut out = Trajectory::default();
    let dt = profile.dt_s;
    let mut t = 0.0;
    let mut k = 0;
    while k < profile.len() {
        let i = profile.current[k];
        let seg = profile.segment[k];
        let v_model = cell_voltage(pack, &state, i);
        let v = if noise_std_v > 0.0 {
            v_model + noise.sample(&mut rng)
        } else {
            v_model
        };
        out.records.push(CyclingRecord {
            t_s: t,
            current_a: i,
            voltage_v: v,
            temperature_c: None,
        });
        let soc = esoh.soc_from_sol(state.neg.theta)?;
        out.truth.push(TruthRecord {
            t_s: t,
            thn: state.neg.theta,
            thp: state.pos.theta,
            soc,
        });
        let stepped = step_state(pack, esoh, &state, i, dt)?;
        state = stepped.state;
        out.clamp_events += stepped.clamped as u64;
        t += dt;

        let stop = profile.cutoffs[seg].is_some_and(|c| c.hit(v_model))
            || !(CYCLER_VMIN..=CYCLER_VMAX).contains(&v_model);
        k += 1;
        if stop {
            while k < profile.len() && profile.segment[k] == seg {
                k += 1;
            }
        }
    }
    out.final_state = state;
    Ok(out)
}

/// A complete synthetic experiment, as stored in scenario JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub degradation: DegradationSpec,
    /// Relative R/C mismatch between the truth model and the nominal pack.
    #[serde(default = "default_mismatch")]
    pub mismatch: f64,
    /// SOC of the truth cell at t = 0 (at rest).
    #[serde(default = "one_f")]
    pub initial_soc: f64,
    pub profile: ProfileSpec,
    /// Voltage limits that define 0 % and 100 % SOC.
    #[serde(default = "default_vmin")]
    pub vmin: f64,
    #[serde(default = "default_vmax")]
    pub vmax: f64,
}

fn default_vmin() -> f64 {
    DEFAULT_VMIN
}

fn default_vmax() -> f64 {
    DEFAULT_VMAX
}

fn default_mismatch() -> f64 {
    0.1
}

fn one_f() -> f64 {
    1.0
}

/// The truth side of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthCell {
    pub pack: ParamPack,
    pub esoh: EsohParams,
    pub initial: EecmState,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Fresh reference parameters at the scenario's voltage limits.
    pub fn fresh(&self, nominal: &ParamPack) -> Result<EsohParams> {
        fresh_at_limits(nominal, self.vmin, self.vmax)
    }

    /// Builds the aged, mismatched truth cell.
    pub fn truth_cell(&self, nominal: &ParamPack) -> Result<TruthCell> {
        let fresh = self.fresh(nominal)?;
        let esoh = apply_degradation(nominal, &fresh, &self.degradation, self.vmin, self.vmax)?;
        let mut pack = perturb_tables(nominal, self.mismatch, self.profile.seed.wrapping_add(1))?;
        pack.esoh = esoh;
        let (thp, thn) = esoh.sol_from_soc(self.initial_soc)?;
        Ok(TruthCell {
            pack,
            esoh,
            initial: EecmState::at_rest(thp, thn),
        })
    }

    pub fn run(&self, nominal: &ParamPack) -> Result<(TruthCell, Trajectory)> {
        let cell = self.truth_cell(nominal)?;
        let profile = generate_profile(&self.profile)?;
        let traj = simulate_trajectory(
            &cell.pack,
            &cell.esoh,
            cell.initial,
            &profile,
            self.profile.noise_std_v,
            self.profile.seed,
        )?;
        Ok((cell, traj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::health::{lam, lithium_inventory_at_windows, lli};

    fn nominal() -> (ParamPack, f64, f64) {
        let p = ParamPack::lg_m50();
        let (a, b) = p.voltage_limits();
        (p, a, b)
    }

    #[test]
    fn zero_degradation_is_identity() {
        let (p, vmin, vmax) = nominal();
        let aged = apply_degradation(&p, &p.esoh, &DegradationSpec::default(), vmin, vmax).unwrap();
        for (a, b) in aged
            .windows()
            .to_array()
            .iter()
            .zip(p.esoh.windows().to_array())
        {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(aged.qp, p.esoh.qp);
        assert_eq!(aged.qn, p.esoh.qn);
    }

    #[test]
    fn table_b_windows_cannot_host_the_reference_ageing() {
        // at the pack's own 0 % SOC voltage the aged PE would need thp0 > 1
        let (p, vmin, vmax) = nominal();
        let spec = DegradationSpec {
            lam_p: 20.0,
            lam_n: 10.0,
            lli: 16.0,
        };
        assert!(matches!(
            apply_degradation(&p, &p.esoh, &spec, vmin, vmax),
            Err(Error::InfeasibleDegradation(_))
        ));
    }

    #[test]
    fn fresh_rebase_keeps_capacity_and_inventory() {
        let p = ParamPack::lg_m50();
        let f = fresh_at_limits(&p, DEFAULT_VMIN, DEFAULT_VMAX).unwrap();
        f.validate().unwrap();
        assert_eq!((f.qp, f.qn), (p.esoh.qp, p.esoh.qn));
        let n = lithium_inventory_at_windows(&f);
        assert!((n - lithium_inventory_at_windows(&p.esoh)).abs() < 1e-12);
        assert!((p.ocv(f.thp0, f.thn0) - DEFAULT_VMIN).abs() < 1e-9);
    }

    #[test]
    fn reference_scenario_round_trips() {
        let p = ParamPack::lg_m50();
        let (vmin, vmax) = (DEFAULT_VMIN, DEFAULT_VMAX);
        let fresh = fresh_at_limits(&p, vmin, vmax).unwrap();
        let spec = DegradationSpec {
            lam_p: 20.0,
            lam_n: 10.0,
            lli: 16.0,
        };
        let aged = apply_degradation(&p, &fresh, &spec, vmin, vmax).unwrap();
        aged.validate().unwrap();
        assert!((lam(aged.qp, fresh.qp).unwrap() - 20.0).abs() < 1e-6);
        assert!((lam(aged.qn, fresh.qn).unwrap() - 10.0).abs() < 1e-6);
        let l = lli(
            lithium_inventory_at_windows(&aged),
            lithium_inventory_at_windows(&fresh),
        )
        .unwrap();
        assert!((l - 16.0).abs() < 1e-6, "{l}");
        assert!((p.ocv(aged.thp0, aged.thn0) - vmin).abs() < 1e-9);
        assert!((p.ocv(aged.thp100, aged.thn100) - vmax).abs() < 1e-9);
    }

    #[test]
    fn larger_lam_shrinks_capacity() {
        let p = ParamPack::lg_m50();
        let fresh = fresh_at_limits(&p, DEFAULT_VMIN, DEFAULT_VMAX).unwrap();
        let mut last = f64::INFINITY;
        for lam_p in [0.0, 5.0, 10.0, 20.0] {
            let spec = DegradationSpec {
                lam_p,
                lam_n: 0.0,
                lli: lam_p,
            };
            let aged = apply_degradation(&p, &fresh, &spec, DEFAULT_VMIN, DEFAULT_VMAX).unwrap();
            assert!(aged.qp < last);
            last = aged.qp;
        }
    }

    #[test]
    fn rejects_out_of_range_spec() {
        let p = ParamPack::lg_m50();
        let (vmin, vmax) = (DEFAULT_VMIN, DEFAULT_VMAX);
        let bad = DegradationSpec {
            lam_p: 85.0,
            lam_n: 0.0,
            lli: 0.0,
        };
        assert!(apply_degradation(&p, &p.esoh, &bad, vmin, vmax).is_err());
        // losing most of the lithium leaves no room for the 0 % SOC voltage
        let fresh = fresh_at_limits(&p, vmin, vmax).unwrap();
        let extreme = DegradationSpec {
            lam_p: 50.0,
            lam_n: 0.0,
            lli: 0.0,
        };
        assert!(matches!(
            apply_degradation(&p, &fresh, &extreme, vmin, vmax),
            Err(Error::InfeasibleDegradation(_))
        ));
    }

    fn spec(segments: Vec<Segment>) -> ProfileSpec {
        ProfileSpec {
            segments,
            dt_s: 1.0,
            nominal_capacity_ah: 5.0,
            repeat: 1,
            noise_std_v: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn empty_profile_is_empty() {
        assert!(generate_profile(&spec(vec![])).unwrap().is_empty());
        let mut bad = spec(vec![]);
        bad.dt_s = 0.0;
        assert!(generate_profile(&bad).is_err());
    }

    #[test]
    fn profile_is_seed_deterministic() {
        let segs = vec![Segment::DriveCycle {
            rms: Magnitude::CRate(0.6),
            regen_fraction: 0.2,
            duration_s: 5000.0,
            band_tau_s: 20.0,
            termination_v: None,
        }];
        let a = generate_profile(&spec(segs.clone())).unwrap();
        let b = generate_profile(&spec(segs.clone())).unwrap();
        assert_eq!(a, b);
        let mut other = spec(segs);
        other.seed = 4;
        assert_ne!(generate_profile(&other).unwrap().current, a.current);
    }

    #[test]
    fn drive_cycle_statistics() {
        let p = generate_profile(&spec(vec![Segment::DriveCycle {
            rms: Magnitude::Amps(3.0),
            regen_fraction: 0.25,
            duration_s: 20_000.0,
            band_tau_s: 10.0,
            termination_v: None,
        }]))
        .unwrap();
        let n = p.len() as f64;
        let rms = (p.current.iter().map(|i| i * i).sum::<f64>() / n).sqrt();
        let regen = p.current.iter().filter(|&&i| i < 0.0).count() as f64 / n;
        assert!((rms - 3.0).abs() < 1e-9);
        assert!((regen - 0.25).abs() < 1e-3);
    }

    #[test]
    fn cc_charge_stops_at_termination_voltage() {
        let (p, _, _) = nominal();
        let prof = generate_profile(&spec(vec![
            Segment::ConstantCurrent {
                current: Magnitude::CRate(-0.5),
                duration_s: 20_000.0,
                termination_v: Some(4.2),
            },
            Segment::Rest { duration_s: 100.0 },
        ]))
        .unwrap();
        let (thp, thn) = p.esoh.sol_from_soc(0.3).unwrap();
        let traj =
            simulate_trajectory(&p, &p.esoh, EecmState::at_rest(thp, thn), &prof, 0.0, 1).unwrap();
        let charging: Vec<_> = traj.records.iter().filter(|r| r.current_a < 0.0).collect();
        let last = charging.last().unwrap();
        assert!(last.voltage_v >= 4.2);
        assert!(charging[..charging.len() - 1]
            .iter()
            .all(|r| r.voltage_v < 4.2));
        assert_eq!(traj.records.len(), charging.len() + 100);
    }

    #[test]
    fn zero_noise_measures_model_voltage() {
        let (p, _, _) = nominal();
        let prof = generate_profile(&spec(vec![Segment::DriveCycle {
            rms: Magnitude::CRate(0.5),
            regen_fraction: 0.2,
            duration_s: 2000.0,
            band_tau_s: 20.0,
            termination_v: None,
        }]))
        .unwrap();
        let init = EecmState::at_rest(0.5, 0.5);
        let traj = simulate_trajectory(&p, &p.esoh, init, &prof, 0.0, 1).unwrap();
        let mut s = init;
        for r in &traj.records {
            assert_eq!(r.voltage_v, cell_voltage(&p, &s, r.current_a));
            s = step_state(&p, &p.esoh, &s, r.current_a, 1.0).unwrap().state;
        }
    }

    #[test]
    fn zero_current_keeps_sol_flat() {
        let (p, _, _) = nominal();
        let prof = generate_profile(&spec(vec![Segment::Rest { duration_s: 500.0 }])).unwrap();
        let traj =
            simulate_trajectory(&p, &p.esoh, EecmState::at_rest(0.6, 0.4), &prof, 0.0, 1).unwrap();
        assert!(traj.truth.iter().all(|r| r.thp == 0.6 && r.thn == 0.4));
    }

    #[test]
    fn noise_has_requested_std() {
        let (p, _, _) = nominal();
        let prof = generate_profile(&spec(vec![Segment::Rest {
            duration_s: 100_000.0,
        }]))
        .unwrap();
        let init = EecmState::at_rest(0.6, 0.4);
        let v0 = cell_voltage(&p, &init, 0.0);
        let traj = simulate_trajectory(&p, &p.esoh, init, &prof, 1e-3, 11).unwrap();
        let n = traj.records.len() as f64;
        let res: Vec<f64> = traj.records.iter().map(|r| r.voltage_v - v0).collect();
        let mean = res.iter().sum::<f64>() / n;
        let sd = (res.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 1e-3).abs() < 1e-4, "{sd}");
    }

    #[test]
    fn perturbation_stays_within_band() {
        let (p, _, _) = nominal();
        let q = perturb_tables(&p, 0.1, 5).unwrap();
        for (a, b) in p.table_positive.rows.iter().zip(&q.table_positive.rows) {
            for (x, y) in a.elements().to_array().iter().zip(b.elements().to_array()) {
                assert!((y / x - 1.0).abs() <= 0.1 + 1e-12);
            }
        }
        assert_eq!(perturb_tables(&p, 0.0, 5).unwrap(), p);
    }
}
