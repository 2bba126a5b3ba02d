//! Interconnected sigma-point Kalman filter.
//!
//! One three-state filter per electrode, `x = (vC1, vC2, θ)`. The state
//! equations are linear, so the time update is a plain `A·x + B·u`; only the
//! output map needs sigma points. Each filter evaluates the cell voltage with
//! its own sigma points and the other electrode's predicted mean.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CyclingRecord;
use crate::model::{electrode_voltage_pair, Discretized, ElectrodeState};
use crate::ocp::Electrode;
use crate::params::{EsohParams, ParamPack};

/// State dimension of one electrode filter.
pub const N_STATE: usize = 3;
/// Number of sigma points per filter.
pub const N_SIGMA: usize = 2 * N_STATE + 1;
const JITTER_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub electrode: Electrode,
    pub xhat: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl FilterState {
    pub fn new(electrode: Electrode, xhat: [f64; 3], variance: [f64; 3]) -> Self {
        Self {
            electrode,
            xhat: Vector3::from(xhat),
            cov: Matrix3::from_diagonal(&Vector3::from(variance)),
        }
    }

    pub fn theta(&self) -> f64 {
        self.xhat[2]
    }

    pub fn as_electrode_state(&self) -> ElectrodeState {
        ElectrodeState {
            vc1: self.xhat[0],
            vc2: self.xhat[1],
            theta: self.xhat[2],
        }
    }
}

/// Central-difference weights for `N_SIGMA` points. Mean and covariance
/// weights coincide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub h: f64,
    pub w: [f64; N_SIGMA],
}

impl Weights {
    pub fn central_difference(h: f64) -> Self {
        let h2 = h * h;
        let mut w = [1.0 / (2.0 * h2); N_SIGMA];
        w[0] = (h2 - N_STATE as f64) / h2;
        Self { h, w }
    }
}

/// Filter noise and sigma-point spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Process covariance of the PE filter.
    pub process_pos: [[f64; 3]; 3],
    /// Process covariance of the NE filter.
    pub process_neg: [[f64; 3]; 3],
    /// Voltage measurement variance (V²).
    pub measurement_var: f64,
    pub h: f64,
}

fn diag3(d: [f64; 3]) -> [[f64; 3]; 3] {
    [[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]]
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let w = diag3([1e-8, 1e-8, 1e-10]);
        Self {
            process_pos: w,
            process_neg: w,
            measurement_var: 2e-3 * 2e-3,
            h: 3f64.sqrt(),
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.measurement_var > 0.0) {
            return Err(Error::config("measurement variance must be positive"));
        }
        if !(self.h > 0.0) {
            return Err(Error::config("sigma-point spread h must be positive"));
        }
        for (name, m) in [
            ("process_pos", self.process_pos),
            ("process_neg", self.process_neg),
        ] {
            let m = to_matrix(m);
            if (m - m.transpose()).abs().max() > 1e-15 {
                return Err(Error::config(format!("{name} must be symmetric")));
            }
            if m.symmetric_eigenvalues().iter().any(|&v| v < -1e-18) {
                return Err(Error::config(format!(
                    "{name} must be positive semidefinite"
                )));
            }
        }
        Ok(())
    }

    pub fn process(&self, e: Electrode) -> Matrix3<f64> {
        match e {
            Electrode::Positive => to_matrix(self.process_pos),
            Electrode::Negative => to_matrix(self.process_neg),
        }
    }

    pub fn weights(&self) -> Weights {
        Weights::central_difference(self.h)
    }
}

fn to_matrix(m: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Step 1a: `x̂⁻ = A·x̂⁺ + B·u`, with elements interpolated at the current SOL
/// estimate. Returns the mean and the discretization used.
pub fn predict_state(
    fs: &FilterState,
    pack: &ParamPack,
    esoh: &EsohParams,
    current: f64,
    dt: f64,
) -> (Vector3<f64>, Discretized) {
    let e = fs.electrode;
    let q = match e {
        Electrode::Positive => esoh.qp,
        Electrode::Negative => esoh.qn,
    };
    let d = Discretized::for_state(e, pack.table(e), &fs.as_electrode_state(), q, esoh.eta, dt);
    (Vector3::from(d.apply(fs.xhat.into(), current)), d)
}

/// Step 1b: `Σ⁻ = A·Σ⁺·Aᵀ + Σw`, symmetrized. `a` is the diagonal of `A`.
pub fn predict_covariance(
    cov: &Matrix3<f64>,
    a: &[f64; 3],
    process: &Matrix3<f64>,
) -> Matrix3<f64> {
    let a = Matrix3::from_diagonal(&Vector3::from(*a));
    symmetrize(&(a * cov * a.transpose() + process))
}

/// Lower Cholesky factor, adding `1e-12·tr(Σ)/3·I` up to three times.
fn cholesky_with_jitter(cov: &Matrix3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    let jitter = 1e-12 * cov.trace() / N_STATE as f64;
    let mut m = symmetrize(cov);
    for attempt in 0..=JITTER_ATTEMPTS {
        if let Some(ch) = m.cholesky() {
            return Ok((ch.l(), m));
        }
        if attempt < JITTER_ATTEMPTS {
            m += Matrix3::identity() * jitter.max(f64::MIN_POSITIVE);
        }
    }
    Err(Error::CovarianceDegenerate {
        attempts: JITTER_ATTEMPTS,
    })
}

/// Step 1c: `{m, m + h·Lⱼ, m − h·Lⱼ}` with `L` the lower Cholesky factor.
pub fn sigma_points(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    h: f64,
) -> Result<[Vector3<f64>; N_SIGMA]> {
    let (l, _) = cholesky_with_jitter(cov)?;
    let mut pts = [*mean; N_SIGMA];
    for j in 0..N_STATE {
        let col = l.column(j) * h;
        pts[1 + j] = mean + col;
        pts[1 + N_STATE + j] = mean - col;
    }
    Ok(pts)
}

fn state_of(x: &Vector3<f64>) -> ElectrodeState {
    ElectrodeState {
        vc1: x[0],
        vc2: x[1],
        theta: x[2],
    }
}

/// Step 1c: output sigma points of one filter, combining its points with the
/// other electrode's predicted mean. Returns `(ŷ, Y)`.
pub fn output_prediction(
    pack: &ParamPack,
    electrode: Electrode,
    points: &[Vector3<f64>; N_SIGMA],
    other_mean: &Vector3<f64>,
    current: f64,
    weights: &Weights,
) -> (f64, [f64; N_SIGMA]) {
    let other = state_of(other_mean);
    let mut ys = [0.0; N_SIGMA];
    for (y, x) in ys.iter_mut().zip(points) {
        let s = state_of(x);
        *y = match electrode {
            Electrode::Positive => electrode_voltage_pair(pack, &s, &other, current),
            Electrode::Negative => electrode_voltage_pair(pack, &other, &s, current),
        };
    }
    let yhat = weights.w.iter().zip(&ys).map(|(w, y)| w * y).sum();
    (yhat, ys)
}

/// Weighted spread of output sigma points around their mean.
pub fn output_variance(ys: &[f64; N_SIGMA], yhat: f64, weights: &Weights) -> f64 {
    ys.iter()
        .zip(&weights.w)
        .map(|(y, w)| w * (y - yhat) * (y - yhat))
        .sum()
}

/// Steps 2a–2c for one filter. `prior` holds `x̂⁻` and `Σ⁻`;
/// `measurement_var` is everything added to the sigma-point output spread.
pub fn gain_and_update(
    prior: &FilterState,
    points: &[Vector3<f64>; N_SIGMA],
    ys: &[f64; N_SIGMA],
    yhat: f64,
    measured: f64,
    weights: &Weights,
    measurement_var: f64,
) -> Result<(FilterState, Vector3<f64>)> {
    let mut s_y = measurement_var;
    let mut s_xy = Vector3::zeros();
    for i in 0..N_SIGMA {
        let dy = ys[i] - yhat;
        s_y += weights.w[i] * dy * dy;
        s_xy += (points[i] - prior.xhat) * (weights.w[i] * dy);
    }
    if !(s_y > 0.0) || !s_y.is_finite() {
        return Err(Error::Numerical(format!(
            "innovation variance {s_y} is not positive"
        )));
    }
    let gain = s_xy / s_y;
    let xhat = prior.xhat + gain * (measured - yhat);
    let cov = symmetrize(&(prior.cov - gain * s_y * gain.transpose()));
    let (_, cov) = cholesky_with_jitter(&cov)?;
    Ok((
        FilterState {
            electrode: prior.electrode,
            xhat,
            cov,
        },
        gain,
    ))
}

/// Initial state and spread for an estimator run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub noise: NoiseConfig,
    /// Initial SOC guess; sets both SOLs through the initial windows.
    pub initial_soc: f64,
    /// Diagonal of the initial covariance, `(vC1, vC2, θ)`, both electrodes.
    pub initial_variance: [f64; 3],
    /// Clamp SOL estimates to `[0, 1]` after each update.
    pub clamp_sol: bool,
    /// Add the other filter's output spread to each filter's innovation
    /// variance, so the two filters do not both correct the full innovation.
    pub cross_variance: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::default(),
            initial_soc: 1.0,
            initial_variance: [1e-6, 1e-6, 1e-2],
            clamp_sol: true,
            cross_variance: false,
        }
    }
}

/// Per-sample estimator output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub t_s: f64,
    pub soc: f64,
    pub thp: f64,
    pub thn: f64,
    /// Model voltage at the updated means.
    pub vhat: f64,
    /// `y − ŷ` of the PE and NE filters.
    pub innovation: [f64; 2],
    pub pos: FilterState,
    pub neg: FilterState,
    /// True if the covariance had to be reset during this step.
    pub reset: bool,
    /// PE and NE posterior SOLs that had to be clamped into `[0, 1]`.
    pub clamped: [bool; 2],
}

/// Two interconnected filters plus the eSOH parameters they run on.
#[derive(Debug, Clone)]
pub struct Estimator {
    pack: ParamPack,
    esoh: EsohParams,
    noise: NoiseConfig,
    weights: Weights,
    prior_variance: [f64; 3],
    clamp_sol: bool,
    cross_variance: bool,
    pos: FilterState,
    neg: FilterState,
    last: Option<(f64, f64)>,
    resets: u64,
    clamps: u64,
}

impl Estimator {
    /// Starts both filters at rest at `config.initial_soc` on `esoh`'s windows.
    pub fn new(pack: ParamPack, esoh: EsohParams, config: &EstimatorConfig) -> Result<Self> {
        config.noise.validate()?;
        esoh.validate()?;
        if config.initial_variance.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("initial variances must be positive"));
        }
        let (thp, thn) = esoh.sol_from_soc(config.initial_soc)?;
        Ok(Self {
            pos: FilterState::new(
                Electrode::Positive,
                [0.0, 0.0, thp],
                config.initial_variance,
            ),
            neg: FilterState::new(
                Electrode::Negative,
                [0.0, 0.0, thn],
                config.initial_variance,
            ),
            pack,
            esoh,
            noise: config.noise,
            weights: config.noise.weights(),
            prior_variance: config.initial_variance,
            clamp_sol: config.clamp_sol,
            cross_variance: config.cross_variance,
            last: None,
            resets: 0,
            clamps: 0,
        })
    }

    pub fn pack(&self) -> &ParamPack {
        &self.pack
    }

    pub fn esoh(&self) -> &EsohParams {
        &self.esoh
    }

    pub fn filter(&self, e: Electrode) -> &FilterState {
        match e {
            Electrode::Positive => &self.pos,
            Electrode::Negative => &self.neg,
        }
    }

    /// Overrides one filter's state, e.g. to set an explicit initial SOL.
    pub fn set_filter(&mut self, fs: FilterState) {
        match fs.electrode {
            Electrode::Positive => self.pos = fs,
            Electrode::Negative => self.neg = fs,
        }
    }

    pub fn set_capacities(&mut self, qp: f64, qn: f64) {
        self.esoh.qp = qp;
        self.esoh.qn = qn;
    }

    pub fn set_esoh(&mut self, esoh: EsohParams) {
        self.esoh = esoh;
    }

    pub fn covariance_resets(&self) -> u64 {
        self.resets
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamps
    }

    fn reset_covariance(&mut self, e: Electrode) {
        let cov = Matrix3::from_diagonal(&Vector3::from(self.prior_variance));
        match e {
            Electrode::Positive => self.pos.cov = cov,
            Electrode::Negative => self.neg.cov = cov,
        }
        self.resets += 1;
    }

    /// Runs one prediction/correction cycle. The time update uses the previous
    /// sample's current over the elapsed time; the first sample is a
    /// correction only.
    pub fn step(&mut self, record: &CyclingRecord) -> Result<StepOutput> {
        let i = record.current_a;
        if !i.is_finite() || !record.voltage_v.is_finite() || !record.t_s.is_finite() {
            return Err(Error::Data {
                row: 0,
                msg: format!("non-finite sample at t={}", record.t_s),
            });
        }
        let mut priors = [self.pos, self.neg];
        if let Some((t_prev, i_prev)) = self.last {
            let dt = record.t_s - t_prev;
            if !(dt > 0.0) {
                return Err(Error::Data {
                    row: 0,
                    msg: format!("time not increasing at t={}", record.t_s),
                });
            }
            for fs in &mut priors {
                let (x, d) = predict_state(fs, &self.pack, &self.esoh, i_prev, dt);
                fs.xhat = x;
                fs.cov = predict_covariance(&fs.cov, &d.a, &self.noise.process(fs.electrode));
            }
        }
        self.last = Some((record.t_s, i));

        let mut reset = false;
        let mut clamped = [false; 2];
        let mut innovation = [0.0; 2];
        let mut predicted = Vec::with_capacity(2);
        for k in 0..2 {
            let prior = priors[k];
            let other = priors[1 - k].xhat;
            predicted.push(
                sigma_points(&prior.xhat, &prior.cov, self.weights.h).map(|pts| {
                    let (yhat, ys) = output_prediction(
                        &self.pack,
                        prior.electrode,
                        &pts,
                        &other,
                        i,
                        &self.weights,
                    );
                    (pts, yhat, ys)
                }),
            );
        }
        let spread: Vec<f64> = predicted
            .iter()
            .map(|p| {
                p.as_ref().map_or(0.0, |(_, yhat, ys)| {
                    output_variance(ys, *yhat, &self.weights)
                })
            })
            .collect();
        for (k, pred) in predicted.into_iter().enumerate() {
            let prior = priors[k];
            let mut r = self.noise.measurement_var;
            if self.cross_variance {
                r += spread[1 - k];
            }
            let result = pred.and_then(|(pts, yhat, ys)| {
                innovation[k] = record.voltage_v - yhat;
                gain_and_update(&prior, &pts, &ys, yhat, record.voltage_v, &self.weights, r)
            });
            match result {
                Ok((mut post, _)) => {
                    if self.clamp_sol && !(0.0..=1.0).contains(&post.xhat[2]) {
                        post.xhat[2] = post.xhat[2].clamp(0.0, 1.0);
                        self.clamps += 1;
                        clamped[k] = true;
                    }
                    self.set_filter(post);
                }
                Err(e) => {
                    warn!(
                        "{} filter degenerate at t={}: {e}; resetting covariance",
                        prior.electrode, record.t_s
                    );
                    self.set_filter(prior);
                    self.reset_covariance(prior.electrode);
                    reset = true;
                }
            }
        }

        let vhat = electrode_voltage_pair(
            &self.pack,
            &self.pos.as_electrode_state(),
            &self.neg.as_electrode_state(),
            i,
        );
        Ok(StepOutput {
            t_s: record.t_s,
            soc: self.esoh.soc_from_sol(self.neg.theta())?,
            thp: self.pos.theta(),
            thn: self.neg.theta(),
            vhat,
            innovation,
            pos: self.pos,
            neg: self.neg,
            reset,
            clamped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{step_state, EecmState};
    use crate::ocp::OcpCurve;
    use crate::params::{HalfCellParamTable, RcElements, RcRow};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_sum_to_one() {
        for h in [1.0, 3f64.sqrt(), 2.5] {
            let w = Weights::central_difference(h);
            assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(Weights::central_difference(3f64.sqrt()).w[0].abs() < 1e-15);
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        m * m.transpose() + Matrix3::identity() * 0.1
    }

    #[test]
    fn sigma_points_reconstruct_mean_and_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for h in [1.0, 3f64.sqrt(), 2.0] {
            let w = Weights::central_difference(h);
            let cov = random_spd(&mut rng);
            let mean = Vector3::new(0.1, -0.2, 0.5);
            let pts = sigma_points(&mean, &cov, h).unwrap();
            let m: Vector3<f64> = pts.iter().zip(&w.w).map(|(p, a)| p * *a).sum();
            assert!((m - mean).norm() < 1e-12);
            let c: Matrix3<f64> = pts
                .iter()
                .zip(&w.w)
                .map(|(p, a)| (p - mean) * (p - mean).transpose() * *a)
                .sum();
            assert!((c - cov).abs().max() < 1e-10);
        }
    }

    #[test]
    fn identity_covariance_gives_unit_offsets() {
        let pts = sigma_points(&Vector3::zeros(), &Matrix3::identity(), 1.0).unwrap();
        for j in 0..3 {
            let mut e = Vector3::zeros();
            e[j] = 1.0;
            assert_eq!(pts[1 + j], e);
            assert_eq!(pts[4 + j], -e);
        }
    }

    #[test]
    fn indefinite_covariance_is_degenerate() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(matches!(
            sigma_points(&Vector3::zeros(), &m, 1.0),
            Err(Error::CovarianceDegenerate { .. })
        ));
    }

    #[test]
    fn covariance_prediction_matches_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cov = random_spd(&mut rng);
            let a = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 1.0];
            let q = random_spd(&mut rng) * 1e-3;
            let got = predict_covariance(&cov, &a, &q);
            for r in 0..3 {
                for c in 0..3 {
                    let want = a[r] * cov[(r, c)] * a[c] + 0.5 * (q[(r, c)] + q[(c, r)]);
                    assert!((got[(r, c)] - want).abs() < 1e-14);
                }
            }
        }
        let cov = random_spd(&mut rng);
        assert_eq!(
            predict_covariance(&cov, &[1.0; 3], &Matrix3::zeros()),
            symmetrize(&cov)
        );
        let grown = predict_covariance(&cov, &[1.0; 3], &(Matrix3::identity() * 1e-6));
        assert!(grown.trace() >= cov.trace());
    }

    #[test]
    fn state_prediction_matches_model_step() {
        let p = ParamPack::lg_m50();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = EecmState {
                pos: ElectrodeState {
                    vc1: 0.01,
                    vc2: -0.004,
                    theta: rng.random_range(0.3..0.9),
                },
                neg: ElectrodeState {
                    vc1: -0.002,
                    vc2: 0.006,
                    theta: rng.random_range(0.1..0.9),
                },
            };
            let i = rng.random_range(-5.0..5.0);
            let truth = step_state(&p, &p.esoh, &s, i, 1.0).unwrap().state;
            for (e, st, want) in [
                (Electrode::Positive, s.pos, truth.pos),
                (Electrode::Negative, s.neg, truth.neg),
            ] {
                let fs = FilterState::new(e, st.to_array(), [1.0; 3]);
                let (x, _) = predict_state(&fs, &p, &p.esoh, i, 1.0);
                assert_eq!(<[f64; 3]>::from(x), want.to_array());
            }
        }
        let fs = FilterState::new(Electrode::Negative, [0.0, 0.0, 0.0], [1.0; 3]);
        assert_eq!(
            predict_state(&fs, &p, &p.esoh, 0.0, 1.0).0,
            Vector3::zeros()
        );
    }

    #[test]
    fn zero_cross_covariance_leaves_state() {
        let prior = FilterState::new(Electrode::Positive, [0.01, 0.0, 0.4], [1e-4; 3]);
        let pts = [prior.xhat; N_SIGMA];
        let ys = [3.7; N_SIGMA];
        let w = Weights::central_difference(3f64.sqrt());
        let (post, gain) = gain_and_update(&prior, &pts, &ys, 3.7, 3.9, &w, 1e-6).unwrap();
        assert_eq!(gain, Vector3::zeros());
        assert_eq!(post.xhat, prior.xhat);
        assert!(gain_and_update(&prior, &pts, &ys, 3.7, 3.9, &w, 0.0).is_err());
    }

    #[test]
    fn identical_points_give_single_output() {
        let p = ParamPack::lg_m50();
        let x = Vector3::new(0.0, 0.0, 0.5);
        let other = Vector3::new(0.0, 0.0, 0.5);
        let w = Weights::central_difference(3f64.sqrt());
        let (yhat, _) = output_prediction(&p, Electrode::Positive, &[x; N_SIGMA], &other, 1.0, &w);
        let v = electrode_voltage_pair(&p, &state_of(&x), &state_of(&other), 1.0);
        assert!((yhat - v).abs() < 1e-12);
    }

    #[test]
    fn zero_innovation_still_shrinks_covariance() {
        let p = ParamPack::lg_m50();
        let prior = FilterState::new(Electrode::Positive, [0.0, 0.0, 0.5], [1e-6, 1e-6, 1e-3]);
        let w = Weights::central_difference(3f64.sqrt());
        let other = Vector3::new(0.0, 0.0, 0.5);
        let pts = sigma_points(&prior.xhat, &prior.cov, w.h).unwrap();
        let (yhat, ys) = output_prediction(&p, Electrode::Positive, &pts, &other, 0.0, &w);
        let (post, _) = gain_and_update(&prior, &pts, &ys, yhat, yhat, &w, 4e-6).unwrap();
        assert_eq!(post.xhat, prior.xhat);
        assert!(post.cov[(2, 2)] < prior.cov[(2, 2)]);
    }

    /// Pack with affine OCPs and SOL-independent elements, so the model is
    /// linear in the state.
    fn linear_pack() -> ParamPack {
        let mut p = ParamPack::lg_m50();
        let affine = |e, slope: f64, offset| OcpCurve {
            electrode: e,
            exp_amplitude: 0.0,
            exp_rate: 0.0,
            slope,
            offset,
            tanh_terms: vec![],
        };
        p.ocp_positive = affine(Electrode::Positive, -1.2, 4.5);
        p.ocp_negative = affine(Electrode::Negative, -0.4, 0.5);
        let table = |e, rc: RcElements| {
            HalfCellParamTable::new(e, vec![RcRow::new(0.0, rc), RcRow::new(1.0, rc)]).unwrap()
        };
        p.table_positive = table(
            Electrode::Positive,
            RcElements {
                r0: 0.008,
                r1: 0.004,
                c1: 2500.0,
                r2: 0.006,
                c2: 30000.0,
            },
        );
        p.table_negative = table(
            Electrode::Negative,
            RcElements {
                r0: 0.02,
                r1: 0.003,
                c1: 5000.0,
                r2: 0.01,
                c2: 9000.0,
            },
        );
        p
    }

    type M3 = [[f64; 3]; 3];

    /// Textbook linear KF for one electrode with the other electrode's
    /// predicted voltage treated as a known input.
    struct HandKf {
        x: [f64; 3],
        p: M3,
    }

    impl HandKf {
        fn predict(&mut self, a: [f64; 3], b: [f64; 3], q: M3, u: f64) {
            for r in 0..3 {
                self.x[r] = a[r] * self.x[r] + b[r] * u;
            }
            for r in 0..3 {
                for c in 0..3 {
                    self.p[r][c] = a[r] * self.p[r][c] * a[c] + q[r][c];
                }
            }
        }

        fn update(&mut self, h: [f64; 3], innovation: f64, r_var: f64) {
            let ph: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| self.p[r][c] * h[c]).sum());
            let s: f64 = (0..3).map(|r| h[r] * ph[r]).sum::<f64>() + r_var;
            let k = ph.map(|v| v / s);
            for r in 0..3 {
                self.x[r] += k[r] * innovation;
                for c in 0..3 {
                    self.p[r][c] -= k[r] * s * k[c];
                }
            }
        }
    }

    #[test]
    fn matches_linear_kf_on_affine_model() {
        let p = linear_pack();
        let esoh = p.esoh;
        let cfg = EstimatorConfig {
            initial_soc: 0.5,
            initial_variance: [1e-5, 1e-5, 1e-3],
            clamp_sol: false,
            ..Default::default()
        };
        let mut est = Estimator::new(p.clone(), esoh, &cfg).unwrap();
        let (thp0, thn0) = esoh.sol_from_soc(0.5).unwrap();
        let p0 = diag3(cfg.initial_variance);
        let mut kp = HandKf {
            x: [0.0, 0.0, thp0],
            p: p0,
        };
        let mut kn = HandKf {
            x: [0.0, 0.0, thn0],
            p: p0,
        };
        let (sp, sn) = (p.ocp_positive.slope, p.ocp_negative.slope);
        let (op, on) = (p.ocp_positive.offset, p.ocp_negative.offset);
        let rp = p.table_positive.interpolate(0.5);
        let rn = p.table_negative.interpolate(0.5);
        let vp = |x: &[f64; 3], i: f64| sp * x[2] + op - x[0] - x[1] - rp.r0 * i;
        let vn = |x: &[f64; 3], i: f64| sn * x[2] + on + x[0] + x[1] + rn.r0 * i;

        let mut truth = EecmState::at_rest(thp0 - 0.03, thn0 + 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = rand_distr::Normal::new(0.0, 1e-3).unwrap();
        let mut i_prev = 0.0;
        for k in 0..1000 {
            let t = k as f64;
            let i = rng.random_range(-3.0..3.0);
            let y = crate::model::cell_voltage(&p, &truth, i)
                + rand_distr::Distribution::sample(&noise, &mut rng);
            if k > 0 {
                let dp = Discretized::new(Electrode::Positive, &rp, esoh.qp, 1.0, 1.0);
                let dn = Discretized::new(Electrode::Negative, &rn, esoh.qn, 1.0, 1.0);
                kp.predict(dp.a, dp.b, cfg.noise.process_pos, i_prev);
                kn.predict(dn.a, dn.b, cfg.noise.process_neg, i_prev);
            }
            let (xp, xn) = (kp.x, kn.x);
            let yhat = vp(&xp, i) - vn(&xn, i);
            kp.update([-1.0, -1.0, sp], y - yhat, cfg.noise.measurement_var);
            kn.update([-1.0, -1.0, -sn], y - yhat, cfg.noise.measurement_var);

            let out = est
                .step(&CyclingRecord {
                    t_s: t,
                    current_a: i,
                    voltage_v: y,
                    temperature_c: None,
                })
                .unwrap();
            for r in 0..3 {
                assert!((out.pos.xhat[r] - kp.x[r]).abs() < 1e-6, "k={k} pos[{r}]");
                assert!((out.neg.xhat[r] - kn.x[r]).abs() < 1e-6, "k={k} neg[{r}]");
                for c in 0..3 {
                    assert!((out.pos.cov[(r, c)] - kp.p[r][c]).abs() < 1e-6);
                    assert!((out.neg.cov[(r, c)] - kn.p[r][c]).abs() < 1e-6);
                }
            }
            truth = step_state(&p, &esoh, &truth, i, 1.0).unwrap().state;
            i_prev = i;
        }
    }

    #[test]
    fn perfect_model_tracks_truth() {
        let p = ParamPack::lg_m50();
        let esoh = p.esoh;
        let (thp, thn) = esoh.sol_from_soc(0.9).unwrap();
        let mut truth = EecmState::at_rest(thp, thn);
        let cfg = EstimatorConfig {
            initial_soc: 0.9,
            initial_variance: [1e-8, 1e-8, 1e-6],
            ..Default::default()
        };
        let mut est = Estimator::new(p.clone(), esoh, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = 0.0;
        for _ in 0..3000 {
            let i: f64 = rng.random_range(-2.0..6.0);
            let v = crate::model::cell_voltage(&p, &truth, i);
            let out = est
                .step(&CyclingRecord {
                    t_s: t,
                    current_a: i,
                    voltage_v: v,
                    temperature_c: None,
                })
                .unwrap();
            let err = (out.thp - truth.pos.theta)
                .abs()
                .max((out.thn - truth.neg.theta).abs());
            assert!(err < 1e-3, "t={t} err={err}");
            truth = step_state(&p, &esoh, &truth, i, 1.0).unwrap().state;
            t += 1.0;
        }
        assert_eq!(est.covariance_resets(), 0);
    }

    #[test]
    fn rejects_time_going_backwards() {
        let p = ParamPack::lg_m50();
        let mut est = Estimator::new(p.clone(), p.esoh, &EstimatorConfig::default()).unwrap();
        let r = |t| CyclingRecord {
            t_s: t,
            current_a: 0.0,
            voltage_v: 4.1,
            temperature_c: None,
        };
        est.step(&r(1.0)).unwrap();
        assert!(est.step(&r(1.0)).is_err());
    }

    #[test]
    fn deterministic() {
        let p = ParamPack::lg_m50();
        let run = || {
            let mut est = Estimator::new(
                p.clone(),
                p.esoh,
                &EstimatorConfig {
                    initial_soc: 0.8,
                    ..Default::default()
                },
            )
            .unwrap();
            (0..200)
                .map(|k| {
                    let r = CyclingRecord {
                        t_s: k as f64,
                        current_a: 2.0,
                        voltage_v: 3.9 - 1e-4 * k as f64,
                        temperature_c: None,
                    };
                    est.step(&r).unwrap().soc
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
