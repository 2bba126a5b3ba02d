//! Electrode capacity by approximate weighted total least squares.
//!
//! Each pair relates a change in SOL `x = Δθ` to the charge moved `y` (Ah)
//! through `y = Q·x`, with noise on both. The merit
//! `Σ (y − Qx)²/(1 + Q²)² · (Q²/σx² + 1/σy²)` is stationary at the roots of a
//! quartic whose coefficients need only six running moments.
//!
//! `y` is rescaled by `K = σx/σy` of the first accepted pair before entering
//! the moments, which makes the estimate equivariant to the unit of `y`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::Electrode;

/// Eigenvalues with a relative imaginary part below this count as real.
const ROOT_IMAG_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwtlsConfig {
    /// Forgetting factor applied to prior moments on each push.
    pub gamma: f64,
    /// Pairs with `|Δθ|` below this are discarded.
    pub dtheta_floor: f64,
    /// Rescale `y` by `σx/σy` of the first accepted pair.
    pub normalize: bool,
}

impl Default for AwtlsConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            dtheta_floor: 0.05,
            normalize: true,
        }
    }
}

impl AwtlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "forgetting factor {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.dtheta_floor >= 0.0) {
            return Err(Error::config("dtheta floor must be nonnegative"));
        }
        Ok(())
    }
}

/// Capacity estimate and its one-sigma uncertainty (Ah).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityEstimate {
    pub q: f64,
    pub sigma_q: f64,
}

/// Whether a pushed pair entered the moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    BelowFloor,
}

/// Running weighted moments for one electrode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AwtlsAccumulator {
    config: AwtlsConfig,
    /// `Σx²/σy², Σxy/σy², Σy²/σy², Σx²/σx², Σxy/σx², Σy²/σx²` in scaled units.
    c: [f64; 6],
    k: Option<f64>,
    count: usize,
    discarded: usize,
    previous: Option<f64>,
}

impl AwtlsAccumulator {
    pub fn new(config: AwtlsConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            c: [0.0; 6],
            k: None,
            count: 0,
            discarded: 0,
            previous: None,
        })
    }

    /// Seeds the reference used to break ties between equal-merit roots.
    pub fn with_prior(mut self, q: f64) -> Self {
        self.previous = Some(q);
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn discarded(&self) -> usize {
        self.discarded
    }

    /// Scale applied to `y`; `None` until the first accepted pair.
    pub fn scale(&self) -> Option<f64> {
        self.k
    }

    /// The six moments in scaled units.
    pub fn moments(&self) -> [f64; 6] {
        self.c
    }

    pub fn push_pair(
        &mut self,
        dtheta: f64,
        dah: f64,
        var_x: f64,
        var_y: f64,
    ) -> Result<PushOutcome> {
        if !(var_x > 0.0 && var_y > 0.0) {
            return Err(Error::argument(format!(
                "pair variances must be positive (var_x={var_x}, var_y={var_y})"
            )));
        }
        if !dtheta.is_finite() || !dah.is_finite() {
            return Err(Error::argument("pair values must be finite"));
        }
        if dtheta.abs() < self.config.dtheta_floor {
            self.discarded += 1;
            return Ok(PushOutcome::BelowFloor);
        }
        let k = *self.k.get_or_insert(if self.config.normalize {
            (var_x / var_y).sqrt()
        } else {
            1.0
        });
        let (x, y) = (dtheta, k * dah);
        let vy = k * k * var_y;
        let g = self.config.gamma;
        let add = [
            x * x / vy,
            x * y / vy,
            y * y / vy,
            x * x / var_x,
            x * y / var_x,
            y * y / var_x,
        ];
        for (c, a) in self.c.iter_mut().zip(add) {
            *c = g * *c + a;
        }
        self.count += 1;
        Ok(PushOutcome::Accepted)
    }

    /// Merit in scaled units at scaled slope `q`.
    fn merit_scaled(&self, q: f64) -> f64 {
        let [c1, c2, c3, c4, c5, c6] = self.c;
        let n = c4 * q.powi(4) - 2.0 * c5 * q.powi(3) + (c1 + c6) * q * q - 2.0 * c2 * q + c3;
        n / (1.0 + q * q).powi(2)
    }

    fn merit_curvature_scaled(&self, q: f64) -> f64 {
        let [c1, c2, c3, c4, c5, c6] = self.c;
        let n = c4 * q.powi(4) - 2.0 * c5 * q.powi(3) + (c1 + c6) * q * q - 2.0 * c2 * q + c3;
        let n1 = 4.0 * c4 * q.powi(3) - 6.0 * c5 * q * q + 2.0 * (c1 + c6) * q - 2.0 * c2;
        let n2 = 12.0 * c4 * q * q - 12.0 * c5 * q + 2.0 * (c1 + c6);
        let s = 1.0 + q * q;
        let d = s.powi(-2);
        let d1 = -4.0 * q * s.powi(-3);
        let d2 = -4.0 * s.powi(-3) + 24.0 * q * q * s.powi(-4);
        n2 * d + 2.0 * n1 * d1 + n * d2
    }

    /// Merit at capacity `q` (Ah), in the accumulator's scaled units.
    pub fn merit(&self, q: f64) -> f64 {
        self.merit_scaled(q * self.k.unwrap_or(1.0))
    }

    /// Coefficients of `dχ/dQ = 0` in scaled units, highest power first.
    pub fn quartic(&self) -> [f64; 5] {
        let [c1, c2, c3, c4, c5, c6] = self.c;
        [
            2.0 * c5,
            4.0 * c4 - 2.0 * c1 - 2.0 * c6,
            6.0 * c2 - 6.0 * c5,
            2.0 * c1 + 2.0 * c6 - 4.0 * c3,
            -2.0 * c2,
        ]
    }

    /// Positive stationary point with the lowest merit; ties go to the one
    /// closest to the previous estimate.
    pub fn estimate_capacity(&mut self) -> Result<CapacityEstimate> {
        if self.count == 0 {
            return Err(Error::Estimation("no accepted pairs".into()));
        }
        let k = self.k.unwrap_or(1.0);
        let prev = self.previous.map(|q| q * k);
        let mut best: Option<(f64, f64)> = None;
        for r in real_roots(&self.quartic()) {
            if !(r > 0.0) {
                continue;
            }
            let m = self.merit_scaled(r);
            let better = match best {
                None => true,
                Some((bq, bm)) => {
                    let tol = 1e-12 * bm.abs().max(1e-300);
                    if (m - bm).abs() <= tol {
                        prev.is_some_and(|p| (r - p).abs() < (bq - p).abs())
                    } else {
                        m < bm
                    }
                }
            };
            if better {
                best = Some((r, m));
            }
        }
        let (qs, _) = best.ok_or_else(|| {
            Error::Estimation("no positive real root of the merit quartic".into())
        })?;
        let curv = self.merit_curvature_scaled(qs);
        let sigma_scaled = if curv > 0.0 {
            (2.0 / curv).sqrt()
        } else {
            f64::INFINITY
        };
        let q = qs / k;
        self.previous = Some(q);
        Ok(CapacityEstimate {
            q,
            sigma_q: sigma_scaled / k,
        })
    }
}

/// Real roots of a polynomial (highest power first) from the companion
/// matrix, each polished by a few Newton steps.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    if scale == 0.0 {
        return vec![];
    }
    let first = coeffs
        .iter()
        .position(|c| c.abs() > 1e-14 * scale)
        .unwrap_or(coeffs.len());
    let p = &coeffs[first..];
    let deg = p.len().saturating_sub(1);
    if deg == 0 {
        return vec![];
    }
    let lead = p[0];
    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for j in 0..deg {
        comp[(0, j)] = -p[j + 1] / lead;
    }
    for r in 1..deg {
        comp[(r, r - 1)] = 1.0;
    }
    let eval = |x: f64| {
        p.iter()
            .fold((0.0, 0.0), |(v, d), &c| (v * x + c, d * x + v))
    };
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= ROOT_IMAG_TOL * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..3 {
                let (v, d) = eval(x);
                if d == 0.0 {
                    break;
                }
                let step = v / d;
                if !step.is_finite() {
                    break;
                }
                x -= step;
            }
            x
        })
        .collect()
}

/// One (ΔSOL, charge) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityPair {
    pub electrode: Electrode,
    /// End time of the window (s).
    pub t_s: f64,
    pub dtheta: f64,
    /// `+∫η·i dt` for the PE, `−∫η·i dt` for the NE (Ah).
    pub dq_ah: f64,
    pub var_x: f64,
    pub var_y: f64,
    /// False when the SOL was clamped inside the window or moved against the
    /// charge; such pairs say nothing about the capacity.
    pub usable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    /// Length of each non-overlapping window (s).
    pub window_s: f64,
    /// Current sensor noise std (A) used for the charge variance.
    pub current_noise_a: f64,
    pub eta: f64,
    /// Pairs whose `var_x` exceeds this are left out; it keeps the start-up
    /// transient away from the regression.
    pub max_var_x: f64,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            window_s: 1800.0,
            current_noise_a: 0.01,
            eta: 1.0,
            max_var_x: 1e-4,
        }
    }
}

/// One sample seen by the harvester: time, the current applied since the
/// previous sample, and both SOL estimates with their variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarvestSample {
    pub t_s: f64,
    pub current_a: f64,
    pub thp: f64,
    pub thn: f64,
    pub var_thp: f64,
    pub var_thn: f64,
    /// PE and NE SOL estimates were clamped at this sample.
    pub clamped: [bool; 2],
}

#[derive(Debug, Clone, Copy)]
struct WindowStart {
    t_s: f64,
    thp: f64,
    thn: f64,
    var_thp: f64,
    var_thn: f64,
}

/// Streaming pair builder over non-overlapping time windows. Charge is
/// integrated with the current held from one sample to the next.
#[derive(Debug, Clone)]
pub struct PairHarvester {
    config: HarvestConfig,
    start: Option<WindowStart>,
    last: Option<(f64, f64)>,
    ah: f64,
    samples: usize,
    noise_ah2: f64,
    clamped: [bool; 2],
}

impl PairHarvester {
    pub fn new(config: HarvestConfig) -> Result<Self> {
        if !(config.window_s > 0.0) {
            return Err(Error::config("pairing window must be positive"));
        }
        if !(config.current_noise_a > 0.0) {
            return Err(Error::config("current noise must be positive"));
        }
        if !(config.max_var_x > 0.0) {
            return Err(Error::config("pair variance cap must be positive"));
        }
        Ok(Self {
            config,
            start: None,
            last: None,
            ah: 0.0,
            samples: 0,
            noise_ah2: 0.0,
            clamped: [false; 2],
        })
    }

    fn open(&mut self, s: &HarvestSample) {
        self.start = Some(WindowStart {
            t_s: s.t_s,
            thp: s.thp,
            thn: s.thn,
            var_thp: s.var_thp,
            var_thn: s.var_thn,
        });
        self.ah = 0.0;
        self.samples = 1;
        self.noise_ah2 = 0.0;
        self.clamped = s.clamped;
    }

    /// Feeds one sample; returns the PE and NE pairs when a window closes.
    pub fn push(&mut self, s: &HarvestSample) -> Option<[CapacityPair; 2]> {
        if let Some((t_prev, i_prev)) = self.last {
            let dt = s.t_s - t_prev;
            self.ah += self.config.eta * i_prev * dt / 3600.0;
            self.noise_ah2 += (self.config.current_noise_a * dt / 3600.0).powi(2);
            self.samples += 1;
        }
        self.last = Some((s.t_s, s.current_a));
        for (c, n) in self.clamped.iter_mut().zip(s.clamped) {
            *c |= n;
        }
        let Some(w) = self.start else {
            self.open(s);
            return None;
        };
        if s.t_s - w.t_s < self.config.window_s {
            return None;
        }
        let cap = self.config.max_var_x;
        let usable = |dtheta: f64, dq: f64, var_x: f64, clamped: bool| {
            !clamped && dtheta * dq > 0.0 && var_x <= cap
        };
        let out = (self.samples >= 2).then(|| {
            [
                CapacityPair {
                    electrode: Electrode::Positive,
                    t_s: s.t_s,
                    dtheta: s.thp - w.thp,
                    dq_ah: self.ah,
                    var_x: w.var_thp + s.var_thp,
                    var_y: self.noise_ah2,
                    usable: usable(
                        s.thp - w.thp,
                        self.ah,
                        w.var_thp + s.var_thp,
                        self.clamped[0],
                    ),
                },
                CapacityPair {
                    electrode: Electrode::Negative,
                    t_s: s.t_s,
                    dtheta: s.thn - w.thn,
                    dq_ah: -self.ah,
                    var_x: w.var_thn + s.var_thn,
                    var_y: self.noise_ah2,
                    usable: usable(
                        s.thn - w.thn,
                        -self.ah,
                        w.var_thn + s.var_thn,
                        self.clamped[1],
                    ),
                },
            ]
        });
        self.open(s);
        out
    }
}

/// Batch form of [`PairHarvester`] over aligned series.
pub fn harvest_pairs(
    samples: &[HarvestSample],
    config: HarvestConfig,
) -> Result<Vec<CapacityPair>> {
    let mut h = PairHarvester::new(config)?;
    Ok(samples.iter().filter_map(|s| h.push(s)).flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain() -> AwtlsConfig {
        AwtlsConfig {
            gamma: 1.0,
            dtheta_floor: 0.0,
            normalize: false,
        }
    }

    #[test]
    fn single_noiseless_pair() {
        let mut a = AwtlsAccumulator::new(plain()).unwrap();
        a.push_pair(0.5, 2.5, 1.0, 1.0).unwrap();
        assert!((a.estimate_capacity().unwrap().q - 5.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_pairs_any_scaling() {
        for cfg in [plain(), AwtlsConfig::default()] {
            let mut a = AwtlsAccumulator::new(cfg).unwrap();
            for x in [0.1, 0.3, -0.2, 0.7, 0.45] {
                a.push_pair(x, 5.0 * x, 1e-4, 4e-6).unwrap();
            }
            assert!((a.estimate_capacity().unwrap().q - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn double_push_equals_two_pushes() {
        let mut a = AwtlsAccumulator::new(plain()).unwrap();
        let mut b = a;
        a.push_pair(0.3, 1.4, 1e-3, 2e-3).unwrap();
        a.push_pair(0.3, 1.4, 1e-3, 2e-3).unwrap();
        b.push_pair(0.3, 1.4, 0.5e-3, 1e-3).unwrap();
        for (x, y) in a.moments().iter().zip(b.moments()) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn floor_discards_pair() {
        let mut a = AwtlsAccumulator::new(AwtlsConfig::default()).unwrap();
        let before = a;
        assert_eq!(
            a.push_pair(0.01, 0.05, 1e-4, 1e-6).unwrap(),
            PushOutcome::BelowFloor
        );
        assert_eq!(a.moments(), before.moments());
        assert_eq!(a.discarded(), 1);
        assert!(a.estimate_capacity().is_err());
        assert!(a.push_pair(0.2, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn moments_with_unit_gamma_are_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = AwtlsAccumulator::new(plain()).unwrap();
        let mut direct = [0.0; 6];
        for _ in 0..50 {
            let (x, y): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-5.0..5.0));
            let (vx, vy): (f64, f64) = (rng.random_range(1e-4..1e-2), rng.random_range(1e-4..1e-2));
            a.push_pair(x, y, vx, vy).unwrap();
            let add = [
                x * x / vy,
                x * y / vy,
                y * y / vy,
                x * x / vx,
                x * y / vx,
                y * y / vx,
            ];
            for (d, v) in direct.iter_mut().zip(add) {
                *d += v;
            }
        }
        for (m, d) in a.moments().iter().zip(direct) {
            assert!((m - d).abs() <= 1e-12 * d.abs().max(1.0));
        }
    }

    /// Orthogonal regression through the origin: the right singular vector of
    /// `[x y]` with the smallest singular value is normal to the line.
    fn tls_oracle(xs: &[f64], ys: &[f64]) -> f64 {
        let m = DMatrix::from_fn(xs.len(), 2, |r, c| if c == 0 { xs[r] } else { ys[r] });
        let svd = m.svd(false, true);
        let vt = svd.v_t.unwrap();
        let k = if svd.singular_values[0] < svd.singular_values[1] {
            0
        } else {
            1
        };
        -vt[(k, 0)] / vt[(k, 1)]
    }

    #[test]
    fn equal_variances_match_orthogonal_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q = rng.random_range(0.5..8.0);
            let n = rng.random_range(3..30);
            let (mut xs, mut ys) = (vec![], vec![]);
            let mut a = AwtlsAccumulator::new(plain()).unwrap();
            for _ in 0..n {
                let x = rng.random_range(-1.0..1.0);
                let (ex, ey) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                xs.push(x + ex);
                ys.push(q * x + ey);
                a.push_pair(x + ex, q * x + ey, 0.01, 0.01).unwrap();
            }
            let got = a.estimate_capacity().unwrap().q;
            let want = tls_oracle(&xs, &ys);
            assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    /// Dense grid minimization of the merit from raw pairs.
    fn grid_oracle(pairs: &[(f64, f64, f64, f64)], k: f64, lo: f64, hi: f64, step: f64) -> f64 {
        let merit = |q: f64| {
            let qs = q * k;
            pairs
                .iter()
                .map(|&(x, y, vx, vy)| {
                    let (y, vy) = (k * y, k * k * vy);
                    (y - qs * x).powi(2) / (1.0 + qs * qs).powi(2) * (qs * qs / vx + 1.0 / vy)
                })
                .sum::<f64>()
        };
        let n = ((hi - lo) / step).round() as usize;
        (0..=n)
            .map(|j| lo + j as f64 * step)
            .min_by(|a, b| merit(*a).total_cmp(&merit(*b)))
            .unwrap()
    }

    #[test]
    fn matches_grid_search_on_random_accumulators() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..40 {
            let cfg = if trial % 2 == 0 {
                plain()
            } else {
                AwtlsConfig {
                    gamma: 1.0,
                    ..Default::default()
                }
            };
            let mut a = AwtlsAccumulator::new(cfg).unwrap();
            let q = rng.random_range(1.0..10.0);
            let mut pairs = vec![];
            for _ in 0..rng.random_range(2..15) {
                let x = rng.random_range(0.06..0.9);
                let vx = rng.random_range(1e-5..1e-3);
                let vy = rng.random_range(1e-5..1e-3);
                let y = q * (x + rng.random_range(-0.02..0.02)) + rng.random_range(-0.02..0.02);
                a.push_pair(x, y, vx, vy).unwrap();
                pairs.push((x, y, vx, vy));
            }
            let got = a.estimate_capacity().unwrap().q;
            // coarse pass then a 1e-5 Ah pass around it keeps the oracle cheap
            let k = a.scale().unwrap();
            let coarse = grid_oracle(&pairs, k, 0.1, 20.0, 1e-3);
            let fine = grid_oracle(&pairs, k, (coarse - 2e-3).max(0.1), coarse + 2e-3, 1e-5);
            assert!((got - fine).abs() <= 1e-5 + 1e-9, "{got} vs {fine}");
        }
    }

    #[test]
    fn sigma_shrinks_with_consistent_pairs() {
        let mut a = AwtlsAccumulator::new(plain()).unwrap();
        let mut last = f64::INFINITY;
        for x in [0.2, 0.5, 0.1, 0.8, 0.3, 0.6] {
            a.push_pair(x, 4.2 * x, 1e-4, 1e-4).unwrap();
            let s = a.estimate_capacity().unwrap().sigma_q;
            assert!(s <= last * (1.0 + 1e-12), "{s} > {last}");
            last = s;
        }
    }

    #[test]
    fn forgetting_discounts_old_pairs() {
        let cfg = AwtlsConfig {
            gamma: 0.5,
            dtheta_floor: 0.0,
            normalize: false,
        };
        let mut a = AwtlsAccumulator::new(cfg).unwrap();
        for _ in 0..30 {
            a.push_pair(0.5, 2.0, 1e-4, 1e-4).unwrap();
        }
        for _ in 0..30 {
            a.push_pair(0.5, 3.0, 1e-4, 1e-4).unwrap();
        }
        assert!((a.estimate_capacity().unwrap().q - 6.0).abs() < 1e-6);
    }

    #[test]
    fn roots_of_known_polynomial() {
        // (x − 1)(x − 2)(x + 3)(x² + 1)
        let mut r = real_roots(&[1.0, 0.0, -6.0, 6.0, -7.0, 6.0]);
        r.sort_by(f64::total_cmp);
        assert_eq!(r.len(), 3);
        for (a, b) in r.iter().zip([-3.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(real_roots(&[0.0, 0.0, 2.0, -4.0])
            .iter()
            .all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn harvester_integrates_one_hour_discharge() {
        let q = 5.0;
        let samples: Vec<_> = (0..=3600)
            .map(|k| {
                let t = k as f64;
                HarvestSample {
                    t_s: t,
                    current_a: 5.0,
                    thp: 0.2 + 5.0 * t / 3600.0 / 7.0,
                    thn: 0.95 - 5.0 * t / 3600.0 / q,
                    var_thp: 1e-6,
                    var_thn: 2e-6,
                    clamped: [false; 2],
                }
            })
            .collect();
        let pairs = harvest_pairs(
            &samples,
            HarvestConfig {
                window_s: 3600.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(pairs.len(), 2);
        let (p, n) = (pairs[0], pairs[1]);
        assert!((p.dq_ah - 5.0).abs() < 1e-12 && (n.dq_ah + 5.0).abs() < 1e-12);
        assert!((n.dtheta + 1.0).abs() < 1e-12);
        assert!((n.dq_ah / n.dtheta - q).abs() < 1e-9);
        assert!((p.dq_ah / p.dtheta - 7.0).abs() < 1e-9);
        assert!((n.var_x - 4e-6).abs() < 1e-18);
        assert!((p.var_y - 3600.0 * (0.01f64 / 3600.0).powi(2)).abs() < 1e-18);
        assert!(p.usable && n.usable);
    }

    #[test]
    fn clamped_or_backwards_windows_are_unusable() {
        let sample = |t: f64, thn: f64, clamped_n: bool| HarvestSample {
            t_s: t,
            current_a: 2.0,
            thp: 0.3 + t * 1e-4,
            thn,
            var_thp: 1e-6,
            var_thn: 1e-6,
            clamped: [false, clamped_n],
        };
        let mut h = PairHarvester::new(HarvestConfig {
            window_s: 10.0,
            ..Default::default()
        })
        .unwrap();
        // NE climbs while discharging
        let backwards: Vec<_> = (0..=10)
            .filter_map(|k| h.push(&sample(k as f64, 0.8 + k as f64 * 1e-3, false)))
            .collect();
        assert!(backwards[0][0].usable && !backwards[0][1].usable);
        let clamped: Vec<_> = (11..=20)
            .filter_map(|k| h.push(&sample(k as f64, 0.8 - k as f64 * 1e-3, k == 15)))
            .collect();
        assert!(clamped[0][0].usable && !clamped[0][1].usable);
        let clean: Vec<_> = (21..=30)
            .filter_map(|k| h.push(&sample(k as f64, 0.8 - k as f64 * 1e-3, false)))
            .collect();
        assert!(clean[0][1].usable);
    }

    #[test]
    fn zero_current_window_is_floored() {
        let samples: Vec<_> = (0..=100)
            .map(|k| HarvestSample {
                t_s: k as f64,
                current_a: 0.0,
                thp: 0.5,
                thn: 0.5,
                var_thp: 1e-6,
                var_thn: 1e-6,
                clamped: [false; 2],
            })
            .collect();
        let pairs = harvest_pairs(
            &samples,
            HarvestConfig {
                window_s: 50.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(pairs.len(), 4);
        let mut a = AwtlsAccumulator::new(AwtlsConfig::default()).unwrap();
        for p in pairs {
            assert_eq!(
                a.push_pair(p.dtheta, p.dq_ah, p.var_x, p.var_y).unwrap(),
                PushOutcome::BelowFloor
            );
        }
    }

    proptest! {
        #[test]
        fn scale_equivariance(c in 0.01f64..100.0, q in 0.5f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = AwtlsAccumulator::new(AwtlsConfig { gamma: 1.0, ..Default::default() }).unwrap();
            let mut b = a;
            for _ in 0..8 {
                let x = rng.random_range(0.06..0.9);
                let y = q * x + rng.random_range(-0.05..0.05);
                let (vx, vy) = (rng.random_range(1e-5..1e-3), rng.random_range(1e-5..1e-3));
                a.push_pair(x, y, vx, vy).unwrap();
                b.push_pair(x, c * y, vx, c * c * vy).unwrap();
            }
            let qa = a.estimate_capacity().unwrap().q;
            let qb = b.estimate_capacity().unwrap().q;
            prop_assert!((qb - c * qa).abs() <= 1e-8 * (c * qa).abs());
        }
    }
}
