//! One-dimensional Gaussian mixture experts on a fixed, equispaced mean grid.
//!
//! All components share the noise-adapted variance
//! `var(zeta) = base_std^2 + zeta^2 * noise_norm^2`, where `noise_norm^2` is
//! the noise power the expert attributes to one response pixel when the image
//! is corrupted by white Gaussian noise of standard deviation `zeta` (see
//! `ShearletSystem::noise_norms`).
//!
//! Evaluation sweeps outward from the mean nearest to `v` and generates the
//! Gaussian factors with a multiplicative recurrence (the exponent is a
//! quadratic in the component index), stopping once factors drop below
//! `TAIL`. A log-domain evaluation over all components is used when the
//! weights near `v` vanish.

use crate::error::{Error, Result};

const TAIL: f64 = 1e-30;
const MIN_WINDOW_MASS: f64 = 1e-10;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanGrid {
    pub min: f64,
    pub max: f64,
    pub len: usize,
}

impl MeanGrid {
    /// 125 means on `[-0.5, 0.5]`.
    pub fn standard() -> Self {
        Self { min: -0.5, max: 0.5, len: 125 }
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.len - 1) as f64
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step()
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.mean(i)).collect()
    }

    /// Number of free (mirrored) weights, `ceil(len / 2)`.
    pub fn free_len(&self) -> usize {
        self.len.div_ceil(2)
    }

    /// Full-grid indices `(upper, lower)` sharing free weight `j`; free index
    /// 0 is the innermost pair (the center for odd grids).
    pub fn mirror(&self, j: usize) -> (usize, usize) {
        let upper = self.len / 2 + j;
        let lower = self.len - 1 - upper;
        (upper, lower)
    }

    /// Multiplicity of free weight `j` in the full weight vector.
    pub fn multiplicity(&self, j: usize) -> f64 {
        let (u, l) = self.mirror(j);
        if u == l {
            1.0
        } else {
            2.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len < 2 || !(self.max > self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidParameter(format!("invalid mean grid {self:?}")));
        }
        Ok(())
    }
}

/// Values of `log psi` and its derivatives at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExpertEval {
    pub log_density: f64,
    /// d log psi / dv
    pub dlog: f64,
    /// d^2 log psi / dv^2
    pub d2log: f64,
    /// d (d log psi / dv) / d var
    pub dlog_dvar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmExpert {
    /// Full weight vector on the simplex.
    pub weights: Vec<f64>,
    pub grid: MeanGrid,
    pub base_std: f64,
    pub noise_norm: f64,
}

impl GmmExpert {
    pub fn new(weights: Vec<f64>, grid: MeanGrid, base_std: f64, noise_norm: f64) -> Result<Self> {
        grid.validate()?;
        if weights.len() != grid.len {
            return Err(Error::CountMismatch { what: "mixture weights", expected: grid.len, found: weights.len() });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidParameter("mixture weights must be nonnegative and not all zero".into()));
        }
        Ok(Self { weights, grid, base_std, noise_norm })
    }

    /// Expert with mirrored free weights (free index 0 = innermost).
    pub fn from_free(free: &[f64], grid: MeanGrid, base_std: f64, noise_norm: f64) -> Result<Self> {
        if free.len() != grid.free_len() {
            return Err(Error::CountMismatch { what: "free weights", expected: grid.free_len(), found: free.len() });
        }
        let mut weights = vec![0.0; grid.len];
        for (j, &w) in free.iter().enumerate() {
            let (u, l) = grid.mirror(j);
            weights[u] = w;
            weights[l] = w;
        }
        Self::new(weights, grid, base_std, noise_norm)
    }

    pub fn variance(&self, zeta: f64) -> f64 {
        self.base_std * self.base_std + zeta * zeta * self.noise_norm * self.noise_norm
    }

    /// `(log psi(v), d log psi / dv)` at noise level `zeta`.
    pub fn log_and_dlog(&self, v: f64, zeta: f64) -> Result<(f64, f64)> {
        if !(zeta >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise level must be nonnegative, got {zeta}")));
        }
        let e = self.at_variance(self.variance(zeta))?.eval(v);
        Ok((e.log_density, e.dlog))
    }

    pub fn at_variance(&self, var: f64) -> Result<ExpertAtVariance<'_>> {
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::NonPositiveVariance(var));
        }
        let step = self.grid.step();
        Ok(ExpertAtVariance {
            expert: self,
            var,
            inv_var: 1.0 / var,
            step,
            rho: (-step * step / var).exp(),
            log_norm: -0.5 * (LN_2PI + var.ln()),
            max_weight: self.weights.iter().cloned().fold(0.0, f64::max),
        })
    }
}

/// An expert with its variance fixed, ready for repeated evaluation.
#[derive(Clone, Debug)]
pub struct ExpertAtVariance<'a> {
    expert: &'a GmmExpert,
    var: f64,
    inv_var: f64,
    step: f64,
    rho: f64,
    log_norm: f64,
    max_weight: f64,
}

#[derive(Default)]
struct Moments {
    mass: f64,
    m1: f64,
    m2: f64,
    m3: f64,
}

impl ExpertAtVariance<'_> {
    pub fn variance(&self) -> f64 {
        self.var
    }

    fn nearest(&self, v: f64) -> usize {
        let g = &self.expert.grid;
        let t = ((v - g.min) / self.step).round();
        if t.is_nan() || t <= 0.0 {
            0
        } else {
            (t as usize).min(g.len - 1)
        }
    }

    /// Calls `f(i, E_i, d_i)` with `E_i = exp(q_i - q_c)`, `q_i = -(v - mu_i)^2 / (2 var)`
    /// and `d_i = mu_i - v`, over the window around the nearest mean `c`.
    #[inline(always)]
    fn sweep(&self, v: f64, c: usize, mut f: impl FnMut(usize, f64, f64)) {
        let g = &self.expert.grid;
        let len = self.expert.weights.len();
        let d_c = g.mean(c) - v;
        f(c, 1.0, d_c);
        // upward: q_{i+1} - q_i = -step (mu_i + mu_{i+1} - 2v) / (2 var)
        let mut e = 1.0;
        let mut d = d_c;
        let mut r = (-self.step * (2.0 * d_c + self.step) * 0.5 * self.inv_var).exp();
        for i in c + 1..len {
            e *= r;
            if e < TAIL {
                break;
            }
            d += self.step;
            f(i, e, d);
            r *= self.rho;
        }
        let mut e = 1.0;
        let mut d = d_c;
        let mut r = (-self.step * (-2.0 * d_c + self.step) * 0.5 * self.inv_var).exp();
        for i in (0..c).rev() {
            e *= r;
            if e < TAIL {
                break;
            }
            d -= self.step;
            f(i, e, d);
            r *= self.rho;
        }
    }

    /// Weighted moments of `delta_i = mu_i - v` (normalized by mass) and the
    /// log of the mass relative to `exp(q_ref)`.
    /// The flag is false when the log-domain fallback was used.
    fn moments(&self, v: f64) -> (Moments, f64, bool) {
        let g = &self.expert.grid;
        let w = &self.expert.weights;
        let c = self.nearest(v);
        let mut mo = Moments::default();
        self.sweep(v, c, |i, e, d| {
            let t = w[i] * e;
            mo.mass += t;
            mo.m1 += t * d;
            mo.m2 += t * d * d;
            mo.m3 += t * d * d * d;
        });
        let mu_c = g.mean(c);
        let q_c = -(v - mu_c) * (v - mu_c) * 0.5 * self.inv_var;
        if mo.mass >= MIN_WINDOW_MASS * self.max_weight {
            return (mo, q_c, true);
        }
        // Weights near v vanish: exact log-domain sum over every component.
        let q: Vec<f64> = (0..g.len)
            .map(|i| {
                let d = v - g.mean(i);
                if w[i] > 0.0 {
                    w[i].ln() - d * d * 0.5 * self.inv_var
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let q_max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut mo = Moments::default();
        for (i, &qi) in q.iter().enumerate() {
            let t = (qi - q_max).exp();
            let d = g.mean(i) - v;
            mo.mass += t;
            mo.m1 += t * d;
            mo.m2 += t * d * d;
            mo.m3 += t * d * d * d;
        }
        (mo, q_max, false)
    }

    pub fn eval(&self, v: f64) -> ExpertEval {
        self.eval_cached(v).0
    }

    /// `eval` plus the window mass needed by `accumulate_weight_grad_cached`
    /// (zero when the window was too light to use).
    pub fn eval_cached(&self, v: f64) -> (ExpertEval, f64) {
        let (mo, q_ref, windowed) = self.moments(v);
        let m1 = mo.m1 / mo.mass;
        let m2 = mo.m2 / mo.mass;
        let m3 = mo.m3 / mo.mass;
        let spread = (m2 - m1 * m1).max(0.0);
        let iv = self.inv_var;
        let eval = ExpertEval {
            log_density: mo.mass.ln() + q_ref + self.log_norm,
            dlog: m1 * iv,
            d2log: -iv + spread * iv * iv,
            dlog_dvar: -m1 * iv * iv + 0.5 * (m3 - m1 * m2) * iv * iv * iv,
        };
        (eval, if windowed { mo.mass } else { 0.0 })
    }

    /// `d log psi / dv` only.
    pub fn dlog(&self, v: f64) -> f64 {
        let (mo, _, _) = self.moments(v);
        mo.m1 / mo.mass * self.inv_var
    }

    /// `log psi(v)` only.
    pub fn log_density(&self, v: f64) -> f64 {
        let (mo, q_ref, _) = self.moments(v);
        mo.mass.ln() + q_ref + self.log_norm
    }

    /// Adds `coeff * d(d log psi / dv)/d w_j` to `out[j]` for every full
    /// index `j`, treating the weights as independent coordinates.
    pub fn accumulate_weight_grad(&self, v: f64, coeff: f64, out: &mut [f64]) {
        let (eval, mass) = self.eval_cached(v);
        self.accumulate_weight_grad_cached(v, eval.dlog, mass, coeff, out);
    }

    /// `accumulate_weight_grad` reusing `(eval.dlog, mass)` from `eval_cached`.
    pub fn accumulate_weight_grad_cached(&self, v: f64, dlog: f64, mass: f64, coeff: f64, out: &mut [f64]) {
        if mass <= 0.0 {
            self.accumulate_weight_grad_log_domain(v, coeff, out);
            return;
        }
        let out = &mut out[..self.expert.weights.len()];
        let scale = coeff / mass;
        self.sweep(v, self.nearest(v), |i, e, d| {
            out[i] += scale * e * (d * self.inv_var - dlog);
        });
    }

    fn accumulate_weight_grad_log_domain(&self, v: f64, coeff: f64, out: &mut [f64]) {
        let g = &self.expert.grid;
        let w = &self.expert.weights;
        let q: Vec<f64> = (0..g.len).map(|i| -(v - g.mean(i)).powi(2) * 0.5 * self.inv_var).collect();
        let lw: Vec<f64> = q
            .iter()
            .zip(w)
            .map(|(&qi, &wi)| if wi > 0.0 { wi.ln() + qi } else { f64::NEG_INFINITY })
            .collect();
        let q_max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut mass = 0.0;
        let mut m1 = 0.0;
        for (i, &l) in lw.iter().enumerate() {
            let t = (l - q_max).exp();
            mass += t;
            m1 += t * (g.mean(i) - v);
        }
        let phi = m1 / mass * self.inv_var;
        for i in 0..g.len {
            let ratio = (q[i] - q_max).exp() / mass;
            out[i] += coeff * ratio * ((g.mean(i) - v) * self.inv_var - phi);
        }
    }
}
