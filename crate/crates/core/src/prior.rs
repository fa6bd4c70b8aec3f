//! Image priors: the product-of-GMM-experts diffusion model and a
//! Charbonnier-smoothed total-variation baseline.
//!
//! The model density at noise level `zeta` is
//! `p(x) ~ prod_{k,i,j} psi_k((K_k x)_{ij}; w_k, zeta)`. Energies omit the
//! normalization constant of the product.

use ndarray::{Array1, Array2, Zip};
use rayon::prelude::*;

use crate::error::{check_shape, Error, Result};
use crate::gmm::{GmmExpert, MeanGrid};
use crate::shearlet::{ShearletParams, ShearletSystem, NUM_FILTERS};

pub type RealImage = Array2<f64>;

/// Anything that can act as `log p(x, zeta)` for real images.
pub trait ImagePrior: Sync {
    /// `-log p(x, zeta)` up to a constant.
    fn energy(&self, x: &RealImage, zeta: f64) -> Result<f64>;
    /// `grad_x log p(x, zeta)`.
    fn score(&self, x: &RealImage, zeta: f64) -> Result<RealImage>;
}

/// Shape-independent learnable and fixed parameters of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shearlet: ShearletParams,
    /// One row of mirrored free weights per filter.
    pub free_weights: Array2<f64>,
    pub grid: MeanGrid,
    pub base_std: f64,
}

impl ModelParams {
    /// Initial model: shearlet defaults and a peaked weight profile
    /// `w(mu) ~ exp(-mu^2 / (2 * 0.1^2))` for every expert.
    pub fn initial() -> Self {
        let grid = MeanGrid::standard();
        let profile: Vec<f64> = (0..grid.free_len())
            .map(|j| {
                let mu = grid.mean(grid.mirror(j).0);
                (-mu * mu / (2.0 * 0.1 * 0.1)).exp()
            })
            .collect();
        let total: f64 = profile.iter().enumerate().map(|(j, w)| grid.multiplicity(j) * w).sum();
        let free_weights =
            Array2::from_shape_fn((NUM_FILTERS, grid.free_len()), |(_, j)| profile[j] / total);
        Self { shearlet: ShearletParams::initial(), free_weights, grid, base_std: grid.step() }
    }

    /// `9 + 17^2 + o * ceil(L/2) + o`.
    pub fn learnable_count(&self) -> usize {
        self.shearlet.h.len() + self.shearlet.p.len() + self.free_weights.len() + self.shearlet.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.shearlet.validate()?;
        self.grid.validate()?;
        if self.free_weights.dim() != (NUM_FILTERS, self.grid.free_len()) {
            return Err(Error::InvalidParameter(format!(
                "free weight table has shape {:?}, expected {:?}",
                self.free_weights.dim(),
                (NUM_FILTERS, self.grid.free_len())
            )));
        }
        if !(self.base_std > 0.0) || !self.base_std.is_finite() {
            return Err(Error::InvalidParameter(format!("base std {}", self.base_std)));
        }
        Ok(())
    }

    /// Learnable parameters in the order `h, P, free weights, gamma`.
    pub fn to_flat(&self) -> Vec<f64> {
        let s = &self.shearlet;
        s.h.iter().chain(s.p.iter()).chain(self.free_weights.iter()).chain(s.gamma.iter()).cloned().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.learnable_count();
        if flat.len() != n {
            return Err(Error::CountMismatch { what: "learnable parameters", expected: n, found: flat.len() });
        }
        let (h, rest) = flat.split_at(self.shearlet.h.len());
        let (p, rest) = rest.split_at(self.shearlet.p.len());
        let (w, g) = rest.split_at(self.free_weights.len());
        self.shearlet.h.assign(&Array1::from_vec(h.to_vec()));
        self.shearlet.p.as_slice_mut().expect("standard layout").copy_from_slice(p);
        self.free_weights.as_slice_mut().expect("standard layout").copy_from_slice(w);
        self.shearlet.gamma.assign(&Array1::from_vec(g.to_vec()));
        Ok(())
    }

    /// Projection onto the constraint set: shearlet constraints and, per
    /// expert, the Euclidean projection of the free weights onto
    /// `{ w >= 0, sum_j multiplicity_j * w_j = 1 }` so the mirrored full
    /// weight vector lies on the unit simplex.
    pub fn project(&mut self) {
        self.shearlet.project();
        let mult: Vec<f64> = (0..self.grid.free_len()).map(|j| self.grid.multiplicity(j)).collect();
        for mut row in self.free_weights.rows_mut() {
            let projected = crate::simplex::project_weighted(row.as_slice().expect("row"), &mult);
            row.assign(&Array1::from_vec(projected));
        }
    }

    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        let mult: Vec<f64> = (0..self.grid.free_len()).map(|j| self.grid.multiplicity(j)).collect();
        self.shearlet.satisfies_constraints(tol)
            && self.free_weights.rows().into_iter().all(|row| {
                row.iter().all(|&w| w >= 0.0) && (row.iter().zip(&mult).map(|(w, a)| w * a).sum::<f64>() - 1.0).abs() <= tol
            })
    }
}

/// The model realized on a fixed image shape.
#[derive(Clone, Debug)]
pub struct PogmdmModel {
    params: ModelParams,
    system: ShearletSystem,
    experts: Vec<GmmExpert>,
}

/// Per-filter quantities of one forward pass, reused by the loss gradient.
pub(crate) struct ScoreParts {
    pub responses: Vec<Array2<f64>>,
    pub dlog: Vec<Array2<f64>>,
    pub score: RealImage,
    /// Per-point `(d2log, dlog_dvar, window mass)`, filled by `score_parts_cached`.
    pub cache: Vec<Array2<(f64, f64, f64)>>,
}

impl PogmdmModel {
    pub fn build(params: &ModelParams, shape: (usize, usize)) -> Result<Self> {
        params.validate()?;
        let system = ShearletSystem::build(&params.shearlet, shape)?;
        let experts = params
            .free_weights
            .rows()
            .into_iter()
            .zip(system.noise_norms())
            .map(|(row, norm)| GmmExpert::from_free(row.as_slice().expect("row"), params.grid, params.base_std, norm))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params: params.clone(), system, experts })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn system(&self) -> &ShearletSystem {
        &self.system
    }

    pub fn experts(&self) -> &[GmmExpert] {
        &self.experts
    }

    pub fn shape(&self) -> (usize, usize) {
        self.system.shape()
    }

    pub fn learnable_count(&self) -> usize {
        self.params.learnable_count()
    }

    fn check(&self, x: &RealImage, zeta: f64) -> Result<()> {
        check_shape(self.shape(), x.dim())?;
        if !(zeta >= 0.0) || !zeta.is_finite() {
            return Err(Error::InvalidParameter(format!("noise level must be nonnegative, got {zeta}")));
        }
        Ok(())
    }

    /// `-sum_k sum_ij log psi_k((K_k x)_ij, zeta)`.
    pub fn neg_log_prior(&self, x: &RealImage, zeta: f64) -> Result<f64> {
        self.check(x, zeta)?;
        let responses = self.system.analyze(x)?;
        let per_filter = responses
            .par_iter()
            .zip(self.experts.par_iter())
            .map(|(r, e)| {
                let ev = e.at_variance(e.variance(zeta))?;
                Ok(r.iter().map(|&v| ev.log_density(v)).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(-per_filter.iter().sum::<f64>())
    }

    /// `sum_k K_k^T psi_k'/psi_k (K_k x)`, the gradient of `-neg_log_prior`.
    pub fn prior_score(&self, x: &RealImage, zeta: f64) -> Result<RealImage> {
        Ok(self.score_parts(x, zeta)?.score)
    }

    pub(crate) fn score_parts(&self, x: &RealImage, zeta: f64) -> Result<ScoreParts> {
        self.check(x, zeta)?;
        let responses = self.system.analyze(x)?;
        let dlog = responses
            .par_iter()
            .zip(self.experts.par_iter())
            .map(|(r, e)| {
                let ev = e.at_variance(e.variance(zeta))?;
                Ok(r.mapv(|v| ev.dlog(v)))
            })
            .collect::<Result<Vec<_>>>()?;
        let score = self.system.adjoint(&dlog)?;
        Ok(ScoreParts { responses, dlog, score, cache: Vec::new() })
    }

    /// `score_parts` keeping the per-point quantities the loss gradient needs.
    pub(crate) fn score_parts_cached(&self, x: &RealImage, zeta: f64) -> Result<ScoreParts> {
        self.check(x, zeta)?;
        let responses = self.system.analyze(x)?;
        let (dlog, cache): (Vec<_>, Vec<_>) = responses
            .par_iter()
            .zip(self.experts.par_iter())
            .map(|(r, e)| {
                let ev = e.at_variance(e.variance(zeta))?;
                let mut dlog = Array2::zeros(r.dim());
                let mut cache = Array2::from_elem(r.dim(), (0.0, 0.0, 0.0));
                ndarray::Zip::from(&mut dlog).and(&mut cache).and(r).for_each(|d, c, &v| {
                    let (ev, mass) = ev.eval_cached(v);
                    *d = ev.dlog;
                    *c = (ev.d2log, ev.dlog_dvar, mass);
                });
                Ok((dlog, cache))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let score = self.system.adjoint(&dlog)?;
        Ok(ScoreParts { responses, dlog, score, cache })
    }

    /// Tweedie estimate `y + zeta^2 * score(y, zeta)`.
    pub fn denoise(&self, y: &RealImage, zeta: f64) -> Result<RealImage> {
        if zeta == 0.0 {
            check_shape(self.shape(), y.dim())?;
            return Ok(y.clone());
        }
        let s = self.prior_score(y, zeta)?;
        Ok(y + &(s * (zeta * zeta)))
    }
}

impl ImagePrior for PogmdmModel {
    fn energy(&self, x: &RealImage, zeta: f64) -> Result<f64> {
        self.neg_log_prior(x, zeta)
    }

    fn score(&self, x: &RealImage, zeta: f64) -> Result<RealImage> {
        self.prior_score(x, zeta)
    }
}

/// Forward differences with Neumann boundary (last difference is zero).
fn forward_diff(x: &RealImage) -> (RealImage, RealImage) {
    let (n, m) = x.dim();
    let mut dy = Array2::zeros((n, m));
    let mut dx = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            if i + 1 < n {
                dy[[i, j]] = x[[i + 1, j]] - x[[i, j]];
            }
            if j + 1 < m {
                dx[[i, j]] = x[[i, j + 1]] - x[[i, j]];
            }
        }
    }
    (dy, dx)
}

/// Adjoint of `forward_diff`.
fn forward_diff_adjoint(dy: &RealImage, dx: &RealImage) -> RealImage {
    let (n, m) = dy.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            if i + 1 < n {
                out[[i + 1, j]] += dy[[i, j]];
                out[[i, j]] -= dy[[i, j]];
            }
            if j + 1 < m {
                out[[i, j + 1]] += dx[[i, j]];
                out[[i, j]] -= dx[[i, j]];
            }
        }
    }
    out
}

/// `sum_ij sqrt(|grad x|_ij^2 + eps^2)`.
pub fn tv_energy(x: &RealImage, eps: f64) -> f64 {
    let (dy, dx) = forward_diff(x);
    Zip::from(&dy).and(&dx).fold(0.0, |acc, &a, &b| acc + (a * a + b * b + eps * eps).sqrt())
}

/// Negative gradient of the Charbonnier total variation.
pub fn tv_score(x: &RealImage, eps: f64) -> Result<RealImage> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("Charbonnier eps must be positive, got {eps}")));
    }
    let (mut dy, mut dx) = forward_diff(x);
    Zip::from(&mut dy).and(&mut dx).for_each(|a, b| {
        let norm = (*a * *a + *b * *b + eps * eps).sqrt();
        *a /= norm;
        *b /= norm;
    });
    Ok(-forward_diff_adjoint(&dy, &dx))
}

/// `weight * TV_eps` as a noise-independent prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharbonnierTv {
    pub eps: f64,
    pub weight: f64,
}

impl ImagePrior for CharbonnierTv {
    fn energy(&self, x: &RealImage, _zeta: f64) -> Result<f64> {
        Ok(self.weight * tv_energy(x, self.eps))
    }

    fn score(&self, x: &RealImage, _zeta: f64) -> Result<RealImage> {
        Ok(tv_score(x, self.eps)? * self.weight)
    }
}
