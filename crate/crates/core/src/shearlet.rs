//! Learnable non-separable shearlet filter bank.
//!
//! Every filter is assembled in the spatial domain from two building blocks:
//! a 9-tap one-dimensional low-pass `h` and a 17x17 directional high-pass
//! `P`. For scale `j` and shear `s` the (unnormalized) filter is
//!
//! ```text
//! q = (delta - h_{j+1} (x) h_{j+1}) * shear(P, s / 2^j)
//! ```
//!
//! where `h_l` is `h` dilated a-trous with `2^l - 1` zeros between taps and
//! `shear` resamples `P` along the sheared grid with linear interpolation
//! (vertical cone; the horizontal cone uses the transposed block). Each
//! filter is normalized to unit l2 norm, scaled by its weight `gamma_k`, and
//! periodized onto the image grid, so the stored transfer function is the
//! DFT of a real point-spread function and convolution is circular.
//!
//! The experts see each response pixel as independent, while white noise
//! filtered by a band-limited `k` is strongly correlated across pixels. The
//! system therefore reports a noise norm per filter,
//! `noise_norm_k^2 = gamma_k^2 * mean_w(|U_k(w)|^2 * S(w))` with `U_k` the
//! unit filter spectrum and `S = sum_j |U_j|^2` the frame density. For filters
//! with disjoint flat bands this makes the Gaussian limit of the product
//! exactly the noise-free-band Wiener shrinkage; a single all-pass filter
//! reduces it to `gamma_k^2 = |k_k|^2`. The mean is taken on a fixed grid
//! large enough to be exact for the filter supports, so noise norms do not
//! depend on the image shape.

use ndarray::{s, Array1, Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{check_shape, Error, Result};
use crate::fft::Fft2;

pub const NUM_CONES: usize = 2;
pub const NUM_SCALES: usize = 2;
pub const NUM_SHEARS: usize = 5;
pub const NUM_FILTERS: usize = NUM_CONES * NUM_SCALES * NUM_SHEARS;
pub const LOWPASS_TAPS: usize = 9;
pub const DIRECTIONAL_SIZE: usize = 17;
/// Smallest grid the bank is built on. Filters whose support exceeds the
/// grid wrap around (periodization of the spatial filter).
pub const MIN_SHAPE: usize = 16;

const INITIAL_GAMMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cone {
    Vertical,
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterIndex {
    pub cone: Cone,
    pub scale: usize,
    pub shear: i32,
}

impl FilterIndex {
    /// Cone-major ordering: `k = cone * 10 + scale * 5 + (shear + 2)`.
    pub fn from_flat(k: usize) -> Self {
        assert!(k < NUM_FILTERS, "filter index {k} out of range");
        let per_cone = NUM_SCALES * NUM_SHEARS;
        Self {
            cone: if k / per_cone == 0 { Cone::Vertical } else { Cone::Horizontal },
            scale: (k % per_cone) / NUM_SHEARS,
            shear: (k % NUM_SHEARS) as i32 - (NUM_SHEARS as i32 / 2),
        }
    }

    pub fn flat(&self) -> usize {
        let cone = match self.cone {
            Cone::Vertical => 0,
            Cone::Horizontal => 1,
        };
        cone * NUM_SCALES * NUM_SHEARS
            + self.scale * NUM_SHEARS
            + (self.shear + NUM_SHEARS as i32 / 2) as usize
    }

    pub fn shear_factor(&self) -> f64 {
        self.shear as f64 / (1usize << self.scale) as f64
    }

    fn lowpass_level(&self) -> u32 {
        self.scale as u32 + 1
    }

    /// Side length of the square spatial support of this filter.
    pub fn support(&self) -> usize {
        DIRECTIONAL_SIZE + dilated_len(self.lowpass_level()) - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShearletParams {
    pub h: Array1<f64>,
    pub p: Array2<f64>,
    pub gamma: Array1<f64>,
}

impl ShearletParams {
    pub fn new(h: Array1<f64>, p: Array2<f64>, gamma: Array1<f64>) -> Result<Self> {
        let params = Self { h, p, gamma };
        params.validate()?;
        Ok(params)
    }

    /// Binomial low-pass, x-derivative-of-Gaussian directional block and
    /// constant weights. Already satisfies the constraint set.
    pub fn initial() -> Self {
        let mut h = Array1::zeros(LOWPASS_TAPS);
        let mut c = 1.0;
        for i in 0..LOWPASS_TAPS {
            h[i] = c;
            c = c * (LOWPASS_TAPS - 1 - i) as f64 / (i + 1) as f64;
        }
        let half = (DIRECTIONAL_SIZE / 2) as f64;
        let p = Array2::from_shape_fn((DIRECTIONAL_SIZE, DIRECTIONAL_SIZE), |(y, x)| {
            let (x, y) = (x as f64 - half, y as f64 - half);
            x * (-(x * x + y * y) / (2.0 * 2.5 * 2.5)).exp()
        });
        let mut params = Self {
            h,
            p,
            gamma: Array1::from_elem(NUM_FILTERS, INITIAL_GAMMA),
        };
        let pn = params.p.iter().map(|v| v * v).sum::<f64>().sqrt();
        params.p.mapv_inplace(|v| v / pn);
        params.project();
        params
    }

    pub fn zeros_like() -> Self {
        Self {
            h: Array1::zeros(LOWPASS_TAPS),
            p: Array2::zeros((DIRECTIONAL_SIZE, DIRECTIONAL_SIZE)),
            gamma: Array1::zeros(NUM_FILTERS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h.len() != LOWPASS_TAPS {
            return Err(Error::CountMismatch { what: "low-pass taps", expected: LOWPASS_TAPS, found: self.h.len() });
        }
        check_shape((DIRECTIONAL_SIZE, DIRECTIONAL_SIZE), self.p.dim())?;
        if self.gamma.len() != NUM_FILTERS {
            return Err(Error::CountMismatch { what: "filter weights", expected: NUM_FILTERS, found: self.gamma.len() });
        }
        let all = self.h.iter().chain(self.p.iter()).chain(self.gamma.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite shearlet parameter".into()));
        }
        if self.gamma.iter().any(|&g| g < 0.0) {
            return Err(Error::InvalidParameter("negative filter weight".into()));
        }
        Ok(())
    }

    /// Projection onto `{ |h| = 1, mean(P) = 0, gamma >= 0 }`.
    pub fn project(&mut self) {
        let nh = self.h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nh > 0.0 {
            self.h.mapv_inplace(|v| v / nh);
        } else {
            self.h = Self::initial().h;
        }
        let mean = self.p.mean().unwrap_or(0.0);
        self.p.mapv_inplace(|v| v - mean);
        self.gamma.mapv_inplace(|g| g.max(0.0));
    }

    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        let nh = self.h.iter().map(|v| v * v).sum::<f64>().sqrt();
        (nh - 1.0).abs() <= tol
            && self.p.mean().unwrap_or(0.0).abs() <= tol
            && self.gamma.iter().all(|&g| g >= 0.0)
    }
}

fn dilated_len(level: u32) -> usize {
    (LOWPASS_TAPS - 1) * (1 << level) + 1
}

fn dilate(h: &Array1<f64>, level: u32) -> Array1<f64> {
    let step = 1usize << level;
    let mut out = Array1::zeros(dilated_len(level));
    for (i, &v) in h.iter().enumerate() {
        out[i * step] = v;
    }
    out
}

/// `delta - hd (x) hd` with the impulse at the center.
fn highpass_residual(hd: &Array1<f64>) -> Array2<f64> {
    let len = hd.len();
    let mut r = Array2::from_shape_fn((len, len), |(i, j)| -hd[i] * hd[j]);
    r[[len / 2, len / 2]] += 1.0;
    r
}

fn shear_block(p: &Array2<f64>, a: f64, cone: Cone) -> Array2<f64> {
    let size = DIRECTIONAL_SIZE;
    let half = (size / 2) as f64;
    let mut b = Array2::zeros((size, size));
    for y in 0..size {
        let offset = a * (y as f64 - half);
        for x in 0..size {
            let src = x as f64 - offset;
            let x0 = src.floor();
            let t = src - x0;
            let x0 = x0 as isize;
            let mut v = 0.0;
            if x0 >= 0 && (x0 as usize) < size {
                v += (1.0 - t) * p[[y, x0 as usize]];
            }
            if x0 + 1 >= 0 && ((x0 + 1) as usize) < size {
                v += t * p[[y, (x0 + 1) as usize]];
            }
            b[[y, x]] = v;
        }
    }
    match cone {
        Cone::Vertical => b,
        Cone::Horizontal => b.reversed_axes().as_standard_layout().to_owned(),
    }
}

fn shear_block_adjoint(gb: &Array2<f64>, a: f64, cone: Cone) -> Array2<f64> {
    let size = DIRECTIONAL_SIZE;
    let half = (size / 2) as f64;
    let gb = match cone {
        Cone::Vertical => gb.to_owned(),
        Cone::Horizontal => gb.t().to_owned(),
    };
    let mut gp = Array2::zeros((size, size));
    for y in 0..size {
        let offset = a * (y as f64 - half);
        for x in 0..size {
            let src = x as f64 - offset;
            let x0 = src.floor();
            let t = src - x0;
            let x0 = x0 as isize;
            let g = gb[[y, x]];
            if x0 >= 0 && (x0 as usize) < size {
                gp[[y, x0 as usize]] += (1.0 - t) * g;
            }
            if x0 + 1 >= 0 && ((x0 + 1) as usize) < size {
                gp[[y, (x0 + 1) as usize]] += t * g;
            }
        }
    }
    gp
}

fn conv_full(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::zeros((ra + rb - 1, ca + cb - 1));
    for ((i, j), &av) in a.indexed_iter() {
        if av == 0.0 {
            continue;
        }
        let mut win = out.slice_mut(s![i..i + rb, j..j + cb]);
        win.scaled_add(av, b);
    }
    out
}

/// Gradients of `<g, conv_full(a, b)>` with respect to `a` and `b`.
fn conv_full_backward(g: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut ga = Array2::zeros((ra, ca));
    let mut gb = Array2::zeros((rb, cb));
    for i in 0..ra {
        for j in 0..ca {
            let win = g.slice(s![i..i + rb, j..j + cb]);
            ga[[i, j]] = (&win * b).sum();
            let av = a[[i, j]];
            if av != 0.0 {
                gb.scaled_add(av, &win);
            }
        }
    }
    (ga, gb)
}

/// Shape-independent spatial filters and the intermediates needed to
/// differentiate them.
#[derive(Clone, Debug)]
struct FilterBank {
    residuals: Vec<Array2<f64>>,
    blocks: Vec<Array2<f64>>,
    /// Unit-norm filters (before `gamma`).
    unit: Vec<Array2<f64>>,
    raw_norms: Vec<f64>,
}

impl FilterBank {
    fn new(params: &ShearletParams) -> Self {
        let residuals: Vec<_> = (0..NUM_SCALES)
            .map(|j| highpass_residual(&dilate(&params.h, j as u32 + 1)))
            .collect();
        let mut blocks = Vec::with_capacity(NUM_FILTERS);
        let mut unit = Vec::with_capacity(NUM_FILTERS);
        let mut raw_norms = Vec::with_capacity(NUM_FILTERS);
        for k in 0..NUM_FILTERS {
            let idx = FilterIndex::from_flat(k);
            let b = shear_block(&params.p, idx.shear_factor(), idx.cone);
            let q = conv_full(&residuals[idx.scale], &b);
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            unit.push(if norm > 0.0 { q / norm } else { q });
            raw_norms.push(norm);
            blocks.push(b);
        }
        Self { residuals, blocks, unit, raw_norms }
    }
}

fn periodize(patch: &Array2<f64>, scale: f64, shape: (usize, usize)) -> Array2<f64> {
    let (n, m) = shape;
    let c = (patch.nrows() / 2) as isize;
    let mut grid = Array2::zeros(shape);
    for ((i, j), &v) in patch.indexed_iter() {
        let gi = (i as isize - c).rem_euclid(n as isize) as usize;
        let gj = (j as isize - c).rem_euclid(m as isize) as usize;
        grid[[gi, gj]] += scale * v;
    }
    grid
}

fn gather(grid: &Array2<f64>, size: usize) -> Array2<f64> {
    let (n, m) = grid.dim();
    let c = (size / 2) as isize;
    Array2::from_shape_fn((size, size), |(i, j)| {
        let gi = (i as isize - c).rem_euclid(n as isize) as usize;
        let gj = (j as isize - c).rem_euclid(m as isize) as usize;
        grid[[gi, gj]]
    })
}

/// A filter bank realized on a fixed `n x m` grid.
#[derive(Clone, Debug)]
pub struct ShearletSystem {
    params: ShearletParams,
    shape: (usize, usize),
    bank: FilterBank,
    filters: Vec<Array2<f64>>,
    transfer: Vec<Array2<Complex64>>,
    filter_norms: Vec<f64>,
    /// Spectra of the unit filters on the density grid.
    unit_transfer: Vec<Array2<Complex64>>,
    /// `sum_j |U_j|^2`.
    frame_density: Array2<f64>,
    /// `mean_w(|U_k|^2 * S)` (before `gamma_k^2`).
    band_density: Vec<f64>,
    density_fft: Fft2,
    fft: Fft2,
}

/// Smallest power of two above the largest frequency of `|U_k|^2 * S`.
fn density_grid_size(unit: &[Array2<f64>]) -> usize {
    let support = unit.iter().map(|u| u.nrows().max(u.ncols())).max().unwrap_or(1);
    (2 * (support - 1) + 1).next_power_of_two()
}

impl ShearletSystem {
    pub fn build(params: &ShearletParams, shape: (usize, usize)) -> Result<Self> {
        if shape.0 < MIN_SHAPE || shape.1 < MIN_SHAPE {
            return Err(Error::ShapeTooSmall { shape, min: MIN_SHAPE });
        }
        params.validate()?;
        let bank = FilterBank::new(params);
        let fft = Fft2::new(shape.0, shape.1);
        let filters: Vec<_> = (0..NUM_FILTERS)
            .map(|k| periodize(&bank.unit[k], params.gamma[k], shape))
            .collect();
        let transfer: Vec<_> = filters.par_iter().map(|f| fft.forward_real(f)).collect();
        let filter_norms = filters
            .iter()
            .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let dn = density_grid_size(&bank.unit);
        let density_fft = Fft2::new(dn, dn);
        let unit_transfer: Vec<_> =
            bank.unit.par_iter().map(|u| density_fft.forward_real(&periodize(u, 1.0, (dn, dn)))).collect();
        let mut frame_density = Array2::zeros((dn, dn));
        for u in &unit_transfer {
            Zip::from(&mut frame_density).and(u).for_each(|d, z| *d += z.norm_sqr());
        }
        let count = (dn * dn) as f64;
        let band_density = unit_transfer
            .iter()
            .map(|u| Zip::from(u).and(&frame_density).fold(0.0, |acc, z, &d| acc + z.norm_sqr() * d) / count)
            .collect();
        Ok(Self {
            params: params.clone(),
            shape,
            bank,
            filters,
            transfer,
            filter_norms,
            unit_transfer,
            frame_density,
            band_density,
            density_fft,
            fft,
        })
    }

    pub fn params(&self) -> &ShearletParams {
        &self.params
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn num_filters(&self) -> usize {
        NUM_FILTERS
    }

    pub fn transfer(&self) -> &[Array2<Complex64>] {
        &self.transfer
    }

    /// Point-spread functions `gamma_k * k_k` on the grid (origin at `[0, 0]`).
    pub fn spatial_filters(&self) -> &[Array2<f64>] {
        &self.filters
    }

    pub fn filter_norms(&self) -> &[f64] {
        &self.filter_norms
    }

    /// Per-pixel noise norm each expert assumes; see the module notes.
    pub fn noise_norms(&self) -> Vec<f64> {
        self.band_density.iter().zip(&self.params.gamma).map(|(&b, &g)| g * b.sqrt()).collect()
    }

    /// `sum_j |U_j(w)|^2` of the unit filters, sampled on the density grid
    /// (origin at `[0, 0]`).
    pub fn frame_density(&self) -> &Array2<f64> {
        &self.frame_density
    }

    /// Gradients of `sum_k coeffs[k] * noise_norm_k^2` with respect to `gamma`
    /// and to the unit filters placed on the density grid.
    pub(crate) fn noise_norm_grads(&self, coeffs: &[f64]) -> (Vec<f64>, Vec<Array2<f64>>) {
        let gamma = &self.params.gamma;
        let dgamma = (0..NUM_FILTERS).map(|k| 2.0 * coeffs[k] * gamma[k] * self.band_density[k]).collect();
        // d/dA_j(w) = (c_j g_j^2 S(w) + sum_k c_k g_k^2 A_k(w)) / N with A = |U|^2,
        // and d/du of mean(W |U|^2) is 2 * ifft(W U).
        let mut shared = Array2::<f64>::zeros(self.frame_density.dim());
        for k in 0..NUM_FILTERS {
            let c = coeffs[k] * gamma[k] * gamma[k];
            if c != 0.0 {
                Zip::from(&mut shared).and(&self.unit_transfer[k]).for_each(|s, z| *s += c * z.norm_sqr());
            }
        }
        let dunit = (0..NUM_FILTERS)
            .into_par_iter()
            .map(|j| {
                let c = coeffs[j] * gamma[j] * gamma[j];
                let mut spec = self.unit_transfer[j].clone();
                Zip::from(&mut spec)
                    .and(&self.frame_density)
                    .and(&shared)
                    .for_each(|z, &d, &s| *z *= 2.0 * (c * d + s));
                self.density_fft.inverse_real(&spec)
            })
            .collect();
        (dgamma, dunit)
    }

    /// Unit-norm filters on their own support, independent of the grid.
    pub fn unit_filter(&self, k: usize) -> &Array2<f64> {
        &self.bank.unit[k]
    }

    pub(crate) fn fft(&self) -> &Fft2 {
        &self.fft
    }

    /// Circular convolution of `x` with each filter.
    pub fn analyze(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        check_shape(self.shape, x.dim())?;
        Ok(self.analyze_spectrum(&self.fft.forward_real(x)))
    }

    pub(crate) fn analyze_spectrum(&self, spec: &Array2<Complex64>) -> Vec<Array2<f64>> {
        let pairs: Vec<(Array2<f64>, Array2<f64>)> = self
            .transfer
            .par_chunks(2)
            .map(|t| {
                let a = &t[0] * spec;
                let b = &t[1] * spec;
                self.fft.inverse_real_pair(&a, &b)
            })
            .collect();
        pairs.into_iter().flat_map(|(a, b)| [a, b]).collect()
    }

    /// `sum_k K_k^T r_k`.
    pub fn adjoint(&self, r: &[Array2<f64>]) -> Result<Array2<f64>> {
        if r.len() != NUM_FILTERS {
            return Err(Error::CountMismatch { what: "filter responses", expected: NUM_FILTERS, found: r.len() });
        }
        for rk in r {
            check_shape(self.shape, rk.dim())?;
        }
        let parts: Vec<Array2<Complex64>> = r
            .par_chunks(2)
            .zip(self.transfer.par_chunks(2))
            .map(|(rs, ts)| {
                let (sa, sb) = self.fft.forward_real_pair(&rs[0], &rs[1]);
                let mut acc = Array2::zeros(self.shape);
                Zip::from(&mut acc)
                    .and(&sa)
                    .and(&sb)
                    .and(&ts[0])
                    .and(&ts[1])
                    .for_each(|o, &a, &b, &ta, &tb| *o = ta.conj() * a + tb.conj() * b);
                acc
            })
            .collect();
        let mut total = Array2::<Complex64>::zeros(self.shape);
        for p in &parts {
            total += p;
        }
        Ok(self.fft.inverse_real(&total))
    }

    /// Chain rule from gradients with respect to the grid point-spread
    /// functions (`spatial_filters`) to gradients with respect to `h`, `P`
    /// and `gamma`.
    pub fn backprop(&self, grid_grads: &[Array2<f64>]) -> Result<ShearletParams> {
        self.backprop_with_units(grid_grads, None)
    }

    /// `backprop` plus gradients with respect to the periodized unit filters
    /// and extra `gamma` terms, as returned by `noise_norm_grads`.
    pub(crate) fn backprop_with_units(
        &self,
        grid_grads: &[Array2<f64>],
        units: Option<(&[f64], &[Array2<f64>])>,
    ) -> Result<ShearletParams> {
        if grid_grads.len() != NUM_FILTERS {
            return Err(Error::CountMismatch { what: "filter gradients", expected: NUM_FILTERS, found: grid_grads.len() });
        }
        if let Some((g, u)) = units {
            if g.len() != NUM_FILTERS || u.len() != NUM_FILTERS {
                return Err(Error::CountMismatch { what: "unit filter gradients", expected: NUM_FILTERS, found: u.len() });
            }
        }
        let per_filter: Vec<(f64, Array2<f64>, Array2<f64>)> = (0..NUM_FILTERS)
            .into_par_iter()
            .map(|k| {
                let idx = FilterIndex::from_flat(k);
                let unit = &self.bank.unit[k];
                let gpatch = gather(&grid_grads[k], unit.nrows());
                let mut dgamma = (&gpatch * unit).sum();
                if let Some((g, _)) = units {
                    dgamma += g[k];
                }
                let norm = self.bank.raw_norms[k];
                let residual = &self.bank.residuals[idx.scale];
                if norm == 0.0 {
                    return (dgamma, Array2::zeros(residual.dim()), Array2::zeros((DIRECTIONAL_SIZE, DIRECTIONAL_SIZE)));
                }
                let mut dunit = gpatch * self.params.gamma[k];
                if let Some((_, u)) = units {
                    dunit += &gather(&u[k], unit.nrows());
                }
                let radial = (&dunit * unit).sum();
                let dq = (&dunit - &(unit * radial)) / norm;
                let (dres, dblock) = conv_full_backward(&dq, residual, &self.bank.blocks[k]);
                let dp = shear_block_adjoint(&dblock, idx.shear_factor(), idx.cone);
                (dgamma, dres, dp)
            })
            .collect();

        let mut grad = ShearletParams::zeros_like();
        for (k, (dgamma, dres, dp)) in per_filter.into_iter().enumerate() {
            let idx = FilterIndex::from_flat(k);
            grad.gamma[k] = dgamma;
            grad.p += &dp;
            let level = idx.lowpass_level();
            let hd = dilate(&self.params.h, level);
            let step = 1usize << level;
            for t in 0..LOWPASS_TAPS {
                let a = t * step;
                let mut acc = 0.0;
                for b in 0..hd.len() {
                    acc += (dres[[a, b]] + dres[[b, a]]) * hd[b];
                }
                grad.h[t] -= acc;
            }
        }
        Ok(grad)
    }
}
