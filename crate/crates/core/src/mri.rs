//! Non-linear parallel-imaging forward model
//! `A(x, sigma) = (M F (sigma_1 .* x), ..., M F (sigma_c .* x))`
//! with a unitary 2-D DFT `F` and a binary sampling operator `M`.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_shape, Error, Result};
use crate::fft::Fft2;
use crate::mask::SamplingMask;
use crate::prior::RealImage;

pub type ComplexImage = Array2<Complex64>;

/// Coil sensitivity maps stacked as `(coil, row, column)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivities {
    maps: Array3<Complex64>,
}

impl Sensitivities {
    pub fn new(maps: Array3<Complex64>) -> Result<Self> {
        if maps.len_of(Axis(0)) == 0 {
            return Err(Error::InvalidParameter("at least one coil is required".into()));
        }
        if maps.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidParameter("non-finite sensitivity".into()));
        }
        Ok(Self { maps })
    }

    pub fn from_maps(maps: &[ComplexImage]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::InvalidParameter("at least one coil is required".into()))?;
        for m in maps {
            check_shape(first.dim(), m.dim())?;
        }
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        Self::new(ndarray::stack(Axis(0), &views).expect("equal shapes"))
    }

    pub fn zeros(coils: usize, shape: (usize, usize)) -> Self {
        Self { maps: Array3::zeros((coils, shape.0, shape.1)) }
    }

    pub fn coils(&self) -> usize {
        self.maps.len_of(Axis(0))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.maps.len_of(Axis(1)), self.maps.len_of(Axis(2)))
    }

    pub fn map(&self, i: usize) -> ArrayView2<'_, Complex64> {
        self.maps.index_axis(Axis(0), i)
    }

    pub fn maps(&self) -> &Array3<Complex64> {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.maps
    }

    pub fn into_maps(self) -> Array3<Complex64> {
        self.maps
    }

    /// `sum_i |sigma_i|^2` per pixel.
    pub fn sum_sq(&self) -> RealImage {
        self.maps.map(|v| v.norm_sqr()).sum_axis(Axis(0))
    }

    /// Scales every pixel so that `sum_i |sigma_i|^2 = 1` where it is nonzero.
    pub fn normalize(&mut self) {
        let rss = self.sum_sq().mapv(f64::sqrt);
        for mut coil in self.maps.outer_iter_mut() {
            Zip::from(&mut coil).and(&rss).for_each(|v, &r| {
                if r > 0.0 {
                    *v /= r;
                }
            });
        }
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Measured samples `z_i` (one row per coil, in mask order) with their mask.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    pub samples: Array2<Complex64>,
    pub mask: SamplingMask,
    pub noise_std: f64,
}

impl KSpaceData {
    pub fn new(samples: Array2<Complex64>, mask: SamplingMask, noise_std: f64) -> Result<Self> {
        if samples.ncols() != mask.count() {
            return Err(Error::CountMismatch { what: "samples per coil", expected: mask.count(), found: samples.ncols() });
        }
        if samples.nrows() == 0 {
            return Err(Error::InvalidParameter("at least one coil is required".into()));
        }
        Ok(Self { samples, mask, noise_std })
    }

    pub fn coils(&self) -> usize {
        self.samples.nrows()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    /// Adds circular complex Gaussian noise with `E|eps|^2 = std^2` per sample.
    pub fn add_noise(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = std / std::f64::consts::SQRT_2;
        for v in self.samples.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(re * s, im * s);
        }
        self.noise_std = (self.noise_std * self.noise_std + std * std).sqrt();
    }
}

/// The acquisition operator for a fixed mask.
#[derive(Clone, Debug)]
pub struct MriOperator {
    fft: Fft2,
    mask: SamplingMask,
    indices: Vec<usize>,
}

impl MriOperator {
    pub fn new(mask: &SamplingMask) -> Self {
        let (n, m) = mask.shape();
        Self { fft: Fft2::new(n, m), indices: mask.indices(), mask: mask.clone() }
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    fn check(&self, x: &ComplexImage, s: &Sensitivities) -> Result<()> {
        check_shape(self.shape(), x.dim())?;
        check_shape(self.shape(), s.shape())
    }

    fn check_data(&self, z: &KSpaceData, s: &Sensitivities) -> Result<()> {
        check_shape(self.shape(), z.shape())?;
        if z.mask.bits() != self.mask.bits() {
            return Err(Error::InvalidParameter("k-space data was acquired with a different mask".into()));
        }
        if z.coils() != s.coils() {
            return Err(Error::CountMismatch { what: "coils", expected: s.coils(), found: z.coils() });
        }
        Ok(())
    }

    /// `M F u` for one image.
    pub fn sample(&self, u: &ComplexImage) -> Vec<Complex64> {
        let mut k = u.clone();
        self.fft.forward_unitary(&mut k);
        let flat = k.as_slice().expect("standard layout");
        self.indices.iter().map(|&i| flat[i]).collect()
    }

    /// `F* M* w` for one coil's samples.
    pub fn unsample(&self, w: ArrayView2<'_, Complex64>) -> ComplexImage {
        self.unsample_row(w.row(0).as_slice().expect("contiguous"))
    }

    fn unsample_row(&self, w: &[Complex64]) -> ComplexImage {
        let (n, m) = self.shape();
        let mut k = Array2::zeros((n, m));
        {
            let flat = k.as_slice_mut().expect("standard layout");
            for (&i, &v) in self.indices.iter().zip(w) {
                flat[i] = v;
            }
        }
        self.fft.inverse_unitary(&mut k);
        k
    }

    pub fn forward(&self, x: &ComplexImage, s: &Sensitivities) -> Result<KSpaceData> {
        self.check(x, s)?;
        let rows: Vec<Vec<Complex64>> = (0..s.coils())
            .into_par_iter()
            .map(|i| self.sample(&(&s.map(i) * x)))
            .collect();
        let f = self.indices.len();
        let mut samples = Array2::zeros((s.coils(), f));
        for (i, row) in rows.into_iter().enumerate() {
            samples.row_mut(i).assign(&ndarray::Array1::from_vec(row));
        }
        KSpaceData::new(samples, self.mask.clone(), 0.0)
    }

    /// Per-coil image-domain residuals `F* M* (M F (sigma_i x) - z_i)`.
    pub fn residual_images(&self, x: &ComplexImage, s: &Sensitivities, z: &KSpaceData) -> Result<Vec<ComplexImage>> {
        self.check(x, s)?;
        self.check_data(z, s)?;
        Ok((0..s.coils())
            .into_par_iter()
            .map(|i| {
                let pred = self.sample(&(&s.map(i) * x));
                let diff: Vec<Complex64> = pred.iter().zip(z.samples.row(i)).map(|(a, b)| a - b).collect();
                self.unsample_row(&diff)
            })
            .collect())
    }

    /// `1/2 |A(x, sigma) - z|^2`.
    pub fn data_misfit(&self, x: &ComplexImage, s: &Sensitivities, z: &KSpaceData) -> Result<f64> {
        let pred = self.forward(x, s)?;
        self.check_data(z, s)?;
        Ok(0.5 * Zip::from(&pred.samples).and(&z.samples).fold(0.0, |acc, a, b| acc + (a - b).norm_sqr()))
    }

    /// `sum_i conj(sigma_i) .* F* M* (M F (sigma_i x) - z_i)`: the gradient of
    /// `1/2 |A - z|^2` with respect to `(Re x, Im x)` packed as a complex image.
    pub fn grad_x(&self, x: &ComplexImage, s: &Sensitivities, z: &KSpaceData) -> Result<ComplexImage> {
        let res = self.residual_images(x, s, z)?;
        let mut g = Array2::zeros(self.shape());
        for (i, r) in res.iter().enumerate() {
            Zip::from(&mut g).and(&s.map(i)).and(r).for_each(|g, sv, rv| *g += sv.conj() * rv);
        }
        Ok(g)
    }

    /// Per coil `conj(x) .* F* M* (M F (sigma_i x) - z_i)`, the gradient of
    /// `1/2 |A - z|^2` with respect to `(Re sigma_i, Im sigma_i)`.
    pub fn grad_sigma(&self, x: &ComplexImage, s: &Sensitivities, z: &KSpaceData) -> Result<Sensitivities> {
        let res = self.residual_images(x, s, z)?;
        let mut out = Sensitivities::zeros(s.coils(), self.shape());
        for (i, r) in res.iter().enumerate() {
            let mut coil = out.maps.index_axis_mut(Axis(0), i);
            Zip::from(&mut coil).and(x).and(r).for_each(|o, xv, rv| *o = xv.conj() * rv);
        }
        Ok(out)
    }

    /// `A_x^* w = sum_i conj(sigma_i) .* F* M* w_i`.
    pub fn adjoint_x(&self, s: &Sensitivities, w: &Array2<Complex64>) -> Result<ComplexImage> {
        check_shape(self.shape(), s.shape())?;
        if w.dim() != (s.coils(), self.indices.len()) {
            return Err(Error::ShapeMismatch { expected: (s.coils(), self.indices.len()), found: w.dim() });
        }
        let mut g = Array2::zeros(self.shape());
        for i in 0..s.coils() {
            let img = self.unsample_row(w.row(i).to_vec().as_slice());
            Zip::from(&mut g).and(&s.map(i)).and(&img).for_each(|g, sv, v| *g += sv.conj() * v);
        }
        Ok(g)
    }

    /// Zero-filled coil images `F* M* z_i` and their root sum of squares.
    pub fn zero_filled(&self, z: &KSpaceData) -> Result<(Vec<ComplexImage>, RealImage)> {
        check_shape(self.shape(), z.shape())?;
        let images: Vec<ComplexImage> = (0..z.coils())
            .into_par_iter()
            .map(|i| self.unsample_row(z.samples.row(i).to_vec().as_slice()))
            .collect();
        let rss = rss(&images);
        Ok((images, rss))
    }
}

/// `sqrt(sum_i |u_i|^2)`.
pub fn rss(images: &[ComplexImage]) -> RealImage {
    let shape = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut acc = Array2::zeros(shape);
    for img in images {
        Zip::from(&mut acc).and(img).for_each(|a, v| *a += v.norm_sqr());
    }
    acc.mapv_inplace(f64::sqrt);
    acc
}

pub fn forward(x: &ComplexImage, s: &Sensitivities, mask: &SamplingMask) -> Result<KSpaceData> {
    MriOperator::new(mask).forward(x, s)
}

pub fn grad_x_likelihood(x: &ComplexImage, s: &Sensitivities, z: &KSpaceData) -> Result<ComplexImage> {
    MriOperator::new(&z.mask).grad_x(x, s, z)
}

pub fn grad_sigma_likelihood(x: &ComplexImage, s: &Sensitivities, z: &KSpaceData) -> Result<Sensitivities> {
    MriOperator::new(&z.mask).grad_sigma(x, s, z)
}

pub fn zero_filled(z: &KSpaceData) -> Result<(Vec<ComplexImage>, RealImage)> {
    MriOperator::new(&z.mask).zero_filled(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_complex(shape: (usize, usize), rng: &mut ChaCha8Rng) -> ComplexImage {
        Array2::from_shape_fn(shape, |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn rand_sens(c: usize, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Sensitivities {
        let maps: Vec<_> = (0..c).map(|_| rand_complex(shape, rng)).collect();
        Sensitivities::from_maps(&maps).unwrap()
    }

    fn random_mask(shape: (usize, usize), seed: u64) -> SamplingMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits = Array2::from_shape_simple_fn(shape, || rng.gen_bool(0.5));
        bits[[0, 0]] = true;
        SamplingMask::from_bits(bits).unwrap()
    }

    fn dense_dft(n: usize, m: usize) -> Array2<Complex64> {
        let nm = n * m;
        let s = 1.0 / (nm as f64).sqrt();
        Array2::from_shape_fn((nm, nm), |(r, c)| {
            let (k, l) = (r / m, r % m);
            let (i, j) = (c / m, c % m);
            let ph = -2.0 * std::f64::consts::PI * ((k * i) as f64 / n as f64 + (l * j) as f64 / m as f64);
            Complex64::from_polar(s, ph)
        })
    }

    #[test]
    fn zero_image_gives_zero_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = random_mask((8, 8), 1);
        let s = rand_sens(2, (8, 8), &mut rng);
        let z = forward(&Array2::zeros((8, 8)), &s, &mask).unwrap();
        assert!(z.samples.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn full_mask_single_unit_coil_is_unitary_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_complex((8, 6), &mut rng);
        let mask = SamplingMask::full((8, 6));
        let s = Sensitivities::new(Array3::from_elem((1, 8, 6), Complex64::new(1.0, 0.0))).unwrap();
        let z = forward(&x, &s, &mask).unwrap();
        let nx: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let nz: f64 = z.samples.iter().map(|v| v.norm_sqr()).sum();
        assert!((nx - nz).abs() < 1e-12 * nx);
        let (imgs, _) = zero_filled(&z).unwrap();
        for (a, b) in imgs[0].iter().zip(x.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        // gradient in the unitary case is x - F* z
        let g = grad_x_likelihood(&(&x * Complex64::new(2.0, 0.0)), &s, &z).unwrap();
        for (a, b) in g.iter().zip(x.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_matrix_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (8, 8);
        let x = rand_complex((n, m), &mut rng);
        let s = rand_sens(2, (n, m), &mut rng);
        let mask = random_mask((n, m), 3);
        let z = forward(&x, &s, &mask).unwrap();
        let f = dense_dft(n, m);
        let idx = mask.indices();
        for c in 0..2 {
            let v: Vec<Complex64> = (0..n * m).map(|p| s.map(c)[[p / m, p % m]] * x[[p / m, p % m]]).collect();
            for (row, &k) in idx.iter().enumerate() {
                let mut acc = Complex64::default();
                for p in 0..n * m {
                    acc += f[[k, p]] * v[p];
                }
                assert!((acc - z.samples[[c, row]]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for c in [1, 4] {
            let x = rand_complex((16, 16), &mut rng);
            let s = rand_sens(c, (16, 16), &mut rng);
            let mask = random_mask((16, 16), 4);
            let op = MriOperator::new(&mask);
            let ax = op.forward(&x, &s).unwrap();
            let w = Array2::from_shape_fn(ax.samples.dim(), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let lhs: Complex64 = ax.samples.iter().zip(w.iter()).map(|(a, b)| b.conj() * a).sum();
            let adj = op.adjoint_x(&s, &w).unwrap();
            let rhs: Complex64 = x.iter().zip(adj.iter()).map(|(a, b)| b.conj() * a).sum();
            let scale = ax.samples.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt() * w.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!((lhs - rhs).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn consistent_data_has_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_complex((8, 8), &mut rng);
        let s = rand_sens(3, (8, 8), &mut rng);
        let z = forward(&x, &s, &random_mask((8, 8), 5)).unwrap();
        assert!(grad_x_likelihood(&x, &s, &z).unwrap().iter().all(|v| v.norm() < 1e-12));
        assert!(grad_sigma_likelihood(&x, &s, &z).unwrap().maps().iter().all(|v| v.norm() < 1e-12));
        let zero = grad_sigma_likelihood(&Array2::zeros((8, 8)), &s, &z).unwrap();
        assert!(zero.maps().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_complex((8, 8), &mut rng);
        let s = rand_sens(2, (8, 8), &mut rng);
        let mask = random_mask((8, 8), 6);
        let op = MriOperator::new(&mask);
        let z = op.forward(&rand_complex((8, 8), &mut rng), &rand_sens(2, (8, 8), &mut rng)).unwrap();
        let gx = op.grad_x(&x, &s, &z).unwrap();
        let gs = op.grad_sigma(&x, &s, &z).unwrap();
        let h = 1e-6;
        for p in [(0, 0), (3, 5), (7, 2)] {
            for (dir, part) in [(Complex64::new(h, 0.0), 0), (Complex64::new(0.0, h), 1)] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[p] += dir;
                xm[p] -= dir;
                let fd = (op.data_misfit(&xp, &s, &z).unwrap() - op.data_misfit(&xm, &s, &z).unwrap()) / (2.0 * h);
                let an = if part == 0 { gx[p].re } else { gx[p].im };
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()));

                let mut sp = s.clone();
                let mut sm = s.clone();
                sp.maps_mut()[[1, p.0, p.1]] += dir;
                sm.maps_mut()[[1, p.0, p.1]] -= dir;
                let fd = (op.data_misfit(&x, &sp, &z).unwrap() - op.data_misfit(&x, &sm, &z).unwrap()) / (2.0 * h);
                let g = gs.maps()[[1, p.0, p.1]];
                let an = if part == 0 { g.re } else { g.im };
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()));
            }
        }
    }

    #[test]
    fn rss_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let imgs: Vec<_> = (0..3).map(|_| rand_complex((5, 4), &mut rng)).collect();
        let r = rss(&imgs);
        for i in 0..5 {
            for j in 0..4 {
                let e = (imgs.iter().map(|im| im[[i, j]].norm_sqr()).sum::<f64>()).sqrt();
                assert!((r[[i, j]] - e).abs() < 1e-12);
            }
        }
        let zeros = vec![Array2::<Complex64>::zeros((3, 3)); 2];
        assert!(rss(&zeros).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_gives_unit_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = rand_sens(4, (8, 8), &mut rng);
        s.normalize();
        assert!(s.sum_sq().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn global_phase_gauge_leaves_data_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_complex((8, 8), &mut rng);
        let s = rand_sens(2, (8, 8), &mut rng);
        let mask = random_mask((8, 8), 9);
        let ph = Complex64::from_polar(1.0, 0.7);
        let mut s2 = s.clone();
        s2.maps_mut().mapv_inplace(|v| v * ph);
        let x2 = x.mapv(|v| v / ph);
        let a = forward(&x, &s, &mask).unwrap();
        let b = forward(&x2, &s2, &mask).unwrap();
        for (u, v) in a.samples.iter().zip(b.samples.iter()) {
            assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = rand_sens(2, (8, 8), &mut rng);
        let mask = random_mask((8, 8), 10);
        assert!(matches!(forward(&Array2::zeros((8, 6)), &s, &mask), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn noise_has_requested_power() {
        let mask = SamplingMask::full((32, 32));
        let mut z = KSpaceData::new(Array2::zeros((2, 1024)), mask, 0.0).unwrap();
        z.add_noise(0.1, 1);
        let p = z.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / 2048.0;
        assert!((p.sqrt() - 0.1).abs() < 0.005);
        assert!((z.noise_std - 0.1).abs() < 1e-15);
    }
}
