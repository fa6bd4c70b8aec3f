//! Two-dimensional FFT on row-major `ndarray` buffers.
//!
//! `forward`/`inverse` are unnormalized (the inverse does not divide by
//! `n*m`); the `*_unitary` variants scale by `1/sqrt(n*m)` so that the
//! transform is an isometry.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    m: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).field("m", &self.m).finish()
    }
}

impl Fft2 {
    pub fn new(n: usize, m: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            m,
            row_fwd: planner.plan_fft_forward(m),
            row_inv: planner.plan_fft_inverse(m),
            col_fwd: planner.plan_fft_forward(n),
            col_inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn forward(&self, a: &mut Array2<Complex64>) {
        self.run(a, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, a: &mut Array2<Complex64>) {
        self.run(a, &self.row_inv, &self.col_inv);
    }

    pub fn forward_unitary(&self, a: &mut Array2<Complex64>) {
        self.forward(a);
        let s = 1.0 / ((self.n * self.m) as f64).sqrt();
        a.mapv_inplace(|v| v * s);
    }

    pub fn inverse_unitary(&self, a: &mut Array2<Complex64>) {
        self.inverse(a);
        let s = 1.0 / ((self.n * self.m) as f64).sqrt();
        a.mapv_inplace(|v| v * s);
    }

    /// Unnormalized spectrum of a real image.
    pub fn forward_real(&self, x: &Array2<f64>) -> Array2<Complex64> {
        let mut a = x.mapv(|v| Complex64::new(v, 0.0));
        self.forward(&mut a);
        a
    }

    /// Spectra of two real images with a single complex transform.
    pub fn forward_real_pair(
        &self,
        a: &Array2<f64>,
        b: &Array2<f64>,
    ) -> (Array2<Complex64>, Array2<Complex64>) {
        let mut z = Array2::zeros((self.n, self.m));
        Zip::from(&mut z)
            .and(a)
            .and(b)
            .for_each(|z, &a, &b| *z = Complex64::new(a, b));
        self.forward(&mut z);
        let (n, m) = (self.n, self.m);
        let mut sa = Array2::zeros((n, m));
        let mut sb = Array2::zeros((n, m));
        for i in 0..n {
            let ni = (n - i) % n;
            for j in 0..m {
                let nj = (m - j) % m;
                let zp = z[[i, j]];
                let zm = z[[ni, nj]].conj();
                sa[[i, j]] = (zp + zm) * 0.5;
                sb[[i, j]] = (zp - zm) * Complex64::new(0.0, -0.5);
            }
        }
        (sa, sb)
    }

    /// Inverse transform (with `1/(n*m)`) of two conjugate-symmetric spectra,
    /// returning the two real images.
    pub fn inverse_real_pair(
        &self,
        sa: &Array2<Complex64>,
        sb: &Array2<Complex64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut z = Array2::zeros((self.n, self.m));
        Zip::from(&mut z)
            .and(sa)
            .and(sb)
            .for_each(|z, &a, &b| *z = a + Complex64::new(0.0, 1.0) * b);
        self.inverse(&mut z);
        let s = 1.0 / (self.n * self.m) as f64;
        (z.mapv(|v| v.re * s), z.mapv(|v| v.im * s))
    }

    /// Real part of the normalized inverse transform.
    pub fn inverse_real(&self, spec: &Array2<Complex64>) -> Array2<f64> {
        let mut z = spec.clone();
        self.inverse(&mut z);
        let s = 1.0 / (self.n * self.m) as f64;
        z.mapv(|v| v.re * s)
    }

    fn run(&self, a: &mut Array2<Complex64>, row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(a.dim(), (self.n, self.m), "fft buffer shape");
        if !a.is_standard_layout() {
            *a = a.as_standard_layout().to_owned();
        }
        let mut scratch =
            vec![Complex64::default(); row.get_inplace_scratch_len().max(col.get_inplace_scratch_len())];
        row.process_with_scratch(a.as_slice_mut().expect("standard layout"), &mut scratch);

        let mut t = a.t().as_standard_layout().to_owned();
        col.process_with_scratch(t.as_slice_mut().expect("standard layout"), &mut scratch);
        a.assign(&t.t());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dft_oracle(x: &Array2<Complex64>) -> Array2<Complex64> {
        let (n, m) = x.dim();
        let mut out = Array2::zeros((n, m));
        for k in 0..n {
            for l in 0..m {
                let mut acc = Complex64::default();
                for i in 0..n {
                    for j in 0..m {
                        let ph = -2.0 * std::f64::consts::PI
                            * ((k * i) as f64 / n as f64 + (l * j) as f64 / m as f64);
                        acc += x[[i, j]] * Complex64::from_polar(1.0, ph);
                    }
                }
                out[[k, l]] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((6, 5), |_| Complex64::new(rng.gen(), rng.gen()));
        let mut y = x.clone();
        let fft = Fft2::new(6, 5);
        fft.forward(&mut y);
        let expect = dft_oracle(&x);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn unitary_round_trip_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((8, 12), |_| Complex64::new(rng.gen(), rng.gen()));
        let fft = Fft2::new(8, 12);
        let mut y = x.clone();
        fft.forward_unitary(&mut y);
        let nx: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ny: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        assert!((nx - ny).abs() < 1e-12 * nx);
        fft.inverse_unitary(&mut y);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn real_pair_transforms_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((7, 8), |_| rng.gen::<f64>());
        let b = Array2::from_shape_fn((7, 8), |_| rng.gen::<f64>());
        let fft = Fft2::new(7, 8);
        let (sa, sb) = fft.forward_real_pair(&a, &b);
        let ea = fft.forward_real(&a);
        let eb = fft.forward_real(&b);
        for (x, y) in sa.iter().zip(ea.iter()).chain(sb.iter().zip(eb.iter())) {
            assert!((x - y).norm() < 1e-12);
        }
        let (ra, rb) = fft.inverse_real_pair(&sa, &sb);
        for (x, y) in ra.iter().zip(a.iter()).chain(rb.iter().zip(b.iter())) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
