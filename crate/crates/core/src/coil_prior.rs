//! Quadratic smoothness prior on coil sensitivities and its proximal map.
//!
//! `s(sigma) = 1/2 sum_i |D Re sigma_i|^2 + |D Im sigma_i|^2` with forward
//! differences and zero (Dirichlet) boundary. `D^T D` is diagonalized by the
//! orthonormal 2-D DST-I, which makes the prox a pointwise filter.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use rustdct::{DctPlanner, Dst1};

use crate::error::{Error, Result};
use crate::mri::Sensitivities;
use crate::prior::RealImage;

/// Eigenvalues of the Dirichlet 5-point Laplacian,
/// `tau[a, b] = 4 sin^2(pi (a+1) / (2(n+1))) + 4 sin^2(pi (b+1) / (2(m+1)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceEigen {
    pub tau: Array2<f64>,
}

impl LaplaceEigen {
    pub fn new(shape: (usize, usize)) -> Self {
        let (n, m) = shape;
        let lam = |k: usize, len: usize| {
            let s = (std::f64::consts::PI * (k + 1) as f64 / (2.0 * (len + 1) as f64)).sin();
            4.0 * s * s
        };
        Self { tau: Array2::from_shape_fn(shape, |(a, b)| lam(a, n) + lam(b, m)) }
    }
}

/// Orthonormal separable 2-D DST-I; it is its own inverse.
#[derive(Clone)]
pub struct Dst2 {
    rows: Arc<dyn Dst1<f64>>,
    cols: Arc<dyn Dst1<f64>>,
    shape: (usize, usize),
}

impl std::fmt::Debug for Dst2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dst2").field("shape", &self.shape).finish()
    }
}

impl Dst2 {
    pub fn new(shape: (usize, usize)) -> Self {
        let mut planner = DctPlanner::new();
        Self { rows: planner.plan_dst1(shape.1), cols: planner.plan_dst1(shape.0), shape }
    }

    pub fn apply(&self, x: &RealImage) -> RealImage {
        let (n, m) = self.shape;
        assert_eq!(x.dim(), self.shape, "DST shape");
        let mut out = x.as_standard_layout().into_owned();
        for mut row in out.rows_mut() {
            self.rows.process_dst1(row.as_slice_mut().expect("contiguous row"));
        }
        let mut t = out.reversed_axes().as_standard_layout().into_owned();
        for mut col in t.rows_mut() {
            self.cols.process_dst1(col.as_slice_mut().expect("contiguous row"));
        }
        let scale = (2.0 / (n + 1) as f64).sqrt() * (2.0 / (m + 1) as f64).sqrt();
        t.mapv_inplace(|v| v * scale);
        t.reversed_axes().as_standard_layout().into_owned()
    }
}

/// `D^T D u`: the Dirichlet 5-point Laplacian stencil.
pub fn laplacian(u: &RealImage) -> RealImage {
    let (n, m) = u.dim();
    Array2::from_shape_fn((n, m), |(i, j)| {
        let mut v = 4.0 * u[[i, j]];
        if i > 0 {
            v -= u[[i - 1, j]];
        }
        if i + 1 < n {
            v -= u[[i + 1, j]];
        }
        if j > 0 {
            v -= u[[i, j - 1]];
        }
        if j + 1 < m {
            v -= u[[i, j + 1]];
        }
        v
    })
}

/// `1/2 |D u|^2` for one real channel.
pub fn channel_energy(u: &RealImage) -> f64 {
    let (n, m) = u.dim();
    let at = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= n as isize || j >= m as isize {
            0.0
        } else {
            u[[i as usize, j as usize]]
        }
    };
    let mut e = 0.0;
    for i in -1..n as isize {
        for j in -1..m as isize {
            let (c, dn, rt) = (at(i, j), at(i + 1, j), at(i, j + 1));
            if j >= 0 {
                e += (dn - c).powi(2);
            }
            if i >= 0 {
                e += (rt - c).powi(2);
            }
        }
    }
    0.5 * e
}

fn split(s: &Sensitivities) -> Vec<RealImage> {
    s.maps()
        .outer_iter()
        .flat_map(|c| [c.mapv(|v| v.re), c.mapv(|v| v.im)])
        .collect()
}

fn join(channels: Vec<RealImage>, coils: usize, shape: (usize, usize)) -> Sensitivities {
    let mut out = Sensitivities::zeros(coils, shape);
    for (i, mut coil) in out.maps_mut().axis_iter_mut(Axis(0)).enumerate() {
        Zip::from(&mut coil)
            .and(&channels[2 * i])
            .and(&channels[2 * i + 1])
            .for_each(|o, &re, &im| *o = Complex64::new(re, im));
    }
    out
}

pub fn smoothness_energy(s: &Sensitivities) -> f64 {
    split(s).iter().map(channel_energy).sum()
}

/// `grad s(sigma) = D^T D sigma`, per coil.
pub fn smoothness_grad(s: &Sensitivities) -> Sensitivities {
    join(split(s).iter().map(laplacian).collect(), s.coils(), s.shape())
}

/// Reusable prox: `argmin_u 1/2 |u - v|^2 + mu s(u) = S (S v ./ (1 + mu tau))`.
#[derive(Clone, Debug)]
pub struct SmoothnessProx {
    dst: Dst2,
    eigen: LaplaceEigen,
}

impl SmoothnessProx {
    pub fn new(shape: (usize, usize)) -> Self {
        Self { dst: Dst2::new(shape), eigen: LaplaceEigen::new(shape) }
    }

    pub fn apply_channel(&self, v: &RealImage, mu: f64) -> RealImage {
        let mut c = self.dst.apply(v);
        Zip::from(&mut c).and(&self.eigen.tau).for_each(|c, &t| *c /= 1.0 + mu * t);
        self.dst.apply(&c)
    }

    pub fn apply(&self, s: &Sensitivities, mu: f64) -> Result<Sensitivities> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("prox step must be positive, got {mu}")));
        }
        crate::error::check_shape(self.dst.shape, s.shape())?;
        let out: Vec<RealImage> = split(s).par_iter().map(|c| self.apply_channel(c, mu)).collect();
        Ok(join(out, s.coils(), s.shape()))
    }
}

pub fn prox_smoothness(s: &Sensitivities, mu: f64) -> Result<Sensitivities> {
    SmoothnessProx::new(s.shape()).apply(s, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_sens(c: usize, shape: (usize, usize), seed: u64) -> Sensitivities {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = ndarray::Array3::from_shape_fn((c, shape.0, shape.1), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        Sensitivities::new(maps).unwrap()
    }

    /// Dense `I + mu D^T D` solved by Gaussian elimination.
    fn dense_solve(v: &RealImage, mu: f64) -> RealImage {
        let (n, m) = v.dim();
        let len = n * m;
        let mut a = vec![vec![0.0; len + 1]; len];
        for p in 0..len {
            let mut e = Array2::zeros((n, m));
            e[[p / m, p % m]] = 1.0;
            let col = laplacian(&e);
            for q in 0..len {
                a[q][p] = mu * col[[q / m, q % m]] + if p == q { 1.0 } else { 0.0 };
            }
            a[p][len] = v[[p / m, p % m]];
        }
        for k in 0..len {
            let piv = (k..len).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, piv);
            for i in k + 1..len {
                let f = a[i][k] / a[k][k];
                for j in k..=len {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        let mut x = vec![0.0; len];
        for k in (0..len).rev() {
            let s: f64 = (k + 1..len).map(|j| a[k][j] * x[j]).sum();
            x[k] = (a[k][len] - s) / a[k][k];
        }
        Array2::from_shape_vec((n, m), x).unwrap()
    }

    #[test]
    fn dst_round_trip_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [(8, 8), (7, 12), (1, 5)] {
            let d = Dst2::new(shape);
            let x = Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
            let y = d.apply(&x);
            let back = d.apply(&y);
            assert!((&back - &x).iter().all(|v| v.abs() < 1e-12));
            let nx: f64 = x.iter().map(|v| v * v).sum();
            let ny: f64 = y.iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() < 1e-12 * nx);
        }
    }

    #[test]
    fn eigenvalues_match_laplacian_on_basis() {
        let shape = (8, 6);
        let d = Dst2::new(shape);
        let eig = LaplaceEigen::new(shape);
        assert!(eig.tau.iter().all(|&t| t > 0.0));
        for (a, b) in [(0, 0), (3, 2), (7, 5)] {
            let mut e = Array2::zeros(shape);
            e[[a, b]] = 1.0;
            let basis = d.apply(&e);
            let lap = laplacian(&basis);
            for (l, u) in lap.iter().zip(basis.iter()) {
                assert!((l - eig.tau[[a, b]] * u).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prox_matches_dense_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        let prox = SmoothnessProx::new((8, 8));
        for mu in [0.1, 1.0, 10.0] {
            let a = prox.apply_channel(&v, mu);
            let b = dense_solve(&v, mu);
            let err = (&a - &b).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            assert!(err < 1e-8, "mu {mu}: {err}");
        }
    }

    #[test]
    fn prox_optimality_condition() {
        let s = rand_sens(2, (8, 10), 3);
        let mu = 2.5;
        let p = prox_smoothness(&s, mu).unwrap();
        let g = smoothness_grad(&p);
        for ((v, u), gv) in s.maps().iter().zip(p.maps().iter()).zip(g.maps().iter()) {
            assert!((v - u - gv * mu).norm() < 1e-8);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = rand_sens(1, (5, 6), 4);
        let g = smoothness_grad(&s);
        let h = 1e-6;
        for (i, j) in [(0, 0), (2, 3), (4, 5)] {
            for dir in [Complex64::new(h, 0.0), Complex64::new(0.0, h)] {
                let mut up = s.clone();
                let mut dn = s.clone();
                up.maps_mut()[[0, i, j]] += dir;
                dn.maps_mut()[[0, i, j]] -= dir;
                let fd = (smoothness_energy(&up) - smoothness_energy(&dn)) / (2.0 * h);
                let an = if dir.re != 0.0 { g.maps()[[0, i, j]].re } else { g.maps()[[0, i, j]].im };
                assert!((fd - an).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn impulse_energy_counts_edges() {
        let mut s = Sensitivities::zeros(1, (5, 5));
        s.maps_mut()[[0, 2, 2]] = Complex64::new(1.0, 0.0);
        assert!((smoothness_energy(&s) - 2.0).abs() < 1e-15);
        // corner pixel: two interior edges plus two boundary edges
        let mut c = Sensitivities::zeros(1, (5, 5));
        c.maps_mut()[[0, 0, 0]] = Complex64::new(0.0, 1.0);
        assert!((smoothness_energy(&c) - 2.0).abs() < 1e-15);
        assert_eq!(smoothness_energy(&Sensitivities::zeros(2, (4, 4))), 0.0);
        let r = rand_sens(2, (6, 6), 5);
        let mut r2 = r.clone();
        r2.maps_mut().mapv_inplace(|v| v * 2.0);
        assert!((smoothness_energy(&r2) - 4.0 * smoothness_energy(&r)).abs() < 1e-12 * smoothness_energy(&r2));
    }

    #[test]
    fn prox_limits_and_errors() {
        let s = rand_sens(1, (6, 6), 6);
        let p = prox_smoothness(&s, 1e-12).unwrap();
        for (a, b) in s.maps().iter().zip(p.maps().iter()) {
            assert!((a - b).norm() < 1e-8);
        }
        assert!(prox_smoothness(&s, 0.0).is_err());
        assert!(prox_smoothness(&s, -1.0).is_err());
    }

    #[test]
    fn prox_is_nonexpansive() {
        for seed in 0..10 {
            let a = rand_sens(2, (8, 8), 100 + seed);
            let b = rand_sens(2, (8, 8), 200 + seed);
            let pa = prox_smoothness(&a, 3.0).unwrap();
            let pb = prox_smoothness(&b, 3.0).unwrap();
            let d_in: f64 = a.maps().iter().zip(b.maps().iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
            let d_out: f64 = pa.maps().iter().zip(pb.maps().iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
            assert!(d_out <= d_in);
        }
    }
}
