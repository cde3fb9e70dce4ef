//! The critical set `S = { x.Ax : A >= 0, tr A = 1/4 }` and the L2
//! projection of traces onto it.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::energy::f_of;
use crate::error::{Error, Result};
use crate::sphere::{SphereBasis, Trace};

/// Slack allowed on the trace and on the smallest eigenvalue.
pub const PSD_TOL: f64 = 1e-12;

/// A blow-up `Q_A(x) = x.Ax` with `A` symmetric, PSD and of trace 1/4.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBlowup {
    a: DMatrix<f64>,
}

impl QuadraticBlowup {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || !(d == 2 || d == 3) {
            return Err(Error::UnsupportedDimension(d));
        }
        if (&a - a.transpose()).abs().max() > PSD_TOL {
            return Err(Error::InvalidArgument("matrix is not symmetric".into()));
        }
        if (a.trace() - 0.25).abs() > PSD_TOL {
            return Err(Error::InvalidArgument(format!("trace {} differs from 1/4", a.trace())));
        }
        let min_eig = a.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidArgument(format!("eigenvalue {min_eig} is negative")));
        }
        Ok(QuadraticBlowup { a })
    }

    pub fn isotropic(d: usize) -> Self {
        QuadraticBlowup {
            a: DMatrix::identity(d, d) / (4.0 * d as f64),
        }
    }

    /// Diagonal `A`; the entries must be non-negative and sum to 1/4.
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    /// Eigenvalues uniform on the scaled simplex, eigenvectors from a
    /// Haar-random rotation.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let e: Vec<f64> = (0..d).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = e.iter().sum();
        let lam = nalgebra::DVector::from_iterator(d, e.iter().map(|x| 0.25 * x / s));
        let g: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let a = &q * DMatrix::from_diagonal(&lam) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        QuadraticBlowup { a }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += x[i] * self.a[(i, j)] * x[j];
            }
        }
        s
    }

    /// `d` on the first line, then the upper triangle row by row.
    pub fn to_text(&self) -> String {
        let d = self.dim();
        let mut s = format!("{d}\n");
        let mut entries = Vec::new();
        for i in 0..d {
            for j in i..d {
                entries.push(format!("{:.16e}", self.a[(i, j)]));
            }
        }
        let _ = writeln!(s, "{}", entries.join(" "));
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            detail,
        };
        let mut tokens = text.split_whitespace();
        let d: usize = tokens
            .next()
            .ok_or_else(|| err("empty file".into()))?
            .parse()
            .map_err(|e| err(format!("dimension: {e}")))?;
        if d != 2 && d != 3 {
            return Err(Error::UnsupportedDimension(d));
        }
        let vals: Vec<f64> = tokens
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("entry: {e}")))?;
        if vals.len() != d * (d + 1) / 2 {
            return Err(err(format!("{} entries for d = {d}", vals.len())));
        }
        let mut a = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                a[(i, j)] = vals[k];
                a[(j, i)] = vals[k];
                k += 1;
            }
        }
        Self::new(a)
    }
}

/// Nodal evaluation of `Q_A` on the sphere, kept on degrees 0 and 2.
pub fn eval_on_sphere(q: &QuadraticBlowup, basis: &Arc<SphereBasis>) -> Result<Trace> {
    if q.dim() != basis.dim() {
        return Err(Error::BasisMismatch);
    }
    let samples: Vec<f64> = basis.points().iter().map(|x| q.eval(x)).collect();
    let t = basis.analyze(&samples)?;
    Ok(t.filter_degree(|k| k == 0 || k == 2))
}

/// Frobenius-orthonormal basis of traceless symmetric matrices.
fn traceless_basis(d: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::new();
    let r2 = 2f64.sqrt();
    if d == 2 {
        out.push(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]) / r2);
        out.push(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]) / r2);
    } else {
        out.push(DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]) / r2);
        out.push(
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -2.0]) / 6f64.sqrt(),
        );
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let mut m = DMatrix::zeros(3, 3);
            m[(i, j)] = 1.0 / r2;
            m[(j, i)] = 1.0 / r2;
            out.push(m);
        }
    }
    out
}

/// Linear isometry between traceless symmetric matrices and the degree-2
/// harmonics: `<x.Bx, x.Cx>_{L2} = k_d tr(BC)`.
#[derive(Debug, Clone)]
pub struct QuadraticIsometry {
    mats: Vec<DMatrix<f64>>,
    modes: Vec<usize>,
    // gram[k][m]: coefficient of degree-2 mode modes[m] in x.E_k x
    gram: Vec<Vec<f64>>,
    pub k_d: f64,
}

impl QuadraticIsometry {
    pub fn new(basis: &Arc<SphereBasis>) -> Result<Self> {
        let d = basis.dim();
        let mats = traceless_basis(d);
        let modes: Vec<usize> = basis.degree_modes(2).collect();
        let mut gram = Vec::with_capacity(mats.len());
        for e in &mats {
            let samples: Vec<f64> = basis
                .points()
                .iter()
                .map(|x| {
                    let mut s = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            s += x[i] * e[(i, j)] * x[j];
                        }
                    }
                    s
                })
                .collect();
            let t = basis.analyze(&samples)?;
            gram.push(modes.iter().map(|&m| t.coeffs()[m]).collect::<Vec<f64>>());
        }
        let k_d = gram[0].iter().map(|x| x * x).sum();
        Ok(QuadraticIsometry {
            mats,
            modes,
            gram,
            k_d,
        })
    }

    /// Traceless matrix whose quadratic form has the degree-2 part of `c`.
    pub fn matrix_of(&self, c: &Trace) -> DMatrix<f64> {
        let d = self.mats[0].nrows();
        let mut b = DMatrix::zeros(d, d);
        for (e, row) in self.mats.iter().zip(&self.gram) {
            let coef: f64 = row
                .iter()
                .zip(&self.modes)
                .map(|(g, &m)| g * c.coeffs()[m])
                .sum::<f64>()
                / self.k_d;
            b += e * coef;
        }
        b
    }
}

/// Result of projecting a trace onto `S`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub blowup: QuadraticBlowup,
    pub trace: Trace,
    pub distance: f64,
}

/// L2-closest element of `S`.
///
/// With the trace of `A` fixed, only the degree-2 part of `c` matters; the
/// problem reduces to the Frobenius projection of `I/(4d) + B` onto the
/// spectrahedron, done by projecting its eigenvalues onto the simplex.
pub fn project_to_s(c: &Trace) -> Result<Projection> {
    let basis = c.basis();
    let d = basis.dim();
    let iso = QuadraticIsometry::new(basis)?;
    let m0 = DMatrix::identity(d, d) / (4.0 * d as f64) + iso.matrix_of(c);
    let m0 = (&m0 + m0.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m0);
    let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let proj = simplex_project(&lam, 0.25);
    let v = &eig.eigenvectors;
    let a = v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(proj)) * v.transpose();
    let mut a = (&a + a.transpose()) * 0.5;
    // restore the exact trace lost to rounding
    let shift = (0.25 - a.trace()) / d as f64;
    for i in 0..d {
        a[(i, i)] += shift;
    }
    let blowup = QuadraticBlowup { a };
    let trace = eval_on_sphere(&blowup, basis)?;
    let distance = c.sub(&trace).norm();
    Ok(Projection {
        blowup,
        trace,
        distance,
    })
}

/// Euclidean projection onto `{x >= 0, sum x = target}`: the clamp of
/// `v - tau` at zero for the unique shift `tau`.
pub fn simplex_project(v: &[f64], target: f64) -> Vec<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - target) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// `F(S)` and `W(S) = F(S) / (d + 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceEnergies {
    pub d: usize,
    pub f_s: f64,
    pub w_s: f64,
}

pub fn reference_energies(d: usize) -> Result<ReferenceEnergies> {
    let basis = crate::sphere::build_basis(d, 3)?;
    reference_energies_on(&basis)
}

pub fn reference_energies_on(basis: &Arc<SphereBasis>) -> Result<ReferenceEnergies> {
    let d = basis.dim();
    let q = eval_on_sphere(&QuadraticBlowup::isotropic(d), basis)?;
    let f_s = f_of(&q);
    Ok(ReferenceEnergies {
        d,
        f_s,
        w_s: f_s / (d as f64 + 2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::grad_f;
    use crate::sphere::build_basis;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn b2() -> Arc<SphereBasis> {
        build_basis(2, 6).unwrap()
    }

    fn cos_mode(b: &Arc<SphereBasis>, k: usize) -> usize {
        b.modes().iter().position(|m| m.degree == k && m.slot == 0).unwrap()
    }

    // L2 distance by dense midpoint quadrature on the circle, independent
    // of the spectral machinery
    fn dense_distance(f: impl Fn(f64) -> f64, a: [[f64; 2]; 2]) -> f64 {
        let n = 4000;
        let h = 2.0 * PI / n as f64;
        (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * h;
                let (c, s) = (t.cos(), t.sin());
                let q = a[0][0] * c * c + 2.0 * a[0][1] * c * s + a[1][1] * s * s;
                (f(t) - q).powi(2)
            })
            .sum::<f64>()
            .sqrt()
            * h.sqrt()
    }

    fn grid_search(f: impl Fn(f64) -> f64) -> ([[f64; 2]; 2], f64) {
        let mut best = ([[0.0; 2]; 2], f64::INFINITY);
        let n = 100;
        for i in 0..=n {
            let a = 0.25 * i as f64 / n as f64;
            let bmax = (a * (0.25 - a)).sqrt();
            for k in 0..=n {
                let b = -bmax + 2.0 * bmax * k as f64 / n as f64;
                let m = [[a, b], [b, 0.25 - a]];
                let dist = dense_distance(&f, m);
                if dist < best.1 {
                    best = (m, dist);
                }
            }
        }
        best
    }

    #[test]
    fn isotropic_trace_is_constant() {
        let b = b2();
        let t = eval_on_sphere(&QuadraticBlowup::isotropic(2), &b).unwrap();
        let v = t.synthesize();
        assert!(v.iter().all(|x| (x - 0.125).abs() < 1e-14));
    }

    #[test]
    fn diagonal_blowup_expands_in_cos2() {
        let b = b2();
        let q = QuadraticBlowup::diagonal(&[0.25, 0.0]).unwrap();
        let t = eval_on_sphere(&q, &b).unwrap();
        // a11 cos^2 + a22 sin^2 = (a11 + a22)/2 + (a11 - a22)/2 cos 2t
        assert!((t.mean_value() - 0.125).abs() < 1e-14);
        assert!((t.coeffs()[cos_mode(&b, 2)] - 0.125 * PI.sqrt()).abs() < 1e-14);
        let integral = b.integrate(&t.synthesize()).unwrap();
        assert!((integral - PI / 4.0).abs() < 1e-13);
    }

    #[test]
    fn moment_identity_in_3d() {
        let b = build_basis(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q = QuadraticBlowup::random(3, &mut rng);
        let t = eval_on_sphere(&q, &b).unwrap();
        let integral = b.integrate(&t.synthesize()).unwrap();
        assert!((integral - 0.25 * 4.0 * PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn isometry_constant_matches_moments() {
        let iso2 = QuadraticIsometry::new(&b2()).unwrap();
        assert!((iso2.k_d - PI / 2.0).abs() < 1e-13);
        let iso3 = QuadraticIsometry::new(&build_basis(3, 3).unwrap()).unwrap();
        assert!((iso3.k_d - 8.0 * PI / 15.0).abs() < 1e-12);
    }

    #[test]
    fn projection_example_with_cos3() {
        let b = b2();
        let mut c = Trace::constant(&b, 0.125);
        c.coeffs_mut()[cos_mode(&b, 2)] = 0.01 * PI.sqrt();
        c.coeffs_mut()[cos_mode(&b, 3)] = 0.005 * PI.sqrt();
        let p = project_to_s(&c).unwrap();
        let a = p.blowup.matrix();
        assert!((a[(0, 0)] - 0.135).abs() < 1e-13);
        assert!((a[(1, 1)] - 0.115).abs() < 1e-13);
        assert!(a[(0, 1)].abs() < 1e-13);
        assert!((p.distance.powi(2) - 0.005f64.powi(2) * PI).abs() < 1e-15);
        let (m, dist) = grid_search(|t| 0.125 + 0.01 * (2.0 * t).cos() + 0.005 * (3.0 * t).cos());
        assert!(dist >= p.distance - 1e-9);
        assert!((m[0][0] - 0.135).abs() < 2e-3 && (m[1][1] - 0.115).abs() < 2e-3);
    }

    #[test]
    fn projection_example_clamped_to_boundary() {
        let b = b2();
        let mut c = Trace::constant(&b, 0.125);
        c.coeffs_mut()[cos_mode(&b, 2)] = -PI.sqrt();
        let iso = QuadraticIsometry::new(&b).unwrap();
        let m0 = DMatrix::identity(2, 2) / 8.0 + iso.matrix_of(&c);
        assert!((m0[(0, 0)] + 0.875).abs() < 1e-13 && (m0[(1, 1)] - 1.125).abs() < 1e-13);
        let p = project_to_s(&c).unwrap();
        let a = p.blowup.matrix();
        assert!(a[(0, 0)].abs() < 1e-13 && (a[(1, 1)] - 0.25).abs() < 1e-13);
        let (m, dist) = grid_search(|t| 0.125 - (2.0 * t).cos());
        assert!(dist >= p.distance - 1e-9);
        assert!(m[0][0].abs() < 1e-3 && (m[1][1] - 0.25).abs() < 1e-3);
    }

    #[test]
    fn simplex_examples() {
        assert_eq!(simplex_project(&[0.135, 0.115], 0.25), vec![0.135, 0.115]);
        let p = simplex_project(&[-0.875, 1.125], 0.25);
        assert!(p[0] == 0.0 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(simplex_project(&[0.25, 0.0], 0.25), vec![0.25, 0.0]);
    }

    // oracle: the KKT shift found by bisection
    fn simplex_by_bisection(v: &[f64], target: f64) -> Vec<f64> {
        let (mut lo, mut hi) = (v.iter().fold(f64::INFINITY, |a, b| a.min(*b)) - target, v.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|x| (x - mid).max(0.0)).sum();
            if s > target { lo = mid } else { hi = mid }
        }
        v.iter().map(|x| (x - 0.5 * (lo + hi)).max(0.0)).collect()
    }

    #[test]
    fn reference_values() {
        let r2 = reference_energies(2).unwrap();
        assert!((r2.f_s - PI / 8.0).abs() < 1e-12);
        assert!((r2.w_s - PI / 32.0).abs() < 1e-12);
        let r3 = reference_energies(3).unwrap();
        assert!((r3.f_s - PI / 6.0).abs() < 1e-12);
        assert!((r3.w_s - PI / 30.0).abs() < 1e-12);
        // F(Q) = (1/2) int Q since grad F(Q) = 0
        for d in [2usize, 3] {
            let b = build_basis(d, 3).unwrap();
            let q = eval_on_sphere(&QuadraticBlowup::isotropic(d), &b).unwrap();
            let half_int = 0.5 * b.integrate(&q.synthesize()).unwrap();
            assert!((half_int - reference_energies(d).unwrap().f_s).abs() < 1e-12);
        }
    }

    #[test]
    fn file_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let q = QuadraticBlowup::random(3, &mut rng);
        let back = QuadraticBlowup::from_text(&q.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, q);
        assert!(QuadraticBlowup::from_text("2\n0.3 0 -0.05", Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn simplex_projection_matches_kkt(v in proptest::collection::vec(-1.0f64..1.0, 2..4)) {
            let p = simplex_project(&v, 0.25);
            let o = simplex_by_bisection(&v, 0.25);
            prop_assert!((p.iter().sum::<f64>() - 0.25).abs() < 1e-12);
            for (x, y) in p.iter().zip(&o) {
                prop_assert!((x - y).abs() < 1e-10, "{:?} vs {:?}", p, o);
            }
        }

        #[test]
        fn projection_is_idempotent_and_critical(seed in 0u64..1000, d in 2usize..4) {
            let b = build_basis(d, 3).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = QuadraticBlowup::random(d, &mut rng);
            let t = eval_on_sphere(&q, &b).unwrap();
            prop_assert!(t.nodal_min() >= -1e-14);
            let p = project_to_s(&t).unwrap();
            prop_assert!((p.blowup.matrix() - q.matrix()).abs().max() < 1e-10);
            prop_assert!(p.distance < 1e-12);
            let g = grad_f(&t).synthesize();
            prop_assert!(g.iter().all(|x| x.abs() < 1e-10));
            let rs = reference_energies(d).unwrap();
            prop_assert!((f_of(&t) - rs.f_s).abs() < 1e-10);
        }

        #[test]
        fn projection_beats_random_competitors(seed in 0u64..100) {
            let b = build_basis(3, 3).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<f64> = (0..b.n_modes()).map(|_| rng.random_range(-0.3..0.3)).collect();
            let c = Trace::from_coeffs(&b, coeffs).unwrap();
            let p = project_to_s(&c).unwrap();
            for _ in 0..1000 {
                let other = eval_on_sphere(&QuadraticBlowup::random(3, &mut rng), &b).unwrap();
                prop_assert!(c.sub(&other).norm() >= p.distance - 1e-8);
            }
        }
    }
}
