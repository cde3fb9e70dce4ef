//! Real orthonormal harmonic bases on the unit circle (d = 2) and the unit
//! sphere (d = 3), with quadrature rules exact for products of band-limited
//! functions.
//!
//! Functions on the sphere are carried as [`Trace`]s: a coefficient vector in
//! the basis of a shared [`SphereBasis`]. Nodal values are obtained on demand.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

/// One basis function: degree, Laplace eigenvalue and its slot inside the
/// degree's eigenspace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub index: usize,
    pub degree: usize,
    pub eigenvalue: f64,
    pub slot: usize,
}

/// Angular coordinates of a point: `[theta, 0]` on the circle and
/// `[polar, azimuth]` on the sphere.
pub type Angles = [f64; 2];

#[derive(Debug, Clone)]
pub struct SphereBasis {
    d: usize,
    l_max: usize,
    modes: Vec<Mode>,
    angles: Vec<Angles>,
    points: Vec<[f64; 3]>,
    weights: Vec<f64>,
    // mode-major table: values[j * n_nodes + q] = phi_j(theta_q)
    values: Vec<f64>,
}

/// Surface measure of the unit sphere in R^d.
pub fn sphere_area(d: usize) -> f64 {
    match d {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => {
            // 2 pi^{d/2} / Gamma(d/2), via the two-step recursion on d
            let mut area = if d % 2 == 0 { 2.0 * PI } else { 4.0 * PI };
            let mut k = if d % 2 == 0 { 2 } else { 3 };
            while k < d {
                area *= 2.0 * PI / k as f64;
                k += 2;
            }
            area
        }
    }
}

/// Volume of the unit ball in R^n.
pub fn ball_volume(n: usize) -> f64 {
    sphere_area(n) / n as f64
}

/// Builds a basis with the default quadrature (4L+1 nodes for d = 2,
/// (2L+1)^2 nodes for d = 3).
pub fn build_basis(d: usize, l_max: usize) -> Result<Arc<SphereBasis>> {
    let n = match d {
        2 => 4 * l_max + 1,
        _ => 2 * l_max + 1,
    };
    SphereBasis::with_nodes(d, l_max, n).map(Arc::new)
}

impl SphereBasis {
    /// `n` is the total node count for d = 2 (at least 2L+1) and the node
    /// count per angular axis for d = 3 (at least 2L+1).
    pub fn with_nodes(d: usize, l_max: usize, n: usize) -> Result<Self> {
        if d != 2 && d != 3 {
            return Err(Error::UnsupportedDimension(d));
        }
        if l_max < 3 {
            return Err(Error::DegreeTooSmall { got: l_max, min: 3 });
        }
        if n < 2 * l_max + 1 {
            return Err(Error::InvalidArgument(format!(
                "{n} quadrature nodes cannot resolve degree {l_max}"
            )));
        }
        let modes = mode_table(d, l_max);
        let (angles, weights) = if d == 2 {
            let h = 2.0 * PI / n as f64;
            ((0..n).map(|q| [q as f64 * h, 0.0]).collect(), vec![h; n])
        } else {
            let gl = GaussLegendre::new(NonZeroUsize::new(n).unwrap());
            let h = 2.0 * PI / n as f64;
            let mut angles = Vec::with_capacity(n * n);
            let mut weights = Vec::with_capacity(n * n);
            for &(x, w) in gl.as_node_weight_pairs() {
                for a in 0..n {
                    angles.push([x.clamp(-1.0, 1.0).acos(), a as f64 * h]);
                    weights.push(w * h);
                }
            }
            (angles, weights)
        };
        let points = angles.iter().map(|a| to_cartesian(d, *a)).collect();
        let mut basis = SphereBasis {
            d,
            l_max,
            modes,
            angles,
            points,
            weights,
            values: Vec::new(),
        };
        let n_nodes = basis.angles.len();
        let mut values = vec![0.0; basis.modes.len() * n_nodes];
        for (q, a) in basis.angles.iter().enumerate() {
            for (j, v) in basis.eval_modes(*a).into_iter().enumerate() {
                values[j * n_nodes + q] = v;
            }
        }
        basis.values = values;
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn max_degree(&self) -> usize {
        self.l_max
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn angles(&self) -> &[Angles] {
        &self.angles
    }

    /// Cartesian coordinates of the nodes; the third entry is 0 for d = 2.
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn area(&self) -> f64 {
        sphere_area(self.d)
    }

    /// Values of mode `j` at every node.
    pub fn mode_nodal(&self, j: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.values[j * n..(j + 1) * n]
    }

    /// Indices of the modes of a given degree.
    pub fn degree_modes(&self, degree: usize) -> impl Iterator<Item = usize> + '_ {
        self.modes
            .iter()
            .filter(move |m| m.degree == degree)
            .map(|m| m.index)
    }

    pub fn largest_eigenvalue(&self) -> f64 {
        let l = self.l_max as f64;
        l * (l + self.d as f64 - 2.0)
    }

    /// Evaluates every basis function at one point.
    pub fn eval_modes(&self, a: Angles) -> Vec<f64> {
        if self.d == 2 {
            let mut out = Vec::with_capacity(self.modes.len());
            out.push(1.0 / (2.0 * PI).sqrt());
            let s = 1.0 / PI.sqrt();
            for k in 1..=self.l_max {
                let kt = k as f64 * a[0];
                out.push(s * kt.cos());
                out.push(s * kt.sin());
            }
            out
        } else {
            real_harmonics(self.l_max, a[0].cos(), a[0].sin(), a[1])
        }
    }

    /// Quadrature sum of nodal samples.
    pub fn integrate(&self, samples: &[f64]) -> Result<f64> {
        check_len(self.n_nodes(), samples.len())?;
        Ok(self.weights.iter().zip(samples).map(|(w, f)| w * f).sum())
    }

    /// Coefficients of nodal samples by quadrature.
    pub fn analyze(self: &Arc<Self>, samples: &[f64]) -> Result<Trace> {
        check_len(self.n_nodes(), samples.len())?;
        let ws: Vec<f64> = self.weights.iter().zip(samples).map(|(w, f)| w * f).collect();
        let coeffs = (0..self.n_modes())
            .map(|j| dot(self.mode_nodal(j), &ws))
            .collect();
        Ok(Trace {
            basis: Arc::clone(self),
            coeffs,
        })
    }

    fn eval_function(&self, coeffs: &[f64], a: Angles) -> f64 {
        dot(&self.eval_modes(a), coeffs)
    }
}

fn mode_table(d: usize, l_max: usize) -> Vec<Mode> {
    let mut modes = Vec::new();
    for l in 0..=l_max {
        let count = match (d, l) {
            (2, 0) => 1,
            (2, _) => 2,
            _ => 2 * l + 1,
        };
        let lambda = (l * (l + d - 2)) as f64;
        for slot in 0..count {
            modes.push(Mode {
                index: modes.len(),
                degree: l,
                eigenvalue: lambda,
                slot,
            });
        }
    }
    modes
}

fn to_cartesian(d: usize, a: Angles) -> [f64; 3] {
    if d == 2 {
        [a[0].cos(), a[0].sin(), 0.0]
    } else {
        let s = a[0].sin();
        [s * a[1].cos(), s * a[1].sin(), a[0].cos()]
    }
}

/// Real spherical harmonics up to degree `l_max` at (cos polar, sin polar,
/// azimuth), ordered by degree then m = 0, cos 1, sin 1, cos 2, ...
fn real_harmonics(l_max: usize, x: f64, s: f64, phi: f64) -> Vec<f64> {
    let p = legendre_table(l_max, x, s);
    let n = l_max + 1;
    let mut out = Vec::with_capacity(n * n);
    let r2 = 2f64.sqrt();
    for (l, row) in p.iter().enumerate() {
        out.push(row[0]);
        for (m, plm) in row.iter().enumerate().take(l + 1).skip(1) {
            let mphi = m as f64 * phi;
            out.push(r2 * plm * mphi.cos());
            out.push(r2 * plm * mphi.sin());
        }
    }
    out
}

/// Normalized associated Legendre functions `p[l][m]` at `cos = x`, `sin = s`.
fn legendre_table(l_max: usize, x: f64, s: f64) -> Vec<Vec<f64>> {
    let n = l_max + 1;
    let mut p = vec![vec![0.0; n]; n];
    p[0][0] = (1.0 / (4.0 * PI)).sqrt();
    for m in 1..n {
        let mf = m as f64;
        p[m][m] = -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[m - 1][m - 1];
    }
    for m in 0..n {
        if m + 1 < n {
            p[m + 1][m] = (2.0 * m as f64 + 3.0).sqrt() * x * p[m][m];
        }
        for l in (m + 2)..n {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[l][m] = a * (x * p[l - 1][m] - b * p[l - 2][m]);
        }
    }
    p
}

fn trig_sum(a: &[f64], b: &[f64], phi: f64) -> f64 {
    let (s1, c1) = phi.sin_cos();
    let (mut cm, mut sm) = (1.0, 0.0);
    let mut total = a[0];
    for m in 1..a.len() {
        (cm, sm) = (cm * c1 - sm * s1, sm * c1 + cm * s1);
        total += a[m] * cm + b[m] * sm;
    }
    total
}

// A function on the 2-sphere restricted to one polar angle, as a
// trigonometric polynomial in the azimuth.
fn azimuthal_series(l_max: usize, coeffs: &[f64], polar: f64) -> (Vec<f64>, Vec<f64>) {
    let p = legendre_table(l_max, polar.cos(), polar.sin());
    let r2 = 2f64.sqrt();
    let mut a = vec![0.0; l_max + 1];
    let mut b = vec![0.0; l_max + 1];
    for (l, row) in p.iter().enumerate() {
        let base = l * l;
        a[0] += coeffs[base] * row[0];
        for m in 1..=l {
            a[m] += r2 * row[m] * coeffs[base + 2 * m - 1];
            b[m] += r2 * row[m] * coeffs[base + 2 * m];
        }
    }
    (a, b)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}

/// A band-limited function on the sphere in the coefficient representation.
#[derive(Debug, Clone)]
pub struct Trace {
    basis: Arc<SphereBasis>,
    coeffs: Vec<f64>,
}

impl Trace {
    pub fn zeros(basis: &Arc<SphereBasis>) -> Self {
        Trace {
            basis: Arc::clone(basis),
            coeffs: vec![0.0; basis.n_modes()],
        }
    }

    pub fn from_coeffs(basis: &Arc<SphereBasis>, coeffs: Vec<f64>) -> Result<Self> {
        check_len(basis.n_modes(), coeffs.len())?;
        Ok(Trace {
            basis: Arc::clone(basis),
            coeffs,
        })
    }

    /// The constant function with the given value.
    pub fn constant(basis: &Arc<SphereBasis>, value: f64) -> Self {
        let mut t = Trace::zeros(basis);
        t.coeffs[0] = value * basis.area().sqrt();
        t
    }

    /// A single basis function scaled by `coef`.
    pub fn mode(basis: &Arc<SphereBasis>, j: usize, coef: f64) -> Self {
        let mut t = Trace::zeros(basis);
        t.coeffs[j] = coef;
        t
    }

    pub fn basis(&self) -> &Arc<SphereBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn same_basis(&self, other: &Trace) -> bool {
        Arc::ptr_eq(&self.basis, &other.basis)
    }

    pub fn synthesize(&self) -> Vec<f64> {
        let n = self.basis.n_nodes();
        let mut out = vec![0.0; n];
        for (j, c) in self.coeffs.iter().enumerate() {
            if *c != 0.0 {
                for (o, v) in out.iter_mut().zip(self.basis.mode_nodal(j)) {
                    *o += c * v;
                }
            }
        }
        out
    }

    pub fn eval_at(&self, a: Angles) -> f64 {
        self.basis.eval_function(&self.coeffs, a)
    }

    pub fn mean_value(&self) -> f64 {
        self.coeffs[0] / self.basis.area().sqrt()
    }

    pub fn dot(&self, other: &Trace) -> f64 {
        dot(&self.coeffs, &other.coeffs)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Dirichlet energy of the tangential gradient.
    pub fn dirichlet(&self) -> f64 {
        self.basis
            .modes
            .iter()
            .zip(&self.coeffs)
            .map(|(m, c)| m.eigenvalue * c * c)
            .sum()
    }

    pub fn add(&self, other: &Trace) -> Trace {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &Trace) -> Trace {
        self.axpy(-1.0, other)
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Trace) -> Trace {
        debug_assert_eq!(self.coeffs.len(), other.coeffs.len());
        Trace {
            basis: Arc::clone(&self.basis),
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Trace {
        Trace {
            basis: Arc::clone(&self.basis),
            coeffs: self.coeffs.iter().map(|x| a * x).collect(),
        }
    }

    /// Keeps only modes whose degree satisfies `keep`.
    pub fn filter_degree(&self, keep: impl Fn(usize) -> bool) -> Trace {
        let coeffs = self
            .basis
            .modes
            .iter()
            .zip(&self.coeffs)
            .map(|(m, c)| if keep(m.degree) { *c } else { 0.0 })
            .collect();
        Trace {
            basis: Arc::clone(&self.basis),
            coeffs,
        }
    }

    /// Same coefficients on another basis with identical mode table.
    pub fn rebase(&self, basis: &Arc<SphereBasis>) -> Result<Trace> {
        if basis.dim() != self.basis.dim() || basis.max_degree() != self.basis.max_degree() {
            return Err(Error::BasisMismatch);
        }
        Trace::from_coeffs(basis, self.coeffs.clone())
    }

    pub fn nodal_min(&self) -> f64 {
        self.synthesize().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Text form: `d L` then one coefficient per line, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.basis.dim(), self.basis.max_degree());
        for c in &self.coeffs {
            let _ = writeln!(s, "{c:.16e}");
        }
        s
    }

    /// Parses the text form; the header must match `basis`.
    pub fn from_text(basis: &Arc<SphereBasis>, text: &str, origin: &Path) -> Result<Trace> {
        let parse_err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            detail,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
        let hv: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("header: {e}")))?;
        if hv.len() != 2 || hv[0] != basis.dim() || hv[1] != basis.max_degree() {
            return Err(parse_err(format!(
                "header {header:?} does not match d = {}, L = {}",
                basis.dim(),
                basis.max_degree()
            )));
        }
        let coeffs = lines
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("coefficient: {e}")))?;
        if coeffs.len() != basis.n_modes() {
            return Err(parse_err(format!(
                "{} coefficients for {} modes",
                coeffs.len(),
                basis.n_modes()
            )));
        }
        Ok(Trace {
            basis: Arc::clone(basis),
            coeffs,
        })
    }

    /// Reads the header of a trace file without building a basis.
    pub fn read_header(text: &str) -> Option<(usize, usize)> {
        let mut it = text.lines().next()?.split_whitespace();
        let d = it.next()?.parse().ok()?;
        let l = it.next()?.parse().ok()?;
        Some((d, l))
    }
}

/// Supremum of the negative part, `max(0, max(-f))`.
///
/// The nodal scan runs on a grid eight times finer than the quadrature
/// nodes; the best cell is then zoomed into repeatedly.
pub fn sup_negative_part(trace: &Trace) -> f64 {
    sup_negative_part_with(trace, 8)
}

pub fn sup_negative_part_with(trace: &Trace, factor: usize) -> f64 {
    let basis = trace.basis();
    let factor = factor.max(8);
    let c = trace.coeffs();
    let neg = |a: Angles| -basis.eval_function(c, a);
    let (mut best_a, mut best_v);
    if basis.dim() == 2 {
        let n = basis.n_nodes() * factor;
        let h = 2.0 * PI / n as f64;
        best_a = [0.0, 0.0];
        best_v = f64::NEG_INFINITY;
        for i in 0..n {
            let a = [i as f64 * h, 0.0];
            let v = neg(a);
            if v > best_v {
                best_v = v;
                best_a = a;
            }
        }
        let mut span = h;
        for _ in 0..12 {
            let center = best_a[0];
            let k = factor as i64;
            for i in -k..=k {
                let a = [center + span * i as f64 / k as f64, 0.0];
                let v = neg(a);
                if v > best_v {
                    best_v = v;
                    best_a = a;
                }
            }
            span /= k as f64 / 2.0;
        }
    } else {
        let per_axis = (basis.n_nodes() as f64).sqrt().round() as usize * factor;
        let hp = PI / per_axis as f64;
        let ha = 2.0 * PI / per_axis as f64;
        best_a = [0.0, 0.0];
        best_v = neg(best_a);
        let l_max = basis.max_degree();
        for i in 0..=per_axis {
            let (ca, sa) = azimuthal_series(l_max, c, i as f64 * hp);
            for k in 0..per_axis {
                let phi = k as f64 * ha;
                let f = trig_sum(&ca, &sa, phi);
                if -f > best_v {
                    best_v = -f;
                    best_a = [i as f64 * hp, phi];
                }
            }
        }
        let (mut sp, mut sa) = (hp, ha);
        let k = factor as i64;
        for _ in 0..12 {
            let center = best_a;
            for i in -k..=k {
                let pol = (center[0] + sp * i as f64 / k as f64).clamp(0.0, PI);
                let (ca, sa_) = azimuthal_series(l_max, c, pol);
                for m in -k..=k {
                    let phi = center[1] + sa * m as f64 / k as f64;
                    let v = -trig_sum(&ca, &sa_, phi);
                    if v > best_v {
                        best_v = v;
                        best_a = [pol, phi];
                    }
                }
            }
            sp /= k as f64 / 2.0;
            sa /= k as f64 / 2.0;
        }
    }
    best_v.max(0.0)
}
