//! Finite-difference obstacle problem on `[-1, 1]^2`, blow-ups at a point,
//! and the decay/dyadic machinery turning a log-epiperimetric gain into a
//! logarithmic convergence rate.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::energy::{w_volumetric, PolarField};
use crate::error::{Error, Result};
use crate::sphere::{SphereBasis, Trace};

/// Nodal values on the uniform `(n+1) x (n+1)` grid of `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    n: usize,
    h: f64,
    u: Vec<f64>,
}

/// Discrete complementarity of `u >= 0`, `r = -Lap_h u + 1/2 >= 0`, `u r = 0`
/// over interior nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Complementarity {
    pub min_u: f64,
    pub min_residual: f64,
    pub max_product: f64,
}

impl Complementarity {
    pub fn holds(&self, tol: f64) -> bool {
        self.min_u >= 0.0 && self.min_residual >= -tol && self.max_product <= tol
    }
}

impl GridField {
    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!("grid size n = {n} must be even and at least 4")));
        }
        let h = 2.0 / n as f64;
        let mut u = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                u.push(f(-1.0 + i as f64 * h, -1.0 + j as f64 * h));
            }
        }
        Ok(GridField { n, h, u })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn coord(&self, i: usize) -> f64 {
        -1.0 + i as f64 * self.h
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.u[j * (self.n + 1) + i]
    }

    pub fn values(&self) -> &[f64] {
        &self.u
    }

    /// Bilinear interpolant; points outside the square are clamped to it.
    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        let n = self.n;
        let fx = ((x + 1.0) / self.h).clamp(0.0, n as f64);
        let fy = ((y + 1.0) / self.h).clamp(0.0, n as f64);
        let i = (fx.floor() as usize).min(n - 1);
        let j = (fy.floor() as usize).min(n - 1);
        let (sx, sy) = (fx - i as f64, fy - j as f64);
        let v = |a, b| self.value(a, b);
        (1.0 - sy) * ((1.0 - sx) * v(i, j) + sx * v(i + 1, j)) + sy * ((1.0 - sx) * v(i, j + 1) + sx * v(i + 1, j + 1))
    }

    /// `-Lap_h u + 1/2` at an interior node.
    pub fn residual_at(&self, i: usize, j: usize) -> f64 {
        let nb = self.value(i - 1, j) + self.value(i + 1, j) + self.value(i, j - 1) + self.value(i, j + 1);
        (4.0 * self.value(i, j) - nb) / (self.h * self.h) + 0.5
    }

    pub fn complementarity(&self) -> Complementarity {
        let mut out = Complementarity {
            min_u: f64::INFINITY,
            min_residual: f64::INFINITY,
            max_product: 0.0,
        };
        for j in 1..self.n {
            for i in 1..self.n {
                let u = self.value(i, j);
                let r = self.residual_at(i, j);
                out.min_u = out.min_u.min(u);
                out.min_residual = out.min_residual.min(r);
                out.max_product = out.max_product.max((u * r).abs());
            }
        }
        out
    }

    /// `sum over edges (u_a - u_b)^2 + h^2 sum over interior u`, the discrete
    /// `int |grad u|^2 + u` up to boundary terms fixed by the data.
    pub fn discrete_energy(&self) -> f64 {
        let n = self.n;
        let mut e = 0.0;
        for j in 0..=n {
            for i in 0..=n {
                if i < n {
                    e += (self.value(i + 1, j) - self.value(i, j)).powi(2);
                }
                if j < n {
                    e += (self.value(i, j + 1) - self.value(i, j)).powi(2);
                }
                if i > 0 && j > 0 && i < n && j < n {
                    e += self.h * self.h * self.value(i, j);
                }
            }
        }
        e
    }

    /// CSV with columns `i,j,x,y,u`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,x,y,u\n");
        for j in 0..=self.n {
            for i in 0..=self.n {
                writeln!(out, "{i},{j},{:.12e},{:.12e},{:.16e}", self.coord(i), self.coord(j), self.value(i, j))
                    .expect("writing to a string");
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsorParams {
    pub omega: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    /// Record the discrete energy after every sweep.
    pub track_energy: bool,
}

impl PsorParams {
    /// Near-optimal relaxation `2 / (1 + sin(pi / n))` for the square.
    pub fn for_grid(n: usize) -> Self {
        PsorParams {
            omega: 2.0 / (1.0 + (std::f64::consts::PI / n as f64).sin()),
            tol: 1e-9,
            max_sweeps: 200_000,
            track_energy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsorReport {
    pub sweeps: usize,
    pub energies: Vec<f64>,
    pub complementarity: Complementarity,
}

/// Projected SOR for `min int |grad u|^2 + u` over `u >= 0` with Dirichlet
/// data `g` on the boundary of the `n x n` cell grid.
pub fn psor_solve(g: impl Fn(f64, f64) -> f64, n: usize, params: &PsorParams) -> Result<(GridField, PsorReport)> {
    if !(1.0..2.0).contains(&params.omega) {
        return Err(Error::InvalidArgument(format!("omega = {} must lie in [1, 2)", params.omega)));
    }
    if !(params.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut field = GridField::from_fn(n, |x, y| {
        if x.abs() == 1.0 || y.abs() == 1.0 {
            g(x, y)
        } else {
            0.0
        }
    })?;
    let boundary_min = (0..=n)
        .flat_map(|k| [(k, 0), (k, n), (0, k), (n, k)])
        .map(|(i, j)| field.value(i, j))
        .fold(f64::INFINITY, f64::min);
    if boundary_min < 0.0 {
        return Err(Error::Precondition {
            what: "psor_solve".into(),
            detail: format!("boundary data is negative (min {boundary_min:e})"),
        });
    }
    let h2 = field.h * field.h;
    let stride = n + 1;
    let mut energies = Vec::new();
    if params.track_energy {
        energies.push(field.discrete_energy());
    }
    for sweep in 1..=params.max_sweeps {
        let mut change: f64 = 0.0;
        let u = &mut field.u;
        for j in 1..n {
            for i in 1..n {
                let k = j * stride + i;
                let gs = (u[k - 1] + u[k + 1] + u[k - stride] + u[k + stride] - 0.5 * h2) / 4.0;
                let next = (u[k] + params.omega * (gs - u[k])).max(0.0);
                change = change.max((next - u[k]).abs());
                u[k] = next;
            }
        }
        if params.track_energy {
            energies.push(field.discrete_energy());
        }
        if change <= params.tol * h2 {
            let comp = field.complementarity();
            if comp.holds(params.tol) {
                return Ok((
                    field,
                    PsorReport {
                        sweeps: sweep,
                        energies,
                        complementarity: comp,
                    },
                ));
            }
        }
    }
    Err(Error::NoConvergence(params.max_sweeps))
}

/// `(x . nu - 0.1)_+^2 / 4` with `nu` at angle 0.3: a global solution whose
/// free boundary crosses the grid lines at generic positions.
pub fn half_space_exact(x: f64, y: f64) -> f64 {
    let s = half_space_level(x, y);
    0.25 * s.max(0.0).powi(2)
}

fn half_space_level(x: f64, y: f64) -> f64 {
    x * 0.3f64.cos() + y * 0.3f64.sin() - 0.1
}

/// `x^2/4 + 0.02 Re z^3 + 0.02`, a quadratic tilted by a cubic and lifted
/// off the obstacle.
pub fn perturbed_data(x: f64, y: f64) -> f64 {
    0.25 * x * x + 0.02 * (x * x * x - 3.0 * x * y * y) + 0.02
}

/// `|x|^2/8 + 0.02 Re z^6`: the origin stays a singular point and the
/// blow-ups approach `|x|^2/8` like `r^4`, fast enough to show up before the
/// `O((h/r)^2)` interpolation error takes over.
pub fn singular_data(x: f64, y: f64) -> f64 {
    let (r2, t) = (x * x + y * y, y.atan2(x));
    0.125 * r2 + 0.02 * r2.powi(3) * (6.0 * t).cos()
}

/// Max nodal errors against [`half_space_exact`] on a 17 x 17 probe lattice,
/// split into a band of width 0.25 around the free boundary and the region
/// beyond it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStudy {
    pub ns: Vec<usize>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
}

fn orders(e: &[f64]) -> Vec<f64> {
    e.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

impl RefinementStudy {
    pub fn near_orders(&self) -> Vec<f64> {
        orders(&self.near)
    }

    pub fn far_orders(&self) -> Vec<f64> {
        orders(&self.far)
    }
}

/// Solves the half-space problem on each grid (multiples of 16, doubling).
pub fn half_space_study(ns: &[usize], tol: f64) -> Result<RefinementStudy> {
    let mut near = Vec::new();
    let mut far = Vec::new();
    for &n in ns {
        if n % 16 != 0 {
            return Err(Error::InvalidArgument(format!("grid size {n} is not a multiple of 16")));
        }
        let params = PsorParams {
            tol,
            ..PsorParams::for_grid(n)
        };
        let (u, _) = psor_solve(half_space_exact, n, &params)?;
        let (mut e_near, mut e_far) = (0.0f64, 0.0f64);
        for j in 0..=16 {
            for i in 0..=16 {
                let (ii, jj) = (i * n / 16, j * n / 16);
                let (x, y) = (u.coord(ii), u.coord(jj));
                let e = (u.value(ii, jj) - half_space_exact(x, y)).abs();
                let s = half_space_level(x, y);
                if s.abs() <= 0.25 {
                    e_near = e_near.max(e);
                } else if s > 0.25 {
                    e_far = e_far.max(e);
                }
            }
        }
        near.push(e_near);
        far.push(e_far);
    }
    Ok(RefinementStudy {
        ns: ns.to_vec(),
        near,
        far,
    })
}

/// `u_{r,x0}(x) = u(x0 + r x) / r^2` sampled on `n_shells + 1` uniform radii
/// of the unit disk at the nodes of `basis`.
pub fn blowup_rescale(
    u: &GridField,
    x0: [f64; 2],
    r: f64,
    basis: &Arc<SphereBasis>,
    n_shells: usize,
) -> Result<PolarField> {
    if basis.dim() != 2 {
        return Err(Error::UnsupportedDimension(basis.dim()));
    }
    let reach = x0[0].abs().max(x0[1].abs()) + r;
    if reach > 1.0 + 1e-12 || r < 4.0 * u.h() {
        return Err(Error::BallOutsideGrid { x0: x0[0], y0: x0[1], r });
    }
    let radii: Vec<f64> = (0..=n_shells).map(|i| i as f64 / n_shells as f64).collect();
    let values = radii
        .iter()
        .map(|&rho| {
            basis
                .angles()
                .iter()
                .map(|a| {
                    let (s, c) = a[0].sin_cos();
                    u.interpolate(x0[0] + r * rho * c, x0[1] + r * rho * s) / (r * r)
                })
                .collect()
        })
        .collect();
    Ok(PolarField {
        basis: Arc::clone(basis),
        radii,
        values,
    })
}

/// The trace on the unit shell, analyzed spectrally.
pub fn extract_trace(field: &PolarField) -> Result<Trace> {
    let top = field.values.last().ok_or(Error::GridTooCoarse { got: 0, min: 2 })?;
    field.basis.analyze(top)
}

/// `int_{dB_1} |x . grad u - 2u|^2` from the outermost five shells.
pub fn homogeneity_defect(field: &PolarField) -> Result<f64> {
    let n = field.radii.len();
    if n < 5 {
        return Err(Error::GridTooCoarse { got: n, min: 5 });
    }
    let h = field.radii[1] - field.radii[0];
    let v = |k: usize| &field.values[n - 1 - k];
    let samples: Vec<f64> = (0..field.basis.n_nodes())
        .map(|q| {
            let du = (25.0 * v(0)[q] - 48.0 * v(1)[q] + 36.0 * v(2)[q] - 16.0 * v(3)[q] + 3.0 * v(4)[q]) / (12.0 * h);
            (du - 2.0 * v(0)[q]).powi(2)
        })
        .collect();
    field.basis.integrate(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeissPoint {
    pub r: f64,
    pub w: f64,
    pub defect: f64,
}

/// `W(u_r)` and the homogeneity defect at increasing radii.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeissSeries {
    pub h: f64,
    pub points: Vec<WeissPoint>,
}

impl WeissSeries {
    /// Smallest difference quotient of `W(u_r)` in `ln r`.
    pub fn min_log_slope(&self) -> f64 {
        self.points
            .windows(2)
            .map(|p| (p[1].w - p[0].w) / (p[1].r.ln() - p[0].r.ln()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Monotone in `r` up to `c h` slack on the log-slopes.
    pub fn is_monotone(&self, c: f64) -> bool {
        self.min_log_slope() >= -c * self.h
    }
}

pub fn weiss_series(
    u: &GridField,
    x0: [f64; 2],
    radii: &[f64],
    basis: &Arc<SphereBasis>,
    n_shells: usize,
) -> Result<WeissSeries> {
    let mut rs = radii.to_vec();
    rs.sort_by(f64::total_cmp);
    let points = rs
        .iter()
        .map(|&r| {
            let field = blowup_rescale(u, x0, r, basis, n_shells)?;
            let w = w_volumetric(&field, 0.0)?.w;
            Ok(WeissPoint {
                r,
                w,
                defect: homogeneity_defect(&field)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(WeissSeries { h: u.h(), points })
}

/// Solution of `e' = -C e^{1+gamma}` at the requested times next to the
/// closed form `(e0^{-gamma} + t gamma C)^{-1/gamma}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecaySeries {
    pub gamma: f64,
    pub c: f64,
    pub times: Vec<f64>,
    pub e: Vec<f64>,
    pub bound: Vec<f64>,
}

pub fn decay_bound(e0: f64, gamma: f64, c: f64, t: f64) -> f64 {
    if t == 0.0 {
        return e0;
    }
    (e0.powf(-gamma) + t * gamma * c).powf(-1.0 / gamma)
}

impl DecaySeries {
    pub fn max_rel_error(&self) -> f64 {
        self.e
            .iter()
            .zip(&self.bound)
            .map(|(e, b)| ((e - b) / b).abs())
            .fold(0.0, f64::max)
    }

    /// Least-squares slope of `ln e` against `ln t` over `[lo, hi]`.
    pub fn loglog_slope(&self, lo: f64, hi: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.e)
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(t, e)| (t.ln(), e.ln()))
            .collect();
        least_squares_slope(&pts)
    }

    /// CSV with columns `t,e,bound`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,e,bound\n");
        for k in 0..self.times.len() {
            writeln!(out, "{:.12e},{:.16e},{:.16e}", self.times[k], self.e[k], self.bound[k])
                .expect("writing to a string");
        }
        out
    }
}

fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `0` followed by `n` log-spaced times in `[t_min, t_max]`.
pub fn decay_times(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    let (a, b) = (t_min.ln(), t_max.ln());
    out.extend((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1).max(1) as f64).exp()));
    out
}

pub fn decay_simulator(e0: f64, gamma: f64, c: f64, times: &[f64]) -> Result<DecaySeries> {
    if !(e0 > 0.0) || !(gamma > 0.0 && gamma < 1.0) || !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need e0 > 0, gamma in (0, 1), C > 0 (got {e0}, {gamma}, {c})"
        )));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::InvalidArgument("times must be nonnegative and sorted".into()));
    }
    let e = dopri5(|_, y| -c * y.max(0.0).powf(1.0 + gamma), e0, times, 1e-12, 1e-300);
    let bound = times.iter().map(|&t| decay_bound(e0, gamma, c, t)).collect();
    Ok(DecaySeries {
        gamma,
        c,
        times: times.to_vec(),
        e,
        bound,
    })
}

/// Dormand-Prince 5(4) with step-size control for a scalar ODE, reporting the
/// solution at every output time.
pub fn dopri5(f: impl Fn(f64, f64) -> f64, y0: f64, t_out: &[f64], rtol: f64, atol: f64) -> Vec<f64> {
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let mut out = Vec::with_capacity(t_out.len());
    let (mut t, mut y) = (0.0f64, y0);
    let mut h: f64 = 1e-3;
    for &target in t_out {
        while t < target {
            let step = h.min(target - t);
            let mut k = [0.0; 7];
            for s in 0..7 {
                let ys = y + step * (0..s).map(|m| A[s][m] * k[m]).sum::<f64>();
                k[s] = f(t + C[s] * step, ys);
            }
            let y5 = y + step * (0..6).map(|m| A[6][m] * k[m]).sum::<f64>();
            let y4 = y + step * (0..7).map(|m| B4[m] * k[m]).sum::<f64>();
            let err = (y5 - y4).abs() / (atol + rtol * y.abs().max(y5.abs()));
            if err <= 1.0 {
                t = if step == target - t { target } else { t + step };
                y = y5;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // keep the enlarged step when only the output time shortened it
            h = if step < h && err <= 1.0 { h.max(step * factor) } else { step * factor };
        }
        out.push(y);
    }
    out
}

/// Rate measured on a blow-up family `u_n` at times `t_n = -ln r_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DyadicFit {
    /// Fitted `q` in `|u_n - u_0| ~ t_n^{-q}`.
    pub exponent: f64,
    /// `(1 - gamma) / (2 gamma)`.
    pub target: f64,
    pub sigma: f64,
    /// `1 / (1 - sigma)`.
    pub geometric_factor: f64,
    /// `(C / C_a)^{1/2} / (1 - sigma)`.
    pub cauchy_constant: f64,
    pub increments: Vec<f64>,
    pub distances: Vec<f64>,
    /// Pairwise distances never exceed the telescoped increments and the
    /// tails stay under `K sigma^n / (1 - sigma)` for the measured `K`.
    pub telescoping_ok: bool,
}

/// Fits the decay of `|u_n - u_0|` in `t_n`. The limit `u_0` is `limit` when
/// known, else the Aitken extrapolation of the last three members.
pub fn dyadic_rate(
    family: &[Trace],
    times: &[f64],
    limit: Option<&Trace>,
    gamma: f64,
    c_decay: f64,
    c_a: f64,
) -> Result<DyadicFit> {
    if family.len() < 4 {
        return Err(Error::TooFewScales {
            got: family.len(),
            min: 4,
        });
    }
    if times.len() != family.len() {
        return Err(Error::ShapeMismatch {
            expected: family.len(),
            got: times.len(),
        });
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= 0.0 {
        return Err(Error::InvalidArgument("times must be positive and increasing".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) || !(c_decay > 0.0) || !(c_a > 0.0) {
        return Err(Error::InvalidArgument("need gamma in (0, 1) and positive constants".into()));
    }
    let n = family.len();
    let increments: Vec<f64> = family.windows(2).map(|w| w[1].sub(&w[0]).norm()).collect();
    let last = family[n - 1].sub(&family[n - 2]);
    let rho = increments[n - 2] / increments[n - 3];
    let limit = if let Some(l) = limit {
        l.rebase(family[0].basis())?
    } else if rho.is_finite() && rho < 1.0 {
        family[n - 1].axpy(rho / (1.0 - rho), &last)
    } else {
        family[n - 1].clone()
    };
    let distances: Vec<f64> = family.iter().map(|u| u.sub(&limit).norm()).collect();
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(&distances)
        .filter(|(_, d)| **d > 1e-14)
        .map(|(t, d)| (t.ln(), d.ln()))
        .collect();
    let exponent = least_squares_slope(&pts).map_or(f64::NAN, |s| -s);
    let target = (1.0 - gamma) / (2.0 * gamma);
    let sigma = 2f64.powf(-target);
    let geometric_factor = 1.0 / (1.0 - sigma);

    let mut telescoping_ok = true;
    for a in 0..n {
        for b in a + 1..n {
            let direct = family[b].sub(&family[a]).norm();
            let sum: f64 = increments[a..b].iter().sum();
            telescoping_ok &= direct <= sum * (1.0 + 1e-12) + 1e-15;
        }
    }
    let k = increments
        .iter()
        .enumerate()
        .map(|(i, d)| d / sigma.powi(i as i32))
        .fold(0.0, f64::max);
    for start in 0..n - 1 {
        let tail: f64 = increments[start..].iter().sum();
        telescoping_ok &= tail <= k * sigma.powi(start as i32) * geometric_factor * (1.0 + 1e-12);
    }
    Ok(DyadicFit {
        exponent,
        target,
        sigma,
        geometric_factor,
        cauchy_constant: (c_decay / c_a).sqrt() * geometric_factor,
        increments,
        distances,
        telescoping_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::{eval_on_sphere, reference_energies, QuadraticBlowup};
    use crate::energy::DEFAULT_SHELLS;
    use crate::sphere::build_basis;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad(a: &QuadraticBlowup) -> impl Fn(f64, f64) -> f64 + '_ {
        move |x, y| a.eval(&[x, y, 0.0])
    }

    #[test]
    fn quadratic_data_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..4 {
            let a = QuadraticBlowup::random(2, &mut rng);
            let params = PsorParams {
                tol: 1e-11,
                ..PsorParams::for_grid(32)
            };
            let (u, rep) = psor_solve(quad(&a), 32, &params).unwrap();
            assert!(rep.complementarity.holds(1e-11));
            let exact = GridField::from_fn(32, quad(&a)).unwrap();
            let err = u.values().iter().zip(exact.values()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        let (u, _) = psor_solve(|_, _| 0.0, 16, &PsorParams::for_grid(16)).unwrap();
        assert!(u.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn psor_rejects_bad_input() {
        let p = PsorParams::for_grid(16);
        assert!(psor_solve(|_, _| 0.0, 16, &PsorParams { omega: 2.0, ..p }).is_err());
        assert!(psor_solve(|_, _| 0.0, 16, &PsorParams { omega: 0.5, ..p }).is_err());
        assert!(matches!(psor_solve(|x, _| x, 16, &p), Err(Error::Precondition { .. })));
        assert!(matches!(
            psor_solve(half_space_exact, 64, &PsorParams { max_sweeps: 3, ..p }),
            Err(Error::NoConvergence(3))
        ));
    }

    #[test]
    fn psor_energy_decreases_every_sweep() {
        for omega in [1.0, 1.5, 1.9] {
            let params = PsorParams {
                omega,
                track_energy: true,
                ..PsorParams::for_grid(16)
            };
            let (_, rep) = psor_solve(half_space_exact, 16, &params).unwrap();
            for w in rep.energies.windows(2) {
                // slack for rounding in the sum over edges
                assert!(w[1] <= w[0] + 1e-13 * w[0].abs(), "omega {omega}: {} -> {} ({:e})", w[0], w[1], w[1] - w[0]);
            }
        }
    }

    #[test]
    fn half_space_converges() {
        let study = half_space_study(&[32, 64, 128], 1e-9).unwrap();
        let (near, far) = (study.near_orders(), study.far_orders());
        assert!(near.iter().all(|o| *o >= 1.0), "{near:?}");
        assert!(far.iter().all(|o| *o >= 1.9), "{far:?}");
    }

    #[test]
    fn blowup_of_a_quadratic_is_its_trace() {
        let b = build_basis(2, 8).unwrap();
        let a = QuadraticBlowup::diagonal(&[0.2, 0.05]).unwrap();
        let u = GridField::from_fn(64, quad(&a)).unwrap();
        let q = eval_on_sphere(&a, &b).unwrap();
        for (r, tol) in [(0.9, 2e-3), (0.5, 5e-3), (0.25, 2e-2)] {
            let t = extract_trace(&blowup_rescale(&u, [0.0, 0.0], r, &b, 32).unwrap()).unwrap();
            // bilinear error is h^2 |D^2 Q| / (8 r^2)
            let err = t.sub(&q).norm();
            assert!(err < tol * (0.03125 / (r * r)).max(1.0) && err > 0.0, "r = {r}: {err}");
        }
        assert!(matches!(blowup_rescale(&u, [0.5, 0.0], 0.6, &b, 32), Err(Error::BallOutsideGrid { .. })));
        assert!(blowup_rescale(&u, [0.0, 0.0], 0.1, &b, 32).is_err());
    }

    #[test]
    fn weiss_series_of_a_quadratic_is_flat() {
        let b = build_basis(2, 8).unwrap();
        let a = QuadraticBlowup::isotropic(2);
        let u = GridField::from_fn(128, quad(&a)).unwrap();
        let series = weiss_series(&u, [0.0, 0.0], &[0.25, 0.5, 0.9], &b, DEFAULT_SHELLS).unwrap();
        let w_s = reference_energies(2).unwrap().w_s;
        for p in &series.points {
            assert!((p.w - w_s).abs() < 1e-3, "{p:?}");
            // the bilinear interpolant is homogeneous only up to O(h / r)
            assert!(p.defect < (u.h() / p.r).powi(2), "{p:?}");
        }
        assert!(series.is_monotone(1.0));
    }

    #[test]
    fn defect_vanishes_only_for_two_homogeneous_fields() {
        let b = build_basis(2, 8).unwrap();
        let sample = |f: &dyn Fn(f64, f64) -> f64| {
            let radii: Vec<f64> = (0..=64).map(|i| i as f64 / 64.0).collect();
            let values = radii
                .iter()
                .map(|&r| b.angles().iter().map(|a| f(r * a[0].cos(), r * a[0].sin())).collect())
                .collect();
            PolarField {
                basis: Arc::clone(&b),
                radii,
                values,
            }
        };
        let field = sample(&|x, y| 0.25 * x * x + 0.1 * x * y);
        assert!(homogeneity_defect(&field).unwrap() < 1e-20);
        let field = sample(&|x, y| 0.125 * (x * x + y * y) + 0.05 * (x * x * x - 3.0 * x * y * y));
        // (x.grad - 2) r^3 cos 3t = r^3 cos 3t, so the defect is 0.05^2 pi
        let expected = 0.05f64.powi(2) * std::f64::consts::PI;
        assert!((homogeneity_defect(&field).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn perturbed_solution_has_monotone_weiss_series() {
        let b = build_basis(2, 8).unwrap();
        let (u, rep) = psor_solve(perturbed_data, 128, &PsorParams::for_grid(128)).unwrap();
        assert!(rep.complementarity.holds(1e-9));
        let series = weiss_series(&u, [0.0, 0.0], &[0.1, 0.2, 0.4, 0.8], &b, 64).unwrap();
        assert!(series.is_monotone(1.0), "{series:?}");
    }

    #[test]
    fn decay_examples() {
        assert!((decay_bound(1.0, 1.0 / 3.0, 1.0, 7.0) - 0.027).abs() < 1e-15);
        assert_eq!(decay_bound(0.4, 0.5, 2.0, 0.0), 0.4);
        let times = decay_times(1e-2, 1e4, 200);
        let s = decay_simulator(1.0, 1.0 / 3.0, 1.0, &times).unwrap();
        assert!(s.max_rel_error() < 1e-8, "{}", s.max_rel_error());
        assert_eq!(s.e[0], 1.0);
        let slope = s.loglog_slope(1e2, 1e4).unwrap();
        assert!((slope + 3.0).abs() < 0.03, "{slope}");
        assert!(s.e.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(s.to_csv().lines().count(), times.len() + 1);
        assert!(decay_simulator(1.0, 1.0, 1.0, &times).is_err());
    }

    #[test]
    fn synthetic_dyadic_family_has_the_predicted_rate() {
        let b = build_basis(2, 6).unwrap();
        let u0 = eval_on_sphere(&QuadraticBlowup::isotropic(2), &b).unwrap();
        let phi = Trace::mode(&b, 5, 0.3).add(&Trace::mode(&b, 8, -0.1));
        let times: Vec<f64> = (0..8).map(|n| 2f64.powi(n)).collect();
        let family: Vec<Trace> = times.iter().map(|t| u0.axpy(1.0 / t, &phi)).collect();
        let fit = dyadic_rate(&family, &times, None, 1.0 / 3.0, 1.0, 1.0).unwrap();
        assert!((fit.exponent - 1.0).abs() < 0.02, "{}", fit.exponent);
        assert!((fit.target - 1.0).abs() < 1e-15);
        assert!((fit.sigma - 0.5).abs() < 1e-15 && (fit.geometric_factor - 2.0).abs() < 1e-15);
        assert!(fit.telescoping_ok);
        assert!(matches!(
            dyadic_rate(&family[..3], &times[..3], None, 1.0 / 3.0, 1.0, 1.0),
            Err(Error::TooFewScales { got: 3, min: 4 })
        ));
    }

    #[test]
    fn psor_blowups_converge_at_a_singular_point() {
        let b = build_basis(2, 8).unwrap();
        let (u, _) = psor_solve(singular_data, 256, &PsorParams::for_grid(256)).unwrap();
        let times = [0.1, 0.2, 0.4, 0.8];
        let family: Vec<Trace> = times
            .iter()
            .map(|t: &f64| extract_trace(&blowup_rescale(&u, [0.0, 0.0], (-t).exp(), &b, 32).unwrap()).unwrap())
            .collect();
        // blow-up limits at singular points lie in S
        let limit = crate::critical::project_to_s(family.last().unwrap()).unwrap().trace;
        let fit = dyadic_rate(&family, &times, Some(&limit), 1.0 / 3.0, 1.0, 1.0).unwrap();
        assert!(fit.exponent >= fit.target - 0.05, "{fit:?}");
        assert!(fit.distances.windows(2).all(|w| w[1] < w[0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn simulated_decay_stays_under_the_bound(e0 in 0.01f64..10.0, gamma in 0.05f64..0.95, c in 0.1f64..10.0) {
            let times = decay_times(1e-3, 1e3, 60);
            let s = decay_simulator(e0, gamma, c, &times).unwrap();
            for (e, b) in s.e.iter().zip(&s.bound) {
                prop_assert!(*e <= b * (1.0 + 1e-8) + 1e-10);
            }
        }

        #[test]
        fn telescoping_holds_for_random_families(seed in any::<u64>(), gamma in 0.2f64..0.8) {
            use rand::Rng;
            let b = build_basis(2, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let times: Vec<f64> = (0..6).map(|n| 2f64.powi(n)).collect();
            let family: Vec<Trace> = times
                .iter()
                .map(|t| {
                    let c = (0..b.n_modes()).map(|_| rng.random_range(-1.0..1.0) * t.powf(-(1.0 - gamma) / (2.0 * gamma))).collect();
                    Trace::from_coeffs(&b, c).unwrap()
                })
                .collect();
            prop_assert!(dyadic_rate(&family, &times, None, gamma, 1.0, 1.0).unwrap().telescoping_ok);
        }
    }
}
