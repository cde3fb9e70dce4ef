//! Mode splitting, the positivity-corrected pair `(h2, h_alpha)`, explicit
//! competitors and the direct log-epiperimetric certificate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::critical::{project_to_s, reference_energies, QuadraticBlowup};
use crate::energy::{quadratic_part, slicing_w, w_of_extension, RadialProfileField, DEFAULT_SHELLS};
use crate::error::{Error, Result};
use crate::sphere::{ball_volume, sup_negative_part, SphereBasis, Trace};

/// `c = Q + eta_minus + eta_zero + eta_plus`, split by homogeneity.
#[derive(Debug, Clone)]
pub struct ModeSplit {
    pub q: QuadraticBlowup,
    pub q_trace: Trace,
    /// Degrees 0 and 1.
    pub eta_minus: Trace,
    /// Degree 2.
    pub eta_zero: Trace,
    /// Degrees 3 and up.
    pub eta_plus: Trace,
    /// `||c - Q||_{L2}`.
    pub distance: f64,
}

impl ModeSplit {
    pub fn basis(&self) -> &Arc<SphereBasis> {
        self.q_trace.basis()
    }

    pub fn dim(&self) -> usize {
        self.basis().dim()
    }

    pub fn reassemble(&self) -> Trace {
        self.q_trace.add(&self.eta_minus).add(&self.eta_zero).add(&self.eta_plus)
    }

    /// `Q + eta_minus + eta_zero`, the part extended 2-homogeneously.
    pub fn low_part(&self) -> Trace {
        self.q_trace.add(&self.eta_minus).add(&self.eta_zero)
    }
}

pub fn split_trace(c: &Trace) -> Result<ModeSplit> {
    let proj = project_to_s(c)?;
    let rest = c.sub(&proj.trace);
    Ok(ModeSplit {
        eta_minus: rest.filter_degree(|k| k < 2),
        eta_zero: rest.filter_degree(|k| k == 2),
        eta_plus: rest.filter_degree(|k| k > 2),
        q: proj.blowup,
        q_trace: proj.trace,
        distance: proj.distance,
    })
}

/// `h2 = Q + eta_minus + eta_zero + M Q0` and `h_alpha = eta_plus - M Q0`
/// with `Q0 = 8d (1/(4d) - Q)`.
#[derive(Debug, Clone)]
pub struct KeyPair {
    pub h2: Trace,
    pub h_alpha: Trace,
    pub m: f64,
    /// `M Q0`.
    pub correction: Trace,
}

pub fn build_h2_ha(split: &ModeSplit) -> KeyPair {
    let b = split.basis();
    let d = b.dim() as f64;
    let low = split.low_part();
    let m = sup_negative_part(&low);
    let q0 = Trace::constant(b, 1.0 / (4.0 * d)).sub(&split.q_trace).scale(8.0 * d);
    let correction = q0.scale(m);
    KeyPair {
        h2: low.add(&correction),
        h_alpha: split.eta_plus.sub(&correction),
        m,
        correction,
    }
}

/// `M^{d+1} / ||eta_plus||^2`, the quantity bounded by the key estimate.
/// `None` when `eta_plus` vanishes.
pub fn key_estimate_ratio(split: &ModeSplit, pair: &KeyPair) -> Option<f64> {
    let n2 = split.eta_plus.norm_sq();
    (n2 > 0.0).then(|| pair.m.powi(split.dim() as i32 + 1) / n2)
}

/// Residuals of the two key identities at `t`:
/// `h_alpha . gradF(h2 + t h_alpha) = 2t q(eta_plus)` and
/// `F(h2 + t h_alpha) = F(Q) + q(eta_minus) + t^2 q(eta_plus)`, where `q` is
/// the quadratic part of `F`.
pub fn key_identities_check(split: &ModeSplit, pair: &KeyPair, t: f64) -> (f64, f64) {
    let s = pair.h2.axpy(t, &pair.h_alpha);
    let qp = quadratic_part(&split.eta_plus);
    let qm = quadratic_part(&split.eta_minus);
    let r34 = (pair.h_alpha.dot(&crate::energy::grad_f(&s)) - 2.0 * t * qp).abs();
    let r35 = (crate::energy::f_of(&s) - crate::energy::f_of(&split.q_trace) - qm - t * t * qp).abs();
    (r34, r35)
}

/// Nodal values on a uniform grid in one or two flat coordinates,
/// interpolated linearly (n = 1) or bilinearly (n = 2).
#[derive(Debug, Clone)]
pub struct FlatPatch {
    n: usize,
    origin: [f64; 2],
    h: f64,
    shape: [usize; 2],
    values: Vec<f64>,
}

impl FlatPatch {
    /// Samples `f` on `shape[0] x shape[1]` nodes (use `shape[1] = 1` for n = 1).
    pub fn sample(n: usize, origin: [f64; 2], h: f64, shape: [usize; 2], f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        if !(n == 1 || n == 2) || h <= 0.0 || shape[0] < 2 || (n == 2 && shape[1] < 2) {
            return Err(Error::InvalidArgument("patch must be 1-D or 2-D with at least two nodes per axis".into()));
        }
        let ny = if n == 1 { 1 } else { shape[1] };
        let mut values = Vec::with_capacity(shape[0] * ny);
        for j in 0..ny {
            for i in 0..shape[0] {
                values.push(f([origin[0] + i as f64 * h, origin[1] + j as f64 * h]));
            }
        }
        Ok(FlatPatch {
            n,
            origin,
            h,
            shape: [shape[0], ny],
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn node(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.shape[0] + i]
    }

    fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + i as f64 * self.h, self.origin[1] + j as f64 * self.h]
    }

    /// Lipschitz constant of the interpolant.
    pub fn lipschitz(&self) -> f64 {
        let (nx, ny) = (self.shape[0], self.shape[1]);
        let mut lip: f64 = 0.0;
        if self.n == 1 {
            for i in 0..nx - 1 {
                lip = lip.max((self.node(i + 1, 0) - self.node(i, 0)).abs() / self.h);
            }
            return lip;
        }
        // the squared gradient of a bilinear cell is convex, so corners suffice
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let (a, b, c, e) = (self.node(i, j), self.node(i + 1, j), self.node(i, j + 1), self.node(i + 1, j + 1));
                for gx in [b - a, e - c] {
                    for gy in [c - a, e - b] {
                        lip = lip.max(gx.hypot(gy) / self.h);
                    }
                }
            }
        }
        lip
    }

    fn value_at(&self, x: [f64; 2]) -> f64 {
        let locate = |v: f64, n: usize| {
            let s = (v / self.h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n.saturating_sub(2));
            (i, s - i as f64)
        };
        let (i, sx) = locate(x[0] - self.origin[0], self.shape[0]);
        if self.n == 1 {
            return (1.0 - sx) * self.node(i, 0) + sx * self.node(i + 1, 0);
        }
        let (j, sy) = locate(x[1] - self.origin[1], self.shape[1]);
        (1.0 - sx) * (1.0 - sy) * self.node(i, j)
            + sx * (1.0 - sy) * self.node(i + 1, j)
            + (1.0 - sx) * sy * self.node(i, j + 1)
            + sx * sy * self.node(i + 1, j + 1)
    }
}

/// Outcome of the lower bound `int_{B_R} F^2 >= 2 w_n M^{n+2} / ((n+1)(n+2) L^n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub peak: f64,
    pub radius: f64,
}

impl LipschitzCheck {
    pub fn holds(&self) -> bool {
        self.lhs >= self.rhs
    }
}

// sub-cells per cell edge for the 2-D ball integral
const BALL_SUBSAMPLES: usize = 16;

pub fn lipschitz_bound_check(patch: &FlatPatch, l: f64) -> Result<LipschitzCheck> {
    let what = "lipschitz_bound_check".to_string();
    if l <= 0.0 || !l.is_finite() {
        return Err(Error::Precondition {
            what,
            detail: format!("L = {l} must be positive"),
        });
    }
    if let Some(v) = patch.values.iter().find(|v| **v < 0.0) {
        return Err(Error::Precondition {
            what,
            detail: format!("negative value {v}"),
        });
    }
    let lip = patch.lipschitz();
    if lip > l * (1.0 + 1e-12) {
        return Err(Error::Precondition {
            what,
            detail: format!("interpolant has Lipschitz constant {lip} > L = {l}"),
        });
    }
    let m = patch.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // among tied peaks take the one farthest from the patch edge
    let margin = |k: usize| {
        let (i, j) = (k % patch.shape[0], k / patch.shape[0]);
        let mut out = i.min(patch.shape[0] - 1 - i);
        if patch.n == 2 {
            out = out.min(j.min(patch.shape[1] - 1 - j));
        }
        out
    };
    let k = (0..patch.values.len())
        .filter(|&k| patch.values[k] == m)
        .max_by_key(|&k| margin(k))
        .unwrap_or(0);
    if m <= 0.0 {
        return Err(Error::Precondition {
            what,
            detail: "peak value must be positive".into(),
        });
    }
    let (ci, cj) = (k % patch.shape[0], k / patch.shape[0]);
    let center = patch.coord(ci, cj);
    let radius = m / l;
    let hi = patch.coord(patch.shape[0] - 1, patch.shape[1] - 1);
    for axis in 0..patch.n {
        if center[axis] - radius < patch.origin[axis] - 1e-12 || center[axis] + radius > hi[axis] + 1e-12 {
            return Err(Error::PeakOnBoundary(radius));
        }
    }
    let n = patch.n;
    let rhs = 2.0 * ball_volume(n) * m.powi(n as i32 + 2) / ((n + 1) as f64 * (n + 2) as f64 * l.powi(n as i32));
    let lhs = if n == 1 { ball_integral_1d(patch, center[0], radius) } else { ball_integral_2d(patch, center, radius) };
    Ok(LipschitzCheck {
        lhs,
        rhs,
        peak: m,
        radius,
    })
}

// exact: F is linear on each clipped piece, so Simpson integrates F^2 exactly
fn ball_integral_1d(patch: &FlatPatch, c: f64, r: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..patch.shape[0] - 1 {
        let x0 = patch.coord(i, 0)[0];
        let (a, b) = (x0.max(c - r), (x0 + patch.h).min(c + r));
        if b <= a {
            continue;
        }
        let fa = patch.value_at([a, 0.0]);
        let fb = patch.value_at([b, 0.0]);
        let fm = patch.value_at([0.5 * (a + b), 0.0]);
        total += (b - a) / 6.0 * (fa * fa + 4.0 * fm * fm + fb * fb);
    }
    total
}

fn ball_integral_2d(patch: &FlatPatch, c: [f64; 2], r: f64) -> f64 {
    let s = BALL_SUBSAMPLES;
    let hs = patch.h / s as f64;
    let mut total = 0.0;
    for j in 0..patch.shape[1] - 1 {
        for i in 0..patch.shape[0] - 1 {
            let p = patch.coord(i, j);
            // skip cells outside the ball's bounding box
            if p[0] > c[0] + r || p[0] + patch.h < c[0] - r || p[1] > c[1] + r || p[1] + patch.h < c[1] - r {
                continue;
            }
            for b in 0..s {
                for a in 0..s {
                    let x = [p[0] + (a as f64 + 0.5) * hs, p[1] + (b as f64 + 0.5) * hs];
                    if (x[0] - c[0]).hypot(x[1] - c[1]) <= r {
                        let v = patch.value_at(x);
                        total += v * v;
                    }
                }
            }
        }
    }
    total * hs * hs
}

fn direct_field(split: &ModeSplit, pair: &KeyPair, eps: f64) -> Result<RadialProfileField> {
    let mut field = RadialProfileField::new(split.basis());
    field.push_trace(&pair.h2, 2.0)?;
    field.push_trace(&pair.h_alpha, 2.0 + eps)?;
    Ok(field)
}

/// `h = r^2 h2 + r^{2+eps} h_alpha`.
pub fn build_direct(c: &Trace, eps: f64) -> Result<RadialProfileField> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps = {eps} must be positive")));
    }
    let split = split_trace(c)?;
    direct_field(&split, &build_h2_ha(&split), eps)
}

/// `f = r^2 (Q + eta_minus + eta_zero) + sum_j c_j r^{alpha_j} phi_j` over the
/// higher modes, i.e. the harmonic extension of `eta_plus`.
pub fn build_harmonic_f(c: &Trace) -> Result<RadialProfileField> {
    let split = split_trace(c)?;
    let b = split.basis();
    let mut field = RadialProfileField::new(b);
    field.push_trace(&split.low_part(), 2.0)?;
    for (m, cj) in b.modes().iter().zip(split.eta_plus.coeffs()).filter(|(m, _)| m.degree > 2) {
        field.push_power(m.index, m.degree as f64, *cj)?;
    }
    Ok(field)
}

/// `f~ = r^2 (Q + eta_minus + eta_zero) + r^{2+eps} eta_plus`.
pub fn build_uniform_ftilde(c: &Trace, eps: f64) -> Result<RadialProfileField> {
    let split = split_trace(c)?;
    let mut field = RadialProfileField::new(split.basis());
    field.push_trace(&split.low_part(), 2.0)?;
    field.push_trace(&split.eta_plus, 2.0 + eps)?;
    Ok(field)
}

/// Fraction of `W0(z_plus)` that the harmonic competitor always gains.
pub fn harmonic_gain_constant(d: usize) -> f64 {
    1.0 / (3.0 * (d as f64 + 1.0))
}

/// `C(eps)` with `W(f~) - W(z) <= -C(eps) W0(z_plus)`; the worst mode is the
/// lowest one in `eta_plus` (`lambda - 2d >= d + 3`).
pub fn ftilde_gain_constant(d: usize, eps: f64) -> f64 {
    let d = d as f64;
    let den = d + 2.0 + 2.0 * eps;
    2.0 * eps / den - eps * eps * (d + 2.0) / ((d + 3.0) * den)
}

/// Calibrated `kappa` in `eps = kappa W0(z_plus)^gamma`, per dimension.
pub fn pinned_kappa_cal(d: usize) -> f64 {
    match d {
        2 => PINNED_KAPPA_D2,
        _ => PINNED_KAPPA_D3,
    }
}

const PINNED_KAPPA_D2: f64 = 1.0;
const PINNED_KAPPA_D3: f64 = 1.0;

/// Knobs of the direct certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectParams {
    /// Largest admissible `||c - Q||`.
    pub delta: f64,
    pub kappa_cal: f64,
    pub eps_cap: f64,
    pub shells: usize,
    /// Slack in the energy inequality and in the positivity check.
    pub tol: f64,
}

impl DirectParams {
    pub fn for_dim(d: usize) -> Self {
        DirectParams {
            delta: 1e-2,
            kappa_cal: pinned_kappa_cal(d),
            eps_cap: 0.5,
            shells: DEFAULT_SHELLS,
            tol: 1e-10,
        }
    }
}

/// One verified instance of `W(h) - W(S) <= (W(z) - W(S))(1 - eps |W(z) - W(S)|^gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiCertificate {
    pub id: String,
    pub gamma: f64,
    pub eps: f64,
    pub w_z: f64,
    pub w_h: f64,
    pub w_s: f64,
    pub bound: f64,
    pub pass: bool,
    pub positivity_min: f64,
    pub m: f64,
    pub w0_plus: f64,
}

impl EpiCertificate {
    pub fn gap(&self) -> f64 {
        self.w_z - self.w_s
    }
}

fn check_hypotheses(c: &Trace, split: &ModeSplit, delta: f64, w_gap: f64) -> Result<()> {
    let what = "certify_direct".to_string();
    let min = c.nodal_min();
    if min < -1e-12 {
        return Err(Error::Precondition {
            what,
            detail: format!("trace is negative at a node (min {min:.3e})"),
        });
    }
    if split.distance > delta {
        return Err(Error::Precondition {
            what,
            detail: format!("distance to S {:.3e} exceeds delta {delta:.3e}", split.distance),
        });
    }
    if w_gap > 1.0 {
        return Err(Error::Precondition {
            what,
            detail: format!("energy gap {w_gap:.3e} exceeds 1"),
        });
    }
    Ok(())
}

pub fn certify_direct(c: &Trace, id: &str, params: &DirectParams) -> Result<EpiCertificate> {
    let b = c.basis();
    let d = b.dim();
    let gamma = (d as f64 - 1.0) / (d as f64 + 1.0);
    let w_s = reference_energies(d)?.w_s;
    let split = split_trace(c)?;
    let w_z = w_of_extension(c);
    let gap = w_z - w_s;
    check_hypotheses(c, &split, params.delta, gap)?;
    let pair = build_h2_ha(&split);
    let w0_plus = quadratic_part(&split.eta_plus) / (d as f64 + 2.0);
    let eps = if gap > 0.0 { params.eps_cap.min(params.kappa_cal * w0_plus.max(0.0).powf(gamma)) } else { 0.0 };
    let field = if eps > 0.0 {
        direct_field(&split, &pair, eps)?
    } else {
        let mut z = RadialProfileField::new(b);
        z.push_trace(c, 2.0)?;
        z
    };
    let w_h = if eps > 0.0 { slicing_w(&field) } else { w_z };
    let bound = gap * (1.0 - eps * gap.abs().powf(gamma));
    let positivity_min = field.min_on_polar_grid(params.shells);
    let pass = w_h - w_s <= bound + params.tol && positivity_min >= -params.tol;
    Ok(EpiCertificate {
        id: id.to_string(),
        gamma,
        eps,
        w_z,
        w_h,
        w_s,
        bound,
        pass,
        positivity_min,
        m: pair.m,
        w0_plus,
    })
}

/// Largest `kappa` in `{2^0, 2^-1, ..., 2^-10}` for which every trace
/// certifies.
pub fn calibrate_kappa(traces: &[Trace], base: &DirectParams) -> Result<Option<f64>> {
    for k in 0..=10 {
        let kappa = 0.5f64.powi(k);
        let params = DirectParams { kappa_cal: kappa, ..*base };
        let mut all = true;
        for (i, c) in traces.iter().enumerate() {
            if !certify_direct(c, &i.to_string(), &params)?.pass {
                all = false;
                break;
            }
        }
        if all {
            return Ok(Some(kappa));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::{eval_on_sphere, reference_energies};
    use crate::energy::{decompose_w, f_of, w_volumetric, PolarField};
    use crate::sphere::build_basis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cos_mode(b: &Arc<SphereBasis>, k: usize) -> usize {
        b.modes().iter().position(|m| m.degree == k && m.slot == 0).unwrap()
    }

    fn q_trace(b: &Arc<SphereBasis>, diag: &[f64]) -> Trace {
        eval_on_sphere(&QuadraticBlowup::diagonal(diag).unwrap(), b).unwrap()
    }

    fn perturbed(b: &Arc<SphereBasis>, rng: &mut ChaCha8Rng, amp: f64) -> Trace {
        let q = eval_on_sphere(&QuadraticBlowup::random(b.dim(), rng), b).unwrap();
        let coeffs = b
            .modes()
            .iter()
            .map(|m| amp * rng.random_range(-1.0..1.0) / (1.0 + m.degree as f64))
            .collect();
        q.add(&Trace::from_coeffs(b, coeffs).unwrap())
    }

    // Q + small perturbation, lifted by a constant until nonnegative and
    // redrawn until within `delta` of S
    fn admissible(b: &Arc<SphereBasis>, rng: &mut ChaCha8Rng, amp: f64, delta: f64) -> Trace {
        for _ in 0..1000 {
            let c = perturbed(b, rng, amp);
            let c = c.add(&Trace::constant(b, sup_negative_part(&c)));
            if project_to_s(&c).unwrap().distance <= delta {
                return c;
            }
        }
        panic!("no admissible trace at amplitude {amp}");
    }

    #[test]
    fn split_examples() {
        let b = build_basis(2, 6).unwrap();
        let q = q_trace(&b, &[0.25, 0.0]);
        let s = split_trace(&q).unwrap();
        for part in [&s.eta_minus, &s.eta_zero, &s.eta_plus] {
            assert!(part.norm() < 1e-14);
        }
        let c = q.add(&Trace::mode(&b, cos_mode(&b, 3), 0.005));
        let s = split_trace(&c).unwrap();
        assert!((s.eta_plus.coeffs()[cos_mode(&b, 3)] - 0.005).abs() < 1e-14);
        assert!(s.eta_minus.norm() < 1e-14 && s.eta_zero.norm() < 1e-14);
        let c = q.add(&Trace::mode(&b, cos_mode(&b, 1), 0.02));
        let s = split_trace(&c).unwrap();
        assert!(s.q_trace.sub(&q).norm() < 1e-14);
        assert!((s.eta_minus.coeffs()[cos_mode(&b, 1)] - 0.02).abs() < 1e-14);
        assert!(s.eta_plus.norm() < 1e-14 && s.eta_zero.norm() < 1e-14);
    }

    #[test]
    fn h2_examples() {
        let b = build_basis(2, 6).unwrap();
        let q = q_trace(&b, &[0.125, 0.125]);
        let c = q.add(&Trace::mode(&b, cos_mode(&b, 4), 0.01));
        let s = split_trace(&c).unwrap();
        let p = build_h2_ha(&s);
        assert_eq!(p.m, 0.0);
        assert!(p.h2.sub(&s.low_part()).norm() < 1e-15);
        assert!(p.h_alpha.sub(&s.eta_plus).norm() < 1e-15);

        let q = q_trace(&b, &[0.25, 0.0]);
        let c = q.add(&Trace::mode(&b, cos_mode(&b, 1), -0.05 * PI.sqrt()));
        let s = split_trace(&c).unwrap();
        let p = build_h2_ha(&s);
        // min of x^2/4 - 0.05x on [-1, 1] is at x = 0.1
        assert!((p.m - 0.0025).abs() < 1e-12, "{}", p.m);
        let want = Trace::constant(&b, 0.125).sub(&q).scale(16.0 * p.m);
        assert!(p.correction.sub(&want).norm() < 1e-14);
        assert!(p.h2.sub(&s.low_part().add(&want)).norm() < 1e-14);
        assert!(p.h2.nodal_min() >= -1e-10);
    }

    #[test]
    fn h2_nonnegative_near_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for d in [2usize, 3] {
            let b = build_basis(d, if d == 2 { 8 } else { 5 }).unwrap();
            for _ in 0..20 {
                let c = admissible(&b, &mut rng, 0.003, 1e-2);
                let s = split_trace(&c).unwrap();
                let p = build_h2_ha(&s);
                assert!(p.h2.nodal_min() >= -1e-10, "d={d}: {}", p.h2.nodal_min());
                assert!(p.h2.add(&p.h_alpha).sub(&c).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn key_ratio_stays_bounded_when_shrinking() {
        // c_s = Q + s g with g chosen so that c_1 >= 0; then every c_s >= 0 and
        // the projection stays Q
        let b = build_basis(2, 8).unwrap();
        let q = q_trace(&b, &[0.25, 0.0]);
        let g = Trace::mode(&b, cos_mode(&b, 1), -0.05 * PI.sqrt()).add(&Trace::mode(&b, cos_mode(&b, 4), 0.01 * PI.sqrt()));
        assert_eq!(sup_negative_part(&q.add(&g)), 0.0);
        let mut ratios = Vec::new();
        for k in 0..12 {
            let c = q.axpy(0.5f64.powi(k), &g);
            let s = split_trace(&c).unwrap();
            assert!(s.q_trace.sub(&q).norm() < 1e-13);
            ratios.push(key_estimate_ratio(&s, &build_h2_ha(&s)).unwrap());
        }
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(ratios.last().unwrap() <= &(max * 1.0001));
        // the tail does not grow
        assert!(ratios[11] <= ratios[6] * 1.01, "{ratios:?}");
    }

    #[test]
    fn key_identity_examples() {
        let b = build_basis(2, 6).unwrap();
        let q = q_trace(&b, &[0.125, 0.125]);
        let c = q.add(&Trace::mode(&b, cos_mode(&b, 3), 0.01));
        let s = split_trace(&c).unwrap();
        let p = build_h2_ha(&s);
        let (r34, r35) = key_identities_check(&s, &p, 1.0);
        assert!(r34 <= 1e-9 && r35 <= 1e-9);
        assert!((f_of(&c) - f_of(&q) - quadratic_part(&s.eta_plus)).abs() <= 1e-12);
        assert!(key_identities_check(&s, &p, 0.0).0 <= 1e-12);
    }

    #[test]
    fn decompose_examples() {
        let b = build_basis(2, 6).unwrap();
        let q = q_trace(&b, &[0.2, 0.05]);
        let eta = Trace::mode(&b, cos_mode(&b, 5), 0.003);
        let s = split_trace(&q.add(&eta)).unwrap();
        let (wm, w0, wp) = decompose_w(&s);
        assert!(wm.abs() < 1e-15 && w0.abs() < 1e-15);
        let h1: f64 = b.modes().iter().zip(s.eta_plus.coeffs()).map(|(m, c)| (m.eigenvalue + 1.0) * c * c).sum();
        assert!(wp >= h1 / 12.0);
        let s = split_trace(&q.add(&Trace::mode(&b, cos_mode(&b, 1), 0.01))).unwrap();
        assert!(decompose_w(&s).0 <= 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = admissible(&b, &mut rng, 0.05, 1.0);
        let s = split_trace(&c).unwrap();
        let (a, z, p) = decompose_w(&s);
        let diff = w_of_extension(&c) - w_of_extension(&s.q_trace);
        assert!((a + z + p - diff).abs() < 1e-14);
        let mut field = RadialProfileField::new(&b);
        field.push_trace(&c.sub(&s.q_trace), 2.0).unwrap();
        let vol = w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), 0.0).unwrap();
        assert!((vol.w0 - diff).abs() <= 1e-6 * diff.abs().max(1e-6));
    }

    #[test]
    fn cone_is_sharp_in_one_dimension() {
        let (m, l, h) = (0.5, 2.0, 1.0 / 64.0);
        let patch = FlatPatch::sample(1, [-1.0, 0.0], h, [129, 1], |x| (m - l * x[0].abs()).max(0.0)).unwrap();
        let chk = lipschitz_bound_check(&patch, l).unwrap();
        assert!((chk.rhs - 2.0 * m.powi(3) / (3.0 * l)).abs() < 1e-15);
        assert!((chk.lhs - chk.rhs).abs() <= 1e-12 * chk.rhs);
        let flat = FlatPatch::sample(1, [-1.0, 0.0], h, [129, 1], |_| m).unwrap();
        let chk = lipschitz_bound_check(&flat, l).unwrap();
        assert!((chk.lhs - 2.0 * m * m * m / l).abs() < 1e-12 && chk.holds());
    }

    #[test]
    fn cone_is_nearly_sharp_in_two_dimensions() {
        let (m, l) = (0.5, 1.0);
        let patch = FlatPatch::sample(2, [-1.0, -1.0], 1.0 / 64.0, [129, 129], |x| (m - l * x[0].hypot(x[1])).max(0.0)).unwrap();
        // the bilinear interpolant is steeper than the cone next to the apex
        assert!(matches!(lipschitz_bound_check(&patch, l), Err(Error::Precondition { .. })));
        let lip = patch.lipschitz();
        let chk = lipschitz_bound_check(&patch, lip).unwrap();
        assert!(chk.holds());
        let r = chk.radius;
        let exact = 2.0 * PI * (m * m * r * r / 2.0 - 2.0 * m * l * r.powi(3) / 3.0 + l * l * r.powi(4) / 4.0);
        assert!((chk.lhs - exact).abs() < 1e-3 * exact, "{} vs {exact}", chk.lhs);
        // at the nominal slope the cone is the equality case
        assert!((2.0 * ball_volume(2) * m.powi(4) / (12.0 * l * l) - PI * m.powi(4) / (6.0 * l * l)).abs() < 1e-15);
    }

    #[test]
    fn peak_near_the_edge_is_rejected() {
        let patch = FlatPatch::sample(1, [0.0, 0.0], 0.01, [101, 1], |x| (1.0 - x[0]).max(0.0)).unwrap();
        assert!(matches!(lipschitz_bound_check(&patch, 1.0), Err(Error::PeakOnBoundary(_))));
        assert!(matches!(lipschitz_bound_check(&patch, 0.5), Err(Error::Precondition { .. })));
    }

    #[test]
    fn random_lipschitz_samples_satisfy_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let n = 1 + trial % 2;
            let l = rng.random_range(1.0..3.0);
            let cones: Vec<([f64; 2], f64)> = (0..4)
                .map(|_| ([rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)], rng.random_range(0.05..0.3)))
                .collect();
            let f = |x: [f64; 2]| {
                cones
                    .iter()
                    .map(|(c, m)| {
                        let r = if n == 1 { (x[0] - c[0]).abs() } else { (x[0] - c[0]).hypot(x[1] - c[1]) };
                        (m - l * r).max(0.0)
                    })
                    .fold(0.0, f64::max)
            };
            let (shape, h) = if n == 1 { ([401, 1], 0.005) } else { ([101, 101], 0.02) };
            let patch = FlatPatch::sample(n, [-1.0, -1.0], h, shape, f).unwrap();
            let chk = lipschitz_bound_check(&patch, l.max(patch.lipschitz())).unwrap();
            assert!(chk.holds(), "trial {trial}: {} < {}", chk.lhs, chk.rhs);
        }
    }

    #[test]
    fn direct_competitor_examples() {
        let b = build_basis(2, 6).unwrap();
        let q = q_trace(&b, &[0.15, 0.1]);
        let h = build_direct(&q, 0.3).unwrap();
        let rs = reference_energies(2).unwrap();
        assert!((slicing_w(&h) - rs.w_s).abs() < 1e-13);
        assert!(h.boundary().sub(&q).norm() < 1e-14);
        assert!(matches!(build_direct(&q, 0.0), Err(Error::InvalidArgument(_))));

        // M = 0: the direct competitor is f~
        let c = q.add(&Trace::mode(&b, cos_mode(&b, 3), 0.01));
        let h = build_direct(&c, 0.25).unwrap();
        let ft = build_uniform_ftilde(&c, 0.25).unwrap();
        assert!((slicing_w(&h) - slicing_w(&ft)).abs() < 1e-14);
        for r in [0.1, 0.5, 0.9] {
            let (a, e) = (h.u_at(r), ft.u_at(r));
            assert!(a.iter().zip(&e).all(|(x, y)| (x - y).abs() < 1e-15));
        }
    }

    #[test]
    fn direct_competitor_positivity_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = build_basis(2, 8).unwrap();
        let c = admissible(&b, &mut rng, 0.003, 1e-2);
        let s = split_trace(&c).unwrap();
        let p = build_h2_ha(&s);
        let eps = 0.4;
        let h = build_direct(&c, eps).unwrap();
        let (h2, cn) = (p.h2.synthesize(), c.synthesize());
        for r in [0.0f64, 0.2, 0.7, 1.0] {
            let a = r.powf(2.0 + eps);
            let want: Vec<f64> = h2.iter().zip(&cn).map(|(x, y)| (r * r - a) * x + a * y).collect();
            for (x, y) in h.h_nodal(r).iter().zip(&want) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        assert!(h.min_on_polar_grid(DEFAULT_SHELLS) >= -1e-10);
    }

    #[test]
    fn harmonic_competitor_examples() {
        let b = build_basis(2, 6).unwrap();
        let q = q_trace(&b, &[0.125, 0.125]);
        let j = cos_mode(&b, 3);
        let c = q.add(&Trace::mode(&b, j, 1.0));
        let f = build_harmonic_f(&c).unwrap();
        let gain = w_of_extension(&c) - slicing_w(&f);
        assert!((gain - 0.25).abs() < 1e-12);
        assert!(gain >= harmonic_gain_constant(2) * 1.25);
        let mut field = RadialProfileField::new(&b);
        field.push_power(j, 3.0, 1.0).unwrap();
        let vol = w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), 0.0).unwrap();
        assert!((vol.w0 - 1.0).abs() < 1e-7);

        let z = q.add(&Trace::mode(&b, cos_mode(&b, 1), 0.01));
        let f = build_harmonic_f(&z).unwrap();
        assert!((slicing_w(&f) - w_of_extension(&z)).abs() < 1e-14);
    }

    #[test]
    fn ftilde_gain_matches_series() {
        let b = build_basis(2, 6).unwrap();
        let q = q_trace(&b, &[0.125, 0.125]);
        let (k, coef) = (4usize, 0.02);
        let c = q.add(&Trace::mode(&b, cos_mode(&b, k), coef));
        let lam = (k * k) as f64;
        for eps in [1e-2, 1e-3, 1e-4] {
            let gain = slicing_w(&build_uniform_ftilde(&c, eps).unwrap()) - w_of_extension(&c);
            let series = -eps * 2.0 * (lam - 4.0) / 16.0 * coef * coef;
            assert!((gain / series - 1.0).abs() < 2.0 * eps, "eps {eps}: {gain} vs {series}");
            let w0p = (lam - 4.0) / 4.0 * coef * coef;
            assert!(gain <= -ftilde_gain_constant(2, eps) * w0p + 1e-16);
        }
    }

    #[test]
    fn certificate_examples() {
        let b = build_basis(2, 6).unwrap();
        let params = DirectParams::for_dim(2);
        let q = q_trace(&b, &[0.125, 0.125]);
        let cert = certify_direct(&q, "q", &params).unwrap();
        assert!(cert.pass && cert.gap().abs() < 1e-14 && cert.eps == 0.0);

        let c = q.add(&Trace::mode(&b, cos_mode(&b, 3), 0.01));
        let cert = certify_direct(&c, "k3", &params).unwrap();
        assert!((cert.gap() - 1.25e-4).abs() < 1e-15);
        let want = 1.25e-4 * (1.0 - cert.eps * 1.25e-4f64.powf(1.0 / 3.0));
        assert!((cert.bound - want).abs() < 1e-16);
        assert!(cert.pass && cert.eps > 0.0 && cert.w_h < cert.w_z);
        // volumetric oracle for W(h)
        let h = build_direct(&c, cert.eps).unwrap();
        let vol = w_volumetric(&PolarField::from_profiles(&h, DEFAULT_SHELLS), cert.w_s).unwrap();
        assert!((vol.w - cert.w_h).abs() < 1e-8);

        let c = q.add(&Trace::mode(&b, cos_mode(&b, 1), 0.01));
        let cert = certify_direct(&c, "minus", &params).unwrap();
        assert!(cert.gap() <= 0.0 && cert.pass && cert.w_h == cert.w_z);

        let bad = q.add(&Trace::constant(&b, -0.2));
        assert!(matches!(certify_direct(&bad, "neg", &params), Err(Error::Precondition { .. })));
        let far = q.add(&Trace::mode(&b, cos_mode(&b, 3), 0.05));
        assert!(matches!(certify_direct(&far, "far", &params), Err(Error::Precondition { .. })));
    }

    #[test]
    fn certificate_json_round_trip() {
        let b = build_basis(2, 4).unwrap();
        let c = q_trace(&b, &[0.1, 0.15]).add(&Trace::mode(&b, cos_mode(&b, 3), 0.002));
        let cert = certify_direct(&c, "x", &DirectParams::for_dim(2)).unwrap();
        let back: EpiCertificate = serde_json::from_str(&serde_json::to_string(&cert).unwrap()).unwrap();
        assert_eq!(back, cert);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn split_reassembles_with_disjoint_support(seed in 0u64..100_000, d in 2usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = build_basis(d, 5).unwrap();
            let c = perturbed(&b, &mut rng, 0.2);
            let s = split_trace(&c).unwrap();
            prop_assert!(s.reassemble().sub(&c).norm() <= 1e-12);
            for (m, ((a, z), p)) in b.modes().iter().zip(s.eta_minus.coeffs().iter().zip(s.eta_zero.coeffs()).zip(s.eta_plus.coeffs())) {
                prop_assert!(m.degree < 2 || *a == 0.0);
                prop_assert!(m.degree == 2 || *z == 0.0);
                prop_assert!(m.degree > 2 || *p == 0.0);
            }
            let p = build_h2_ha(&s);
            prop_assert!(p.h2.add(&p.h_alpha).sub(&c).norm() <= 1e-14);
        }

        #[test]
        fn key_identities_hold(seed in 0u64..100_000, d in 2usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = build_basis(d, 5).unwrap();
            let c = perturbed(&b, &mut rng, 0.05);
            let s = split_trace(&c).unwrap();
            let p = build_h2_ha(&s);
            for t in [-1.0, 0.0, 0.5, 1.0, 2.0] {
                let (r34, r35) = key_identities_check(&s, &p, t);
                prop_assert!(r34 <= 1e-9 && r35 <= 1e-9, "t={} {} {}", t, r34, r35);
            }
        }
    }
}
