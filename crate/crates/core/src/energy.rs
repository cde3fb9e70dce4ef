//! Spherical and volumetric energies.
//!
//! On the sphere, `F(phi) = int |grad phi|^2 - 2d phi^2 + phi` and its
//! gradient act diagonally in the harmonic basis. In the ball, `W0` and `W`
//! are evaluated either spectrally through radial profiles (slicing) or by
//! direct quadrature on a polar grid.

use std::num::NonZeroUsize;
use std::sync::{Arc, OnceLock};

use gauss_quad::legendre::GaussLegendre;
use serde::Serialize;

use crate::competitor::ModeSplit;
use crate::error::{Error, Result};
use crate::sphere::{SphereBasis, Trace};

/// `F(phi)`, evaluated spectrally.
pub fn f_of(trace: &Trace) -> f64 {
    let b = trace.basis();
    let two_d = 2.0 * b.dim() as f64;
    let quad: f64 = b
        .modes()
        .iter()
        .zip(trace.coeffs())
        .map(|(m, c)| (m.eigenvalue - two_d) * c * c)
        .sum();
    quad + trace.coeffs()[0] * b.area().sqrt()
}

/// `grad F(phi) = -2 Lap phi - 4d phi + 1`.
pub fn grad_f(trace: &Trace) -> Trace {
    let b = trace.basis();
    let four_d = 4.0 * b.dim() as f64;
    let mut coeffs: Vec<f64> = b
        .modes()
        .iter()
        .zip(trace.coeffs())
        .map(|(m, c)| (2.0 * m.eigenvalue - four_d) * c)
        .collect();
    coeffs[0] += b.area().sqrt();
    Trace::from_coeffs(b, coeffs).expect("same mode table")
}

/// The quadratic part `int |grad phi|^2 - 2d phi^2`.
pub fn quadratic_part(trace: &Trace) -> f64 {
    f_of(trace) - trace.coeffs()[0] * trace.basis().area().sqrt()
}

/// `W0` of the extension `sum_j r^{2+eps_j} c_j phi_j`.
pub fn w0_homog(trace: &Trace, eps: &[f64]) -> Result<f64> {
    let b = trace.basis();
    if eps.len() != b.n_modes() {
        return Err(Error::ShapeMismatch {
            expected: b.n_modes(),
            got: eps.len(),
        });
    }
    let d = b.dim() as f64;
    let mut total = 0.0;
    for ((m, c), &e) in b.modes().iter().zip(trace.coeffs()).zip(eps) {
        if e < 0.0 {
            return Err(Error::NegativeExponent(e));
        }
        total += c * c * (m.eigenvalue - 2.0 * d + e * e) / (d + 2.0 + 2.0 * e);
    }
    Ok(total)
}

/// `W0` of a single unit mode extended as `r^{2+eps}`.
pub fn w0_mode(d: usize, eigenvalue: f64, eps: f64) -> f64 {
    let d = d as f64;
    (eigenvalue - 2.0 * d + eps * eps) / (d + 2.0 + 2.0 * eps)
}

/// `W` of the extension `sum_j r^{2+eps_j} c_j phi_j` (adds the volume term).
pub fn w_homog(trace: &Trace, eps: &[f64]) -> Result<f64> {
    let w0 = w0_homog(trace, eps)?;
    let b = trace.basis();
    let d = b.dim() as f64;
    Ok(w0 + trace.coeffs()[0] * b.area().sqrt() / (d + 2.0 + eps[0]))
}

/// `W(r^2 c) = F(c) / (d + 2)`.
pub fn w_of_extension(trace: &Trace) -> f64 {
    f_of(trace) / (trace.basis().dim() as f64 + 2.0)
}

/// `(W0(z_minus), W0(z_zero), W0(z_plus))`; they sum to `W(z) - W(Q)`.
pub fn decompose_w(split: &ModeSplit) -> (f64, f64, f64) {
    let k = split.dim() as f64 + 2.0;
    (
        quadratic_part(&split.eta_minus) / k,
        quadratic_part(&split.eta_zero) / k,
        quadratic_part(&split.eta_plus) / k,
    )
}

/// Energies of a field together with the per-mode split of `W0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub w0: f64,
    pub w: f64,
    pub f: f64,
    pub gap: f64,
    pub per_mode: Vec<(usize, f64)>,
}

impl EnergyReport {
    /// Report for the 2-homogeneous extension `r^2 c`.
    pub fn of_extension(trace: &Trace, w_s: f64) -> EnergyReport {
        let b = trace.basis();
        let d = b.dim() as f64;
        let per_mode: Vec<(usize, f64)> = b
            .modes()
            .iter()
            .zip(trace.coeffs())
            .map(|(m, c)| (m.index, c * c * (m.eigenvalue - 2.0 * d) / (d + 2.0)))
            .collect();
        let w0 = per_mode.iter().map(|p| p.1).sum();
        let f = f_of(trace);
        let w = f / (d + 2.0);
        EnergyReport {
            w0,
            w,
            f,
            gap: w - w_s,
            per_mode,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

pub(crate) fn gauss_legendre(n: usize) -> &'static [(f64, f64)] {
    static RULES: OnceLock<Vec<(usize, Vec<(f64, f64)>)>> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        [4usize, 8, 16, 32, 64]
            .iter()
            .map(|&k| {
                let gl = GaussLegendre::new(NonZeroUsize::new(k).unwrap());
                (k, gl.as_node_weight_pairs().to_vec())
            })
            .collect()
    });
    &rules
        .iter()
        .find(|(k, _)| *k == n)
        .expect("rule order is one of 4, 8, 16, 32, 64")
        .1
}

/// Composite Gauss-Legendre over consecutive breakpoints.
pub(crate) fn integrate_pieces(breaks: &[f64], order: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let rule = gauss_legendre(order);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for &(x, wt) in rule {
            total += wt * half * f(mid + half * x);
        }
    }
    total
}

/// One closed-form radial term `coef * max(r, r_stop)^exponent` of the
/// profile `u = h / r^2` on a single mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTerm {
    pub mode: usize,
    pub exponent: f64,
    pub coef: f64,
    pub r_stop: f64,
}

/// A sphere path sampled in time, mapped to the ball by `t = -kappa ln r`
/// and frozen at its last sample (the stopped flow).
#[derive(Debug, Clone)]
pub struct FlowTerm {
    pub kappa: f64,
    pub times: Arc<Vec<f64>>,
    pub states: Arc<Vec<Vec<f64>>>,
}

/// A field `h(r, theta) = r^2 u(r, theta)` on the unit ball given through
/// radial profiles of the harmonic coefficients of `u`.
///
/// Several terms may sit on the same mode with different exponents.
#[derive(Debug, Clone)]
pub struct RadialProfileField {
    basis: Arc<SphereBasis>,
    powers: Vec<PowerTerm>,
    flow: Option<FlowTerm>,
}

impl RadialProfileField {
    pub fn new(basis: &Arc<SphereBasis>) -> Self {
        RadialProfileField {
            basis: Arc::clone(basis),
            powers: Vec::new(),
            flow: None,
        }
    }

    pub fn basis(&self) -> &Arc<SphereBasis> {
        &self.basis
    }

    pub fn powers(&self) -> &[PowerTerm] {
        &self.powers
    }

    /// Adds `coef * r^{h_exponent}` on `mode` (as a term of `h`).
    pub fn push_power(&mut self, mode: usize, h_exponent: f64, coef: f64) -> Result<()> {
        self.push_stopped_power(mode, h_exponent, coef, 0.0)
    }

    /// Adds `coef * r^2 * max(r, r_stop)^{h_exponent - 2}` on `mode`.
    pub fn push_stopped_power(&mut self, mode: usize, h_exponent: f64, coef: f64, r_stop: f64) -> Result<()> {
        let exponent = h_exponent - 2.0;
        if exponent < 0.0 || !exponent.is_finite() {
            return Err(Error::NegativeExponent(exponent));
        }
        if mode >= self.basis.n_modes() {
            return Err(Error::InvalidArgument(format!("mode {mode} out of range")));
        }
        if coef != 0.0 {
            self.powers.push(PowerTerm {
                mode,
                exponent,
                coef,
                r_stop: r_stop.clamp(0.0, 1.0),
            });
        }
        Ok(())
    }

    /// Adds every coefficient of `trace` with a common exponent.
    pub fn push_trace(&mut self, trace: &Trace, h_exponent: f64) -> Result<()> {
        for (j, c) in trace.coeffs().iter().enumerate() {
            self.push_power(j, h_exponent, *c)?;
        }
        Ok(())
    }

    pub fn set_flow(&mut self, flow: FlowTerm) -> Result<()> {
        if flow.kappa <= 0.0 || flow.times.is_empty() || flow.times.len() != flow.states.len() {
            return Err(Error::InvalidArgument("malformed flow term".into()));
        }
        self.flow = Some(flow);
        Ok(())
    }

    /// Coefficients of `u(r, .)`.
    pub fn u_at(&self, r: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.n_modes()];
        for p in &self.powers {
            out[p.mode] += p.coef * r.max(p.r_stop).powf(p.exponent);
        }
        if let Some(fl) = &self.flow {
            let (k, s) = flow_locate(fl, r);
            match s {
                None => add_into(&mut out, &fl.states[k], 1.0),
                Some(s) => {
                    add_into(&mut out, &fl.states[k], 1.0 - s);
                    add_into(&mut out, &fl.states[k + 1], s);
                }
            }
        }
        out
    }

    /// Coefficients of `d u / d r`.
    pub fn du_at(&self, r: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.n_modes()];
        for p in &self.powers {
            if r > p.r_stop && p.exponent != 0.0 {
                out[p.mode] += p.coef * p.exponent * r.powf(p.exponent - 1.0);
            }
        }
        if let Some(fl) = &self.flow {
            if let (k, Some(_)) = flow_locate(fl, r) {
                let dt = fl.times[k + 1] - fl.times[k];
                let scale = -fl.kappa / r / dt;
                for ((o, a), b) in out.iter_mut().zip(&fl.states[k]).zip(&fl.states[k + 1]) {
                    *o += scale * (b - a);
                }
            }
        }
        out
    }

    /// The boundary trace `u(1, .)`.
    pub fn boundary(&self) -> Trace {
        Trace::from_coeffs(&self.basis, self.u_at(1.0)).expect("same mode table")
    }

    /// Radii in (0, 1) where a profile has a kink.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .powers
            .iter()
            .map(|p| p.r_stop)
            .filter(|r| *r > 0.0 && *r < 1.0)
            .collect();
        if let Some(fl) = &self.flow {
            out.extend(
                fl.times
                    .iter()
                    .map(|t| (-t / fl.kappa).exp())
                    .filter(|r| *r > 0.0 && *r < 1.0),
            );
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Nodal values of `h` on a shell of radius `r`.
    pub fn h_nodal(&self, r: f64) -> Vec<f64> {
        let u = Trace::from_coeffs(&self.basis, self.u_at(r)).expect("same mode table");
        u.synthesize().into_iter().map(|v| r * r * v).collect()
    }

    /// Minimum of `h` over the polar grid with `n_shells` uniform shells.
    pub fn min_on_polar_grid(&self, n_shells: usize) -> f64 {
        (0..=n_shells)
            .map(|i| i as f64 / n_shells as f64)
            .flat_map(|r| self.h_nodal(r))
            .fold(f64::INFINITY, f64::min)
    }
}

fn add_into(out: &mut [f64], v: &[f64], a: f64) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += a * x;
    }
}

// Returns the sample index and, inside a segment, the interpolation weight.
fn flow_locate(fl: &FlowTerm, r: f64) -> (usize, Option<f64>) {
    let last = fl.times.len() - 1;
    let t = if r <= 0.0 { f64::INFINITY } else { -fl.kappa * r.ln() };
    if t >= fl.times[last] {
        return (last, None);
    }
    if t <= fl.times[0] {
        return if last == 0 { (0, None) } else { (0, Some(0.0)) };
    }
    let k = fl.times.partition_point(|x| *x <= t) - 1;
    let s = (t - fl.times[k]) / (fl.times[k + 1] - fl.times[k]);
    (k, Some(s))
}

/// `W` of a profile field by the slicing identity
/// `int_0^1 F(u(r)) r^{d+1} dr + int_0^1 r^{d+3} |du/dr|^2 dr`.
pub fn slicing_w(field: &RadialProfileField) -> f64 {
    let d = field.basis.dim() as i32;
    let mut breaks = vec![0.0];
    breaks.extend(field.breakpoints());
    breaks.push(1.0);
    let order = if breaks.len() > 6 { 16 } else { 64 };
    let basis = &field.basis;
    integrate_pieces(&breaks, order, |r| {
        let u = Trace::from_coeffs(basis, field.u_at(r)).expect("same mode table");
        let du = field.du_at(r);
        let kinetic: f64 = du.iter().map(|x| x * x).sum();
        f_of(&u) * r.powi(d + 1) + r.powi(d + 3) * kinetic
    })
}

/// A field sampled on radial shells times the quadrature nodes of a basis.
#[derive(Debug, Clone)]
pub struct PolarField {
    pub basis: Arc<SphereBasis>,
    pub radii: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Radial shells used by the volumetric energy.
pub const DEFAULT_SHELLS: usize = 128;

impl PolarField {
    /// Samples `h` on `n_shells + 1` uniform radii in [0, 1].
    pub fn from_profiles(field: &RadialProfileField, n_shells: usize) -> PolarField {
        let radii: Vec<f64> = (0..=n_shells).map(|i| i as f64 / n_shells as f64).collect();
        let values = radii.iter().map(|&r| field.h_nodal(r)).collect();
        PolarField {
            basis: Arc::clone(&field.basis),
            radii,
            values,
        }
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Direct quadrature of `W0` and `W` on a uniform polar grid.
///
/// Radial derivatives use fourth-order differences (centered inside,
/// one-sided at the ends); radial integrals use composite Simpson.
pub fn w_volumetric(field: &PolarField, w_s: f64) -> Result<EnergyReport> {
    let n = field.radii.len();
    if n < 16 {
        return Err(Error::GridTooCoarse { got: n, min: 16 });
    }
    if field.values.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: field.values.len(),
        });
    }
    let b = &field.basis;
    let d = b.dim() as i32;
    let h = field.radii[1] - field.radii[0];
    for w in field.radii.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-12 {
            return Err(Error::InvalidArgument("radial grid must be uniform".into()));
        }
    }
    let coeffs: Vec<Vec<f64>> = field
        .values
        .iter()
        .map(|v| b.analyze(v).map(Trace::into_coeffs))
        .collect::<Result<_>>()?;
    let m = b.n_modes();
    let weights = radial_weights(n, h);
    let mut per_mode = Vec::with_capacity(m);
    for j in 0..m {
        let a: Vec<f64> = coeffs.iter().map(|c| c[j]).collect();
        let da = differentiate(&a, h);
        let lam = b.modes()[j].eigenvalue;
        let mut grad = 0.0;
        for i in 0..n {
            let r = field.radii[i];
            if r == 0.0 {
                continue;
            }
            let dens = r.powi(d - 1) * (da[i] * da[i] + lam * a[i] * a[i] / (r * r));
            grad += weights[i] * dens;
        }
        let boundary = a[n - 1];
        per_mode.push((j, grad - 2.0 * boundary * boundary));
    }
    let w0: f64 = per_mode.iter().map(|p| p.1).sum();
    let vol: f64 = (0..n)
        .map(|i| weights[i] * field.radii[i].powi(d - 1) * coeffs[i][0])
        .sum::<f64>()
        * b.area().sqrt();
    let top = Trace::from_coeffs(b, coeffs[n - 1].clone())?;
    let w = w0 + vol;
    Ok(EnergyReport {
        w0,
        w,
        f: f_of(&top),
        gap: w - w_s,
        per_mode,
    })
}

fn radial_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    if (n - 1) % 2 == 0 {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = if i == 0 || i == n - 1 {
                h / 3.0
            } else if i % 2 == 1 {
                4.0 * h / 3.0
            } else {
                2.0 * h / 3.0
            };
        }
    } else {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = if i == 0 || i == n - 1 { h / 2.0 } else { h };
        }
    }
    w
}

fn differentiate(a: &[f64], h: f64) -> Vec<f64> {
    let n = a.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = if i >= 2 && i + 2 < n {
            (a[i - 2] - 8.0 * a[i - 1] + 8.0 * a[i + 1] - a[i + 2]) / (12.0 * h)
        } else if i < 2 {
            (-25.0 * a[i] + 48.0 * a[i + 1] - 36.0 * a[i + 2] + 16.0 * a[i + 3] - 3.0 * a[i + 4])
                / (12.0 * h)
        } else {
            (25.0 * a[i] - 48.0 * a[i - 1] + 36.0 * a[i - 2] - 16.0 * a[i - 3] + 3.0 * a[i - 4])
                / (12.0 * h)
        };
    }
    out
}

/// A path of traces `t -> psi(t)` with a velocity, used to build the
/// reparametrized competitor `u(r) = psi(-kappa ln r)`.
pub trait SphereCurve {
    fn basis(&self) -> &Arc<SphereBasis>;
    /// Largest time at which the path is defined.
    fn end_time(&self) -> f64;
    fn state_at(&self, t: f64) -> Trace;
    fn velocity_at(&self, t: f64) -> Trace;
    /// Times in (0, end) where the velocity may jump.
    fn kinks(&self, t_end: f64) -> Vec<f64>;
}

/// Both reparametrized forms of `W` for the flow stopped at `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReparamEnergy {
    /// `(1/k) int F e^{-kt/kappa}` plus the stopped tail and the kinetic term.
    pub energy_form: f64,
    /// `F(psi(0))/k + int ((1/k) grad F . psi' + kappa |psi'|^2) e^{-kt/kappa}`.
    pub gradient_form: f64,
}

impl ReparamEnergy {
    pub fn value(&self) -> f64 {
        self.energy_form
    }

    pub fn rel_mismatch(&self) -> f64 {
        (self.energy_form - self.gradient_form).abs() / self.energy_form.abs().max(1e-300)
    }

    /// The value, or an error when the two forms disagree beyond `rel_tol`.
    pub fn checked(&self, rel_tol: f64) -> Result<f64> {
        if self.rel_mismatch() > rel_tol {
            return Err(Error::FormMismatch {
                first: self.energy_form,
                second: self.gradient_form,
            });
        }
        Ok(self.energy_form)
    }
}

/// Time grid used for integrals along a curve on [0, T].
pub(crate) fn curve_breaks(curve: &dyn SphereCurve, t_end: f64) -> Vec<f64> {
    let mut breaks = vec![0.0];
    let kinks = curve.kinks(t_end);
    if kinks.is_empty() {
        breaks.extend((1..32).map(|i| t_end * i as f64 / 32.0));
    } else {
        breaks.extend(kinks.into_iter().filter(|t| *t > 0.0 && *t < t_end));
    }
    breaks.push(t_end);
    breaks
}

/// `W(r^2 u)` for `u(r) = phi(-kappa ln r)`, `phi` the curve stopped at
/// `t_stop`, in both forms. `k` is `2 alpha + d - 2` (`d + 2` here).
pub fn reparam_w(curve: &dyn SphereCurve, kappa: f64, t_stop: f64) -> Result<ReparamEnergy> {
    if kappa <= 0.0 {
        return Err(Error::InvalidArgument(format!("kappa = {kappa} must be positive")));
    }
    if t_stop > curve.end_time() * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::TrajectoryTooShort {
            requested: t_stop,
            available: curve.end_time(),
        });
    }
    let k = curve.basis().dim() as f64 + 2.0;
    let f0 = f_of(&curve.state_at(0.0));
    if t_stop <= 0.0 {
        let v = f0 / k;
        return Ok(ReparamEnergy {
            energy_form: v,
            gradient_form: v,
        });
    }
    let breaks = curve_breaks(curve, t_stop);
    let order = if breaks.len() > 40 { 8 } else { 16 };
    let damp = |t: f64| (-k * t / kappa).exp();
    let mut energy = 0.0;
    let mut kinetic = 0.0;
    let mut power = 0.0;
    let rule = gauss_legendre(order);
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        // evaluate the velocity strictly inside the piece
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for &(x, wt) in rule {
            let t = mid + half * x;
            let s = curve.state_at(t);
            let v = curve.velocity_at(t);
            let e = damp(t) * wt * half;
            energy += e * f_of(&s);
            kinetic += e * v.norm_sq();
            power += e * grad_f(&s).dot(&v);
        }
    }
    let f_t = f_of(&curve.state_at(t_stop));
    let energy_form = energy / kappa + f_t * damp(t_stop) / k + kappa * kinetic;
    let gradient_form = f0 / k + power / k + kappa * kinetic;
    Ok(ReparamEnergy {
        energy_form,
        gradient_form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::{eval_on_sphere, reference_energies, QuadraticBlowup};
    use crate::sphere::build_basis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn cos_mode(b: &Arc<SphereBasis>, k: usize) -> usize {
        b.modes().iter().position(|m| m.degree == k && m.slot == 0).unwrap()
    }

    // F by dense quadrature of phi'^2 - 4 phi^2 + phi on the circle
    fn dense_f(phi: impl Fn(f64) -> f64, dphi: impl Fn(f64) -> f64) -> f64 {
        let n = 20_000;
        let h = 2.0 * PI / n as f64;
        (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * h;
                dphi(t).powi(2) - 4.0 * phi(t).powi(2) + phi(t)
            })
            .sum::<f64>()
            * h
    }

    fn random_trace(b: &Arc<SphereBasis>, rng: &mut impl Rng, amp: f64) -> Trace {
        let coeffs = b
            .modes()
            .iter()
            .map(|m| amp * rng.random_range(-1.0..1.0) / (1.0 + m.degree as f64))
            .collect();
        Trace::from_coeffs(b, coeffs).unwrap()
    }

    #[test]
    fn f_examples() {
        let b = build_basis(2, 5).unwrap();
        assert_eq!(f_of(&Trace::zeros(&b)), 0.0);
        let q = eval_on_sphere(&QuadraticBlowup::diagonal(&[0.25, 0.0]).unwrap(), &b).unwrap();
        let oracle = dense_f(|t| t.cos().powi(2) / 4.0, |t| -(2.0 * t).sin() / 4.0);
        assert!((f_of(&q) - oracle).abs() < 1e-10);
        assert!((oracle - PI / 8.0).abs() < 1e-10);
        let c = q.add(&Trace::mode(&b, cos_mode(&b, 3), 1.0));
        let oracle = dense_f(
            |t| t.cos().powi(2) / 4.0 + (3.0 * t).cos() / PI.sqrt(),
            |t| -(2.0 * t).sin() / 4.0 - 3.0 * (3.0 * t).sin() / PI.sqrt(),
        );
        assert!((f_of(&c) - oracle).abs() < 1e-9);
        assert!((f_of(&c) - (PI / 8.0 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let b = build_basis(2, 5).unwrap();
        let g0 = grad_f(&Trace::zeros(&b)).synthesize();
        assert!(g0.iter().all(|x| (x - 1.0).abs() < 1e-14));
        let q = eval_on_sphere(&QuadraticBlowup::diagonal(&[0.1, 0.15]).unwrap(), &b).unwrap();
        assert!(grad_f(&q).synthesize().iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn w0_examples_against_volumetric() {
        let b = build_basis(2, 5).unwrap();
        let j = cos_mode(&b, 3);
        let t = Trace::mode(&b, j, 1.0);
        let mut eps = vec![0.0; b.n_modes()];
        assert!((w0_homog(&t, &eps).unwrap() - 1.25).abs() < 1e-15);
        eps[j] = 1.0;
        assert!((w0_homog(&t, &eps).unwrap() - 1.0).abs() < 1e-15);
        for (e, want) in [(2.0, 1.25), (3.0, 1.0)] {
            let mut field = RadialProfileField::new(&b);
            field.push_power(j, e, 1.0).unwrap();
            let rep = w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), 0.0).unwrap();
            assert!((rep.w0 - want).abs() < 1e-7, "exponent {e}: {}", rep.w0);
        }
        let j2 = cos_mode(&b, 2);
        assert_eq!(w0_homog(&Trace::mode(&b, j2, 0.7), &vec![0.0; b.n_modes()]).unwrap(), 0.0);
        assert!(matches!(w0_homog(&t, &vec![-0.1; b.n_modes()]), Err(Error::NegativeExponent(_))));
    }

    #[test]
    fn volumetric_examples() {
        for d in [2usize, 3] {
            let b = build_basis(d, 4).unwrap();
            let rs = reference_energies(d).unwrap();
            let zero = RadialProfileField::new(&b);
            let rep = w_volumetric(&PolarField::from_profiles(&zero, DEFAULT_SHELLS), rs.w_s).unwrap();
            assert_eq!((rep.w0, rep.w), (0.0, 0.0));
            let q = eval_on_sphere(&QuadraticBlowup::isotropic(d), &b).unwrap();
            let mut field = RadialProfileField::new(&b);
            field.push_trace(&q, 2.0).unwrap();
            let rep = w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), rs.w_s).unwrap();
            assert!((rep.w - rs.w_s).abs() <= 1e-6 * rs.w_s);
            assert!(rep.gap.abs() <= 1e-6 * rs.w_s);
        }
        let b = build_basis(2, 4).unwrap();
        let field = RadialProfileField::new(&b);
        let coarse = PolarField::from_profiles(&field, 10);
        assert!(matches!(w_volumetric(&coarse, 0.0), Err(Error::GridTooCoarse { .. })));
    }

    #[test]
    fn volumetric_matches_spectral_on_random_traces() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for d in [2usize, 3] {
            let b = build_basis(d, 6).unwrap();
            for _ in 0..3 {
                let c = random_trace(&b, &mut rng, 1.0);
                let mut field = RadialProfileField::new(&b);
                field.push_trace(&c, 2.0).unwrap();
                let rep = w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), 0.0).unwrap();
                let spectral = w0_homog(&c, &vec![0.0; b.n_modes()]).unwrap();
                assert!((rep.w0 - spectral).abs() <= 1e-6 * spectral.abs().max(1.0));
                let sum: f64 = rep.per_mode.iter().map(|p| p.1).sum();
                assert!((sum - rep.w0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn slicing_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for d in [2usize, 3] {
            let b = build_basis(d, 5).unwrap();
            let c = random_trace(&b, &mut rng, 0.5);
            let mut field = RadialProfileField::new(&b);
            field.push_trace(&c, 2.0).unwrap();
            let want = f_of(&c) / (d as f64 + 2.0);
            assert!((slicing_w(&field) - want).abs() < 1e-12);
            assert!((field.boundary().sub(&c)).norm() < 1e-15);

            let eps: Vec<f64> = (0..b.n_modes()).map(|_| rng.random_range(0.0..2.0)).collect();
            let mut field = RadialProfileField::new(&b);
            for (j, (cj, e)) in c.coeffs().iter().zip(&eps).enumerate() {
                field.push_power(j, 2.0 + e, *cj).unwrap();
            }
            let want = w_homog(&c, &eps).unwrap();
            assert!((slicing_w(&field) - want).abs() < 1e-11);
        }
    }

    #[test]
    fn slicing_matches_volumetric_for_polynomial_profiles() {
        let b = build_basis(2, 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut field = RadialProfileField::new(&b);
        for j in 0..b.n_modes() {
            for e in [2.0, 2.5, 3.0, 4.0] {
                field.push_power(j, e, rng.random_range(-0.3..0.3)).unwrap();
            }
        }
        let vol = w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), 0.0).unwrap();
        let sl = slicing_w(&field);
        assert!((sl - vol.w).abs() / (1.0 + vol.w.abs()) <= 1e-5, "{sl} vs {}", vol.w);
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let b = build_basis(2, 3).unwrap();
        let rep = EnergyReport::of_extension(&Trace::constant(&b, 0.125), PI / 32.0);
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        for key in ["w0", "w", "f", "gap", "per_mode"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["per_mode"][0].is_array());
        assert!(rep.gap.abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn gradient_matches_difference_quotient(seed in 0u64..10_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = build_basis(2, 6).unwrap();
            let phi = random_trace(&b, &mut rng, 1.0);
            let v = random_trace(&b, &mut rng, 1.0);
            let h = 1e-5;
            let fd = (f_of(&phi.axpy(h, &v)) - f_of(&phi)) / h;
            let g = grad_f(&phi);
            let exact = v.dot(&g);
            // relative to the size of the pairing, which may cancel
            let scale = exact.abs().max(v.norm() * g.norm());
            prop_assert!((fd - exact).abs() <= 1e-3 * scale);
        }

        #[test]
        fn disjoint_modes_add(seed in 0u64..10_000, split in 1usize..32) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = build_basis(2, 16).unwrap();
            let c = random_trace(&b, &mut rng, 1.0);
            let eps: Vec<f64> = (0..b.n_modes()).map(|_| rng.random_range(0.0..2.0)).collect();
            let lo = c.filter_degree(|k| 2 * k <= split);
            let hi = c.sub(&lo);
            let whole = w0_homog(&c, &eps).unwrap();
            let parts = w0_homog(&lo, &eps).unwrap() + w0_homog(&hi, &eps).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-10);
        }

        #[test]
        fn homogeneous_energy_is_minimal_at_two(k in 0usize..12, e in 0.0f64..3.0) {
            for d in [2usize, 3] {
                let lam = (k * (k + d - 2)) as f64;
                let at0 = w0_mode(d, lam, 0.0);
                let h = 1e-7;
                let slope = (w0_mode(d, lam, h) - at0) / h;
                if lam <= 2.0 * d as f64 {
                    prop_assert!(w0_mode(d, lam, e) >= at0 - 1e-15);
                } else {
                    prop_assert!(slope < 0.0);
                }
            }
        }
    }
}
