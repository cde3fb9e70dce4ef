//! Flows on the sphere and the competitor built from a stopped, reparametrized
//! flow.
//!
//! Two flows are provided: the explicit `psi(t) = h2 + e^{-rate t} h_alpha`
//! and the projected explicit Euler scheme for the gradient flow of `F`
//! constrained to nonnegative traces. Sampled trajectories are treated as
//! piecewise linear in `t`.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::competitor::{build_h2_ha, split_trace, EpiCertificate, ModeSplit};
use crate::critical::{project_to_s, QuadraticBlowup};
use crate::energy::{
    curve_breaks, f_of, gauss_legendre, grad_f, quadratic_part, reparam_w, slicing_w, FlowTerm, RadialProfileField,
    SphereCurve, DEFAULT_SHELLS,
};
use crate::error::{Error, Result};
use crate::sphere::{SphereBasis, Trace};

/// Relative agreement required between the two reparametrized forms.
pub const FORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Kind {
    Explicit { h2: Trace, h_alpha: Trace, rate: f64 },
    Sampled,
}

/// Samples of a flow `psi` on a time grid, with derivatives, dissipation
/// `D_k` and energies `F_k`.
///
/// For sampled flows `psi'_k` is the slope of the piece `[t_k, t_{k+1}]`
/// and `D_k = (F_k - F_{k+1}) / (t_{k+1} - t_k)` is the dissipation averaged
/// over that piece; the last sample repeats the last piece.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    basis: Arc<SphereBasis>,
    times: Vec<f64>,
    states: Vec<Trace>,
    velocities: Vec<Trace>,
    dissipation: Vec<f64>,
    energies: Vec<f64>,
    kind: Kind,
}

impl FlowTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Trace] {
        &self.states
    }

    pub fn velocities(&self) -> &[Trace] {
        &self.velocities
    }

    pub fn dissipation(&self) -> &[f64] {
        &self.dissipation
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self.kind, Kind::Explicit { .. })
    }

    /// CSV with columns `t,F,psi_dot_sq,D,dist_to_S`.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("t,F,psi_dot_sq,D,dist_to_S\n");
        for k in 0..self.len() {
            let dist = project_to_s(&self.states[k])?.distance;
            writeln!(
                out,
                "{:.12e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[k],
                self.energies[k],
                self.velocities[k].norm_sq(),
                self.dissipation[k],
                dist
            )
            .expect("writing to a string");
        }
        Ok(out)
    }

    fn piece(&self, t: f64) -> usize {
        let last = self.times.len() - 1;
        if t >= self.times[last] {
            return last.saturating_sub(1);
        }
        self.times.partition_point(|x| *x <= t).saturating_sub(1).min(last.saturating_sub(1))
    }
}

impl SphereCurve for FlowTrajectory {
    fn basis(&self) -> &Arc<SphereBasis> {
        &self.basis
    }

    fn end_time(&self) -> f64 {
        *self.times.last().expect("nonempty trajectory")
    }

    fn state_at(&self, t: f64) -> Trace {
        match &self.kind {
            Kind::Explicit { h2, h_alpha, rate } => h2.axpy((-rate * t).exp(), h_alpha),
            Kind::Sampled => {
                if self.times.len() == 1 || t >= self.end_time() {
                    return self.states.last().expect("nonempty").clone();
                }
                let k = self.piece(t.max(0.0));
                let s = (t.max(0.0) - self.times[k]) / (self.times[k + 1] - self.times[k]);
                self.states[k].scale(1.0 - s).axpy(s, &self.states[k + 1])
            }
        }
    }

    fn velocity_at(&self, t: f64) -> Trace {
        match &self.kind {
            Kind::Explicit { h_alpha, rate, .. } => h_alpha.scale(-rate * (-rate * t).exp()),
            Kind::Sampled => self.velocities[self.piece(t)].clone(),
        }
    }

    fn kinks(&self, t_end: f64) -> Vec<f64> {
        match self.kind {
            Kind::Explicit { .. } => Vec::new(),
            Kind::Sampled => self.times.iter().copied().filter(|t| *t > 0.0 && *t < t_end).collect(),
        }
    }
}

/// `psi(t) = h2 + e^{-t} h_alpha` sampled on `times`.
pub fn explicit_flow(split: &ModeSplit, times: &[f64]) -> Result<FlowTrajectory> {
    explicit_flow_with_rate(split, times, 1.0)
}

/// `psi(t) = h2 + e^{-rate t} h_alpha`; large rates give flows whose energy
/// halves almost at once.
pub fn explicit_flow_with_rate(split: &ModeSplit, times: &[f64], rate: f64) -> Result<FlowTrajectory> {
    check_grid(times)?;
    if rate <= 0.0 || !rate.is_finite() {
        return Err(Error::InvalidArgument(format!("rate = {rate} must be positive")));
    }
    let pair = build_h2_ha(split);
    let mut traj = FlowTrajectory {
        basis: Arc::clone(split.basis()),
        times: times.to_vec(),
        states: Vec::new(),
        velocities: Vec::new(),
        dissipation: Vec::new(),
        energies: Vec::new(),
        kind: Kind::Explicit {
            h2: pair.h2,
            h_alpha: pair.h_alpha,
            rate,
        },
    };
    for &t in times {
        let s = traj.state_at(t);
        let v = traj.velocity_at(t);
        traj.dissipation.push(-v.dot(&grad_f(&s)));
        traj.energies.push(f_of(&s));
        traj.states.push(s);
        traj.velocities.push(v);
    }
    Ok(traj)
}

fn check_grid(times: &[f64]) -> Result<()> {
    if times.is_empty() || times[0] != 0.0 {
        return Err(Error::InvalidArgument("time grid must start at 0".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("time grid must be increasing".into()));
    }
    Ok(())
}

/// Largest stable step of the projected Euler scheme on `basis`.
pub fn dt_max(basis: &SphereBasis) -> f64 {
    1.0 / (2.0 * basis.largest_eigenvalue() - 4.0 * basis.dim() as f64 + 1.0)
}

/// Basis on which the nodal clamp is the exact projection onto `v >= 0`.
///
/// In d = 2 the trapezoidal rule on `2L + 1` nodes is exact up to degree
/// `2L`, so synthesis and analysis are inverse to each other and the nodal
/// clamp is an L2 projection. In d = 3 there is no such set; the default
/// nodes are used and clamped states are re-analyzed.
pub fn collocation_basis(basis: &Arc<SphereBasis>) -> Result<Arc<SphereBasis>> {
    if basis.dim() == 2 {
        let l = basis.max_degree();
        Ok(Arc::new(SphereBasis::with_nodes(2, l, 2 * l + 1)?))
    } else {
        Ok(Arc::clone(basis))
    }
}

/// Projected explicit Euler for the gradient flow of `F` on `{v >= 0}`.
pub fn pvi_gradient_flow(c: &Trace, dt: f64, t_max: f64) -> Result<FlowTrajectory> {
    let limit = dt_max(c.basis());
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, limit });
    }
    if !(t_max > 0.0) {
        return Err(Error::InvalidArgument(format!("T_max = {t_max} must be positive")));
    }
    let min = c.nodal_min();
    if min < -1e-12 {
        return Err(Error::NegativeTrace(min));
    }
    let basis = collocation_basis(c.basis())?;
    let mut psi = c.rebase(&basis)?;
    let steps = (t_max / dt).round().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(psi.clone());
    for k in 1..=steps {
        let g = grad_f(&psi).synthesize();
        let v: Vec<f64> = psi.synthesize().iter().zip(&g).map(|(p, gi)| (p - dt * gi).max(0.0)).collect();
        psi = basis.analyze(&v)?;
        times.push(k as f64 * dt);
        states.push(psi.clone());
    }
    let energies: Vec<f64> = states.iter().map(f_of).collect();
    let mut velocities = Vec::with_capacity(states.len());
    let mut dissipation = Vec::with_capacity(states.len());
    for k in 0..steps {
        let h = times[k + 1] - times[k];
        velocities.push(states[k + 1].sub(&states[k]).scale(1.0 / h));
        dissipation.push((energies[k] - energies[k + 1]) / h);
    }
    velocities.push(velocities[steps - 1].clone());
    dissipation.push(dissipation[steps - 1]);
    Ok(FlowTrajectory {
        basis,
        times,
        states,
        velocities,
        dissipation,
        energies,
        kind: Kind::Sampled,
    })
}

/// Velocities below this norm are treated as a stationary sample.
pub const STATIONARY_TOL: f64 = 1e-12;

/// `min_k D_k / min(|psi'_k|^2, |psi'_k|^p)`, or `+inf` if every sample is
/// stationary. A positive value is a valid dissipation constant.
pub fn check_dissipation(traj: &FlowTrajectory, p: f64) -> f64 {
    let mut best = f64::INFINITY;
    for (v, d) in traj.velocities.iter().zip(&traj.dissipation) {
        let n = v.norm();
        if n <= STATIONARY_TOL {
            continue;
        }
        best = best.min(d / (n * n).min(n.powf(p)));
    }
    best
}

/// Gaps `F_k - F(S)` at or below this are skipped by the Lojasiewicz probe.
pub const GAP_TOL: f64 = 1e-12;

/// `min_k D_k / (F_k - F(S))^{1+beta}` over samples with a positive gap, or
/// `+inf` when there are none.
///
/// Samples with `F_k < F(S)` are skipped too: traces with low modes sit
/// below the critical level without contradicting the inequality, which only
/// constrains the positive part of the gap.
pub fn check_lojasiewicz(traj: &FlowTrajectory, beta: f64, f_s: f64) -> f64 {
    let mut best = f64::INFINITY;
    for (f, d) in traj.energies.iter().zip(&traj.dissipation) {
        let gap = f - f_s;
        if gap <= GAP_TOL {
            continue;
        }
        best = best.min(d / gap.powf(1.0 + beta));
    }
    best
}

/// `max_k (|psi_k - Q|^2 - (b/a)(e^{a t_k} - 1) - e^{a t_k}|psi_0 - Q|^2)^+`
/// with `a = 8d + 1`, `b = |S^{d-1}|`.
pub fn gronwall_check(traj: &FlowTrajectory, q: &QuadraticBlowup) -> Result<f64> {
    let basis = &traj.basis;
    let qt = crate::critical::eval_on_sphere(q, basis)?;
    let (a, b) = gronwall_constants(basis.dim());
    let d0 = traj.states[0].sub(&qt).norm_sq();
    let mut worst: f64 = 0.0;
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let lhs = s.sub(&qt).norm_sq();
        let rhs = b / a * (a * t).exp_m1() + (a * t).exp() * d0;
        worst = worst.max(lhs - rhs);
    }
    Ok(worst)
}

pub fn gronwall_constants(d: usize) -> (f64, f64) {
    (8.0 * d as f64 + 1.0, crate::sphere::sphere_area(d))
}

/// Exponents and constants of the assembly, with `gamma = (1+beta)(2-2/p) - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A1Params {
    pub alpha: f64,
    pub d: usize,
    pub p: f64,
    pub beta: f64,
    pub c_ed: f64,
    pub c_ls: f64,
    pub c_sl: f64,
    pub eps_kappa: f64,
    /// Admissible initial gap `F(psi(0)) - F(S)`.
    pub e_max: f64,
    pub t_max: f64,
}

impl A1Params {
    /// Fills `eps_kappa` with the largest dyadic value meeting
    /// `eps <= 1`, `eps C <= 1/(20 k)` and `eps <= T_max`.
    pub fn new(d: usize, p: f64, beta: f64, c_ed: f64, c_ls: f64, t_max: f64) -> Result<Self> {
        if p < 2.0 || !(0.0..1.0).contains(&beta) || (1.0 + beta) * (1.0 - 1.0 / p) >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "exponents p = {p}, beta = {beta} violate (1+beta)(1-1/p) < 1"
            )));
        }
        if !(c_ed > 0.0) || !(c_ls > 0.0) || !(t_max > 0.0) {
            return Err(Error::InvalidArgument("constants must be positive".into()));
        }
        let mut out = A1Params {
            alpha: 2.0,
            d,
            p,
            beta,
            c_ed,
            c_ls,
            c_sl: 1.0,
            eps_kappa: 0.0,
            e_max: 1.0,
            t_max,
        };
        let c = out.error_constant();
        let k = out.k();
        let mut eps = 1.0;
        while eps * c > 1.0 / (20.0 * k) || eps > t_max {
            eps *= 0.5;
        }
        out.eps_kappa = eps;
        Ok(out)
    }

    /// `2 alpha + d - 2`.
    pub fn k(&self) -> f64 {
        2.0 * self.alpha + self.d as f64 - 2.0
    }

    pub fn gamma(&self) -> f64 {
        (1.0 + self.beta) * (2.0 - 2.0 / self.p) - 1.0
    }

    /// Exponent `(p - 2)/(2p - 2)` of the implicit equation for `kappa`.
    pub fn kappa_exponent(&self) -> f64 {
        (self.p - 2.0) / (2.0 * self.p - 2.0)
    }

    /// `C` bounding the kinetic term by the dissipation:
    /// `C_SL max(C1, C2 k^{-(1-2/p)})` with `C1 = 1/C_ED`, `C2 = C_ED^{-2/p}`.
    pub fn error_constant(&self) -> f64 {
        if self.c_ed.is_infinite() {
            return 0.0;
        }
        let c1 = 1.0 / self.c_ed;
        let c2 = self.c_ed.powf(-2.0 / self.p);
        self.c_sl * c1.max(c2 * self.k().powf(-(1.0 - 2.0 / self.p)))
    }

    /// Gain factor on `G(z) - G(S)` in the fast case.
    pub fn case1_eps(&self) -> f64 {
        (-self.k()).exp() / 4.0
    }

    /// Gain factor on `(G(z) - G(S))^{1+gamma}` in the slow case.
    pub fn case2_eps(&self) -> f64 {
        let k = self.k();
        let cp = self.eps_kappa * self.c_ls * (-(-k).exp_m1()) / (k * 2f64.powf(1.0 + self.beta));
        cp.powf(2.0 - 2.0 / self.p) * k.powf(1.0 + self.gamma()) / (4.0 * k)
    }

    pub fn eps(&self) -> f64 {
        self.case1_eps().min(self.case2_eps())
    }
}

/// Everything measured while assembling the flow competitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A1Report {
    pub certificate: EpiCertificate,
    pub params: A1Params,
    /// 1 when the energy halves before `kappa`, else 2; 0 when the gap is not positive.
    pub case: u8,
    pub kappa: f64,
    pub kappa_iterations: usize,
    pub t_half: f64,
    pub t_stop: f64,
    /// Energy and gradient forms of `G(h)`.
    pub forms: [f64; 2],
    /// `G(h)` by slicing the assembled field.
    pub g_slicing: f64,
    /// The three right-hand terms of the half-sum estimate on `G(h) - G(z)`.
    pub chain_terms: [f64; 3],
    pub chain_ok: bool,
    /// Kinetic term and its bound `int D e / (4k)`.
    pub kinetic: [f64; 2],
    /// Case-specific bound on `G(h) - G(z)`.
    pub case_bound: f64,
    pub case_ok: bool,
}

/// Slack used in every inequality of the assembly.
pub const A1_TOL: f64 = 1e-10;

// integral of D(t) e^{-k t / kappa} over [0, t_end] along the curve
fn weighted_dissipation(curve: &FlowTrajectory, k: f64, kappa: f64, t_end: f64) -> f64 {
    if t_end <= 0.0 {
        return 0.0;
    }
    let breaks = curve_breaks(curve, t_end);
    let rule = gauss_legendre(16);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (mid, half) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
        if half <= 0.0 {
            continue;
        }
        for &(x, wt) in rule {
            let t = mid + half * x;
            let d = -curve.velocity_at(t).dot(&grad_f(&curve.state_at(t)));
            total += wt * half * d * (-k * t / kappa).exp();
        }
    }
    total
}

fn half_time(traj: &FlowTrajectory, f_s: f64) -> f64 {
    let g0 = traj.energies[0] - f_s;
    let below = |t: f64| f_of(&traj.state_at(t)) - f_s < 0.5 * g0;
    let Some(k) = (1..traj.len()).find(|&k| traj.energies[k] - f_s < 0.5 * g0) else {
        return traj.end_time();
    };
    let (mut lo, mut hi) = (traj.times[k - 1], traj.times[k]);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Builds `h = r^2 phi(-kappa ln r)` from the flow stopped at `T` and checks
/// `G(h) - G(S) <= (1 - eps |G(z) - G(S)|^gamma)(G(z) - G(S))`.
pub fn theorem_a1_assemble(
    traj: &FlowTrajectory,
    params: &A1Params,
    f_s: f64,
    id: &str,
) -> Result<(RadialProfileField, A1Report)> {
    let basis = Arc::clone(&traj.basis);
    let k = params.k();
    let gamma = params.gamma();
    let g_s = f_s / k;
    let c = traj.states[0].clone();
    let f0 = traj.energies[0];
    let g_z = f0 / k;
    let gap = g_z - g_s;
    if f0 - f_s > params.e_max {
        return Err(Error::Precondition {
            what: "theorem_a1_assemble".into(),
            detail: format!("initial gap {:.3e} exceeds E = {}", f0 - f_s, params.e_max),
        });
    }
    if traj.end_time() < params.eps_kappa * (1.0 - 1e-12) {
        return Err(Error::TrajectoryTooShort {
            requested: params.eps_kappa,
            available: traj.end_time(),
        });
    }
    let split = split_trace(&c)?;
    let pair = build_h2_ha(&split);
    let w0_plus = quadratic_part(&split.eta_plus) / k;

    if gap <= 0.0 {
        let mut field = RadialProfileField::new(&basis);
        field.push_trace(&c, params.alpha)?;
        let cert = EpiCertificate {
            id: id.to_string(),
            gamma,
            eps: params.eps(),
            w_z: g_z,
            w_h: g_z,
            w_s: g_s,
            bound: gap,
            pass: true,
            positivity_min: field.min_on_polar_grid(DEFAULT_SHELLS),
            m: pair.m,
            w0_plus,
        };
        let report = A1Report {
            certificate: cert,
            params: *params,
            case: 0,
            kappa: params.eps_kappa,
            kappa_iterations: 0,
            t_half: 0.0,
            t_stop: 0.0,
            forms: [g_z, g_z],
            g_slicing: g_z,
            chain_terms: [0.0; 3],
            chain_ok: true,
            kinetic: [0.0, 0.0],
            case_bound: 0.0,
            case_ok: true,
        };
        return Ok((field, report));
    }

    let t_half = half_time(traj, f_s);
    let expo = params.kappa_exponent();
    let mut kappa = params.eps_kappa * params.e_max.powf(expo);
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations >= 100 {
            return Err(Error::KappaDivergence(iterations));
        }
        let t_stop = t_half.min(kappa);
        let next = params.eps_kappa * weighted_dissipation(traj, k, kappa, t_stop).max(0.0).powf(expo);
        if !(next > 0.0) || !next.is_finite() {
            return Err(Error::KappaDivergence(iterations));
        }
        let done = (next - kappa).abs() <= 1e-8 * kappa;
        kappa = next;
        if done {
            break;
        }
    }
    let (case, t_stop) = if t_half <= kappa { (1u8, t_half) } else { (2u8, kappa) };

    let forms = reparam_w(traj, kappa, t_stop)?;
    let g_h = forms.checked(FORM_TOL)?;
    let field = assemble_field(traj, kappa, t_stop)?;
    let g_slicing = slicing_w(&field);

    let damp = (-k * t_stop / kappa).exp();
    let f_t = f_of(&traj.state_at(t_stop));
    let diss = weighted_dissipation(traj, k, kappa, t_stop);
    let kinetic = forms.gradient_form - f0 / k + diss / k;
    let chain_terms = [damp * (f_t - f0) / (2.0 * k), -diss / (2.0 * k), params.c_sl * kinetic];
    let chain_ok = g_h - g_z <= chain_terms.iter().sum::<f64>() + A1_TOL;
    let kinetic_bound = diss / (4.0 * k);

    let case_bound = if case == 1 {
        -0.5 * (-k).exp() / (2.0 * k) * (f0 - f_s)
    } else {
        let cp = params.eps_kappa * params.c_ls * (-(-k).exp_m1()) / (k * 2f64.powf(1.0 + params.beta));
        -cp.powf(2.0 - 2.0 / params.p) * (f0 - f_s).powf(1.0 + gamma) / (4.0 * k)
    };
    let case_ok = g_h - g_z <= case_bound + A1_TOL;
    let eps = params.eps();
    let bound = gap * (1.0 - eps * gap.powf(gamma));
    let positivity_min = field.min_on_polar_grid(DEFAULT_SHELLS);
    let pass = g_h - g_s <= bound + A1_TOL && chain_ok && case_ok;
    let cert = EpiCertificate {
        id: id.to_string(),
        gamma,
        eps,
        w_z: g_z,
        w_h: g_h,
        w_s: g_s,
        bound,
        pass,
        positivity_min,
        m: pair.m,
        w0_plus,
    };
    let report = A1Report {
        certificate: cert,
        params: *params,
        case,
        kappa,
        kappa_iterations: iterations,
        t_half,
        t_stop,
        forms: [forms.energy_form, forms.gradient_form],
        g_slicing,
        chain_terms,
        chain_ok,
        kinetic: [kinetic, kinetic_bound],
        case_bound,
        case_ok,
    };
    Ok((field, report))
}

/// The field `r^2 phi(-kappa ln r)` of the flow stopped at `t_stop`.
pub fn assemble_field(traj: &FlowTrajectory, kappa: f64, t_stop: f64) -> Result<RadialProfileField> {
    let mut field = RadialProfileField::new(&traj.basis);
    match &traj.kind {
        Kind::Explicit { h2, h_alpha, rate } => {
            // e^{-rate t} = r^{rate kappa}, frozen below r = e^{-t_stop / kappa}
            field.push_trace(h2, 2.0)?;
            let r_stop = (-t_stop / kappa).exp();
            for (j, cj) in h_alpha.coeffs().iter().enumerate() {
                field.push_stopped_power(j, 2.0 + rate * kappa, *cj, r_stop)?;
            }
        }
        Kind::Sampled => {
            let mut times: Vec<f64> = traj.times.iter().copied().take_while(|t| *t < t_stop).collect();
            let mut states: Vec<Vec<f64>> = times.iter().map(|t| traj.state_at(*t).into_coeffs()).collect();
            times.push(t_stop);
            states.push(traj.state_at(t_stop).into_coeffs());
            field.set_flow(FlowTerm {
                kappa,
                times: Arc::new(times),
                states: Arc::new(states),
            })?;
        }
    }
    Ok(field)
}
