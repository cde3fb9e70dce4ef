//! The end-to-end verification run: every check in order, one JSON summary,
//! certificate lines and CSV artifacts under the output directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::competitor::{
    build_h2_ha, build_harmonic_f, build_uniform_ftilde, certify_direct, ftilde_gain_constant, harmonic_gain_constant,
    key_estimate_ratio, key_identities_check, lipschitz_bound_check, split_trace, DirectParams, EpiCertificate,
    FlatPatch,
};
use crate::config::RunConfig;
use crate::corpus::{generate_corpus, load_corpus, write_corpus, CorpusSpec};
use crate::critical::{eval_on_sphere, project_to_s, reference_energies_on, QuadraticBlowup, ReferenceEnergies};
use crate::energy::{
    f_of, quadratic_part, slicing_w, w_of_extension, w_volumetric, PolarField, RadialProfileField, DEFAULT_SHELLS,
};
use crate::error::{Error, Result};
use crate::flow::{
    check_dissipation, check_lojasiewicz, dt_max, explicit_flow, explicit_flow_with_rate, gronwall_check,
    pvi_gradient_flow, theorem_a1_assemble, A1Params, A1Report, FlowTrajectory,
};
use crate::obstacle::{
    blowup_rescale, decay_bound, decay_simulator, decay_times, dyadic_rate, extract_trace, half_space_study, perturbed_data, psor_solve, singular_data,
    weiss_series, GridField, PsorParams,
};
use crate::sphere::{build_basis, sup_negative_part, SphereBasis, Trace};

/// Environment variable holding the worker count; unset or 0 uses all cores.
pub const WORKERS_ENV: &str = "EPILAB_WORKERS";

// diagnostics kept per section
const MAX_DIAGNOSTICS: usize = 20;

// traces used by the oracle and the step-halving study
const ORACLE_TRACES: usize = 50;
const HALVING_TRACES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionReport {
    pub name: String,
    pub pass: bool,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub sections: Vec<SectionReport>,
    pub gamma_table: BTreeMap<String, f64>,
}

impl Summary {
    pub fn pass(&self) -> bool {
        self.sections.iter().all(|s| s.pass)
    }

    pub fn section(&self, name: &str) -> Option<&SectionReport> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub summary: Summary,
    pub exit_code: i32,
}

/// Exit code for an error that stopped a command: 2 for bad input or
/// configuration, 1 otherwise.
pub fn exit_code_for(err: &Error) -> i32 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

struct Section {
    report: SectionReport,
}

impl Section {
    fn new(name: &str, seed: u64) -> Self {
        let mut metrics = BTreeMap::new();
        metrics.insert("seed".to_string(), seed as f64);
        Section {
            report: SectionReport {
                name: name.to_string(),
                pass: true,
                metrics,
                diagnostics: Vec::new(),
            },
        }
    }

    fn metric(&mut self, key: &str, v: f64) {
        self.report.metrics.insert(key.to_string(), v);
    }

    fn fail(&mut self, msg: String) {
        self.report.pass = false;
        if self.report.diagnostics.len() < MAX_DIAGNOSTICS {
            self.report.diagnostics.push(msg);
        }
    }

    fn require(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.fail(msg());
        }
    }

    fn at_most(&mut self, key: &str, value: f64, bound: f64) {
        self.metric(key, value);
        if !(value <= bound) {
            self.fail(format!("{key} = {value:.3e} exceeds {bound:.3e}{}", floor_note(bound)));
        }
    }

    fn at_least(&mut self, key: &str, value: f64, bound: f64) {
        self.metric(key, value);
        if !(value >= bound) {
            self.fail(format!("{key} = {value:.3e} is below {bound:.3e}"));
        }
    }

    fn finish(self) -> SectionReport {
        self.report
    }
}

// tolerances this tight sit under what double-precision quadrature delivers
fn floor_note(bound: f64) -> &'static str {
    if bound < 1e-13 {
        " (tolerance is below the attainable quadrature accuracy)"
    } else {
        ""
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn worst<T>(items: &[(String, T)], f: impl Fn(&T) -> f64) -> (String, f64) {
    items
        .iter()
        .map(|(id, x)| (id.clone(), f(x)))
        .fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a })
}

fn best<T>(items: &[(String, T)], f: impl Fn(&T) -> f64) -> (String, f64) {
    let (id, v) = worst(items, |x| -f(x));
    (id, -v)
}

/// Thread pool sized by [`WORKERS_ENV`].
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} = {v:?} is not a worker count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
}

/// The corpus named by the configuration: loaded from `corpus_dir` (each
/// file must be nonnegative, within `delta` of S and have gap at most 1), or
/// generated from the seed. Generated corpora are written to `write_to`.
pub fn resolve_corpus(
    cfg: &RunConfig,
    basis: &Arc<SphereBasis>,
    write_to: Option<&Path>,
) -> Result<Vec<(String, Trace)>> {
    if let Some(dir) = &cfg.corpus_dir {
        let w_s = reference_energies_on(basis)?.w_s;
        let loaded = load_corpus(dir, basis)?;
        let mut out = Vec::with_capacity(loaded.len());
        for (path, t) in loaded {
            let dist = project_to_s(&t)?.distance;
            let gap = w_of_extension(&t) - w_s;
            if dist > cfg.delta || gap > 1.0 {
                return Err(Error::InvalidInput {
                    path,
                    detail: format!("distance {dist:.3e} to S (delta {:.3e}) or gap {gap:.3e} (max 1)", cfg.delta),
                });
            }
            out.push((stem(&path), t));
        }
        return Ok(out);
    }
    let corpus = generate_corpus(basis, &CorpusSpec::from_config(cfg))?;
    if let Some(dir) = write_to {
        write_corpus(dir, &corpus)?;
    }
    Ok(corpus
        .manifest
        .entries
        .iter()
        .map(|e| stem(Path::new(&e.file)))
        .zip(corpus.traces)
        .collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    basis: Arc<SphereBasis>,
    refs: ReferenceEnergies,
    traces: Vec<(String, Trace)>,
    pool: rayon::ThreadPool,
    out: PathBuf,
    certificates: Vec<serde_json::Value>,
    gammas: BTreeMap<String, f64>,
}

impl Ctx<'_> {
    fn d(&self) -> usize {
        self.basis.dim()
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn gamma(&self) -> f64 {
        let d = self.d() as f64;
        (d - 1.0) / (d + 1.0)
    }

    // per-trace work in parallel, results in corpus order
    fn map_traces<T: Send>(&self, limit: usize, f: impl Fn(&str, &Trace) -> T + Sync) -> Vec<(String, T)> {
        let n = limit.min(self.traces.len());
        self.pool
            .install(|| self.traces[..n].par_iter().map(|(id, t)| (id.clone(), f(id, t))).collect())
    }

    fn record(&mut self, section: &str, cert: &EpiCertificate) {
        let mut v = serde_json::to_value(cert).expect("plain data serializes");
        v["section"] = json!(section);
        v["seed"] = json!(self.cfg.seed);
        self.certificates.push(v);
    }
}

/// Runs every section in order and writes the artifacts under `cfg.out`.
///
/// Errors are returned only for unusable input (bad configuration, missing
/// or invalid trace files) and I/O failures; failed checks are reported in
/// the summary with exit code 1.
pub fn run_suite(cfg: &RunConfig) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let basis = cfg.basis()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_kv())?;
    let traces = resolve_corpus(cfg, &basis, Some(&out.join("corpus")))?;
    for dir in ["trajectories", "decay"] {
        fs::create_dir_all(out.join(dir))?;
    }
    let mut ctx = Ctx {
        cfg,
        refs: reference_energies_on(&basis)?,
        basis,
        traces,
        pool: worker_pool()?,
        out,
        certificates: Vec::new(),
        gammas: BTreeMap::new(),
    };
    let mut sections = vec![
        basis_section(&ctx),
        oracle_section(&ctx),
        key_lemma_section(&ctx),
        lipschitz_section(&ctx),
        direct_section(&mut ctx),
        gain_section(&ctx),
        explicit_flow_section(&mut ctx),
        fast_case_section(&ctx),
        pvi_section(&mut ctx),
        decay_section(&ctx)?,
    ];
    if cfg.psor {
        fs::create_dir_all(ctx.out.join("obstacle"))?;
        sections.push(obstacle_section(&ctx)?);
    }
    let mut lines = String::new();
    for c in &ctx.certificates {
        lines.push_str(&serde_json::to_string(c)?);
        lines.push('\n');
    }
    fs::write(ctx.out.join("certificates.jsonl"), lines)?;
    let summary = Summary {
        config_hash: cfg.hash(),
        sections,
        gamma_table: ctx.gammas,
    };
    fs::write(ctx.out.join("summary.json"), summary.to_json())?;
    let exit_code = if summary.pass() { 0 } else { 1 };
    Ok(SuiteOutcome { summary, exit_code })
}

fn basis_section(ctx: &Ctx) -> SectionReport {
    let tol = &ctx.cfg.tol;
    let b = &ctx.basis;
    let d = ctx.d();
    let mut s = Section::new("basis", ctx.seed());
    s.metric("d", d as f64);
    s.metric("L", b.max_degree() as f64);
    s.metric("nodes", b.n_nodes() as f64);
    s.metric("modes", b.n_modes() as f64);
    let mut round_trip: f64 = 0.0;
    for j in 0..b.n_modes() {
        let e = Trace::mode(b, j, 1.0);
        match b.analyze(&e.synthesize()) {
            Ok(back) => round_trip = round_trip.max(back.sub(&e).norm()),
            Err(err) => s.fail(format!("analysis of mode {j}: {err}")),
        }
    }
    s.at_most("round_trip_error", round_trip, tol.reference);
    let (f_exact, w_exact) = if d == 2 { (PI / 8.0, PI / 32.0) } else { (PI / 6.0, PI / 30.0) };
    s.metric("f_s", ctx.refs.f_s);
    s.metric("w_s", ctx.refs.w_s);
    s.at_most("f_s_error", (ctx.refs.f_s - f_exact).abs(), tol.reference);
    s.at_most("w_s_error", (ctx.refs.w_s - w_exact).abs(), tol.reference);
    let mut rng = stream(ctx.seed(), 1);
    let mut spread: f64 = 0.0;
    for _ in 0..10 {
        match eval_on_sphere(&QuadraticBlowup::random(d, &mut rng), b) {
            Ok(q) => spread = spread.max((f_of(&q) - ctx.refs.f_s).abs()),
            Err(err) => s.fail(format!("element of S: {err}")),
        }
    }
    s.at_most("f_spread_on_s", spread, tol.reference);
    s.finish()
}

fn oracle_section(ctx: &Ctx) -> SectionReport {
    let tol = ctx.cfg.tol.oracle;
    let w_s = ctx.refs.w_s;
    let mut s = Section::new("energy_oracle", ctx.seed());
    let items = ctx.map_traces(ORACLE_TRACES, |_, c| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for eps in [0.0, 0.3, 1.0] {
            let mut field = RadialProfileField::new(c.basis());
            field.push_trace(c, 2.0 + eps)?;
            let slicing = slicing_w(&field);
            let vol = w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), w_s)?.w;
            worst = worst.max((slicing - vol).abs() / (1.0 + vol.abs()));
        }
        Ok(worst)
    });
    let mut ok = Vec::new();
    for (id, r) in items {
        match r {
            Ok(e) => ok.push((id, e)),
            Err(err) => s.fail(format!("trace {id}: {err}")),
        }
    }
    s.metric("traces", ok.len() as f64);
    let (id, e) = worst(&ok, |e| *e);
    s.at_most("max_rel_mismatch", e.max(0.0), tol);
    if e > tol {
        s.fail(format!("largest mismatch on trace {id}"));
    }
    s.finish()
}

struct KeyItem {
    residual: f64,
    h2_min: f64,
}

fn key_lemma_section(ctx: &Ctx) -> SectionReport {
    let tol = &ctx.cfg.tol;
    let mut s = Section::new("key_lemma", ctx.seed());
    let items = ctx.map_traces(usize::MAX, |_, c| -> Result<KeyItem> {
        let split = split_trace(c)?;
        let pair = build_h2_ha(&split);
        let residual = [-1.0, 0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&t| {
                let (a, b) = key_identities_check(&split, &pair, t);
                a.max(b)
            })
            .fold(0.0, f64::max);
        Ok(KeyItem {
            residual,
            h2_min: pair.h2.nodal_min(),
        })
    });
    let mut ok = Vec::new();
    for (id, r) in items {
        match r {
            Ok(k) => ok.push((id, k)),
            Err(err) => s.fail(format!("trace {id}: {err}")),
        }
    }
    let (id, r) = worst(&ok, |k| k.residual);
    s.at_most("max_identity_residual", r, tol.identity);
    s.require(r <= tol.identity, || format!("worst identity residual on trace {id}"));
    let (id, m) = best(&ok, |k| k.h2_min);
    s.at_least("min_h2_nodal", m, -tol.positivity);
    s.require(m >= -tol.positivity, || format!("h2 most negative on trace {id}"));

    // shrink each perturbation around a degenerate element of S, where the
    // low part actually goes negative and M > 0
    let d = ctx.d();
    let mut diag = vec![0.0; d];
    diag[0] = 0.25;
    let shrink = |c: &Trace| -> Result<Vec<f64>> {
        let base = split_trace(c)?;
        let q = eval_on_sphere(&QuadraticBlowup::diagonal(&diag)?, c.basis())?;
        let eta = c.sub(&base.q_trace);
        (0..10)
            .map(|k| {
                let ck = q.axpy(0.5f64.powi(k), &eta);
                let split = split_trace(&ck)?;
                let pair = build_h2_ha(&split);
                Ok(key_estimate_ratio(&split, &pair).unwrap_or(0.0))
            })
            .collect()
    };
    let ratios = ctx.map_traces(HALVING_TRACES, |_, c| shrink(c));
    let mut head_max: f64 = 0.0;
    let mut tail_max: f64 = 0.0;
    let mut last_max: f64 = 0.0;
    for (id, r) in ratios {
        match r {
            Ok(r) => {
                if r.iter().any(|x| !x.is_finite()) {
                    s.fail(format!("trace {id}: non-finite ratio along the shrinking sequence"));
                }
                let head = r[..3].iter().copied().fold(0.0, f64::max);
                let tail = r[3..].iter().copied().fold(0.0, f64::max);
                s.require(tail <= head * (1.0 + 1e-9) + 1e-300, || {
                    format!("trace {id}: ratio grows from {head:.3e} to {tail:.3e} as the perturbation shrinks")
                });
                head_max = head_max.max(head);
                tail_max = tail_max.max(tail);
                last_max = last_max.max(*r.last().expect("ten scales"));
            }
            Err(err) => s.fail(format!("shrinking trace {id}: {err}")),
        }
    }
    s.metric("ratio_max_coarse", head_max);
    s.metric("ratio_max_fine", tail_max);
    s.metric("ratio_max_finest", last_max);
    s.finish()
}

// F^2 over the ball of radius M / L around the peak against the lower bound
// for nonnegative Lipschitz F: negative parts of the 2-homogeneous low part
// on the circle, plus synthetic planar patches in any dimension
fn lipschitz_section(ctx: &Ctx) -> SectionReport {
    let mut s = Section::new("lipschitz_lower_bound", ctx.seed());
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut min_ratio = f64::INFINITY;
    if ctx.d() == 2 {
        // the low part of a perturbed degenerate element, which dips below zero
        let q = eval_on_sphere(&QuadraticBlowup::diagonal(&[0.25, 0.0]).expect("valid matrix"), &ctx.basis);
        let items = ctx.map_traces(usize::MAX, |_, c| -> Result<Option<f64>> {
            let base = split_trace(c)?;
            let shifted = q.as_ref().map_err(|e| Error::InvalidArgument(e.to_string()))?.add(&c.sub(&base.q_trace));
            let low = split_trace(&shifted)?.low_part();
            if sup_negative_part(&low) <= 1e-14 {
                return Ok(None);
            }
            let n = 4096usize;
            let h = 2.0 * PI / n as f64;
            let at = |t: f64| low.eval_at([t, 0.0]);
            let peak = (0..n).map(|i| i as f64 * h).min_by(|a, b| at(*a).total_cmp(&at(*b))).unwrap_or(0.0);
            let patch = FlatPatch::sample(1, [peak - PI, 0.0], h, [n + 1, 1], |x| (-at(x[0])).max(0.0))?;
            let l = patch.lipschitz();
            match lipschitz_bound_check(&patch, l) {
                Ok(chk) => Ok(Some(chk.lhs / chk.rhs)),
                Err(Error::PeakOnBoundary(_)) => Ok(None),
                Err(e) => Err(e),
            }
        });
        for (id, r) in items {
            match r {
                Ok(Some(ratio)) => {
                    checked += 1;
                    min_ratio = min_ratio.min(ratio);
                    s.require(ratio >= 1.0, || format!("trace {id}: integral falls short by factor {ratio:.6}"));
                }
                Ok(None) => skipped += 1,
                Err(err) => s.fail(format!("trace {id}: {err}")),
            }
        }
    }
    let mut rng = stream(ctx.seed(), 2);
    for i in 0..10 {
        let mut cone = || {
            (
                rng.random_range(0.5..1.0),
                rng.random_range(8.0..12.0),
                [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
            )
        };
        let (c1, c2) = (cone(), cone());
        let f = move |x: [f64; 2]| {
            let bump = |(a, b, c): (f64, f64, [f64; 2])| (a - b * (x[0] - c[0]).hypot(x[1] - c[1])).max(0.0);
            bump(c1) + bump(c2)
        };
        let res = FlatPatch::sample(2, [0.0, 0.0], 1.0 / 64.0, [65, 65], f)
            .and_then(|p| lipschitz_bound_check(&p, p.lipschitz()));
        match res {
            Ok(chk) => {
                checked += 1;
                let ratio = chk.lhs / chk.rhs;
                min_ratio = min_ratio.min(ratio);
                s.require(ratio >= 1.0, || format!("planar patch {i}: integral falls short by factor {ratio:.6}"));
            }
            Err(Error::PeakOnBoundary(_)) => skipped += 1,
            Err(err) => s.fail(format!("planar patch {i}: {err}")),
        }
    }
    s.metric("checked", checked as f64);
    s.metric("skipped", skipped as f64);
    s.metric("min_lhs_over_rhs", min_ratio);
    s.finish()
}

fn direct_section(ctx: &mut Ctx) -> SectionReport {
    let cfg = ctx.cfg;
    let mut s = Section::new("direct", ctx.seed());
    let params = DirectParams {
        delta: cfg.delta,
        kappa_cal: cfg.kappa_cal,
        eps_cap: cfg.eps_cap,
        shells: DEFAULT_SHELLS,
        tol: cfg.tol.certificate,
    };
    let items = ctx.map_traces(usize::MAX, |id, c| certify_direct(c, id, &params));
    let mut certs = Vec::new();
    for (id, r) in items {
        match r {
            Ok(c) => certs.push((id, c)),
            Err(err) => s.fail(format!("trace {id}: {err}")),
        }
    }
    let passed = certs.iter().filter(|(_, c)| c.pass).count();
    s.metric("traces", certs.len() as f64);
    s.metric("pass_rate", passed as f64 / ctx.traces.len().max(1) as f64);
    s.metric("kappa_cal", cfg.kappa_cal);
    for (id, c) in &certs {
        s.require(c.pass, || {
            format!("trace {id}: W(h) - W(S) = {:.6e} > bound {:.6e}", c.w_h - c.w_s, c.bound)
        });
    }
    let (_, margin) = best(&certs, |c| if c.eps > 0.0 { c.bound - (c.w_h - c.w_s) } else { f64::INFINITY });
    s.metric("min_margin", margin);
    let (id, pos) = best(&certs, |c| c.positivity_min);
    s.at_least("min_positivity", pos, -cfg.tol.positivity);
    s.require(pos >= -cfg.tol.positivity, || format!("competitor most negative on trace {id}"));
    let gamma = ctx.gamma();
    s.metric("gamma", gamma);
    s.require(certs.iter().all(|(_, c)| (c.gamma - gamma).abs() < 1e-15), || "unexpected exponent".into());
    ctx.gammas.insert("direct".into(), gamma);
    for (_, c) in &certs {
        ctx.record("direct", c);
    }
    s.finish()
}

fn gain_section(ctx: &Ctx) -> SectionReport {
    let cfg = ctx.cfg;
    let d = ctx.d();
    let eps = cfg.eps_cap;
    let (ch, ct) = (harmonic_gain_constant(d), ftilde_gain_constant(d, eps));
    let mut s = Section::new("harmonic_gain", ctx.seed());
    s.metric("harmonic_constant", ch);
    s.metric("uniform_constant", ct);
    s.metric("uniform_eps", eps);
    let items = ctx.map_traces(usize::MAX, |_, c| -> Result<[f64; 2]> {
        let split = split_trace(c)?;
        let w0_plus = quadratic_part(&split.eta_plus) / (d as f64 + 2.0);
        let w_z = w_of_extension(c);
        let f = slicing_w(&build_harmonic_f(c)?);
        let ft = slicing_w(&build_uniform_ftilde(c, eps)?);
        // margins: measured gain minus the guaranteed one
        Ok([(w_z - f) - ch * w0_plus, (w_z - ft) - ct * w0_plus])
    });
    let mut ok = Vec::new();
    for (id, r) in items {
        match r {
            Ok(m) => ok.push((id, m)),
            Err(err) => s.fail(format!("trace {id}: {err}")),
        }
    }
    for (k, name) in ["harmonic", "uniform"].iter().enumerate() {
        let (id, m) = best(&ok, |m| m[k]);
        s.at_least(&format!("{name}_min_margin"), m, -cfg.tol.gain);
        s.require(m >= -cfg.tol.gain, || format!("{name} competitor: smallest gain on trace {id}"));
    }
    s.finish()
}

struct FlowItem {
    lojasiewicz: f64,
    dissipation: f64,
    report: A1Report,
    eps_kappa: f64,
    max_increase: f64,
    gronwall: f64,
}

fn grid(t_max: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| t_max * i as f64 / n as f64).collect()
}

fn a1_params(cfg: &RunConfig, traj: &FlowTrajectory, p: f64, beta: f64, f_s: f64) -> Result<(A1Params, f64, f64)> {
    let d = traj.states()[0].basis().dim();
    let diss = check_dissipation(traj, p);
    let loj = check_lojasiewicz(traj, beta, f_s);
    let t_end = *traj.times().last().expect("nonempty trajectory");
    let mut params = A1Params::new(d, p, beta, diss, loj, t_end)?;
    if let Some(cap) = cfg.eps_kappa {
        while params.eps_kappa > cap {
            params.eps_kappa *= 0.5;
        }
    }
    Ok((params, diss, loj))
}

/// A flow trajectory together with its assembled certificate.
#[derive(Debug, Clone)]
pub struct FlowCertificate {
    pub trajectory: FlowTrajectory,
    pub report: A1Report,
    pub lojasiewicz: f64,
    pub dissipation: f64,
}

fn certify_trajectory(cfg: &RunConfig, trajectory: FlowTrajectory, p: f64, beta: f64, id: &str) -> Result<FlowCertificate> {
    let f_s = reference_energies_on(trajectory.states()[0].basis())?.f_s;
    let (params, dissipation, lojasiewicz) = a1_params(cfg, &trajectory, p, beta, f_s)?;
    let (_, report) = theorem_a1_assemble(&trajectory, &params, f_s, id)?;
    Ok(FlowCertificate {
        trajectory,
        report,
        lojasiewicz,
        dissipation,
    })
}

/// Explicit flow on `[0, T_max]` certified with `p = d + 1`, `beta = 0`.
pub fn certify_explicit_flow(cfg: &RunConfig, c: &Trace, id: &str) -> Result<FlowCertificate> {
    let traj = explicit_flow(&split_trace(c)?, &grid(cfg.t_max, 256))?;
    certify_trajectory(cfg, traj, c.basis().dim() as f64 + 1.0, 0.0, id)
}

/// Projected Euler flow on `[0, T_max]` certified with `p = 2`,
/// `beta = (d-1)/(d+1)`.
pub fn certify_pvi_flow(cfg: &RunConfig, c: &Trace, id: &str) -> Result<FlowCertificate> {
    let d = c.basis().dim() as f64;
    let dt = cfg.dt.unwrap_or_else(|| dt_max(c.basis()));
    let traj = pvi_gradient_flow(c, dt, cfg.t_max)?;
    certify_trajectory(cfg, traj, 2.0, (d - 1.0) / (d + 1.0), id)
}

fn flow_item(fc: &FlowCertificate) -> FlowItem {
    let max_increase = fc.trajectory.energies().windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    FlowItem {
        lojasiewicz: fc.lojasiewicz,
        dissipation: fc.dissipation,
        report: fc.report.clone(),
        eps_kappa: fc.report.params.eps_kappa,
        max_increase,
        gronwall: 0.0,
    }
}

// checks shared by both flows; returns the certificates for the jsonl file
fn flow_checks(
    s: &mut Section,
    cfg: &RunConfig,
    items: Vec<(String, Result<FlowItem>)>,
    gamma: f64,
) -> Vec<(String, FlowItem)> {
    let mut ok = Vec::new();
    for (id, r) in items {
        match r {
            Ok(it) => ok.push((id, it)),
            Err(err) => s.fail(format!("trace {id}: {err}")),
        }
    }
    s.metric("traces", ok.len() as f64);
    for (id, it) in &ok {
        let r = &it.report;
        s.require(r.certificate.pass, || {
            format!(
                "trace {id}: G(h) - G(S) = {:.6e} > bound {:.6e} (case {})",
                r.certificate.w_h - r.certificate.w_s,
                r.certificate.bound,
                r.case
            )
        });
        s.require(r.kappa_iterations < 100, || format!("trace {id}: kappa took {} iterations", r.kappa_iterations));
        s.require(r.kappa <= it.eps_kappa && it.eps_kappa <= r.params.t_max, || {
            format!("trace {id}: kappa {:.3e}, eps_kappa {:.3e}, T_max {:.3e}", r.kappa, it.eps_kappa, r.params.t_max)
        });
        let form_gap = (r.forms[0] - r.forms[1]).abs() / r.forms[0].abs().max(1e-300);
        s.require(r.case == 0 || form_gap <= cfg.tol.form, || {
            format!("trace {id}: energy and gradient forms differ by {form_gap:.3e}")
        });
        s.require(r.case == 0 || (r.certificate.gamma - gamma).abs() < 1e-12, || {
            format!("trace {id}: exponent {}", r.certificate.gamma)
        });
    }
    let count = |c: u8| ok.iter().filter(|(_, it)| it.report.case == c).count() as f64;
    s.metric("case1", count(1));
    s.metric("case2", count(2));
    s.metric("case0", count(0));
    s.metric(
        "pass_rate",
        ok.iter().filter(|(_, it)| it.report.certificate.pass).count() as f64 / ok.len().max(1) as f64,
    );
    s.metric(
        "max_kappa_iterations",
        ok.iter().map(|(_, it)| it.report.kappa_iterations).max().unwrap_or(0) as f64,
    );
    let (_, k) = worst(&ok, |it| it.report.kappa / it.eps_kappa);
    s.metric("max_kappa_over_eps_kappa", k);
    let (_, e) = best(&ok, |it| it.report.certificate.eps);
    s.metric("min_eps", e);
    let (_, m) = best(&ok, |it| {
        let c = &it.report.certificate;
        if it.report.case == 0 {
            f64::INFINITY
        } else {
            c.bound - (c.w_h - c.w_s)
        }
    });
    s.metric("min_margin", m);
    s.metric("gamma", gamma);
    ok
}

fn write_trajectory(dir: &Path, name: &str, traj: &FlowTrajectory) -> Result<()> {
    fs::write(dir.join(name), traj.to_csv()?)?;
    Ok(())
}

fn explicit_flow_section(ctx: &mut Ctx) -> SectionReport {
    let cfg = ctx.cfg;
    let gamma = ctx.gamma();
    let dir = ctx.out.join("trajectories");
    let mut s = Section::new("flow_explicit", ctx.seed());
    let items = ctx.map_traces(usize::MAX, |id, c| {
        let fc = certify_explicit_flow(cfg, c, id)?;
        write_trajectory(&dir, &format!("explicit_{id}.csv"), &fc.trajectory)?;
        Ok(flow_item(&fc))
    });
    let ok = flow_checks(&mut s, cfg, items, gamma);
    let (id, loj) = best(&ok, |it| it.lojasiewicz);
    s.at_least("min_lojasiewicz", loj, 1.0 - cfg.tol.lojasiewicz);
    s.require(loj >= 1.0 - cfg.tol.lojasiewicz, || format!("weakest Lojasiewicz constant on trace {id}"));
    let (id, diss) = best(&ok, |it| it.dissipation);
    s.metric("min_dissipation_constant", diss);
    s.require(diss > 0.0, || format!("no dissipation bound on trace {id}"));
    ctx.gammas.insert("flow_explicit".into(), gamma);
    for (_, it) in &ok {
        ctx.record("flow_explicit", &it.report.certificate);
    }
    s.finish()
}

// a single fast mode halves the energy before kappa, which exercises the
// first case of the assembly and its explicit factor
fn fast_case_section(ctx: &Ctx) -> SectionReport {
    let b = &ctx.basis;
    let f_s = ctx.refs.f_s;
    let mut s = Section::new("flow_fast_case", ctx.seed());
    let degree = b.max_degree().min(8);
    let run = |amp: f64, rate: f64| -> Result<(A1Report, f64, f64)> {
        let q = eval_on_sphere(&QuadraticBlowup::isotropic(b.dim()), b)?;
        let j = b
            .modes()
            .iter()
            .position(|m| m.degree == degree && m.slot == 0)
            .ok_or_else(|| Error::InvalidArgument(format!("no mode of degree {degree}")))?;
        let c = q.add(&Trace::mode(b, j, amp));
        let traj = explicit_flow_with_rate(&split_trace(&c)?, &grid(1.0, 1000), rate)?;
        let (params, _, _) = a1_params(ctx.cfg, &traj, b.dim() as f64 + 1.0, 0.0, f_s)?;
        let (_, rep) = theorem_a1_assemble(&traj, &params, f_s, "fast")?;
        let k = params.k();
        let expected = -0.5 * (-k).exp() / (2.0 * k) * (traj.energies()[0] - f_s);
        Ok((rep, expected, 2f64.ln() / (2.0 * rate)))
    };
    let mut n = 0;
    for (amp, rate) in [(1e-3, 20.0), (5e-4, 40.0), (1e-3, 40.0)] {
        match run(amp, rate) {
            Ok((rep, expected, t_half)) => {
                n += 1;
                let tag = format!("amplitude {amp:e}, rate {rate}");
                s.require(rep.case == 1, || format!("{tag}: landed in case {}", rep.case));
                s.require((rep.case_bound - expected).abs() <= 1e-12 * expected.abs(), || {
                    format!("{tag}: case bound {:.6e}, expected {expected:.6e}", rep.case_bound)
                });
                s.require(rep.case_ok && rep.certificate.pass, || format!("{tag}: not certified"));
                s.require((rep.t_half - t_half).abs() < 1e-6, || {
                    format!("{tag}: half time {:.6e}, expected {t_half:.6e}", rep.t_half)
                });
                s.require(rep.kappa_iterations < 100, || format!("{tag}: {} kappa iterations", rep.kappa_iterations));
            }
            Err(err) => s.fail(format!("amplitude {amp:e}: {err}")),
        }
    }
    s.metric("trajectories", n as f64);
    s.metric("degree", degree as f64);
    s.finish()
}

fn identity_error(c: &Trace, dt: f64, t_end: f64) -> Result<f64> {
    let traj = pvi_gradient_flow(c, dt, t_end)?;
    Ok(traj
        .velocities()
        .iter()
        .zip(traj.dissipation())
        .map(|(v, d)| (v.norm_sq() - d).abs())
        .fold(0.0, f64::max))
}

fn pvi_section(ctx: &mut Ctx) -> SectionReport {
    let cfg = ctx.cfg;
    let gamma = ctx.gamma();
    let beta = gamma;
    let dt = cfg.dt.unwrap_or_else(|| dt_max(&ctx.basis));
    let dir = ctx.out.join("trajectories");
    let mut s = Section::new("flow_pvi", ctx.seed());
    s.metric("dt", dt);
    s.metric("beta", beta);
    let items = ctx.map_traces(usize::MAX, |id, c| {
        let fc = certify_pvi_flow(cfg, c, id)?;
        write_trajectory(&dir, &format!("pvi_{id}.csv"), &fc.trajectory)?;
        let mut it = flow_item(&fc);
        it.gronwall = gronwall_check(&fc.trajectory, &split_trace(c)?.q)?;
        Ok(it)
    });
    let ok = flow_checks(&mut s, cfg, items, gamma);
    let (id, inc) = worst(&ok, |it| it.max_increase);
    s.metric("max_energy_increase", inc);
    s.require(inc <= 0.0, || format!("F increases by {inc:.3e} along trace {id}"));
    let (id, g) = worst(&ok, |it| it.gronwall);
    s.at_most("max_gronwall_violation", g.max(0.0), cfg.tol.gronwall);
    s.require(g <= cfg.tol.gronwall, || format!("largest Gronwall violation on trace {id}"));
    let (id, loj) = best(&ok, |it| it.lojasiewicz);
    s.metric("min_lojasiewicz", loj);
    s.require(loj > 0.0, || format!("no Lojasiewicz constant on trace {id}"));
    let (id, diss) = best(&ok, |it| it.dissipation);
    s.metric("min_dissipation_constant", diss);
    s.require(diss > 0.0, || format!("no dissipation bound on trace {id}"));

    // first-order convergence of the discrete energy identity
    let t_end = cfg.t_max.min(0.05);
    let halving = ctx.map_traces(HALVING_TRACES, |_, c| -> Result<Vec<f64>> {
        [4.0, 8.0, 16.0].iter().map(|k| identity_error(c, dt / k, t_end)).collect()
    });
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (id, r) in halving {
        match r {
            Ok(e) => {
                for w in e.windows(2) {
                    let ratio = w[0] / w[1];
                    lo = lo.min(ratio);
                    hi = hi.max(ratio);
                    s.require((1.8..=2.2).contains(&ratio), || {
                        format!("trace {id}: identity error ratio {ratio:.3} under step halving ({e:?})")
                    });
                }
            }
            Err(err) => s.fail(format!("halving on trace {id}: {err}")),
        }
    }
    s.metric("identity_ratio_min", lo);
    s.metric("identity_ratio_max", hi);
    ctx.gammas.insert("flow_pvi".into(), gamma);
    for (_, it) in &ok {
        ctx.record("flow_pvi", &it.report.certificate);
    }
    s.finish()
}

fn decay_section(ctx: &Ctx) -> Result<SectionReport> {
    let tol = &ctx.cfg.tol;
    let dir = ctx.out.join("decay");
    let mut s = Section::new("decay", ctx.seed());
    let mut gammas = vec![1.0 / 3.0];
    if (ctx.gamma() - 1.0 / 3.0).abs() > 1e-15 {
        gammas.push(ctx.gamma());
    }
    let times = decay_times(1e-2, 1e4, 200);
    let mut rel: f64 = 0.0;
    let mut slope_err: f64 = 0.0;
    for &g in &gammas {
        match decay_simulator(1.0, g, 1.0, &times) {
            Ok(series) => {
                fs::write(dir.join(format!("gamma_{g:.4}.csv")), series.to_csv())?;
                rel = rel.max(series.max_rel_error());
                match series.loglog_slope(1e2, 1e4) {
                    Some(sl) => slope_err = slope_err.max((sl * g + 1.0).abs()),
                    None => s.fail(format!("gamma {g}: no samples in [1e2, 1e4]")),
                }
            }
            Err(err) => s.fail(format!("gamma {g}: {err}")),
        }
    }
    s.at_most("max_rel_error", rel, tol.decay);
    s.at_most("slope_rel_error", slope_err, tol.slope);
    s.at_most("example_error", (decay_bound(1.0, 1.0 / 3.0, 1.0, 7.0) - 0.027).abs(), 1e-15);

    let mut rng = stream(ctx.seed(), 3);
    let mut excess: f64 = f64::NEG_INFINITY;
    let short = decay_times(1e-3, 1e3, 60);
    for _ in 0..20 {
        let (e0, g, c) = (rng.random_range(0.01..10.0), rng.random_range(0.05..0.95), rng.random_range(0.1..10.0));
        match decay_simulator(e0, g, c, &short) {
            Ok(series) => {
                for (e, b) in series.e.iter().zip(&series.bound) {
                    excess = excess.max((e - b) / b);
                }
            }
            Err(err) => s.fail(format!("random decay ({e0}, {g}, {c}): {err}")),
        }
    }
    s.at_most("random_max_rel_excess", excess.max(0.0), tol.decay);

    // u_n = u0 + t_n^{-q} phi at dyadic times has exactly the predicted rate
    let b = build_basis(2, 8)?;
    let u0 = eval_on_sphere(&QuadraticBlowup::isotropic(2), &b)?;
    let phi = Trace::mode(&b, 5, 0.3).add(&Trace::mode(&b, 8, -0.1));
    let t: Vec<f64> = (0..8).map(|n| 2f64.powi(n)).collect();
    let mut fit_err: f64 = 0.0;
    for &g in &gammas {
        let q = (1.0 - g) / (2.0 * g);
        let family: Vec<Trace> = t.iter().map(|tn| u0.axpy(tn.powf(-q), &phi)).collect();
        match dyadic_rate(&family, &t, None, g, 1.0, 1.0) {
            Ok(fit) => {
                fit_err = fit_err.max((fit.exponent - fit.target).abs() / fit.target);
                s.require(fit.telescoping_ok, || format!("gamma {g}: telescoping bound fails"));
                s.metric(&format!("sigma_{g:.4}"), fit.sigma);
                s.metric(&format!("cauchy_constant_{g:.4}"), fit.cauchy_constant);
            }
            Err(err) => s.fail(format!("dyadic fit for gamma {g}: {err}")),
        }
    }
    s.at_most("dyadic_rel_error", fit_err, tol.dyadic);
    Ok(s.finish())
}

fn quad_error(u: &GridField, a: &QuadraticBlowup) -> f64 {
    let n = u.n();
    let mut e: f64 = 0.0;
    for j in 0..=n {
        for i in 0..=n {
            e = e.max((u.value(i, j) - a.eval(&[u.coord(i), u.coord(j), 0.0])).abs());
        }
    }
    e
}

fn obstacle_section(ctx: &Ctx) -> Result<SectionReport> {
    let cfg = ctx.cfg;
    let tol = cfg.tol.psor;
    let n = cfg.psor_n;
    let dir = ctx.out.join("obstacle");
    let mut s = Section::new("obstacle", ctx.seed());
    let params = |n: usize| PsorParams {
        tol,
        max_sweeps: 100 * n,
        ..PsorParams::for_grid(n)
    };

    // exact reproduction of elements of S; the discrete Green's function of
    // the square is at most 1/2, so the error is within the solver tolerance
    let mut rng = stream(ctx.seed(), 4);
    let quads: Vec<QuadraticBlowup> = (0..3).map(|_| QuadraticBlowup::random(2, &mut rng)).collect();
    let solves: Vec<Result<f64>> = ctx.pool.install(|| {
        quads
            .par_iter()
            .map(|a| {
                let (u, rep) = psor_solve(|x, y| a.eval(&[x, y, 0.0]), n, &params(n))?;
                if !rep.complementarity.holds(tol) {
                    return Err(Error::Precondition {
                        what: "psor_solve".into(),
                        detail: format!("complementarity {:?}", rep.complementarity),
                    });
                }
                Ok(quad_error(&u, a))
            })
            .collect()
    });
    let mut err: f64 = 0.0;
    for (i, r) in solves.into_iter().enumerate() {
        match r {
            Ok(e) => err = err.max(e),
            Err(e) => s.fail(format!("quadratic data {i}: {e}")),
        }
    }
    s.at_most("quadratic_max_error", err, tol);

    let ns = [n / 4, n / 2, n];
    if ns.iter().all(|m| m % 16 == 0) {
        match half_space_study(&ns, tol) {
            Ok(study) => {
                let near = study.near_orders().into_iter().fold(f64::INFINITY, f64::min);
                let far = study.far_orders().into_iter().fold(f64::INFINITY, f64::min);
                s.at_least("half_space_order_near", near, 1.0);
                s.at_least("half_space_order_far", far, 1.9);
                fs::write(dir.join("half_space.json"), serde_json::to_string_pretty(&study)?)?;
            }
            Err(e) => s.fail(format!("half-space study: {e}")),
        }
    } else {
        s.fail(format!("psor_n = {n} must be a multiple of 64 for the refinement study"));
    }

    let b = build_basis(2, 8)?;
    match psor_solve(perturbed_data, n, &params(n)) {
        Ok((u, _)) => {
            fs::write(dir.join("perturbed.csv"), u.to_csv())?;
            match weiss_series(&u, [0.0, 0.0], &[0.1, 0.2, 0.4, 0.8], &b, 64) {
                Ok(series) => {
                    s.metric("weiss_min_log_slope", series.min_log_slope());
                    s.metric("weiss_slack", series.h);
                    s.require(series.is_monotone(1.0), || {
                        format!("Weiss series decreases: min log-slope {:.3e}", series.min_log_slope())
                    });
                }
                Err(e) => s.fail(format!("Weiss series: {e}")),
            }
        }
        Err(e) => s.fail(format!("perturbed solve: {e}")),
    }

    // the grid-limited side: reported, not gated
    let fine = 2 * n;
    if let Ok((u, _)) = psor_solve(singular_data, fine, &params(fine)) {
        let times = [0.1, 0.2, 0.4, 0.8];
        let family: Result<Vec<Trace>> = times
            .iter()
            .map(|t: &f64| extract_trace(&blowup_rescale(&u, [0.0, 0.0], (-t).exp(), &b, 32)?))
            .collect();
        if let Ok(family) = family {
            let limit = project_to_s(family.last().expect("four scales"))?.trace;
            if let Ok(fit) = dyadic_rate(&family, &times, Some(&limit), 1.0 / 3.0, 1.0, 1.0) {
                s.metric("pipeline_exponent", fit.exponent);
                s.metric("pipeline_target", fit.target);
            }
        }
    }
    Ok(s.finish())
}
