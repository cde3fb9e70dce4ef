use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use epilab::competitor::{calibrate_kappa, certify_direct, DirectParams};
use epilab::config::RunConfig;
use epilab::corpus::{generate_corpus, write_corpus, CorpusSpec};
use epilab::critical::{project_to_s, reference_energies_on, QuadraticBlowup};
use epilab::energy::{slicing_w, w_volumetric, EnergyReport, PolarField, RadialProfileField, DEFAULT_SHELLS};
use epilab::flow::dt_max;
use epilab::obstacle::{
    blowup_rescale, dyadic_rate, extract_trace, half_space_exact, perturbed_data, psor_solve, singular_data,
    weiss_series, PsorParams,
};
use epilab::sphere::{build_basis, SphereBasis, Trace};
use epilab::suite::{certify_explicit_flow, certify_pvi_flow, exit_code_for, resolve_corpus, run_suite, FlowCertificate};
use epilab::{Error, Result};

#[derive(Parser)]
#[command(name = "epilab", version, about = "Numerical checks of log-epiperimetric inequalities for the obstacle problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quadrature basis and reference energies.
    Basis(RunArgs),
    /// Closest element of S to a trace.
    Project(TraceArgs),
    /// Energies of the 2-homogeneous extension of a trace.
    Energy {
        #[command(flatten)]
        args: TraceArgs,
        /// Also compare slicing and volumetric W for the (2 + eps)-homogeneous extension.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Direct competitor certificates over a trace or the corpus.
    CertifyDirect {
        #[command(flatten)]
        args: OptTraceArgs,
        /// Pick the largest kappa_cal in 2^0 .. 2^-10 passing on the whole corpus.
        #[arg(long)]
        calibrate: bool,
    },
    /// Certificates from the explicit gradient flow.
    CertifyFlow(OptTraceArgs),
    /// Certificates from the projected Euler flow.
    CertifyGradflow(OptTraceArgs),
    /// PSOR solve of the obstacle problem on the square.
    Obstacle {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, value_enum, default_value_t = Data::Quadratic)]
        data: Data,
    },
    /// Blow-ups of a PSOR solution at the origin.
    Blowup {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, value_enum, default_value_t = Data::Singular)]
        data: Data,
        /// Radii of the Weiss series.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.4, 0.8])]
        radii: Vec<f64>,
    },
    /// Generate the trace corpus and its manifest.
    Corpus(RunArgs),
    /// Run every check and write the report.
    Suite(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Data {
    /// `x.Ax` for a random A in S.
    Quadratic,
    HalfSpace,
    Perturbed,
    Singular,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(short = 'd', long = "d")]
    d: Option<usize>,
    #[arg(short = 'L', long = "L")]
    l: Option<usize>,
    #[arg(long)]
    oversample: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eps_cap: Option<f64>,
    #[arg(long)]
    kappa_cal: Option<f64>,
    #[arg(long)]
    eps_kappa: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `rejection` or `lift`.
    #[arg(long)]
    nonneg: Option<String>,
    /// Read traces from this directory instead of generating them.
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    #[arg(long)]
    psor_n: Option<usize>,
    #[arg(long)]
    no_psor: bool,
    /// Set every tolerance at once.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TraceArgs {
    /// Trace file (header `d L`, then one coefficient per line).
    trace: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Clone)]
struct OptTraceArgs {
    /// Single trace file; the corpus is used when absent.
    trace: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

impl RunArgs {
    fn resolve(&self, header: Option<(usize, usize)>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_kv(&read(p)?)?,
            None => RunConfig::for_dim(2),
        };
        let mut items = Vec::new();
        if let Some((d, l)) = header {
            items.push(format!("d={d}"));
            items.push(format!("L={l}"));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                items.push(format!("{k}={v}"));
            }
        };
        push("d", self.d.map(|v| v.to_string()));
        push("L", self.l.map(|v| v.to_string()));
        push("oversample", self.oversample.map(|v| v.to_string()));
        push("delta", self.delta.map(|v| v.to_string()));
        push("eps_cap", self.eps_cap.map(|v| v.to_string()));
        push("kappa_cal", self.kappa_cal.map(|v| v.to_string()));
        push("eps_kappa", self.eps_kappa.map(|v| v.to_string()));
        push("dt", self.dt.map(|v| v.to_string()));
        push("t_max", self.t_max.map(|v| v.to_string()));
        push("corpus_size", self.corpus_size.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("nonneg", self.nonneg.clone());
        push("corpus_dir", self.corpus_dir.as_ref().map(|p| p.display().to_string()));
        push("psor_n", self.psor_n.map(|v| v.to_string()));
        push("psor", self.no_psor.then(|| "false".to_string()));
        push("tol", self.tol.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        items.extend(self.set.iter().cloned());
        cfg.apply_overrides(items.iter().map(String::as_str))?;
        Ok(cfg)
    }
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::InvalidInput {
        path: p.to_path_buf(),
        detail: e.to_string(),
    })
}

// the configuration follows the trace's own header
fn load_trace(path: &Path, run: &RunArgs) -> Result<(RunConfig, Trace)> {
    let text = read(path)?;
    let header = Trace::read_header(&text).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        detail: "missing `d L` header".into(),
    })?;
    let cfg = run.resolve(Some(header))?;
    let trace = Trace::from_text(&cfg.basis()?, &text, path)?;
    Ok((cfg, trace))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_kv())?;
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("plain data serializes"));
}

fn traces_for(args: &OptTraceArgs) -> Result<(RunConfig, Vec<(String, Trace)>)> {
    match &args.trace {
        Some(p) => {
            let (cfg, t) = load_trace(p, &args.run)?;
            let id = p.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
            Ok((cfg, vec![(id, t)]))
        }
        None => {
            let cfg = args.run.resolve(None)?;
            let basis = cfg.basis()?;
            let traces = resolve_corpus(&cfg, &basis, None)?;
            Ok((cfg, traces))
        }
    }
}

fn basis_cmd(run: &RunArgs) -> Result<i32> {
    let cfg = run.resolve(None)?;
    let b = cfg.basis()?;
    let refs = reference_energies_on(&b)?;
    print_json(&json!({
        "d": b.dim(),
        "L": b.max_degree(),
        "nodes": b.n_nodes(),
        "modes": b.n_modes(),
        "largest_eigenvalue": b.largest_eigenvalue(),
        "dt_max": dt_max(&b),
        "f_s": refs.f_s,
        "w_s": refs.w_s,
    }));
    Ok(0)
}

fn project_cmd(args: &TraceArgs) -> Result<i32> {
    let (_, c) = load_trace(&args.trace, &args.run)?;
    let p = project_to_s(&c)?;
    let a = p.blowup.matrix();
    let rows: Vec<Vec<f64>> = (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect();
    print_json(&json!({ "distance": p.distance, "matrix": rows }));
    Ok(0)
}

fn energy_cmd(args: &TraceArgs, eps: Option<f64>) -> Result<i32> {
    let (_, c) = load_trace(&args.trace, &args.run)?;
    let w_s = reference_energies_on(c.basis())?.w_s;
    let mut v = serde_json::to_value(EnergyReport::of_extension(&c, w_s))?;
    if let Some(eps) = eps {
        let mut field = RadialProfileField::new(c.basis());
        field.push_trace(&c, 2.0 + eps)?;
        v["eps"] = json!(eps);
        v["w_slicing"] = json!(slicing_w(&field));
        v["w_volumetric"] = json!(w_volumetric(&PolarField::from_profiles(&field, DEFAULT_SHELLS), w_s)?.w);
    }
    print_json(&v);
    Ok(0)
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn direct_cmd(args: &OptTraceArgs, calibrate: bool) -> Result<i32> {
    let (cfg, traces) = traces_for(args)?;
    let params = DirectParams {
        delta: cfg.delta,
        kappa_cal: cfg.kappa_cal,
        eps_cap: cfg.eps_cap,
        shells: DEFAULT_SHELLS,
        tol: cfg.tol.certificate,
    };
    if calibrate {
        let only: Vec<Trace> = traces.iter().map(|(_, t)| t.clone()).collect();
        let kappa = calibrate_kappa(&only, &params)?;
        print_json(&json!({ "d": cfg.d, "seed": cfg.seed, "traces": only.len(), "kappa_cal": kappa }));
        return Ok(if kappa.is_some() { 0 } else { 1 });
    }
    prepare_out(&cfg)?;
    let mut rows = Vec::new();
    let mut failed = 0;
    for (id, c) in &traces {
        let cert = certify_direct(c, id, &params)?;
        failed += usize::from(!cert.pass);
        let mut v = serde_json::to_value(&cert)?;
        v["seed"] = json!(cfg.seed);
        rows.push(v);
    }
    write_jsonl(&cfg.out.join("certificates.jsonl"), &rows)?;
    println!("direct: {} of {} certified", traces.len() - failed, traces.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn flow_cmd(args: &OptTraceArgs, name: &str, run: fn(&RunConfig, &Trace, &str) -> Result<FlowCertificate>) -> Result<i32> {
    let (cfg, traces) = traces_for(args)?;
    prepare_out(&cfg)?;
    let dir = cfg.out.join("trajectories");
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut failed = 0;
    for (id, c) in &traces {
        let fc = run(&cfg, c, id)?;
        fs::write(dir.join(format!("{name}_{id}.csv")), fc.trajectory.to_csv()?)?;
        failed += usize::from(!fc.report.certificate.pass);
        let mut v = serde_json::to_value(&fc.report)?;
        v["seed"] = json!(cfg.seed);
        v["lojasiewicz"] = json!(fc.lojasiewicz);
        v["dissipation"] = json!(fc.dissipation);
        rows.push(v);
    }
    write_jsonl(&cfg.out.join("certificates.jsonl"), &rows)?;
    println!("{name}: {} of {} certified", traces.len() - failed, traces.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn boundary(data: Data, seed: u64) -> Box<dyn Fn(f64, f64) -> f64> {
    match data {
        Data::Quadratic => {
            let a = QuadraticBlowup::random(2, &mut ChaCha8Rng::seed_from_u64(seed));
            Box::new(move |x, y| a.eval(&[x, y, 0.0]))
        }
        Data::HalfSpace => Box::new(half_space_exact),
        Data::Perturbed => Box::new(perturbed_data),
        Data::Singular => Box::new(singular_data),
    }
}

fn psor_params(cfg: &RunConfig) -> PsorParams {
    PsorParams {
        tol: cfg.tol.psor,
        max_sweeps: 100 * cfg.psor_n,
        ..PsorParams::for_grid(cfg.psor_n)
    }
}

fn obstacle_cmd(run: &RunArgs, data: Data) -> Result<i32> {
    let cfg = run.resolve(None)?;
    prepare_out(&cfg)?;
    let g = boundary(data, cfg.seed);
    let (u, rep) = psor_solve(&g, cfg.psor_n, &psor_params(&cfg))?;
    fs::write(cfg.out.join("grid.csv"), u.to_csv())?;
    let ok = rep.complementarity.holds(cfg.tol.psor);
    print_json(&json!({
        "n": cfg.psor_n,
        "seed": cfg.seed,
        "sweeps": rep.sweeps,
        "energy": u.discrete_energy(),
        "complementarity": rep.complementarity,
        "complementarity_holds": ok,
    }));
    Ok(if ok { 0 } else { 1 })
}

fn blowup_cmd(run: &RunArgs, data: Data, radii: &[f64]) -> Result<i32> {
    let cfg = run.resolve(None)?;
    prepare_out(&cfg)?;
    let g = boundary(data, cfg.seed);
    let (u, _) = psor_solve(&g, cfg.psor_n, &psor_params(&cfg))?;
    let b: Arc<SphereBasis> = build_basis(2, 8)?;
    let series = weiss_series(&u, [0.0, 0.0], radii, &b, 64)?;
    let dir = cfg.out.join("blowups");
    fs::create_dir_all(&dir)?;
    let mut sorted = radii.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut family = Vec::new();
    let mut times = Vec::new();
    for r in &sorted {
        let t = extract_trace(&blowup_rescale(&u, [0.0, 0.0], *r, &b, 32)?)?;
        fs::write(dir.join(format!("r_{r:.4}.trace")), t.to_text())?;
        times.push(-r.ln());
        family.push(t);
    }
    let fit = match family.last() {
        Some(last) if family.len() >= 4 && times.iter().all(|t| *t > 0.0) => {
            let limit = project_to_s(last)?.trace;
            Some(dyadic_rate(&family, &times, Some(&limit), 1.0 / 3.0, 1.0, 1.0)?)
        }
        _ => None,
    };
    let monotone = series.is_monotone(1.0);
    print_json(&json!({
        "n": cfg.psor_n,
        "weiss": series,
        "monotone_up_to_h": monotone,
        "dyadic_fit": fit,
    }));
    Ok(if monotone { 0 } else { 1 })
}

fn corpus_cmd(run: &RunArgs) -> Result<i32> {
    let cfg = run.resolve(None)?;
    prepare_out(&cfg)?;
    let corpus = generate_corpus(&cfg.basis()?, &CorpusSpec::from_config(&cfg))?;
    write_corpus(&cfg.out.join("corpus"), &corpus)?;
    let m = &corpus.manifest;
    println!(
        "corpus: {} traces from {} draws ({} rejected), seed {}, written to {}",
        m.entries.len(),
        m.draws,
        m.rejected,
        m.seed,
        cfg.out.join("corpus").display()
    );
    Ok(0)
}

fn suite_cmd(run: &RunArgs) -> Result<i32> {
    let cfg = run.resolve(None)?;
    let outcome = run_suite(&cfg)?;
    for s in &outcome.summary.sections {
        println!("{} {}", if s.pass { "PASS" } else { "FAIL" }, s.name);
        for d in &s.diagnostics {
            println!("    {d}");
        }
    }
    println!("summary written to {}", cfg.out.join("summary.json").display());
    Ok(outcome.exit_code)
}

fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Basis(run) => basis_cmd(run),
        Command::Project(args) => project_cmd(args),
        Command::Energy { args, eps } => energy_cmd(args, *eps),
        Command::CertifyDirect { args, calibrate } => direct_cmd(args, *calibrate),
        Command::CertifyFlow(args) => flow_cmd(args, "explicit", certify_explicit_flow),
        Command::CertifyGradflow(args) => flow_cmd(args, "pvi", certify_pvi_flow),
        Command::Obstacle { args, data } => obstacle_cmd(args, *data),
        Command::Blowup { args, data, radii } => blowup_cmd(args, *data, radii),
        Command::Corpus(run) => corpus_cmd(run),
        Command::Suite(run) => suite_cmd(run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
