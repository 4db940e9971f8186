//! Commands behind the `newtonflow` binary: scenario runs with CSV output and
//! checkpoints, amplitude sweeps and the exponent lab.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{at, parse_entries, parse_value, RunConfig};
use crate::dynamics::{
    adaptive_run, energy, ControllerState, DiagnosticsRecord, Dynamics, ExitStatus, FlowState,
    NonlinearityKind, NonlinearitySpec, RecordSink, RunSettings, Simulation, Trajectory,
};
use crate::error::{Error, Result};
use crate::field::Grid;
use crate::lab::{self, Ensemble, Exponent, Rational};
use crate::potential::PaddedKernel;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// A verification check failed, or a sweep was inconclusive.
    pub const CHECK_FAILED: i32 = 1;
    pub const BLOW_UP: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const NUMERICAL_FAILURE: i32 = 4;
    pub const IO: i32 = 5;
}

pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) => exit::CONFIG,
        Error::NumericalFailure(_) => exit::NUMERICAL_FAILURE,
        Error::Inconclusive(_) => exit::CHECK_FAILED,
        Error::Io(_) => exit::IO,
    }
}

pub fn build_dynamics(cfg: &RunConfig) -> Result<Dynamics> {
    let grid = cfg.grid()?;
    Ok(Dynamics::new(cfg.spec()?, Arc::new(PaddedKernel::new(grid))).with_dealiasing(cfg.dealias))
}

pub fn csv_header() -> String {
    DiagnosticsRecord::COLUMNS.join(",")
}

/// One CSV line; `{:.16e}` keeps 17 significant digits, enough to round-trip.
pub fn csv_row(rec: &DiagnosticsRecord) -> String {
    rec.values().iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",")
}

struct CheckpointPlan {
    dir: PathBuf,
    stride: u64,
    digest: [u8; 32],
    kind: NonlinearityKind,
    q: f64,
    settings: RunSettings,
}

/// Streams records to CSV and writes a checkpoint at every `stride`-th record time.
struct RunSink<W: Write> {
    out: W,
    plan: Option<CheckpointPlan>,
    written: Vec<PathBuf>,
}

pub fn checkpoint_file_name(record_index: u64) -> String {
    format!("checkpoint_{record_index:08}.nwfl")
}

impl<W: Write> RecordSink for RunSink<W> {
    fn record(&mut self, rec: &DiagnosticsRecord, state: &FlowState, ctrl: &ControllerState) -> Result<()> {
        writeln!(self.out, "{}", csv_row(rec))?;
        let Some(plan) = &self.plan else { return Ok(()) };
        let Some(index) = ctrl.next_record.checked_sub(1) else { return Ok(()) };
        let on_record_time = rec.t == state.t && state.t == plan.settings.record_time(index);
        if index > 0 && index % plan.stride == 0 && on_record_time {
            let path = plan.dir.join(checkpoint_file_name(index));
            Checkpoint { kind: plan.kind, q: plan.q, state: state.clone(), ctrl: *ctrl, digest: plan.digest }
                .save(&path)?;
            self.written.push(path);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub checkpoints: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.trajectory.exit.code()
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(std::fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

/// Runs a configuration, writing its CSV and checkpoints. With `cfg.resume`
/// set, continues from that checkpoint and writes only the records after it.
pub fn run_config(cfg: &RunConfig) -> Result<RunOutcome> {
    let dynamics = build_dynamics(cfg)?;
    let sim = match &cfg.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_digest(&cfg.dynamics_digest())?;
            Simulation::resume(&dynamics, cfg.settings, ck.state, ck.ctrl)?
        }
        None => {
            let u0 = cfg.initial.sample(dynamics.grid())?;
            Simulation::new(&dynamics, cfg.settings, u0)?
        }
    };
    let plan = match (&cfg.checkpoint_dir, cfg.checkpoint_stride()) {
        (Some(dir), Some(stride)) => {
            std::fs::create_dir_all(dir)?;
            Some(CheckpointPlan {
                dir: dir.clone(),
                stride,
                digest: cfg.dynamics_digest(),
                kind: cfg.kind,
                q: cfg.q,
                settings: cfg.settings,
            })
        }
        _ => None,
    };
    create_parent(&cfg.output)?;
    let mut out = BufWriter::new(File::create(&cfg.output)?);
    writeln!(out, "{}", csv_header())?;
    let mut sink = RunSink { out, plan, written: Vec::new() };
    let trajectory = sim.run(&mut sink)?;
    sink.out.flush()?;
    Ok(RunOutcome { trajectory, checkpoints: sink.written })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub amplitude: f64,
    pub exit: ExitStatus,
    pub energy0: f64,
    pub t_final: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport {
    /// The smaller amplitude of the final bracket.
    pub lower: SweepPoint,
    pub upper: SweepPoint,
    pub runs: usize,
}

impl SweepReport {
    pub fn width(&self) -> f64 {
        self.upper.amplitude - self.lower.amplitude
    }
}

fn sweep_point(dynamics: &Dynamics, cfg: &RunConfig, amplitude: f64) -> Result<SweepPoint> {
    let u0 = cfg.initial.with_amplitude(amplitude).sample(dynamics.grid())?;
    let energy0 = dynamics.energy(&u0)?;
    let traj = adaptive_run(dynamics, cfg.settings, u0)?;
    if traj.exit == ExitStatus::NumericalFailure {
        return Err(Error::NumericalFailure(format!(
            "run at amplitude {amplitude} failed at t = {}",
            traj.t_final
        )));
    }
    Ok(SweepPoint { amplitude, exit: traj.exit, energy0, t_final: traj.t_final })
}

/// Brackets the amplitude where the run classification changes. Each round
/// evaluates one interior point per worker thread in parallel, so the bracket
/// sequence depends on the thread count but not on scheduling.
pub fn sweep(cfg: &RunConfig, amp_lo: f64, amp_hi: f64, tol: f64) -> Result<SweepReport> {
    if !(amp_lo.is_finite() && amp_hi.is_finite() && amp_lo <= amp_hi) {
        return Err(Error::Config(format!("invalid amplitude range [{amp_lo}, {amp_hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("sweep tolerance must be positive, got {tol}")));
    }
    let dynamics = build_dynamics(cfg)?;
    let (lo, hi) = rayon::join(|| sweep_point(&dynamics, cfg, amp_lo), || sweep_point(&dynamics, cfg, amp_hi));
    let (mut lo, mut hi) = (lo?, hi?);
    let mut runs = 2;
    if lo.exit == hi.exit {
        return Err(Error::Inconclusive(format!(
            "both ends of [{amp_lo}, {amp_hi}] classify as {:?}",
            lo.exit
        )));
    }
    while hi.amplitude - lo.amplitude > tol {
        let parts = rayon::current_num_threads().max(1) + 1;
        let step = (hi.amplitude - lo.amplitude) / parts as f64;
        let inner: Vec<SweepPoint> = (1..parts)
            .into_par_iter()
            .map(|j| sweep_point(&dynamics, cfg, lo.amplitude + step * j as f64))
            .collect::<Result<_>>()?;
        runs += parts - 1;
        let mut chain = vec![lo];
        chain.extend(inner);
        chain.push(hi);
        let i = (0..parts).find(|&i| chain[i].exit != chain[i + 1].exit).expect("end points differ");
        lo = chain[i];
        hi = chain[i + 1];
    }
    Ok(SweepReport { lower: lo, upper: hi, runs })
}

pub fn format_sweep(report: &SweepReport) -> String {
    let line = |name: &str, p: &SweepPoint| {
        format!(
            "{name}: amplitude={:.16e} exit={} E0={:.16e} t_final={:.16e}",
            p.amplitude,
            p.exit.code(),
            p.energy0,
            p.t_final
        )
    };
    format!(
        "bracket=[{:.16e}, {:.16e}] width={:.3e} runs={}\n{}\n{}\n",
        report.lower.amplitude,
        report.upper.amplitude,
        report.width(),
        report.runs,
        line("lower", &report.lower),
        line("upper", &report.upper)
    )
}

/// Inputs of the `lab` command, read from a `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabSpec {
    pub q: Rational,
    pub beta: Rational,
    pub h: Rational,
    /// Bootstrap exponent; `None` means `a(β)`.
    pub a: Option<Rational>,
    pub m: Rational,
    /// Lebesgue exponent for the Lipschitz choice `m = 3p/(2p+3)`.
    pub p: Rational,
    pub kind: NonlinearityKind,
    pub r: f64,
    pub n: usize,
    pub side: f64,
    pub ensemble: Ensemble,
    pub csv: Option<PathBuf>,
}

impl Default for LabSpec {
    fn default() -> Self {
        Self {
            q: lab::ratio(3, 1),
            beta: lab::ratio(2, 1),
            h: lab::ratio(1, 1),
            a: None,
            m: lab::ratio(6, 5),
            p: lab::ratio(6, 1),
            kind: NonlinearityKind::F1,
            r: 2.0,
            n: 32,
            side: 2.0,
            ensemble: Ensemble::default(),
            csv: None,
        }
    }
}

const LAB_KEYS: &[&str] =
    &["q", "beta", "h", "a", "m", "p", "nonlinearity", "r", "N", "L", "samples", "kmax", "seed", "csv"];

pub fn parse_lab_spec(text: &str) -> Result<LabSpec> {
    let entries = parse_entries(text, LAB_KEYS)?;
    let mut spec = LabSpec::default();
    let rational = |key: &str| -> Result<Option<Rational>> {
        entries
            .get(key)
            .map(|&(line, raw)| lab::parse_rational(raw).map_err(|_| at(line, key, format!("expected p/q, got `{raw}`"))))
            .transpose()
    };
    macro_rules! set {
        ($key:literal, $target:expr) => {
            if let Some(&(line, raw)) = entries.get($key) {
                $target = parse_value(line, $key, raw)?;
            }
        };
    }
    if let Some(v) = rational("q")? {
        spec.q = v;
    }
    if let Some(v) = rational("beta")? {
        spec.beta = v;
    }
    if let Some(v) = rational("h")? {
        spec.h = v;
    }
    spec.a = rational("a")?;
    if let Some(v) = rational("m")? {
        spec.m = v;
    }
    if let Some(v) = rational("p")? {
        spec.p = v;
    }
    if let Some(&(line, raw)) = entries.get("nonlinearity") {
        spec.kind = raw.parse().map_err(|e: Error| at(line, "nonlinearity", crate::config::strip(&e)))?;
    }
    set!("r", spec.r);
    set!("N", spec.n);
    set!("L", spec.side);
    set!("samples", spec.ensemble.samples);
    set!("kmax", spec.ensemble.kmax);
    set!("seed", spec.ensemble.seed);
    if let Some(&(_, raw)) = entries.get("csv") {
        spec.csv = Some(PathBuf::from(raw));
    }
    Grid::new(spec.side, spec.n)?;
    if spec.ensemble.samples == 0 || spec.ensemble.kmax == 0 {
        return Err(Error::Config("samples and kmax must be positive".into()));
    }
    Ok(spec)
}

fn opt(r: &Option<Rational>) -> String {
    r.as_ref().map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    (min, values.iter().sum::<f64>() / values.len() as f64, max)
}

/// Writes the plain-text lab report to `out` and, if requested, the ensemble
/// ratios to CSV.
pub fn run_lab(spec: &LabSpec, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "[hls]")?;
    let hls = lab::hls_exponents(&spec.m)?;
    writeln!(out, "m = {}  r = {}", hls.m, hls.r)?;
    match lab::lipschitz_hls_exponent(&spec.p) {
        Ok(m_p) => writeln!(out, "p = {}  m(p) = {}  r(m(p)) = {}", spec.p, m_p, lab::hls_conjugate(&m_p)?)?,
        Err(e) => writeln!(out, "p = {}  m(p): {e}", spec.p)?,
    }

    writeln!(out, "[bootstrap]")?;
    let a_max = lab::a_of_beta(&spec.q, &spec.beta)?;
    writeln!(out, "q = {}  beta = {}  a(beta) = {}", spec.q, spec.beta, a_max)?;
    let a = spec.a.clone().unwrap_or_else(|| a_max.clone());
    match lab::bootstrap_exponents(&spec.q, &spec.beta, &spec.h, &a) {
        Ok(rep) => {
            writeln!(out, "h = {}  beta~ = {}  a = {}", rep.h, rep.beta_tilde, rep.a)?;
            writeln!(
                out,
                "theta = {}  s = {}  s' = {}  theta*s' = {}",
                rep.theta,
                rep.s,
                opt(&rep.s_conj),
                opt(&rep.theta_s_conj)
            )?;
            writeln!(out, "valid_s = {}  valid_condi = {}  certified = {}", rep.valid_s, rep.valid_condi, rep.certified())?;
        }
        Err(e) => writeln!(out, "not evaluated: {e}")?,
    }
    match lab::bootstrap_s_threshold(&spec.q, &spec.beta, &spec.h) {
        Some(t) => writeln!(out, "s > 1 exactly for a > {t}")?,
        None => writeln!(out, "s > 1 threshold outside (2, q+1)")?,
    }

    writeln!(out, "[amann]")?;
    match lab::amann_window(&spec.q) {
        Ok(w) => writeln!(
            out,
            "gamma0 = {}  p0 in ({}, {})  nonempty = {}",
            w.gamma0, w.p0_low, w.p0_high, w.nonempty
        )?,
        Err(e) => writeln!(out, "not evaluated: {e}")?,
    }

    writeln!(out, "[ensemble]")?;
    let ens = spec.ensemble;
    let grid = Grid::new(spec.side, spec.n)?;
    let kernel = PaddedKernel::new(grid);
    let nl = NonlinearitySpec::new(spec.kind, lab::to_f64(&spec.q))?;
    writeln!(
        out,
        "N = {}  L = {}  samples = {}  kmax = {}  seed = {}",
        spec.n, spec.side, ens.samples, ens.kmax, ens.seed
    )?;
    let hls_r = lab::ensemble_hls_ratios(&ens, &spec.m, &kernel)?;
    let poly_r = lab::ensemble_poly_ratios(&ens, &nl, spec.r, &kernel)?;
    let (lo, mean, hi) = stats(&hls_r);
    let r_label = match &hls.r {
        Exponent::Infinite => "inf".to_string(),
        r => r.to_string(),
    };
    writeln!(out, "hls ratio ||phi||_{r_label} / ||u||^2_{{2m}}: min {lo:.6e} mean {mean:.6e} max {hi:.6e}")?;
    let (lo, mean, hi) = stats(&poly_r);
    writeln!(out, "{} bound ratio at r = {}: min {lo:.6e} mean {mean:.6e} max {hi:.6e}", spec.kind, spec.r)?;
    writeln!(out, "norms of phi are taken over the box only, which bounds the whole-space norm from below")?;

    if let Some(path) = &spec.csv {
        create_parent(path)?;
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "sample,hls_ratio,poly_ratio")?;
        for (i, (a, b)) in hls_r.iter().zip(&poly_r).enumerate() {
            writeln!(w, "{i},{a:.16e},{b:.16e}")?;
        }
        w.flush()?;
        writeln!(out, "ratios written to {}", path.display())?;
    }
    Ok(())
}

/// Energy of the configured initial data.
pub fn initial_energy(cfg: &RunConfig) -> Result<f64> {
    let grid = cfg.grid()?;
    let kernel = PaddedKernel::new(grid);
    energy(&cfg.spec()?, &cfg.initial.sample(&grid)?, &kernel)
}
