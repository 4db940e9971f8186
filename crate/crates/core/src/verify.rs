//! Self-checks run by `newtonflow verify <suite>`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::cli::csv_row;
use crate::dynamics::{
    adaptive_run, apply_nonlinearity, dissipation_residual, fixed_step_run, ControllerState,
    DiagnosticsRecord, Dynamics, FlowState, NonlinearityKind, NonlinearitySpec, RecordSink,
    RunSettings, Simulation,
};
use crate::error::{Error, Result};
use crate::field::{random_band_limited, Field, Grid};
use crate::lab::{self, ratio, Exponent};
use crate::potential::{newtonian_potential, newtonian_potential_direct, potential_at_point, PaddedKernel};

pub const SUITES: [&str; 5] = ["potential", "gradient", "dissipation", "semiflow", "lab"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub tolerance: f64,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, bound: Bound::AtMost, tolerance }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, bound: Bound::AtLeast, tolerance }
    }

    /// Exact predicate, reported as 0 for true and 1 for false.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::at_most(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.measured <= self.tolerance,
            Bound::AtLeast => self.measured >= self.tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        write!(
            f,
            "{} {} measured={:.6e} required {} {:.6e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            op,
            self.tolerance
        )
    }
}

pub fn run_suite(name: &str) -> Result<Vec<Check>> {
    match name {
        "potential" => potential_suite(),
        "gradient" => gradient_suite(),
        "dissipation" => dissipation_suite(),
        "semiflow" => semiflow_suite(),
        "lab" => lab_suite(),
        other => Err(Error::Config(format!(
            "unknown suite `{other}` (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `max |a − b| / max |b|`.
pub fn max_relative_deviation(a: &Field, b: &Field) -> Result<f64> {
    Ok(a.sub(b)?.max_abs() / b.max_abs())
}

/// Indicator of the ball of radius `radius` about the box center.
pub fn centered_ball(grid: Grid, radius: f64) -> Field {
    let c = grid.side() / 2.0;
    grid.sample(|x, y, z| {
        let r2 = (x - c).powi(2) + (y - c).powi(2) + (z - c).powi(2);
        if r2 < radius * radius { 1.0 } else { 0.0 }
    })
}

/// Relative error of the potential of the uniform unit-density ball
/// (`R = 0.5`, `L = 2`) at the box center against `2πR²`.
pub fn ball_center_error(n: usize) -> Result<f64> {
    let radius = 0.5;
    let grid = Grid::new(2.0, n)?;
    let kernel = PaddedKernel::new(grid);
    let exact = 2.0 * PI * radius * radius;
    let phi = potential_at_point(&centered_ball(grid, radius), &kernel, [1.0; 3])?;
    Ok((phi - exact).abs() / exact)
}

fn potential_suite() -> Result<Vec<Check>> {
    let grid = Grid::new(2.0, 8)?;
    let kernel = PaddedKernel::new(grid);
    let u = random_band_limited(grid, 4, &mut rng(1));
    let dev = max_relative_deviation(&newtonian_potential(&u, &kernel)?, &newtonian_potential_direct(&u, &kernel)?)?;
    let e32 = ball_center_error(32)?;
    let e64 = ball_center_error(64)?;
    Ok(vec![
        Check::at_most("potential.fft_vs_direct_n8", dev, 1e-12),
        Check::at_most("potential.ball_center_rel_error_n64", e64, 0.02),
        Check::at_most("potential.ball_error_ratio_n64_over_n32", e64 / e32, 0.5),
    ])
}

/// Minimum over `ε ∈ {1e-3, …, 1e-6}` of the relative difference between
/// `⟨∇E(u), v⟩` and the central difference of `E` along `v`.
pub fn gradient_check(dynamics: &Dynamics, u: &Field, v: &Field) -> Result<f64> {
    let directional = dynamics.energy_gradient(u)?.dot(v)?;
    let mut best = f64::INFINITY;
    for eps in [1e-3, 1e-4, 1e-5, 1e-6] {
        let fd = (dynamics.energy(&u.axpy(eps, v)?)? - dynamics.energy(&u.axpy(-eps, v)?)?) / (2.0 * eps);
        best = best.min((fd - directional).abs() / directional.abs());
    }
    Ok(best)
}

fn kinds() -> [NonlinearitySpec; 3] {
    [NonlinearityKind::F1, NonlinearityKind::F2, NonlinearityKind::F3]
        .map(|k| NonlinearitySpec::new(k, 3.0).expect("q = 3 is admissible"))
}

fn gradient_suite() -> Result<Vec<Check>> {
    let grid = Grid::new(PI, 16)?;
    let kernel = Arc::new(PaddedKernel::new(grid));
    let mut r = rng(2);
    let mut checks = Vec::new();
    for spec in kinds() {
        let d = Dynamics::new(spec, kernel.clone());
        let u = random_band_limited(grid, 4, &mut r).scaled(0.1);
        let v = random_band_limited(grid, 4, &mut r).scaled(0.1);
        checks.push(Check::at_most(format!("gradient.{}_n16", spec.kind()), gradient_check(&d, &u, &v)?, 1e-6));
    }
    Ok(checks)
}

/// Largest centered dissipation residual over a fixed-step run on `[0, t_final]`.
pub fn max_dissipation_residual(dynamics: &Dynamics, u0: &Field, dt: f64, t_final: f64) -> Result<f64> {
    let steps = (t_final / dt).round() as usize;
    let states = fixed_step_run(dynamics, u0, dt, steps)?;
    let mut worst: f64 = 0.0;
    for w in states.windows(3) {
        worst = worst.max(dissipation_residual(dynamics, &w[0], &w[2], dt)?);
    }
    Ok(worst)
}

/// Observed orders `log₂(r(dt)/r(dt/2))` between successive step sizes.
pub fn observed_orders(residuals: &[f64]) -> Vec<f64> {
    residuals.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Largest increase of `E` between consecutive records, relative to `max(1, |E|)`.
pub fn worst_energy_increase(records: &[DiagnosticsRecord]) -> f64 {
    records
        .windows(2)
        .map(|w| (w[1].energy - w[0].energy) / w[0].energy.abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub const DISSIPATION_STEPS: [f64; 3] = [4e-3, 2e-3, 1e-3];

fn dissipation_suite() -> Result<Vec<Check>> {
    let grid = Grid::new(PI, 16)?;
    let kernel = Arc::new(PaddedKernel::new(grid));
    let u0 = grid.sine_mode([1, 1, 1]).scaled(0.5);
    let mut checks = Vec::new();
    for spec in kinds() {
        let d = Dynamics::new(spec, kernel.clone());
        let settings = RunSettings { t_end: 2.0, ..Default::default() };
        let traj = adaptive_run(&d, settings, u0.clone())?;
        let name = spec.kind();
        checks.push(Check::at_most(format!("dissipation.{name}_energy_increase"), worst_energy_increase(&traj.records), 1e-10));
        let residuals = DISSIPATION_STEPS
            .iter()
            .map(|&dt| max_dissipation_residual(&d, &u0, dt, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let orders = observed_orders(&residuals);
        for (i, p) in orders.iter().enumerate() {
            checks.push(Check::at_least(
                format!("dissipation.{name}_order_dt{:e}_to_{:e}", DISSIPATION_STEPS[i], DISSIPATION_STEPS[i + 1]),
                *p,
                1.0,
            ));
        }
    }
    Ok(checks)
}

/// Collects CSV rows and the checkpoint taken at one record index.
struct Capture {
    rows: Vec<String>,
    at_record: Option<u64>,
    saved: Option<Checkpoint>,
    digest: [u8; 32],
    spec: NonlinearitySpec,
}

impl RecordSink for Capture {
    fn record(&mut self, rec: &DiagnosticsRecord, state: &FlowState, ctrl: &ControllerState) -> Result<()> {
        self.rows.push(csv_row(rec));
        if self.at_record.is_some_and(|i| ctrl.next_record == i + 1) && rec.t == state.t {
            self.saved = Some(Checkpoint {
                kind: self.spec.kind(),
                q: self.spec.q(),
                state: state.clone(),
                ctrl: *ctrl,
                digest: self.digest,
            });
        }
        Ok(())
    }
}

fn semiflow_suite() -> Result<Vec<Check>> {
    let grid = Grid::new(PI, 12)?;
    let kernel = Arc::new(PaddedKernel::new(grid));
    let spec = NonlinearitySpec::new(NonlinearityKind::F2, 3.0)?;
    let d = Dynamics::new(spec, kernel);
    let u0 = grid.sine_mode([1, 1, 1]).scaled(0.8).axpy(0.3, &grid.sine_mode([2, 1, 3]))?;
    let full = RunSettings { t_end: 2.0, ..Default::default() };
    let half = RunSettings { t_end: 1.0, ..full };
    let capture = |settings| -> Result<Capture> {
        let mut c = Capture { rows: Vec::new(), at_record: Some(10), saved: None, digest: [7; 32], spec };
        Simulation::new(&d, settings, u0.clone())?.run(&mut c)?;
        Ok(c)
    };
    let reference = capture(full)?;
    let first = capture(half)?;
    let ck = first.saved.ok_or_else(|| Error::NumericalFailure("no checkpoint at t = 1".into()))?;
    let bytes = ck.encode();
    let restored = Checkpoint::decode(&bytes)?;
    let lossless = restored.encode() == bytes;
    let mut resumed = Capture { rows: Vec::new(), at_record: None, saved: None, digest: [7; 32], spec };
    Simulation::resume(&d, full, restored.state, restored.ctrl)?.run(&mut resumed)?;
    let split = first.rows.len();
    let prefix_ok = reference.rows[..split] == first.rows[..];
    let suffix_ok = reference.rows[split..] == resumed.rows[..];
    Ok(vec![
        Check::holds("semiflow.checkpoint_round_trip_bitwise", lossless),
        Check::holds("semiflow.prefix_rows_identical", prefix_ok),
        Check::holds("semiflow.resumed_rows_identical", suffix_ok && !resumed.rows.is_empty()),
    ])
}

fn lab_suite() -> Result<Vec<Check>> {
    let mut checks = vec![
        Check::holds("lab.hls_conjugate_6/5", lab::hls_conjugate(&ratio(6, 5))? == Exponent::Finite(ratio(6, 1))),
        Check::holds("lab.hls_conjugate_3/2", lab::hls_conjugate(&ratio(3, 2))? == Exponent::Infinite),
        Check::holds("lab.a_of_beta_3_2", lab::a_of_beta(&ratio(3, 1), &ratio(2, 1))? == ratio(10, 3)),
    ];
    let rep = lab::bootstrap_exponents(&ratio(3, 1), &ratio(2, 1), &ratio(1, 1), &ratio(10, 3))?;
    checks.push(Check::holds(
        "lab.bootstrap_3_2_1_10/3",
        rep.theta == ratio(4, 5)
            && rep.s == ratio(10, 3)
            && rep.s_conj == Some(ratio(10, 7))
            && rep.theta_s_conj == Some(ratio(8, 7))
            && rep.valid_s
            && rep.valid_condi,
    ));
    let w3 = lab::amann_window(&ratio(3, 1))?;
    let w4 = lab::amann_window(&ratio(4, 1))?;
    checks.push(Check::holds("lab.amann_window_3", (w3.p0_low, w3.p0_high) == (ratio(3, 1), ratio(18, 5))));
    checks.push(Check::holds("lab.amann_window_4", (w4.p0_low, w4.p0_high) == (ratio(9, 2), ratio(5, 1))));

    let grid = Grid::new(2.0, 12)?;
    let kernel = PaddedKernel::new(grid);
    let f1 = NonlinearitySpec::new(NonlinearityKind::F1, 3.0)?;
    let (mut phi_dev, mut odd_dev, mut ratio_dev) = (0.0f64, 0.0f64, 0.0f64);
    let mut r = rng(3);
    for _ in 0..4 {
        let u = random_band_limited(grid, 4, &mut r);
        let phi = newtonian_potential(&u, &kernel)?;
        let hls = lab::hls_ratio(&u, &ratio(6, 5), &kernel)?;
        let poly = lab::poly_bound_ratio(&f1, &u, 2.0, &kernel)?;
        for alpha in [-2.5, 0.3, 7.0] {
            let phi_a = newtonian_potential(&u.scaled(alpha), &kernel)?;
            phi_dev = phi_dev.max(max_relative_deviation(&phi_a, &phi.scaled(alpha * alpha))?);
            ratio_dev = ratio_dev.max((lab::hls_ratio(&u.scaled(alpha), &ratio(6, 5), &kernel)? / hls - 1.0).abs());
            ratio_dev = ratio_dev.max((lab::poly_bound_ratio(&f1, &u.scaled(alpha), 2.0, &kernel)? / poly - 1.0).abs());
        }
        for spec in kinds() {
            let plus = apply_nonlinearity(&spec, &u, &kernel)?;
            let minus = apply_nonlinearity(&spec, &u.scaled(-1.0), &kernel)?;
            odd_dev = odd_dev.max(max_relative_deviation(&minus.scaled(-1.0), &plus)?);
        }
    }
    checks.push(Check::at_most("lab.potential_quadratic_homogeneity", phi_dev, 1e-12));
    checks.push(Check::at_most("lab.nonlinearity_oddness", odd_dev, 1e-12));
    checks.push(Check::at_most("lab.ratio_amplitude_invariance", ratio_dev, 1e-12));
    Ok(checks)
}
