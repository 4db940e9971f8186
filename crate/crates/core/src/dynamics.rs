//! Nonlinearities, energies and the exponential time integrator.
//!
//! The flow is `u_t = -(-Δu + u - F(u))` with homogeneous Dirichlet data, the
//! L² gradient flow of the matching energy. Time stepping is first-order
//! exponential time differencing on the sine spectrum: the linear part
//! `A = -Δ + Id` is integrated exactly per mode and `F` is frozen over a step,
//!
//! ```text
//! c_k <- exp(-a_k dt) c_k + (1 - exp(-a_k dt)) / a_k * F_k(u),   a_k = 1 + λ_k
//! ```
//!
//! [`Simulation`] wraps the step with step-doubling error control, periodic
//! diagnostics and blow-up detection.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::field::{
    from_spectral, h1_norm_sq, h1_norm_sq_spectral, integrate, lp_norm, random_band_limited, to_spectral,
    Field, Grid, SpectralField,
};
use crate::potential::{newtonian_potential, PaddedKernel};

/// Sobolev critical exponent `2*` in three dimensions.
pub const CRITICAL_EXPONENT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NonlinearityKind {
    /// `F ≡ 0`: the bare linear heat flow, used as a reference.
    Linear,
    /// `φ_u u`
    F1,
    /// `|u|^{q-1} u + φ_u u`
    F2,
    /// `|u|^{q-1} u − φ_u u`
    F3,
}

impl NonlinearityKind {
    /// Tag used in checkpoints.
    pub fn code(self) -> u8 {
        match self {
            Self::Linear => 0,
            Self::F1 => 1,
            Self::F2 => 2,
            Self::F3 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Linear),
            1 => Some(Self::F1),
            2 => Some(Self::F2),
            3 => Some(Self::F3),
            _ => None,
        }
    }

    fn power_coefficient(self) -> f64 {
        match self {
            Self::F2 | Self::F3 => 1.0,
            Self::Linear | Self::F1 => 0.0,
        }
    }

    /// Sign of `φ_u u` in `F`.
    fn potential_sign(self) -> f64 {
        match self {
            Self::F1 | Self::F2 => 1.0,
            Self::F3 => -1.0,
            Self::Linear => 0.0,
        }
    }
}

impl fmt::Display for NonlinearityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::F1 => "F1",
            Self::F2 => "F2",
            Self::F3 => "F3",
        })
    }
}

impl FromStr for NonlinearityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "F1" | "f1" => Ok(Self::F1),
            "F2" | "f2" => Ok(Self::F2),
            "F3" | "f3" => Ok(Self::F3),
            "linear" | "Linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!(
                "unknown nonlinearity `{other}` (expected F1, F2, F3 or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearitySpec {
    kind: NonlinearityKind,
    q: f64,
}

impl NonlinearitySpec {
    /// Validates `q ∈ (1, 5)` for F2 and `q ∈ [3, 5)` for F3; `q` is carried
    /// but unused for F1 and the linear flow.
    pub fn new(kind: NonlinearityKind, q: f64) -> Result<Self> {
        let upper = CRITICAL_EXPONENT - 1.0;
        match kind {
            NonlinearityKind::F2 if !(q > 1.0 && q < upper) => Err(Error::Config(format!(
                "q = {q} outside q ∈ (1,5) required for F2"
            ))),
            NonlinearityKind::F3 if !(q >= 3.0 && q < upper) => Err(Error::Config(format!(
                "q = {q} outside q ∈ [3,5) required for F3"
            ))),
            _ if !q.is_finite() => Err(Error::Config(format!("q must be finite, got {q}"))),
            _ => Ok(Self { kind, q }),
        }
    }

    /// Skips the exponent window checks; only requires `q >= 1`.
    pub fn unchecked(kind: NonlinearityKind, q: f64) -> Result<Self> {
        if !(q.is_finite() && q >= 1.0) {
            return Err(Error::Config(format!("q must be a finite number >= 1, got {q}")));
        }
        Ok(Self { kind, q })
    }

    pub fn kind(&self) -> NonlinearityKind {
        self.kind
    }

    pub fn q(&self) -> f64 {
        self.q
    }
}

#[inline]
fn signed_power(v: f64, q: f64) -> f64 {
    if q == 3.0 {
        v * v * v
    } else {
        v.signum() * v.abs().powf(q)
    }
}

/// Pointwise `F_i(u)` on the grid.
pub fn apply_nonlinearity(spec: &NonlinearitySpec, u: &Field, kernel: &PaddedKernel) -> Result<Field> {
    let kind = spec.kind;
    let out = match kind {
        NonlinearityKind::Linear => {
            kernel.grid().check_same(u.grid())?;
            Field::zeros(*u.grid())
        }
        NonlinearityKind::F1 => newtonian_potential(u, kernel)?.zip_map(u, |p, v| p * v)?,
        NonlinearityKind::F2 | NonlinearityKind::F3 => {
            let sign = kind.potential_sign();
            let q = spec.q;
            newtonian_potential(u, kernel)?.zip_map(u, |p, v| signed_power(v, q) + sign * p * v)?
        }
    };
    if !out.is_finite() {
        return Err(Error::NumericalFailure("non-finite nonlinearity".into()));
    }
    Ok(out)
}

/// Additive pieces of an energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParts {
    /// `‖u‖²_{1,2}`
    pub h1_sq: f64,
    /// `∫ φ_u u²`
    pub phi_term: f64,
    /// `∫ |u|^{q+1}`
    pub power_term: f64,
}

impl EnergyParts {
    pub fn compute(spec: &NonlinearitySpec, u: &Field, kernel: &PaddedKernel) -> Result<Self> {
        kernel.grid().check_same(u.grid())?;
        let phi = newtonian_potential(u, kernel)?;
        let phi_term = integrate(&phi.zip_map(u, |p, v| p * v * v)?);
        let power_term = lp_norm(u, spec.q + 1.0)?.powf(spec.q + 1.0);
        Ok(Self { h1_sq: h1_norm_sq(u), phi_term, power_term })
    }

    pub fn energy(&self, spec: &NonlinearitySpec) -> f64 {
        let kind = spec.kind;
        0.5 * self.h1_sq - 0.25 * kind.potential_sign() * self.phi_term
            - kind.power_coefficient() / (spec.q + 1.0) * self.power_term
    }
}

/// `E_i(u)`.
pub fn energy(spec: &NonlinearitySpec, u: &Field, kernel: &PaddedKernel) -> Result<f64> {
    let e = EnergyParts::compute(spec, u, kernel)?.energy(spec);
    if !e.is_finite() {
        return Err(Error::NumericalFailure("non-finite energy".into()));
    }
    Ok(e)
}

/// `−Δu + u − F_i(u)`, the L² gradient of `E_i`.
pub fn energy_gradient(spec: &NonlinearitySpec, u: &Field, kernel: &PaddedKernel) -> Result<Field> {
    let f = apply_nonlinearity(spec, u, kernel)?;
    let mut c = to_spectral(u);
    for (ck, lam) in c.coeffs_mut().iter_mut().zip(u.grid().laplacian_symbols()) {
        *ck *= 1.0 + lam;
    }
    from_spectral(&c).sub(&f)
}

/// `‖−Δu + u − F_i(u)‖₂`.
pub fn steady_residual(spec: &NonlinearitySpec, u: &Field, kernel: &PaddedKernel) -> Result<f64> {
    lp_norm(&energy_gradient(spec, u, kernel)?, 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub u: Field,
    /// Step size the controller will attempt next.
    pub dt: f64,
    pub step_count: u64,
}

impl FlowState {
    pub fn initial(u: Field, dt: f64) -> Self {
        Self { t: 0.0, u, dt, step_count: 0 }
    }
}

/// Precomputed operators for one `(spec, grid)` pair.
#[derive(Debug, Clone)]
pub struct Dynamics {
    spec: NonlinearitySpec,
    kernel: Arc<PaddedKernel>,
    decay: Vec<f64>,
    dealias_mask: Option<Vec<bool>>,
}

impl Dynamics {
    pub fn new(spec: NonlinearitySpec, kernel: Arc<PaddedKernel>) -> Self {
        let decay = kernel.grid().laplacian_symbols().iter().map(|l| 1.0 + l).collect();
        Self { spec, kernel, decay, dealias_mask: None }
    }

    /// Zero every mode with some `k_i > 2N/3` in the nonlinear forcing.
    pub fn with_dealiasing(mut self, on: bool) -> Self {
        self.dealias_mask = on.then(|| {
            let g = *self.kernel.grid();
            let cut = 2 * g.n() / 3;
            (0..g.len()).map(|idx| g.coords(idx).iter().all(|&k| k < cut)).collect()
        });
        self
    }

    pub fn spec(&self) -> &NonlinearitySpec {
        &self.spec
    }

    pub fn kernel(&self) -> &PaddedKernel {
        &self.kernel
    }

    pub fn grid(&self) -> &Grid {
        self.kernel.grid()
    }

    pub fn energy(&self, u: &Field) -> Result<f64> {
        energy(&self.spec, u, &self.kernel)
    }

    pub fn energy_gradient(&self, u: &Field) -> Result<Field> {
        energy_gradient(&self.spec, u, &self.kernel)
    }

    fn forcing(&self, u: &Field) -> Result<SpectralField> {
        let mut f = to_spectral(&apply_nonlinearity(&self.spec, u, &self.kernel)?);
        if let Some(mask) = &self.dealias_mask {
            for (c, &keep) in f.coeffs_mut().iter_mut().zip(mask) {
                if !keep {
                    *c = 0.0;
                }
            }
        }
        Ok(f)
    }

    fn propagate(&self, c: &SpectralField, f: &SpectralField, dt: f64) -> Field {
        let mut out = c.clone();
        for ((ck, fk), a) in out.coeffs_mut().iter_mut().zip(f.coeffs()).zip(&self.decay) {
            let z = -a * dt;
            *ck = z.exp() * *ck - z.exp_m1() / a * fk;
        }
        from_spectral(&out)
    }

    /// One exponential-Euler step of size `dt` from `u`.
    pub fn step_field(&self, u: &Field, dt: f64) -> Result<Field> {
        let f = self.forcing(u)?;
        Ok(self.propagate(&to_spectral(u), &f, dt))
    }

    /// Advances `state` by `dt`; `state.dt` is carried over unchanged.
    pub fn etd_step(&self, state: &FlowState, dt: f64) -> Result<FlowState> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {dt}")));
        }
        let u = self.step_field(&state.u, dt)?;
        if !u.is_finite() {
            return Err(Error::NumericalFailure(format!("non-finite state at t = {}", state.t + dt)));
        }
        Ok(FlowState { t: state.t + dt, u, dt: state.dt, step_count: state.step_count + 1 })
    }

    /// One step of size `dt` and two of size `dt/2` from the same state, which
    /// share the first forcing evaluation. Returns `(big, small)`.
    fn doubled_step(&self, u: &Field, dt: f64) -> Result<(Field, Field)> {
        let c = to_spectral(u);
        let f = self.forcing(u)?;
        let big = self.propagate(&c, &f, dt);
        let half = self.propagate(&c, &f, 0.5 * dt);
        if !half.is_finite() {
            return Ok((big, half));
        }
        let small = self.step_field(&half, 0.5 * dt)?;
        Ok((big, small))
    }

    fn h1_and_l2(&self, u: &Field) -> (f64, f64) {
        let c = to_spectral(u);
        (h1_norm_sq_spectral(&c), c.l2_norm_sq())
    }

    /// Diagnostics of `u` at time `t`; `previous` is the state one step of size
    /// `dt` earlier, used for the dissipation residual.
    pub fn diagnose(
        &self,
        t: f64,
        dt: f64,
        u: &Field,
        previous: Option<&Field>,
        monitor_a: f64,
    ) -> Result<DiagnosticsRecord> {
        let parts = EnergyParts::compute(&self.spec, u, &self.kernel)?;
        let e = parts.energy(&self.spec);
        let (h1_sq, l2_sq) = self.h1_and_l2(u);
        let diss_residual = match previous {
            Some(prev) => {
                let e_prev = self.energy(prev)?;
                let rate = lp_norm(&u.sub(prev)?, 2.0)? / dt;
                (e - e_prev) / dt + rate * rate
            }
            None => 0.0,
        };
        let rec = DiagnosticsRecord {
            t,
            dt,
            energy: e,
            l2: l2_sq.sqrt(),
            h1: h1_sq.sqrt(),
            sup: u.max_abs(),
            l_qp1: parts.power_term.powf(1.0 / (self.spec.q + 1.0)),
            l_a: lp_norm(u, monitor_a)?,
            phi_term: parts.phi_term,
            diss_residual,
        };
        if !rec.is_finite() {
            return Err(Error::NumericalFailure(format!("non-finite diagnostics at t = {t}")));
        }
        Ok(rec)
    }
}

/// Quantities recorded along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub dt: f64,
    pub energy: f64,
    pub l2: f64,
    /// `‖u‖_{1,2}`
    pub h1: f64,
    pub sup: f64,
    pub l_qp1: f64,
    pub l_a: f64,
    pub phi_term: f64,
    /// `(E(u) − E(u_prev))/dt + ‖(u − u_prev)/dt‖₂²` over the last step.
    pub diss_residual: f64,
}

impl DiagnosticsRecord {
    pub const COLUMNS: [&'static str; 10] =
        ["t", "dt", "E", "l2", "h1", "sup", "l_qp1", "l_a", "phi_term", "diss_residual"];

    pub fn values(&self) -> [f64; 10] {
        [
            self.t,
            self.dt,
            self.energy,
            self.l2,
            self.h1,
            self.sup,
            self.l_qp1,
            self.l_a,
            self.phi_term,
            self.diss_residual,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    ReachedFinalTime,
    BlowUp,
    NumericalFailure,
}

impl ExitStatus {
    /// Process exit code of the `run` command.
    pub fn code(self) -> i32 {
        match self {
            Self::ReachedFinalTime => 0,
            Self::BlowUp => 2,
            Self::NumericalFailure => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<DiagnosticsRecord>,
    pub exit: ExitStatus,
    pub t_final: f64,
    /// Fields at each record time, kept when requested in [`RunSettings`].
    pub snapshots: Option<Vec<Field>>,
    pub final_state: FlowState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub t_end: f64,
    pub dt0: f64,
    pub rtol: f64,
    pub atol: f64,
    pub sup_blowup: f64,
    pub dt_min: f64,
    pub record_every: f64,
    pub monitor_a: f64,
    pub keep_snapshots: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            dt0: 1e-3,
            rtol: 1e-6,
            atol: 1e-9,
            sup_blowup: 1e6,
            dt_min: 1e-12,
            record_every: 0.1,
            monitor_a: 3.5,
            keep_snapshots: false,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_end", self.t_end),
            ("dt0", self.dt0),
            ("rtol", self.rtol),
            ("sup_blowup", self.sup_blowup),
            ("dt_min", self.dt_min),
            ("record_every", self.record_every),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.atol.is_finite() && self.atol >= 0.0) {
            return Err(Error::Config(format!("atol must be non-negative, got {}", self.atol)));
        }
        if !(self.monitor_a >= 1.0) {
            return Err(Error::Config(format!("monitor_a must be >= 1, got {}", self.monitor_a)));
        }
        if self.dt_min >= self.dt0 {
            return Err(Error::Config("dt_min must be smaller than dt0".into()));
        }
        Ok(())
    }

    /// Time of record number `index`.
    pub fn record_time(&self, index: u64) -> f64 {
        index as f64 * self.record_every
    }
}

/// Controller state beyond [`FlowState`] needed to restart a run exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    /// Size of the last accepted step (`dt0` before the first step).
    pub last_dt: f64,
    pub rejected: u64,
    /// Index of the next record time, `record_time(next_record)`.
    pub next_record: u64,
}

/// Callback invoked at every record.
pub trait RecordSink {
    fn record(&mut self, rec: &DiagnosticsRecord, state: &FlowState, ctrl: &ControllerState) -> Result<()>;
}

impl RecordSink for () {
    fn record(&mut self, _: &DiagnosticsRecord, _: &FlowState, _: &ControllerState) -> Result<()> {
        Ok(())
    }
}

/// Adaptive driver for one trajectory.
pub struct Simulation<'a> {
    dynamics: &'a Dynamics,
    settings: RunSettings,
    state: FlowState,
    ctrl: ControllerState,
}

impl<'a> Simulation<'a> {
    /// Fresh run starting at `t = 0`; the initial record is emitted by [`Simulation::run`].
    pub fn new(dynamics: &'a Dynamics, settings: RunSettings, u0: Field) -> Result<Self> {
        settings.validate()?;
        dynamics.grid().check_same(u0.grid())?;
        Ok(Self {
            dynamics,
            settings,
            state: FlowState::initial(u0, settings.dt0),
            ctrl: ControllerState { last_dt: settings.dt0, rejected: 0, next_record: 0 },
        })
    }

    /// Continue from a saved state. `ctrl.next_record` must point past `state.t`.
    pub fn resume(
        dynamics: &'a Dynamics,
        settings: RunSettings,
        state: FlowState,
        ctrl: ControllerState,
    ) -> Result<Self> {
        settings.validate()?;
        dynamics.grid().check_same(state.u.grid())?;
        if settings.record_time(ctrl.next_record) <= state.t && state.t < settings.t_end {
            return Err(Error::Config("controller state inconsistent with checkpoint time".into()));
        }
        Ok(Self { dynamics, settings, state, ctrl })
    }

    pub fn state(&self) -> &FlowState {
        &self.state
    }

    pub fn controller(&self) -> &ControllerState {
        &self.ctrl
    }

    pub fn run(mut self, sink: &mut dyn RecordSink) -> Result<Trajectory> {
        let s = self.settings;
        let d = self.dynamics;
        let mut records = Vec::new();
        let mut snapshots = s.keep_snapshots.then(Vec::new);

        if !self.state.u.is_finite() {
            return Ok(self.finish(records, snapshots, ExitStatus::NumericalFailure));
        }

        macro_rules! emit {
            ($t:expr, $dt:expr, $u:expr, $prev:expr) => {{
                let rec = match d.diagnose($t, $dt, $u, $prev, s.monitor_a) {
                    Ok(rec) => rec,
                    Err(Error::NumericalFailure(_)) => {
                        return Ok(self.finish(records, snapshots, ExitStatus::NumericalFailure))
                    }
                    Err(e) => return Err(e),
                };
                sink.record(&rec, &self.state, &self.ctrl)?;
                records.push(rec);
                if let Some(snaps) = snapshots.as_mut() {
                    snaps.push($u.clone());
                }
            }};
        }

        if self.state.step_count == 0 && self.ctrl.next_record == 0 {
            self.ctrl.next_record = 1;
            let u0 = self.state.u.clone();
            emit!(0.0, s.dt0, &u0, None);
        }

        loop {
            let t = self.state.t;
            if t >= s.t_end {
                return Ok(self.finish(records, snapshots, ExitStatus::ReachedFinalTime));
            }
            let next_stop = s.record_time(self.ctrl.next_record).min(s.t_end);
            let mut h = self.state.dt;
            let landing = t + h >= next_stop - 1e-12 * next_stop.abs().max(1.0);
            if landing {
                h = next_stop - t;
            }

            let trial = match d.doubled_step(&self.state.u, h) {
                Ok(pair) => Some(pair),
                Err(Error::NumericalFailure(_)) => None,
                Err(e) => return Err(e),
            };
            let (err, small) = match trial {
                Some((big, small)) if small.is_finite() && big.is_finite() => {
                    let scale = s.atol + s.rtol * lp_norm(&small, 2.0)?;
                    (lp_norm(&big.sub(&small)?, 2.0)? / scale, Some(small))
                }
                _ => (f64::INFINITY, None),
            };
            let factor = if err.is_finite() {
                (0.9 * err.powf(-0.5)).clamp(0.2, 5.0)
            } else {
                0.2
            };

            if let (true, Some(small)) = (err <= 1.0, small) {
                let prev = std::mem::replace(&mut self.state.u, small);
                let prev_t = t;
                self.state.t = if landing { next_stop } else { t + h };
                self.state.step_count += 1;
                self.state.dt = if landing { (h * factor).max(self.state.dt) } else { h * factor };
                self.ctrl.last_dt = h;

                if self.state.u.max_abs() > s.sup_blowup {
                    if records.last().map_or(true, |r: &DiagnosticsRecord| prev_t > r.t) {
                        emit!(prev_t, h, &prev, None);
                    }
                    return Ok(self.finish(records, snapshots, ExitStatus::BlowUp));
                }
                if landing {
                    if next_stop == s.record_time(self.ctrl.next_record) {
                        self.ctrl.next_record += 1;
                    }
                    let u = self.state.u.clone();
                    let t_now = self.state.t;
                    emit!(t_now, h, &u, Some(&prev));
                }
            } else {
                self.ctrl.rejected += 1;
                self.state.dt = h * factor;
                if self.state.dt < s.dt_min {
                    if records.last().map_or(true, |r: &DiagnosticsRecord| t > r.t) {
                        let u = self.state.u.clone();
                        let last = self.ctrl.last_dt;
                        emit!(t, last, &u, None);
                    }
                    return Ok(self.finish(records, snapshots, ExitStatus::BlowUp));
                }
            }
        }
    }

    fn finish(
        self,
        records: Vec<DiagnosticsRecord>,
        snapshots: Option<Vec<Field>>,
        exit: ExitStatus,
    ) -> Trajectory {
        Trajectory { records, exit, t_final: self.state.t, snapshots, final_state: self.state }
    }
}

/// Runs the adaptive integrator from `u0` to `settings.t_end`.
pub fn adaptive_run(dynamics: &Dynamics, settings: RunSettings, u0: Field) -> Result<Trajectory> {
    Simulation::new(dynamics, settings, u0)?.run(&mut ())
}

/// `n_steps` exponential-Euler steps of fixed size; returns every state
/// including the initial one.
pub fn fixed_step_run(dynamics: &Dynamics, u0: &Field, dt: f64, n_steps: usize) -> Result<Vec<Field>> {
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(u0.clone());
    for i in 0..n_steps {
        let next = dynamics.step_field(&out[i], dt)?;
        if !next.is_finite() {
            return Err(Error::NumericalFailure(format!("non-finite state after step {}", i + 1)));
        }
        out.push(next);
    }
    Ok(out)
}

/// Centered residual of `dE/dt = −‖u_t‖₂²` at the middle of three consecutive
/// states spaced by `dt`.
pub fn dissipation_residual(
    dynamics: &Dynamics,
    prev: &Field,
    next: &Field,
    dt: f64,
) -> Result<f64> {
    let de = (dynamics.energy(next)? - dynamics.energy(prev)?) / (2.0 * dt);
    let rate = lp_norm(&next.sub(prev)?, 2.0)? / (2.0 * dt);
    Ok((de + rate * rate).abs())
}

/// `|⟨u, u_t⟩ + ‖u‖²_{1,2} − ∫ F(u) u|` with the centered time difference for `u_t`.
pub fn multiply_by_u_residual(
    dynamics: &Dynamics,
    prev: &Field,
    u: &Field,
    next: &Field,
    dt: f64,
) -> Result<f64> {
    let ut = next.sub(prev)?.scaled(0.5 / dt);
    let f = apply_nonlinearity(&dynamics.spec, u, &dynamics.kernel)?;
    Ok((u.dot(&ut)? + h1_norm_sq(u) - f.dot(u)?).abs())
}

/// Initial data families.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialShape {
    Zero,
    /// `Σ w_i · sin-mode(k_i)`
    Modes(Vec<([usize; 3], f64)>),
    /// `exp(−|x − c|²/(2σ²)) · sin-mode(1,1,1)`; `center = None` is the box center.
    Gaussian { sigma: f64, center: Option<[f64; 3]> },
    /// Standard normal coefficients on modes with `max k_i <= kmax`.
    Random { kmax: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub shape: InitialShape,
    pub amplitude: f64,
}

impl InitialData {
    pub fn mode(k: [usize; 3], amplitude: f64) -> Self {
        Self { shape: InitialShape::Modes(vec![(k, 1.0)]), amplitude }
    }

    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Self { shape: self.shape.clone(), amplitude }
    }

    pub fn sample(&self, grid: &Grid) -> Result<Field> {
        let field = match &self.shape {
            InitialShape::Zero => Field::zeros(*grid),
            InitialShape::Modes(modes) => {
                if let Some((k, _)) = modes.iter().find(|(k, _)| k.iter().any(|&ki| ki == 0 || ki > grid.n())) {
                    return Err(Error::Config(format!("mode {k:?} outside 1..={} for this grid", grid.n())));
                }
                let mut acc = Field::zeros(*grid);
                for &(k, w) in modes {
                    acc = acc.axpy(w, &grid.sine_mode(k))?;
                }
                acc
            }
            InitialShape::Gaussian { sigma, center } => {
                if !(*sigma > 0.0) {
                    return Err(Error::Config(format!("gaussian width must be positive, got {sigma}")));
                }
                let half = grid.side() / 2.0;
                let c = center.unwrap_or([half; 3]);
                let envelope = grid.sine_mode([1, 1, 1]);
                let bump = grid.sample(|x, y, z| {
                    let r2 = (x - c[0]).powi(2) + (y - c[1]).powi(2) + (z - c[2]).powi(2);
                    (-r2 / (2.0 * sigma * sigma)).exp()
                });
                bump.zip_map(&envelope, |a, b| a * b)?
            }
            InitialShape::Random { kmax, seed } => {
                if *kmax == 0 {
                    return Err(Error::Config("random initial data needs kmax >= 1".into()));
                }
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                random_band_limited(*grid, *kmax, &mut rng)
            }
        };
        Ok(field.scaled(self.amplitude))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_band_limited;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn setup(kind: NonlinearityKind, q: f64, side: f64, n: usize) -> Dynamics {
        let grid = Grid::new(side, n).unwrap();
        Dynamics::new(NonlinearitySpec::new(kind, q).unwrap(), Arc::new(PaddedKernel::new(grid)))
    }

    const KINDS: [NonlinearityKind; 3] = [NonlinearityKind::F1, NonlinearityKind::F2, NonlinearityKind::F3];

    #[test]
    fn spec_ranges() {
        use NonlinearityKind::*;
        assert!(NonlinearitySpec::new(F2, 5.0).is_err());
        assert!(NonlinearitySpec::new(F2, 1.0).is_err());
        assert!(NonlinearitySpec::new(F2, 1.5).is_ok());
        assert!(NonlinearitySpec::new(F3, 2.5).is_err());
        assert!(NonlinearitySpec::new(F3, 3.0).is_ok());
        assert!(NonlinearitySpec::new(F3, 5.0).is_err());
        assert!(NonlinearitySpec::new(F1, 17.0).is_ok());
        assert!(NonlinearitySpec::unchecked(F2, 5.0).is_ok());
        assert!(NonlinearitySpec::unchecked(F2, 0.5).is_err());
        assert_eq!(CRITICAL_EXPONENT - 1.0, 5.0);
    }

    #[test]
    fn zero_maps_to_zero() {
        for kind in KINDS {
            let d = setup(kind, 3.0, 1.0, 6);
            let z = Field::zeros(*d.grid());
            assert!(apply_nonlinearity(d.spec(), &z, d.kernel()).unwrap().values().iter().all(|&v| v == 0.0));
            assert_eq!(d.energy(&z).unwrap(), 0.0);
            assert_eq!(d.energy_gradient(&z).unwrap().max_abs(), 0.0);
            assert_eq!(steady_residual(d.spec(), &z, d.kernel()).unwrap(), 0.0);
        }
    }

    #[test]
    fn nonlinearities_are_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (kind, q) in [(NonlinearityKind::F1, 3.0), (NonlinearityKind::F2, 2.3), (NonlinearityKind::F3, 3.7)] {
            let d = setup(kind, q, 2.0, 8);
            let u = random_band_limited(*d.grid(), 8, &mut rng);
            let f = apply_nonlinearity(d.spec(), &u, d.kernel()).unwrap();
            let fm = apply_nonlinearity(d.spec(), &u.scaled(-1.0), d.kernel()).unwrap();
            assert_eq!(fm, f.scaled(-1.0));
        }
    }

    #[test]
    fn single_node_f3_value() {
        let d = setup(NonlinearityKind::F3, 3.0, 1.0, 9);
        let g = *d.grid();
        let p = g.index(4, 2, 6);
        let v = 0.8;
        let mut u = Field::zeros(g);
        u.values_mut()[p] = v;
        let f = apply_nonlinearity(d.spec(), &u, d.kernel()).unwrap();
        let h = g.spacing();
        let expect = v * v * v * (1.0 - d.kernel().c0() * h * h);
        assert!((f.values()[p] - expect).abs() < 1e-14);
        assert!(f.values().iter().enumerate().all(|(i, &x)| i == p || x <= 0.0));
    }

    #[test]
    fn quadratic_energy_of_ground_mode() {
        let d = setup(NonlinearityKind::F2, 3.0, PI, 11);
        let u = d.grid().sine_mode([1, 1, 1]);
        let parts = EnergyParts::compute(d.spec(), &u, d.kernel()).unwrap();
        let quad = parts.energy(d.spec()) + 0.25 * parts.phi_term + parts.power_term / 4.0;
        assert!((quad - PI.powi(3) / 4.0).abs() < 1e-11);
        assert!((quad - 7.75157).abs() < 1e-5);
    }

    #[test]
    fn energies_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Grid::new(2.0, 10).unwrap();
        let k = Arc::new(PaddedKernel::new(g));
        let q = 3.5;
        let s1 = NonlinearitySpec::new(NonlinearityKind::F1, q).unwrap();
        let s2 = NonlinearitySpec::new(NonlinearityKind::F2, q).unwrap();
        let s3 = NonlinearitySpec::new(NonlinearityKind::F3, q).unwrap();
        for _ in 0..5 {
            let u = random_band_limited(g, 5, &mut rng);
            let e1 = energy(&s1, &u, &k).unwrap();
            let e2 = energy(&s2, &u, &k).unwrap();
            let e3 = energy(&s3, &u, &k).unwrap();
            let half_h1 = 0.5 * h1_norm_sq(&u);
            let power = lp_norm(&u, q + 1.0).unwrap().powf(q + 1.0) / (q + 1.0);
            let phi = crate::potential::potential_energy_term(&u, &k).unwrap();
            let scale = half_h1.abs().max(phi).max(power);
            assert!((e1 + e3 - 2.0 * half_h1 + power).abs() <= 1e-12 * scale);
            assert!((e2 - (e3 - 0.5 * phi)).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (kind, q) in [(NonlinearityKind::F1, 3.0), (NonlinearityKind::F2, 3.0), (NonlinearityKind::F3, 4.2)] {
            let d = setup(kind, q, PI, 10);
            let u = random_band_limited(*d.grid(), 4, &mut rng).scaled(0.3);
            let v = random_band_limited(*d.grid(), 4, &mut rng).scaled(0.3);
            let g = d.energy_gradient(&u).unwrap();
            let exact = g.dot(&v).unwrap();
            let best = [1e-3, 1e-4, 1e-5, 1e-6]
                .iter()
                .map(|&eps| {
                    let ep = d.energy(&u.axpy(eps, &v).unwrap()).unwrap();
                    let em = d.energy(&u.axpy(-eps, &v).unwrap()).unwrap();
                    ((ep - em) / (2.0 * eps) - exact).abs() / exact.abs()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 1e-6, "{kind}: {best}");
        }
    }

    #[test]
    fn multiply_by_u_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in KINDS {
            let d = setup(kind, 3.0, 2.0, 8);
            let u = random_band_limited(*d.grid(), 8, &mut rng);
            let g = d.energy_gradient(&u).unwrap();
            let f = apply_nonlinearity(d.spec(), &u, d.kernel()).unwrap();
            let lhs = g.dot(&u).unwrap();
            let rhs = h1_norm_sq(&u) - f.dot(&u).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn linear_flow_is_exact() {
        let grid = Grid::new(PI, 9).unwrap();
        let spec = NonlinearitySpec::new(NonlinearityKind::Linear, 3.0).unwrap();
        let d = Dynamics::new(spec, Arc::new(PaddedKernel::new(grid)));
        let mut state = FlowState::initial(grid.sine_mode([1, 1, 1]), 0.01);
        let dts = [0.01, 0.003, 0.02, 0.007];
        for i in 0..40 {
            state = d.etd_step(&state, dts[i % 4]).unwrap();
        }
        let c = to_spectral(&state.u).mode([1, 1, 1]);
        let exact = (-4.0 * state.t).exp();
        assert!((c - exact).abs() <= 1e-12 * exact);
        assert_eq!(state.step_count, 40);
    }

    #[test]
    fn steady_residual_of_the_linear_ground_mode() {
        let grid = Grid::new(PI, 9).unwrap();
        let spec = NonlinearitySpec::new(NonlinearityKind::Linear, 3.0).unwrap();
        let k = PaddedKernel::new(grid);
        let r = steady_residual(&spec, &grid.sine_mode([1, 1, 1]), &k).unwrap();
        assert!((r - 4.0 * (PI.powi(3) / 8.0).sqrt()).abs() < 1e-11);
        assert!((r - 7.87480).abs() < 1e-5);
    }

    #[test]
    fn small_steps_follow_the_negative_gradient() {
        // (u⁺ − u)/dt = −g + O(dt): errors halve with dt.
        let d = setup(NonlinearityKind::F3, 3.0, PI, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let u = random_band_limited(*d.grid(), 3, &mut rng).scaled(0.5);
        let g = d.energy_gradient(&u).unwrap();
        let errs: Vec<f64> = [1e-3, 5e-4, 2.5e-4, 1.25e-4]
            .iter()
            .map(|&dt| {
                let next = d.step_field(&u, dt).unwrap();
                let slope = next.sub(&u).unwrap().scaled(1.0 / dt);
                lp_norm(&slope.axpy(1.0, &g).unwrap(), 2.0).unwrap()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 1.0).abs() < 0.05, "{errs:?}");
        }
    }

    #[test]
    fn steady_state_is_fixed() {
        let d = setup(NonlinearityKind::F1, 3.0, 1.0, 6);
        let z = Field::zeros(*d.grid());
        let next = d.step_field(&z, 0.1).unwrap();
        assert_eq!(next.max_abs(), 0.0);
    }

    #[test]
    fn zero_data_stays_zero() {
        let d = setup(NonlinearityKind::F2, 3.0, PI, 8);
        let settings = RunSettings { t_end: 1.0, keep_snapshots: true, ..Default::default() };
        let traj = adaptive_run(&d, settings, Field::zeros(*d.grid())).unwrap();
        assert_eq!(traj.exit, ExitStatus::ReachedFinalTime);
        assert_eq!(traj.records.len(), 11);
        assert!(traj.snapshots.unwrap().iter().all(|u| u.max_abs() == 0.0));
        for r in &traj.records {
            assert_eq!(r.energy, 0.0);
            assert_eq!(r.diss_residual, 0.0);
        }
    }

    #[test]
    fn record_times_are_exact() {
        let d = setup(NonlinearityKind::F3, 3.0, PI, 8);
        let settings = RunSettings { t_end: 1.05, record_every: 0.25, ..Default::default() };
        let u0 = d.grid().sine_mode([1, 1, 1]).scaled(0.5);
        let traj = adaptive_run(&d, settings, u0).unwrap();
        let times: Vec<f64> = traj.records.iter().map(|r| r.t).collect();
        assert_eq!(times, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.05]);
        assert_eq!(traj.t_final, 1.05);
    }

    #[test]
    fn flow_commutes_with_negation() {
        let d = setup(NonlinearityKind::F2, 3.0, PI, 8);
        let u0 = InitialData { shape: InitialShape::Gaussian { sigma: 0.5, center: None }, amplitude: 0.8 }
            .sample(d.grid())
            .unwrap();
        let settings = RunSettings { t_end: 1.0, ..Default::default() };
        let a = adaptive_run(&d, settings, u0.clone()).unwrap();
        let b = adaptive_run(&d, settings, u0.scaled(-1.0)).unwrap();
        assert_eq!(a.final_state.u.scaled(-1.0), b.final_state.u);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn large_data_blows_up() {
        let d = setup(NonlinearityKind::F2, 3.0, PI, 8);
        let u0 = d.grid().sine_mode([1, 1, 1]).scaled(20.0);
        assert!(d.energy(&u0).unwrap() < 0.0);
        let traj = adaptive_run(&d, RunSettings::default(), u0).unwrap();
        assert_eq!(traj.exit, ExitStatus::BlowUp);
        assert!(traj.t_final < 1.0);
        assert!(traj.records.last().unwrap().sup <= 1e6);
    }

    #[test]
    fn initial_data_validation() {
        let g = Grid::new(1.0, 4).unwrap();
        assert!(InitialData::mode([5, 1, 1], 1.0).sample(&g).is_err());
        let bad = InitialData { shape: InitialShape::Gaussian { sigma: 0.0, center: None }, amplitude: 1.0 };
        assert!(bad.sample(&g).is_err());
        assert_eq!(InitialData::mode([1, 1, 1], 2.0).sample(&g).unwrap(), g.sine_mode([1, 1, 1]).scaled(2.0));
    }
}
