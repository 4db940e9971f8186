//! Exponent calculus for the nonlocal inequalities, and Monte-Carlo ratio
//! monitors for the bounds they feed.
//!
//! All exponent arithmetic is done in arbitrary-precision rationals so that
//! identities such as `1/m + 1/3 = 1 + 1/r` hold exactly. The ratio monitors
//! estimate the unknown constants empirically over seeded random ensembles;
//! they are reproducible, not sharp.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{apply_nonlinearity, NonlinearityKind, NonlinearitySpec, Trajectory};
use crate::error::{Error, Result};
use crate::field::{lp_norm, random_band_limited, Field, Grid};
use crate::potential::{newtonian_potential, PaddedKernel};

pub type Rational = BigRational;

/// `n/d` as a rational; panics on `d = 0`.
pub fn ratio(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

fn int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

/// Parses `p/q` or an integer.
pub fn parse_rational(s: &str) -> Result<Rational> {
    let t = s.trim();
    t.parse::<Rational>()
        .map_err(|_| Error::Config(format!("`{t}` is not a rational of the form p/q")))
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// A Lebesgue exponent that may be infinite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exponent {
    Finite(Rational),
    Infinite,
}

impl Exponent {
    pub fn to_f64(&self) -> f64 {
        match self {
            Self::Finite(r) => to_f64(r),
            Self::Infinite => f64::INFINITY,
        }
    }

    /// `1/r`, zero for `r = ∞`.
    pub fn reciprocal(&self) -> Rational {
        match self {
            Self::Finite(r) => r.recip(),
            Self::Infinite => Rational::zero(),
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(r) => write!(f, "{r}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HlsExponents {
    pub m: Rational,
    pub r: Exponent,
}

/// The `r` paired with `m` by `1/m + 1/3 = 1 + 1/r`, for `m ∈ (1, 3/2]`.
pub fn hls_conjugate(m: &Rational) -> Result<Exponent> {
    if *m <= int(1) || *m > ratio(3, 2) {
        return Err(Error::Domain(format!(
            "HLS exponent m = {m} outside the admissible range 1 < m <= 3/2"
        )));
    }
    let inv_r = m.recip() - ratio(2, 3);
    Ok(if inv_r.is_zero() { Exponent::Infinite } else { Exponent::Finite(inv_r.recip()) })
}

pub fn hls_exponents(m: &Rational) -> Result<HlsExponents> {
    Ok(HlsExponents { m: m.clone(), r: hls_conjugate(m)? })
}

/// `m = 3p/(2p+3)`, the exponent used to bound `φ_u u` in `L^p` for `p > 3`.
pub fn lipschitz_hls_exponent(p: &Rational) -> Result<Rational> {
    if *p <= int(3) {
        return Err(Error::Domain(format!("need p > 3, got {p}")));
    }
    Ok(int(3) * p / (int(2) * p + int(3)))
}

/// `‖φ_u‖_r / ‖u‖²_{2m}` with `r` conjugate to `m`, norms over Ω.
pub fn hls_ratio(u: &Field, m: &Rational, kernel: &PaddedKernel) -> Result<f64> {
    let r = hls_conjugate(m)?;
    let denom = lp_norm(u, 2.0 * to_f64(m))?;
    if denom == 0.0 {
        return Err(Error::Domain("HLS ratio undefined for u = 0".into()));
    }
    let phi = newtonian_potential(u, kernel)?;
    Ok(lp_norm(&phi, r.to_f64())? / (denom * denom))
}

/// `κ = max{q, 3}`.
pub fn kappa(q: f64) -> f64 {
    q.max(3.0)
}

/// `‖F₁(v)‖_r / ‖v‖³_{3r}` for F1, `‖F_i(v)‖_r / (1 + ‖v‖^κ_{κr})` otherwise.
pub fn poly_bound_ratio(spec: &NonlinearitySpec, v: &Field, r: f64, kernel: &PaddedKernel) -> Result<f64> {
    if !(r > 1.0) {
        return Err(Error::Domain(format!("need r > 1, got {r}")));
    }
    let num = lp_norm(&apply_nonlinearity(spec, v, kernel)?, r)?;
    match spec.kind() {
        NonlinearityKind::F1 => {
            let d = lp_norm(v, 3.0 * r)?;
            if d == 0.0 {
                return Err(Error::Domain("polynomial bound ratio undefined for v = 0".into()));
            }
            Ok(num / (d * d * d))
        }
        NonlinearityKind::F2 | NonlinearityKind::F3 => {
            let k = kappa(spec.q());
            Ok(num / (1.0 + lp_norm(v, k * r)?.powf(k)))
        }
        NonlinearityKind::Linear => Err(Error::Domain("no polynomial bound for the linear flow".into())),
    }
}

/// `a(β) = q + 1 − (q − 1)/(β + 1)`.
pub fn a_of_beta(q: &Rational, beta: &Rational) -> Result<Rational> {
    if *q <= int(1) {
        return Err(Error::Domain(format!("need q > 1, got {q}")));
    }
    if *beta < int(2) {
        return Err(Error::Domain(format!("need β >= 2, got {beta}")));
    }
    Ok(q + int(1) - (q - int(1)) / (beta + int(1)))
}

/// One step `β → β̃ = β + h` of the integrability bootstrap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapReport {
    pub q: Rational,
    pub beta: Rational,
    pub h: Rational,
    pub beta_tilde: Rational,
    pub a: Rational,
    pub theta: Rational,
    pub s: Rational,
    /// `s/(s−1)`; `None` when `s = 1`.
    pub s_conj: Option<Rational>,
    pub theta_s_conj: Option<Rational>,
    /// `s > 1`
    pub valid_s: bool,
    /// `θ s' <= (q+1)/q`
    pub valid_condi: bool,
}

impl BootstrapReport {
    /// Both conditions hold, so the step is certified.
    pub fn certified(&self) -> bool {
        self.valid_s && self.valid_condi
    }
}

fn theta_of(q: &Rational, a: &Rational) -> Rational {
    (q + int(1)) / (q - int(1)) * (a - int(2)) / a
}

/// Exponents of one bootstrap step for `q >= 3`, `β >= 2`, `h ∈ (0,2)` and
/// `2 < a <= a(β)`.
pub fn bootstrap_exponents(q: &Rational, beta: &Rational, h: &Rational, a: &Rational) -> Result<BootstrapReport> {
    if *q < int(3) {
        return Err(Error::Domain(format!("bootstrap needs q >= 3, got q = {q}")));
    }
    if *beta < int(2) {
        return Err(Error::Domain(format!("bootstrap needs β >= 2, got β = {beta}")));
    }
    if !h.is_positive() || *h >= int(2) {
        return Err(Error::Domain(format!("bootstrap needs h ∈ (0,2), got h = {h}")));
    }
    let a_max = a_of_beta(q, beta)?;
    if *a <= int(2) || *a > a_max {
        return Err(Error::Domain(format!("bootstrap needs 2 < a <= a(β) = {a_max}, got a = {a}")));
    }
    let theta = theta_of(q, a);
    let beta_tilde = beta + h;
    let s = int(2) / ((int(1) - &theta) * &beta_tilde);
    let s_conj = (s != int(1)).then(|| &s / (&s - int(1)));
    let theta_s_conj = s_conj.as_ref().map(|sc| &theta * sc);
    let valid_s = s > int(1);
    let valid_condi = valid_s
        && theta_s_conj
            .as_ref()
            .is_some_and(|v| v.cmp(&((q + int(1)) / q)) != Ordering::Greater);
    Ok(BootstrapReport {
        q: q.clone(),
        beta: beta.clone(),
        h: h.clone(),
        beta_tilde,
        a: a.clone(),
        theta,
        s,
        s_conj,
        theta_s_conj,
        valid_s,
        valid_condi,
    })
}

/// The `a` at which `s = 2/((1−θ)β̃)` equals one; `s > 1` exactly for larger `a`.
/// `None` when that `a` falls outside `(2, q+1)`.
pub fn bootstrap_s_threshold(q: &Rational, beta: &Rational, h: &Rational) -> Option<Rational> {
    let beta_tilde = beta + h;
    let theta_star = int(1) - int(2) / beta_tilde;
    let k = (q + int(1)) / (q - int(1));
    if theta_star <= Rational::zero() || theta_star >= k {
        return None;
    }
    let a = int(2) * &k / (&k - theta_star);
    (a > int(2) && a < q + int(1)).then_some(a)
}

/// Admissible `p₀` interval for the global existence argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmannWindow {
    pub q: Rational,
    /// `max{3, q}`
    pub gamma0: Rational,
    pub p0_low: Rational,
    pub p0_high: Rational,
    pub nonempty: bool,
}

impl AmannWindow {
    /// `γ₀ < 1 + (2/3) p₀`.
    pub fn admits(&self, p0: &Rational) -> bool {
        *p0 > self.p0_low && *p0 < self.p0_high && self.gamma0 < int(1) + ratio(2, 3) * p0
    }
}

/// For `q < 17/5` the window is `(max{3, 3(q−1)/2}, 18/5)`; from `17/5` on it is
/// `(3(q−1)/2, q+1)`.
pub fn amann_window(q: &Rational) -> Result<AmannWindow> {
    if *q <= int(1) || *q >= int(5) {
        return Err(Error::Domain(format!("q = {q} outside (1,5)")));
    }
    let gamma0 = q.clone().max(int(3));
    let three_halves = ratio(3, 2) * (q - int(1));
    let (p0_low, p0_high) = if *q < ratio(17, 5) {
        (three_halves.max(int(3)), ratio(18, 5))
    } else {
        (three_halves, q + int(1))
    };
    // γ₀ < 1 + (2/3)p₀ holds on the whole interval iff it holds at the left end.
    let threshold = (&gamma0 - int(1)) * ratio(3, 2);
    let nonempty = p0_low < p0_high && threshold <= p0_low;
    Ok(AmannWindow { q: q.clone(), gamma0, p0_low, p0_high, nonempty })
}

/// `sup_{t >= δ} ‖u(t)‖_a` over the records of a trajectory. Uses stored
/// snapshots when present, otherwise the recorded `l_a` column, which is only
/// valid for the `a` the run was configured with (`recorded_a`).
pub fn apriori_monitor(traj: &Trajectory, a: f64, delta: f64, recorded_a: Option<f64>) -> Result<f64> {
    if !(a >= 1.0) {
        return Err(Error::Domain(format!("need a >= 1, got {a}")));
    }
    let window: Vec<usize> = traj
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.t >= delta)
        .map(|(i, _)| i)
        .collect();
    if window.is_empty() {
        return Err(Error::Domain(format!("no records with t >= {delta}")));
    }
    match (&traj.snapshots, recorded_a) {
        (Some(snaps), _) => window
            .iter()
            .map(|&i| lp_norm(&snaps[i], a))
            .try_fold(0.0f64, |m, v| v.map(|v| m.max(v))),
        (None, Some(ra)) if ra == a => Ok(window.iter().map(|&i| traj.records[i].l_a).fold(0.0, f64::max)),
        _ => Err(Error::Domain(format!(
            "trajectory has no snapshots and no recorded column for a = {a}"
        ))),
    }
}

/// Largest centered-difference partial derivative over all nodes and axes,
/// with the zero boundary values outside the grid.
pub fn max_gradient_component(u: &Field) -> f64 {
    let g = u.grid();
    let n = g.n();
    let h = g.spacing();
    let v = u.values();
    let at = |c: [isize; 3]| -> f64 {
        if c.iter().any(|&x| x < 0 || x >= n as isize) {
            0.0
        } else {
            v[g.index(c[0] as usize, c[1] as usize, c[2] as usize)]
        }
    };
    let mut best = 0.0f64;
    for idx in 0..g.len() {
        let c = g.coords(idx).map(|x| x as isize);
        for axis in 0..3 {
            let (mut fwd, mut back) = (c, c);
            fwd[axis] += 1;
            back[axis] -= 1;
            best = best.max(((at(fwd) - at(back)) / (2.0 * h)).abs());
        }
    }
    best
}

/// Bounds standing in for relative compactness of the orbit in `C¹`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactnessMonitor {
    /// `sup_{t >= δ} ‖u‖_∞`
    pub sup: f64,
    /// `sup_{t >= δ} max_i ‖∂_i u‖_∞`
    pub grad_sup: f64,
}

pub fn compactness_monitor(traj: &Trajectory, delta: f64) -> Result<CompactnessMonitor> {
    let snaps = traj
        .snapshots
        .as_ref()
        .ok_or_else(|| Error::Domain("compactness monitor needs snapshots".into()))?;
    let mut out = CompactnessMonitor { sup: 0.0, grad_sup: 0.0 };
    let mut any = false;
    for (rec, u) in traj.records.iter().zip(snaps) {
        if rec.t >= delta {
            any = true;
            out.sup = out.sup.max(u.max_abs());
            out.grad_sup = out.grad_sup.max(max_gradient_component(u));
        }
    }
    if !any {
        return Err(Error::Domain(format!("no records with t >= {delta}")));
    }
    Ok(out)
}

/// Settings of a random-field ensemble: band-limited spectra with independent
/// standard normal coefficients for `max k_i <= kmax`, sample `i` seeded with
/// `seed + i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ensemble {
    pub samples: usize,
    pub kmax: usize,
    pub seed: u64,
}

impl Default for Ensemble {
    fn default() -> Self {
        Self { samples: 100, kmax: 4, seed: 20240521 }
    }
}

impl Ensemble {
    pub fn field(&self, grid: Grid, index: usize) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index as u64));
        random_band_limited(grid, self.kmax, &mut rng)
    }

    /// Evaluates `f` on every member, in index order.
    pub fn map<F>(&self, grid: Grid, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&Field) -> Result<f64> + Sync,
    {
        (0..self.samples).into_par_iter().map(|i| f(&self.field(grid, i))).collect()
    }
}

pub fn ensemble_hls_ratios(ens: &Ensemble, m: &Rational, kernel: &PaddedKernel) -> Result<Vec<f64>> {
    ens.map(*kernel.grid(), |u| hls_ratio(u, m, kernel))
}

pub fn ensemble_poly_ratios(
    ens: &Ensemble,
    spec: &NonlinearitySpec,
    r: f64,
    kernel: &PaddedKernel,
) -> Result<Vec<f64>> {
    ens.map(*kernel.grid(), |v| poly_bound_ratio(spec, v, r, kernel))
}

/// `‖F(u) − F(w)‖_p / ‖u − w‖_∞`, a local Lipschitz quotient of the nonlinearity.
pub fn lipschitz_quotient(
    spec: &NonlinearitySpec,
    u: &Field,
    w: &Field,
    p: f64,
    kernel: &PaddedKernel,
) -> Result<f64> {
    let du = u.sub(w)?.max_abs();
    if du == 0.0 {
        return Err(Error::Domain("Lipschitz quotient needs u != w".into()));
    }
    let df = apply_nonlinearity(spec, u, kernel)?.sub(&apply_nonlinearity(spec, w, kernel)?)?;
    Ok(lp_norm(&df, p)? / du)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{adaptive_run, Dynamics, RunSettings};
    use std::sync::Arc;
    use std::f64::consts::PI;

    #[test]
    fn hls_conjugate_values() {
        assert_eq!(hls_conjugate(&ratio(6, 5)).unwrap(), Exponent::Finite(int(6)));
        assert_eq!(hls_conjugate(&ratio(3, 2)).unwrap(), Exponent::Infinite);
        assert_eq!(hls_conjugate(&ratio(9, 7)).unwrap(), Exponent::Finite(int(9)));
        assert!(matches!(hls_conjugate(&int(1)), Err(Error::Domain(_))));
        assert!(matches!(hls_conjugate(&ratio(8, 5)), Err(Error::Domain(_))));
        let m = lipschitz_hls_exponent(&int(6)).unwrap();
        assert_eq!(m, ratio(6, 5));
        assert_eq!(hls_conjugate(&m).unwrap(), Exponent::Finite(int(6)));
        assert!(lipschitz_hls_exponent(&int(3)).is_err());
    }

    #[test]
    fn hls_relation_is_exact() {
        for num in 101..=150 {
            let m = ratio(num, 100);
            let r = hls_conjugate(&m).unwrap();
            assert!((m.recip() + ratio(1, 3) - int(1) - r.reciprocal()).is_zero());
        }
    }

    #[test]
    fn lipschitz_exponent_lies_in_the_hls_range() {
        for p in [ratio(31, 10), int(4), int(10), int(1000)] {
            let m = lipschitz_hls_exponent(&p).unwrap();
            let r = hls_conjugate(&m).unwrap();
            // 1/r = 1/m − 2/3 = 1/p exactly.
            assert_eq!(r, Exponent::Finite(p));
        }
    }

    #[test]
    fn kappa_values() {
        assert_eq!(kappa(4.0), 4.0);
        assert_eq!(kappa(2.0), 3.0);
    }

    #[test]
    fn a_of_beta_values() {
        assert_eq!(a_of_beta(&int(3), &int(2)).unwrap(), ratio(10, 3));
        assert_eq!(a_of_beta(&int(4), &int(2)).unwrap(), int(4));
        assert!(a_of_beta(&int(3), &ratio(3, 2)).is_err());
        assert!(a_of_beta(&int(1), &int(2)).is_err());
        for b in 2..100 {
            let lo = a_of_beta(&ratio(7, 2), &int(b)).unwrap();
            let hi = a_of_beta(&ratio(7, 2), &int(b + 1)).unwrap();
            assert!(hi > lo && hi < ratio(9, 2));
        }
    }

    #[test]
    fn bootstrap_reference_step() {
        let rep = bootstrap_exponents(&int(3), &int(2), &int(1), &ratio(10, 3)).unwrap();
        assert_eq!(rep.theta, ratio(4, 5));
        assert_eq!(rep.beta_tilde, int(3));
        assert_eq!(rep.s, ratio(10, 3));
        assert_eq!(rep.s_conj, Some(ratio(10, 7)));
        assert_eq!(rep.theta_s_conj, Some(ratio(8, 7)));
        assert!(rep.valid_s && rep.valid_condi && rep.certified());
    }

    #[test]
    fn bootstrap_domain_errors() {
        let a = ratio(3, 1);
        assert!(bootstrap_exponents(&ratio(5, 2), &int(2), &int(1), &a).is_err());
        assert!(bootstrap_exponents(&int(3), &int(1), &int(1), &a).is_err());
        assert!(bootstrap_exponents(&int(3), &int(2), &int(0), &a).is_err());
        assert!(bootstrap_exponents(&int(3), &int(2), &int(2), &a).is_err());
        assert!(bootstrap_exponents(&int(3), &int(2), &int(1), &int(2)).is_err());
        assert!(bootstrap_exponents(&int(3), &int(2), &int(1), &ratio(7, 2)).is_err());
    }

    #[test]
    fn theta_vanishes_at_a_equal_two() {
        for q in [int(2), int(3), ratio(9, 2)] {
            assert!(theta_of(&q, &int(2)).is_zero());
        }
    }

    #[test]
    fn theta_in_unit_interval() {
        for qn in [31, 35, 40, 49] {
            let q = ratio(qn, 10);
            for an in 1..20 {
                let a = int(2) + (&q - int(1)) * ratio(an, 20);
                let th = theta_of(&q, &a);
                assert!(th > Rational::zero() && th < int(1), "q={q} a={a}");
            }
        }
    }

    #[test]
    fn s_threshold_found_by_bisection() {
        let (q, beta, h) = (int(3), int(2), int(1));
        let exact = bootstrap_s_threshold(&q, &beta, &h).unwrap();
        assert_eq!(exact, ratio(12, 5));
        let s_at = |a: &Rational| bootstrap_exponents(&q, &beta, &h, a).unwrap();
        assert_eq!(s_at(&exact).s, int(1));
        assert!(!s_at(&exact).valid_s);
        let (mut lo, mut hi) = (ratio(201, 100), ratio(10, 3));
        assert!(!s_at(&lo).valid_s && s_at(&hi).valid_s);
        for _ in 0..60 {
            let mid = (&lo + &hi) / int(2);
            if s_at(&mid).valid_s {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!(lo <= exact && exact <= hi);
        assert!(&hi - &lo < ratio(1, 1 << 50));
    }

    #[test]
    fn amann_windows() {
        let w3 = amann_window(&int(3)).unwrap();
        assert_eq!((w3.gamma0.clone(), w3.p0_low.clone(), w3.p0_high.clone()), (int(3), int(3), ratio(18, 5)));
        assert!(w3.nonempty);
        let w4 = amann_window(&int(4)).unwrap();
        assert_eq!((w4.gamma0.clone(), w4.p0_low.clone(), w4.p0_high.clone()), (int(4), ratio(9, 2), int(5)));
        assert!(w4.nonempty);
        let wt = amann_window(&ratio(17, 5)).unwrap();
        assert_eq!((wt.p0_low.clone(), wt.p0_high.clone()), (ratio(18, 5), ratio(22, 5)));
        assert!(wt.nonempty);
        let w2 = amann_window(&int(2)).unwrap();
        assert_eq!((w2.gamma0.clone(), w2.p0_low.clone()), (int(3), int(3)));
        assert!(amann_window(&int(5)).is_err());
        assert!(amann_window(&int(1)).is_err());
    }

    #[test]
    fn amann_window_points_satisfy_the_constraint() {
        for qn in 11..50 {
            let q = ratio(qn, 10);
            let w = amann_window(&q).unwrap();
            assert!(w.nonempty, "q = {q}");
            for j in 1..20 {
                let p0 = &w.p0_low + (&w.p0_high - &w.p0_low) * ratio(j, 20);
                assert!(w.admits(&p0), "q = {q}, p0 = {p0}");
            }
        }
    }

    #[test]
    fn parse_rationals() {
        assert_eq!(parse_rational("6/5").unwrap(), ratio(6, 5));
        assert_eq!(parse_rational(" 3 ").unwrap(), int(3));
        assert!(parse_rational("1.5").is_err());
        assert!(parse_rational("abc").is_err());
    }

    fn grid_and_kernel(n: usize) -> (Grid, PaddedKernel) {
        let g = Grid::new(2.0, n).unwrap();
        (g, PaddedKernel::new(g))
    }

    #[test]
    fn ratio_monitors_are_scale_invariant() {
        let (g, k) = grid_and_kernel(10);
        let ens = Ensemble { samples: 3, kmax: 3, seed: 1 };
        let f1 = NonlinearitySpec::new(NonlinearityKind::F1, 3.0).unwrap();
        for i in 0..ens.samples {
            let u = ens.field(g, i);
            let base = hls_ratio(&u, &ratio(6, 5), &k).unwrap();
            let pb = poly_bound_ratio(&f1, &u, 2.0, &k).unwrap();
            for alpha in [-3.0, 0.25, 11.0] {
                let s = hls_ratio(&u.scaled(alpha), &ratio(6, 5), &k).unwrap();
                assert!((s - base).abs() <= 1e-12 * base);
                let p = poly_bound_ratio(&f1, &u.scaled(alpha), 2.0, &k).unwrap();
                assert!((p - pb).abs() <= 1e-12 * pb);
            }
        }
    }

    #[test]
    fn ratio_monitors_reject_zero() {
        let (g, k) = grid_and_kernel(6);
        let z = Field::zeros(g);
        assert!(matches!(hls_ratio(&z, &ratio(6, 5), &k), Err(Error::Domain(_))));
        let f1 = NonlinearitySpec::new(NonlinearityKind::F1, 3.0).unwrap();
        assert!(matches!(poly_bound_ratio(&f1, &z, 2.0, &k), Err(Error::Domain(_))));
        let f2 = NonlinearitySpec::new(NonlinearityKind::F2, 3.0).unwrap();
        assert_eq!(poly_bound_ratio(&f2, &z, 2.0, &k).unwrap(), 0.0);
        assert!(poly_bound_ratio(&f2, &z, 1.0, &k).is_err());
    }

    #[test]
    fn ensembles_are_deterministic() {
        let (_, k) = grid_and_kernel(8);
        let ens = Ensemble { samples: 6, kmax: 3, seed: 99 };
        let a = ensemble_hls_ratios(&ens, &ratio(6, 5), &k).unwrap();
        let b = ensemble_hls_ratios(&ens, &ratio(6, 5), &k).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn lipschitz_quotient_is_finite() {
        let (g, k) = grid_and_kernel(8);
        let ens = Ensemble { samples: 2, kmax: 3, seed: 5 };
        let spec = NonlinearitySpec::new(NonlinearityKind::F3, 3.0).unwrap();
        let u = ens.field(g, 0);
        let w = u.axpy(1e-3, &ens.field(g, 1)).unwrap();
        let lq = lipschitz_quotient(&spec, &u, &w, 6.0, &k).unwrap();
        assert!(lq.is_finite() && lq > 0.0);
        assert!(lipschitz_quotient(&spec, &u, &u, 6.0, &k).is_err());
    }

    #[test]
    fn apriori_monitor_behaviour() {
        let (g, k) = grid_and_kernel(8);
        let d = Dynamics::new(NonlinearitySpec::new(NonlinearityKind::F3, 3.0).unwrap(), Arc::new(k));
        let settings = RunSettings { t_end: 1.0, keep_snapshots: true, ..Default::default() };
        let zero = adaptive_run(&d, settings, Field::zeros(g)).unwrap();
        assert_eq!(apriori_monitor(&zero, 3.5, 0.0, None).unwrap(), 0.0);

        let traj = adaptive_run(&d, settings, g.sine_mode([1, 1, 1]).scaled(0.5)).unwrap();
        let mut last = f64::INFINITY;
        for delta in [0.0, 0.2, 0.5, 0.9] {
            let m = apriori_monitor(&traj, 3.5, delta, None).unwrap();
            assert!(m.is_finite() && m <= last);
            last = m;
        }
        assert!(apriori_monitor(&traj, 3.5, 2.0, None).is_err());
        assert!(apriori_monitor(&traj, 0.5, 0.0, None).is_err());

        let mut bare = traj.clone();
        bare.snapshots = None;
        let from_column = apriori_monitor(&bare, 3.5, 0.0, Some(3.5)).unwrap();
        assert_eq!(from_column, apriori_monitor(&traj, 3.5, 0.0, None).unwrap());
        assert!(apriori_monitor(&bare, 2.0, 0.0, Some(3.5)).is_err());
    }

    #[test]
    fn gradient_component_of_a_sine_mode() {
        let g = Grid::new(PI, 32).unwrap();
        let dx = max_gradient_component(&g.sine_mode([1, 1, 1]));
        assert!((dx - 1.0).abs() < 0.02, "{dx}");
        let g2 = Grid::new(PI, 33).unwrap();
        let d2 = max_gradient_component(&g2.sine_mode([2, 1, 1]));
        assert!((d2 - 2.0).abs() < 0.05, "{d2}");
        assert_eq!(max_gradient_component(&Field::zeros(g)), 0.0);
    }

    #[test]
    fn compactness_monitor_bounds_decaying_orbit() {
        let (g, k) = grid_and_kernel(8);
        let d = Dynamics::new(NonlinearitySpec::new(NonlinearityKind::F2, 3.0).unwrap(), Arc::new(k));
        let settings = RunSettings { t_end: 1.0, keep_snapshots: true, ..Default::default() };
        let u0 = g.sine_mode([1, 2, 1]).scaled(0.4);
        let traj = adaptive_run(&d, settings, u0.clone()).unwrap();
        let all = compactness_monitor(&traj, 0.0).unwrap();
        assert_eq!(all.sup, u0.max_abs());
        assert_eq!(all.grad_sup, max_gradient_component(&u0));
        let late = compactness_monitor(&traj, 0.5).unwrap();
        assert!(late.sup < all.sup && late.grad_sup < all.grad_sup);
        assert!(compactness_monitor(&traj, 5.0).is_err());
        let mut bare = traj;
        bare.snapshots = None;
        assert!(compactness_monitor(&bare, 0.0).is_err());
    }

    #[test]
    fn normalised_monitor_is_monotone_in_a() {
        // Jensen on the normalised discrete measure: (mean |u|^a)^{1/a} grows with a.
        let (g, k) = grid_and_kernel(6);
        let d = Dynamics::new(NonlinearitySpec::new(NonlinearityKind::F1, 3.0).unwrap(), Arc::new(k));
        let settings = RunSettings { t_end: 0.5, keep_snapshots: true, ..Default::default() };
        let traj = adaptive_run(&d, settings, g.sine_mode([1, 1, 1]).scaled(0.5)).unwrap();
        let volume = g.cell_volume() * g.len() as f64;
        let normalised = |a: f64| apriori_monitor(&traj, a, 0.0, None).unwrap() / volume.powf(1.0 / a);
        let mut prev = 0.0;
        for a in [1.0, 2.0, 2.5, 3.0, 3.5, 18.0 / 5.0 - 0.1] {
            let v = normalised(a);
            assert!(v >= prev * (1.0 - 1e-14), "a = {a}");
            prev = v;
        }
    }

    mod invariants {
        use super::*;
        use proptest::prelude::*;

        // a value strictly inside (lo, hi) from a numerator in 1..den
        fn inside(lo: &Rational, hi: &Rational, k: i64, den: i64) -> Rational {
            lo + (hi - lo) * ratio(k, den)
        }

        proptest! {
            #[test]
            fn hls_relation_is_exact(k in 1i64..999) {
                let m = inside(&int(1), &ratio(3, 2), k, 1000);
                let e = hls_exponents(&m).unwrap();
                match &e.r {
                    Exponent::Finite(r) => {
                        prop_assert_eq!(r.recip(), m.recip() - ratio(2, 3));
                        prop_assert!(*r > m);
                    }
                    Exponent::Infinite => prop_assert!(false),
                }
            }

            #[test]
            fn bootstrap_theta_and_conjugate(
                qk in 0i64..200, bk in 0i64..100, hk in 1i64..100, ak in 1i64..=100,
            ) {
                let q = int(3) + ratio(qk, 100);
                let beta = int(2) + ratio(bk, 10);
                let h = ratio(hk, 50);
                let a_max = a_of_beta(&q, &beta).unwrap();
                let a = inside(&int(2), &a_max, ak, 100);
                let rep = bootstrap_exponents(&q, &beta, &h, &a).unwrap();
                prop_assert!(rep.theta.is_positive() && rep.theta < int(1));
                prop_assert_eq!(&rep.beta_tilde, &(&beta + &h));
                if let Some(sc) = &rep.s_conj {
                    prop_assert_eq!(sc * (&rep.s - int(1)), rep.s.clone());
                }
                if let Some(t) = bootstrap_s_threshold(&q, &beta, &h) {
                    prop_assert_eq!(rep.valid_s, a > t);
                }
            }

            #[test]
            fn amann_window_interior_is_admitted(qk in 1i64..400, pk in 1i64..100) {
                let q = int(1) + ratio(qk, 100);
                let w = amann_window(&q).unwrap();
                prop_assert!(w.p0_low >= ratio(3, 2) * (&q - int(1)));
                if w.nonempty {
                    prop_assert!(w.admits(&inside(&w.p0_low, &w.p0_high, pk, 100)));
                }
                prop_assert!(!w.admits(&w.p0_low) && !w.admits(&w.p0_high));
            }
        }
    }
}
