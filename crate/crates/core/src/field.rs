//! Scalar fields on the Dirichlet box `(0, L)^3`.
//!
//! Fields live on the interior nodes `x_j = j h`, `j = 1..=N`, `h = L/(N+1)`,
//! with zero boundary values implied. In that setting the Dirichlet Laplacian
//! is diagonalised by products of sines, and the sine coefficients produced by
//! [`to_spectral`] are literal mode amplitudes:
//!
//! ```text
//! u(x) = sum_k c_k sin(pi k1 x/L) sin(pi k2 y/L) sin(pi k3 z/L)
//! ```
//!
//! Quadrature is the plain node sum `h^3 sum_j u_j`; for products of sine modes
//! below the Nyquist index it is exact.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    side: f64,
    n: usize,
}

impl Grid {
    pub fn new(side: f64, n: usize) -> Result<Self> {
        if !(side.is_finite() && side > 0.0) {
            return Err(Error::Config(format!("box side L must be positive, got {side}")));
        }
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 interior nodes per axis, got N = {n}")));
        }
        Ok(Self { side, n })
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    /// Interior nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.side / (self.n + 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(3)
    }

    /// Number of nodes, `N^3`.
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.n + iy) * self.n + iz
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let n = self.n;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    /// Physical coordinate of the zero-based node index `i` along one axis.
    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.spacing()
    }

    pub fn position(&self, idx: usize) -> [f64; 3] {
        let [ix, iy, iz] = self.coords(idx);
        [self.node(ix), self.node(iy), self.node(iz)]
    }

    /// Dirichlet eigenvalue of `-Δ` for the mode `k = (k1, k2, k3)`, `k_i >= 1`.
    pub fn laplacian_symbol(&self, k: [usize; 3]) -> f64 {
        let w = PI / self.side;
        w * w * (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64
    }

    /// Eigenvalues for every mode in coefficient order (mode `(k1,k2,k3)` sits
    /// at `index(k1-1, k2-1, k3-1)`).
    pub fn laplacian_symbols(&self) -> Vec<f64> {
        (0..self.len())
            .map(|idx| {
                let [a, b, c] = self.coords(idx);
                self.laplacian_symbol([a + 1, b + 1, c + 1])
            })
            .collect()
    }

    /// Samples a function of position on the interior nodes.
    pub fn sample<F: Fn(f64, f64, f64) -> f64>(&self, f: F) -> Field {
        let values = (0..self.len())
            .map(|idx| {
                let [x, y, z] = self.position(idx);
                f(x, y, z)
            })
            .collect();
        Field { grid: *self, values }
    }

    /// The sampled eigenmode `prod_i sin(pi k_i x_i / L)`.
    pub fn sine_mode(&self, k: [usize; 3]) -> Field {
        let w = PI / self.side;
        self.sample(|x, y, z| {
            (w * k[0] as f64 * x).sin() * (w * k[1] as f64 * y).sin() * (w * k[2] as f64 * z).sin()
        })
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "grid mismatch: (L = {}, N = {}) vs (L = {}, N = {})",
                self.side, self.n, other.side, other.n
            )))
        }
    }
}

/// Real field sampled on the interior nodes, iz fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Config(format!(
                "field has {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Field {
        Field { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map<F: Fn(f64, f64) -> f64>(&self, other: &Field, f: F) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Field { grid: self.grid, values })
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        self.map(|v| alpha * v)
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Discrete L² inner product `h^3 sum u v`.
    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(s * self.grid.cell_volume())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Point reflection through the box center.
    pub fn reflected(&self) -> Field {
        let mut values = self.values.clone();
        values.reverse();
        Field { grid: self.grid, values }
    }

    /// Reflection across the mid-plane orthogonal to `axis`.
    pub fn reflected_axis(&self, axis: usize) -> Field {
        let g = self.grid;
        let n = g.n;
        let mut out = vec![0.0; g.len()];
        for (idx, &v) in self.values.iter().enumerate() {
            let mut c = g.coords(idx);
            c[axis] = n - 1 - c[axis];
            out[g.index(c[0], c[1], c[2])] = v;
        }
        Field { grid: g, values: out }
    }
}

/// Sine-mode coefficients; mode `(k1,k2,k3)` sits at `grid.index(k1-1, k2-1, k3-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, coeffs: vec![0.0; grid.len()] }
    }

    pub fn from_coeffs(grid: Grid, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(Error::Config(format!(
                "spectrum has {} coefficients, grid needs {}",
                coeffs.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Coefficient of the mode `k`, one-based.
    pub fn mode(&self, k: [usize; 3]) -> f64 {
        self.coeffs[self.grid.index(k[0] - 1, k[1] - 1, k[2] - 1)]
    }

    pub fn set_mode(&mut self, k: [usize; 3], value: f64) {
        let idx = self.grid.index(k[0] - 1, k[1] - 1, k[2] - 1);
        self.coeffs[idx] = value;
    }

    /// `sum c_k^2 (L/2)^3`, which equals the quadrature `h^3 sum u^2`.
    pub fn l2_norm_sq(&self) -> f64 {
        let s: f64 = self.coeffs.iter().map(|c| c * c).sum();
        s * (self.grid.side / 2.0).powi(3)
    }
}

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<usize, Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

pub(crate) fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let key = if inverse { len | (1 << 62) } else { len };
    PLANNER.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry(key)
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// Unnormalised type-I sine transform `S_k = sum_j x_j sin(pi j k/(N+1))`
/// applied along every axis, then multiplied by `scale`.
fn dst3(grid: &Grid, input: &[f64], scale: f64) -> Vec<f64> {
    let n = grid.n;
    let m = 2 * (n + 1);
    let fft = fft_plan(m, false);
    let mut data = input.to_vec();
    let lines = n * n;
    let mut buf = vec![Complex64::new(0.0, 0.0); lines * m];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..3 {
        let stride = match axis {
            0 => n * n,
            1 => n,
            _ => 1,
        };
        let line_start = |line: usize| -> usize {
            let (a, b) = (line / n, line % n);
            match axis {
                0 => a * n + b,
                1 => a * n * n + b,
                _ => (a * n + b) * n,
            }
        };
        for line in 0..lines {
            let base = line_start(line);
            let chunk = &mut buf[line * m..(line + 1) * m];
            chunk[0] = Complex64::new(0.0, 0.0);
            chunk[n + 1] = Complex64::new(0.0, 0.0);
            for j in 0..n {
                let v = data[base + j * stride];
                chunk[j + 1] = Complex64::new(v, 0.0);
                chunk[m - 1 - j] = Complex64::new(-v, 0.0);
            }
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for line in 0..lines {
            let base = line_start(line);
            let chunk = &buf[line * m..(line + 1) * m];
            for k in 0..n {
                data[base + k * stride] = -0.5 * chunk[k + 1].im;
            }
        }
    }
    if scale != 1.0 {
        for v in &mut data {
            *v *= scale;
        }
    }
    data
}

pub fn to_spectral(u: &Field) -> SpectralField {
    let n1 = (u.grid.n + 1) as f64;
    let scale = (2.0 / n1).powi(3);
    SpectralField { grid: u.grid, coeffs: dst3(&u.grid, &u.values, scale) }
}

pub fn from_spectral(c: &SpectralField) -> Field {
    Field { grid: c.grid, values: dst3(&c.grid, &c.coeffs, 1.0) }
}

/// Node-sum quadrature `h^3 sum_j u_j`.
pub fn integrate(u: &Field) -> f64 {
    u.values.iter().sum::<f64>() * u.grid.cell_volume()
}

/// `(∫|u|^r)^{1/r}`, or `max|u|` for `r = ∞`.
pub fn lp_norm(u: &Field, r: f64) -> Result<f64> {
    if r.is_nan() || r < 1.0 {
        return Err(Error::Domain(format!("Lebesgue exponent must satisfy r >= 1, got {r}")));
    }
    if r == f64::INFINITY {
        return Ok(u.max_abs());
    }
    let s: f64 = if r == 2.0 {
        u.values.iter().map(|v| v * v).sum()
    } else if r == 1.0 {
        u.values.iter().map(|v| v.abs()).sum()
    } else {
        u.values.iter().map(|v| v.abs().powf(r)).sum()
    };
    let integral = s * u.grid.cell_volume();
    Ok(if r == 2.0 { integral.sqrt() } else { integral.powf(1.0 / r) })
}

/// `‖u‖²_{1,2} = ∫|∇u|² + ∫u²`, evaluated on the sine spectrum.
pub fn h1_norm_sq(u: &Field) -> f64 {
    h1_norm_sq_spectral(&to_spectral(u))
}

pub fn h1_norm_sq_spectral(c: &SpectralField) -> f64 {
    let g = c.grid;
    let s: f64 = c
        .coeffs
        .iter()
        .zip(g.laplacian_symbols())
        .map(|(ck, lam)| (1.0 + lam) * ck * ck)
        .sum();
    s * (g.side / 2.0).powi(3)
}

/// Random field whose sine coefficients are independent standard normals for
/// every mode with `max(k_i) <= kmax` and zero otherwise.
pub fn random_band_limited<R: Rng + ?Sized>(grid: Grid, kmax: usize, rng: &mut R) -> Field {
    let mut spec = SpectralField::zeros(grid);
    let kmax = kmax.min(grid.n);
    for k1 in 1..=kmax {
        for k2 in 1..=kmax {
            for k3 in 1..=kmax {
                spec.set_mode([k1, k2, k3], rng.sample(StandardNormal));
            }
        }
    }
    from_spectral(&spec)
}
