//! Newtonian potential `φ_u(x) = ∫_Ω u(y)² / |x - y| dy` on the grid nodes.
//!
//! The discrete potential is the finite sum `h³ Σ_j K(x_i - y_j) u_j²` with
//! `K(d) = 1/|d|` for `d ≠ 0` and `K(0) = c0/h`, where `c0` is the average of
//! `1/|x|` over the unit cube. It is evaluated as a linear convolution by
//! zero-padding the density to a `(2N+2)³` periodic grid, so the field is
//! effectively extended by zero outside Ω.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::Fft;

use crate::error::{Error, Result};
use crate::field::{fft_plan, integrate, Field, Grid};

/// `∫_{[-1/2,1/2]³} |x|⁻¹ dx = 3 ln(2 + √3) − π/2 ≈ 2.380077`.
pub fn singular_cell_constant() -> f64 {
    3.0 * (2.0 + 3f64.sqrt()).ln() - PI / 2.0
}

/// Largest grid accepted by [`newtonian_potential_direct`].
pub const DIRECT_SUM_MAX_N: usize = 16;

pub struct PaddedKernel {
    grid: Grid,
    padded: usize,
    c0: f64,
    spectral_kernel: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PaddedKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PaddedKernel")
            .field("grid", &self.grid)
            .field("padded", &self.padded)
            .field("c0", &self.c0)
            .finish()
    }
}

impl PaddedKernel {
    pub fn new(grid: Grid) -> Self {
        let padded = 2 * grid.n() + 2;
        let forward = fft_plan(padded, false);
        let inverse = fft_plan(padded, true);
        let c0 = singular_cell_constant();
        let mut kernel = Self {
            grid,
            padded,
            c0,
            spectral_kernel: Vec::new(),
            forward,
            inverse,
        };
        let m = padded;
        let signed = |i: usize| -> i64 {
            if i <= m / 2 {
                i as i64
            } else {
                i as i64 - m as i64
            }
        };
        let mut samples = vec![Complex64::new(0.0, 0.0); m * m * m];
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    let k = kernel.sample([signed(a), signed(b), signed(c)]);
                    samples[(a * m + b) * m + c] = Complex64::new(k, 0.0);
                }
            }
        }
        kernel.fft3(&mut samples, false);
        kernel.spectral_kernel = samples;
        kernel
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// Side of the padded periodic grid.
    pub fn padded_len(&self) -> usize {
        self.padded
    }

    /// Kernel value at the node offset `d` (in units of grid spacing).
    pub fn sample(&self, d: [i64; 3]) -> f64 {
        let h = self.grid.spacing();
        if d == [0, 0, 0] {
            self.c0 / h
        } else {
            let r2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
            1.0 / (h * r2.sqrt())
        }
    }

    /// Full 3D transform of a padded array.
    fn fft3(&self, data: &mut [Complex64], inverse: bool) {
        let m = self.padded;
        self.transform_axis(data, 2, m, m, inverse);
        self.transform_axis(data, 1, m, m, inverse);
        self.transform_axis(data, 0, m, m, inverse);
    }

    /// Transforms the lines along `axis` whose other two coordinates lie below
    /// `lim_a` and `lim_b` (in axis order); the remaining lines are skipped.
    fn transform_axis(&self, data: &mut [Complex64], axis: usize, lim_a: usize, lim_b: usize, inverse: bool) {
        let m = self.padded;
        let fft = if inverse { &self.inverse } else { &self.forward };
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let (stride, outer, inner) = match axis {
            0 => (m * m, m, 1),
            1 => (m, m * m, 1),
            _ => (1, m * m, m),
        };
        let mut batch = vec![Complex64::new(0.0, 0.0); lim_b * m];
        for a in 0..lim_a {
            if axis == 2 {
                let start = a * outer;
                for b in 0..lim_b {
                    let line = &mut data[start + b * inner..start + b * inner + m];
                    fft.process_with_scratch(line, &mut scratch);
                }
                continue;
            }
            let base = |b: usize| if axis == 0 { a * m + b } else { a * outer + b * inner };
            for b in 0..lim_b {
                let o = base(b);
                for j in 0..m {
                    batch[b * m + j] = data[o + j * stride];
                }
            }
            fft.process_with_scratch(&mut batch, &mut scratch);
            for b in 0..lim_b {
                let o = base(b);
                for j in 0..m {
                    data[o + j * stride] = batch[b * m + j];
                }
            }
        }
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        self.grid.check_same(grid)
    }
}

/// `h³ Σ_j K(x_i − y_j) ρ_j` for an arbitrary density `ρ` on the grid.
pub fn potential_of_density(density: &Field, kernel: &PaddedKernel) -> Result<Field> {
    kernel.check_grid(density.grid())?;
    if !density.is_finite() {
        return Err(Error::NumericalFailure("non-finite density in potential".into()));
    }
    let g = kernel.grid;
    let n = g.n();
    let m = kernel.padded;
    let mut buf = vec![Complex64::new(0.0, 0.0); m * m * m];
    for (idx, &rho) in density.values().iter().enumerate() {
        let [a, b, c] = g.coords(idx);
        buf[(a * m + b) * m + c] = Complex64::new(rho, 0.0);
    }
    // The density occupies the [0, N)³ corner and only that corner of the
    // result is read back, so lines that are identically zero or unused are
    // skipped.
    kernel.transform_axis(&mut buf, 2, n, n, false);
    kernel.transform_axis(&mut buf, 1, n, m, false);
    kernel.transform_axis(&mut buf, 0, m, m, false);
    for (z, k) in buf.iter_mut().zip(&kernel.spectral_kernel) {
        *z *= k;
    }
    kernel.transform_axis(&mut buf, 0, m, m, true);
    kernel.transform_axis(&mut buf, 1, n, m, true);
    kernel.transform_axis(&mut buf, 2, n, n, true);
    let scale = g.cell_volume() / (m * m * m) as f64;
    let mut out = vec![0.0; g.len()];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                out[g.index(a, b, c)] = buf[(a * m + b) * m + c].re * scale;
            }
        }
    }
    Field::from_values(g, out)
}

/// `φ_u` at the grid nodes. Clamped at zero to remove FFT round-off below it.
pub fn newtonian_potential(u: &Field, kernel: &PaddedKernel) -> Result<Field> {
    if !u.is_finite() {
        return Err(Error::NumericalFailure("non-finite field in potential".into()));
    }
    let phi = potential_of_density(&u.map(|v| v * v), kernel)?;
    Ok(phi.map(|v| v.max(0.0)))
}

/// Direct `O(N⁶)` evaluation of the same finite sum as [`newtonian_potential`].
pub fn newtonian_potential_direct(u: &Field, kernel: &PaddedKernel) -> Result<Field> {
    kernel.check_grid(u.grid())?;
    let g = kernel.grid;
    if g.n() > DIRECT_SUM_MAX_N {
        return Err(Error::Config(format!(
            "direct potential summation refused for N = {} (limit {DIRECT_SUM_MAX_N})",
            g.n()
        )));
    }
    if !u.is_finite() {
        return Err(Error::NumericalFailure("non-finite field in potential".into()));
    }
    let dens: Vec<f64> = u.values().iter().map(|v| v * v).collect();
    let vol = g.cell_volume();
    let out = (0..g.len())
        .map(|i| {
            let ci = g.coords(i);
            let s: f64 = dens
                .iter()
                .enumerate()
                .filter(|(_, &r)| r != 0.0)
                .map(|(j, &r)| {
                    let cj = g.coords(j);
                    let d = [
                        ci[0] as i64 - cj[0] as i64,
                        ci[1] as i64 - cj[1] as i64,
                        ci[2] as i64 - cj[2] as i64,
                    ];
                    kernel.sample(d) * r
                })
                .sum();
            s * vol
        })
        .collect();
    Field::from_values(g, out)
}

/// The discrete potential sum evaluated at an arbitrary point `x`, which need
/// not be a node: `h³ Σ_j K(x − y_j) u_j²` with the same kernel convention
/// (the singular cell value is used when `x` coincides with a node).
pub fn potential_at_point(u: &Field, kernel: &PaddedKernel, x: [f64; 3]) -> Result<f64> {
    kernel.check_grid(u.grid())?;
    let g = kernel.grid;
    let h = g.spacing();
    let tol = 1e-12 * h;
    let s: f64 = u
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(j, &v)| {
            let y = g.position(j);
            let r = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
            let k = if r < tol { kernel.c0 / h } else { 1.0 / r };
            k * v * v
        })
        .sum();
    Ok(s * g.cell_volume())
}

/// `∫ φ_u u²` (the energies carry it with a factor ±1/4).
pub fn potential_energy_term(u: &Field, kernel: &PaddedKernel) -> Result<f64> {
    let phi = newtonian_potential(u, kernel)?;
    let integrand = phi.zip_map(u, |p, v| p * v * v)?;
    Ok(integrate(&integrand))
}
