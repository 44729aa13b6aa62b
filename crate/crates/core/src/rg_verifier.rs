//! Finite-difference check of the density response identity
//!
//!   ∂_t^{k+2} (ρ - ρ')|_{t0} = ∇·u,   u = ρ(t0) ∇ ∂_t^k (v - v')|_{t0},
//!
//! for one particle on a 1D grid. Both potentials start from the same ground
//! state ψ0 at t0 = 0; ψ is propagated with Crank–Nicolson to t0 ± dt, ± 2dt
//! and the time derivative of ρ - ρ' is taken with a central stencil.
//!
//! Sign: for H = -½∂² + v the continuity equation gives
//! ∂_t(j - j') = -ρ0 ∇(v - v') at t0, hence ∂²_t(ρ - ρ') = +∇·u. The report
//! also carries the residual against -∇·u so the two conventions can be
//! compared directly.

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Uniform grid on [x_min, x_max] with hard walls at both ends; only the
/// interior nodes carry amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid1d {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub n_interior: usize,
}

impl Grid1d {
    pub fn new(x_min: f64, x_max: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0 && x_max > x_min) {
            return Err(Error::InvalidInput(
                "grid needs dx > 0 and x_max > x_min".into(),
            ));
        }
        let cells = (x_max - x_min) / dx;
        let n = cells.round();
        if (cells - n).abs() > 1e-9 * n.max(1.0) || n < 3.0 {
            return Err(Error::InvalidInput(format!(
                "(x_max - x_min) / dx = {cells} must be an integer ≥ 3"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            dx,
            n_interior: n as usize - 1,
        })
    }

    pub fn symmetric(half_width: f64, dx: f64) -> Result<Self> {
        Self::new(-half_width, half_width, dx)
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + self.dx * (j + 1) as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_interior).map(|j| self.x(j)).collect()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.points().into_iter().map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWavefunction {
    pub grid: Grid1d,
    pub psi: Vec<C64>,
}

impl GridWavefunction {
    /// Σ |ψ|² dx.
    pub fn norm_squared(&self) -> f64 {
        self.psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.dx
    }

    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|z| z.norm_sqr()).collect()
    }
}

/// v(x, t) = static(x) + Σ_j w_j(x) t^j / j!, sampled on the interior nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialField {
    pub static_part: Vec<f64>,
    pub terms: Vec<Vec<f64>>,
}

impl PotentialField {
    pub fn static_only(profile: Vec<f64>) -> Self {
        Self {
            static_part: profile,
            terms: Vec::new(),
        }
    }

    pub fn with_term(mut self, order: usize, profile: Vec<f64>) -> Self {
        let n = self.static_part.len();
        if self.terms.len() <= order {
            self.terms.resize(order + 1, vec![0.0; n]);
        }
        self.terms[order] = profile;
        self
    }

    pub fn len(&self) -> usize {
        self.static_part.len()
    }

    pub fn is_empty(&self) -> bool {
        self.static_part.is_empty()
    }

    fn validate(&self, n: usize) -> Result<()> {
        for profile in std::iter::once(&self.static_part).chain(&self.terms) {
            if profile.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "potential profile",
                    expected: n,
                    found: profile.len(),
                });
            }
            if profile.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(
                    "potential profile must be finite".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut v = self.static_part.clone();
        let mut factor = 1.0;
        for (j, w) in self.terms.iter().enumerate() {
            if j > 0 {
                factor *= t / j as f64;
            }
            for (vi, wi) in v.iter_mut().zip(w) {
                *vi += factor * wi;
            }
        }
        v
    }

    /// ∂_t^k v at t = 0.
    pub fn time_derivative(&self, k: usize) -> Vec<f64> {
        let zero = vec![0.0; self.len()];
        let w = self.terms.get(k).unwrap_or(&zero);
        if k == 0 {
            self.static_part.iter().zip(w).map(|(a, b)| a + b).collect()
        } else {
            w.clone()
        }
    }

    fn max_order(&self) -> usize {
        self.terms.len().saturating_sub(1)
    }

    fn shifted(&self, c: f64) -> Self {
        Self {
            static_part: self.static_part.iter().map(|v| v - c).collect(),
            terms: self.terms.clone(),
        }
    }
}

/// Symmetric tridiagonal -½∂² + v with hard walls.
struct Tridiagonal {
    diag: Vec<f64>,
    off: f64,
}

impl Tridiagonal {
    fn hamiltonian(grid: &Grid1d, v: &[f64]) -> Self {
        let k = 1.0 / (grid.dx * grid.dx);
        Self {
            diag: v.iter().map(|vi| k + vi).collect(),
            off: -0.5 * k,
        }
    }

    /// Number of eigenvalues strictly below `lambda` (Sturm sequence).
    fn count_below(&self, lambda: f64) -> usize {
        let mut count = 0;
        let mut q = 1.0f64;
        for (j, &d) in self.diag.iter().enumerate() {
            let prev = if j == 0 { 0.0 } else { self.off * self.off / q };
            q = d - lambda - prev;
            if q == 0.0 {
                q = -f64::EPSILON * (d.abs() + lambda.abs()).max(1.0);
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn gershgorin(&self) -> (f64, f64) {
        let r = 2.0 * self.off.abs();
        let lo = self.diag.iter().fold(f64::INFINITY, |m, d| m.min(d - r));
        let hi = self
            .diag
            .iter()
            .fold(f64::NEG_INFINITY, |m, d| m.max(d + r));
        (lo, hi)
    }

    fn lowest_eigenvalue(&self) -> f64 {
        let (mut lo, mut hi) = self.gershgorin();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Solves (T - shift) x = b by the Thomas algorithm.
    fn solve_shifted(&self, shift: f64, b: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = self.diag[0] - shift;
        c[0] = self.off / denom;
        d[0] = b[0] / denom;
        for j in 1..n {
            denom = self.diag[j] - shift - self.off * c[j - 1];
            if denom == 0.0 {
                denom = f64::EPSILON;
            }
            c[j] = self.off / denom;
            d[j] = (b[j] - self.off * d[j - 1]) / denom;
        }
        for j in (0..n - 1).rev() {
            d[j] -= c[j] * d[j + 1];
        }
        d
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|j| {
                let mut y = self.diag[j] * x[j];
                if j > 0 {
                    y += self.off * x[j - 1];
                }
                if j + 1 < n {
                    y += self.off * x[j + 1];
                }
                y
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundState {
    pub wavefunction: GridWavefunction,
    pub energy: f64,
    pub warnings: Vec<String>,
}

/// Lowest eigenvector of the three-point -½∂² + v, normalised to Σ|ψ|²dx = 1
/// and made positive.
pub fn ground_state_1d(grid: &Grid1d, v_static: &[f64]) -> Result<GroundState> {
    if v_static.len() != grid.n_interior {
        return Err(Error::DimensionMismatch {
            context: "static potential",
            expected: grid.n_interior,
            found: v_static.len(),
        });
    }
    if v_static.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "static potential must be finite".into(),
        ));
    }
    let reference = v_static[0];
    let canonical: Vec<f64> = v_static.iter().map(|v| v - reference).collect();
    let mut warnings = Vec::new();
    let floor = canonical.iter().copied().fold(f64::INFINITY, f64::min);
    let n = canonical.len();
    if canonical[0] <= floor || canonical[n - 1] <= floor {
        let msg =
            "potential does not grow towards the boundary; confinement relies on the hard walls";
        log::warn!("{msg}");
        warnings.push(msg.to_string());
    }

    let t = Tridiagonal::hamiltonian(grid, &canonical);
    let lambda = t.lowest_eigenvalue();
    let (lo, hi) = t.gershgorin();
    let shift = lambda - 1e-10 * (hi - lo).max(1.0);
    let mut x: Vec<f64> = vec![1.0; n];
    for _ in 0..4 {
        x = t.solve_shifted(shift, &x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numerical("inverse iteration broke down".into()));
        }
        x.iter_mut().for_each(|v| *v /= norm);
    }
    let hx = t.apply(&x);
    let energy = x.iter().zip(&hx).map(|(a, b)| a * b).sum::<f64>() + reference;
    let sign = if x.iter().sum::<f64>() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let scale = sign / grid.dx.sqrt();
    Ok(GroundState {
        wavefunction: GridWavefunction {
            grid: *grid,
            psi: x.iter().map(|&v| C64::new(v * scale, 0.0)).collect(),
        },
        energy,
        warnings,
    })
}

/// One Crank–Nicolson step ψ' = (1 + i dt H/2)^-1 (1 - i dt H/2) ψ, with H
/// taken at the midpoint; dt may be negative.
fn crank_nicolson_step(grid: &Grid1d, v_mid: &[f64], dt: f64, psi: &[C64]) -> Vec<C64> {
    let t = Tridiagonal::hamiltonian(grid, v_mid);
    let n = psi.len();
    let a = C64::new(0.0, 0.5 * dt);
    let hpsi = {
        let mut out = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            let mut y = psi[j] * t.diag[j];
            if j > 0 {
                y += psi[j - 1] * t.off;
            }
            if j + 1 < n {
                y += psi[j + 1] * t.off;
            }
            out[j] = y;
        }
        out
    };
    let rhs: Vec<C64> = psi.iter().zip(&hpsi).map(|(p, h)| p - a * h).collect();
    // Thomas on (1 + a H)
    let off = a * t.off;
    let mut c = vec![C64::new(0.0, 0.0); n];
    let mut d = vec![C64::new(0.0, 0.0); n];
    let mut denom = C64::new(1.0, 0.0) + a * t.diag[0];
    c[0] = off / denom;
    d[0] = rhs[0] / denom;
    for j in 1..n {
        denom = C64::new(1.0, 0.0) + a * t.diag[j] - off * c[j - 1];
        c[j] = off / denom;
        d[j] = (rhs[j] - off * d[j - 1]) / denom;
    }
    for j in (0..n - 1).rev() {
        let next = d[j + 1];
        d[j] -= c[j] * next;
    }
    d
}

/// Densities at t = -2dt, -dt, 0, dt, 2dt and the largest norm drift seen.
fn density_stencil(psi0: &GridWavefunction, v: &PotentialField, dt: f64) -> ([Vec<f64>; 5], f64) {
    let grid = &psi0.grid;
    let mut out: [Vec<f64>; 5] = Default::default();
    out[2] = psi0.density();
    let mut drift = 0.0f64;
    for (sign, slots) in [(1.0, [3usize, 4]), (-1.0, [1, 0])] {
        let step = sign * dt;
        let mut psi = psi0.psi.clone();
        let mut t = 0.0;
        for slot in slots {
            psi = crank_nicolson_step(grid, &v.at(t + 0.5 * step), step, &psi);
            t += step;
            let wf = GridWavefunction {
                grid: *grid,
                psi: psi.clone(),
            };
            drift = drift.max((wf.norm_squared().sqrt() - 1.0).abs());
            out[slot] = wf.density();
        }
    }
    (out, drift)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn profile_is_constant(v: &[f64], tol: f64) -> bool {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= tol
}

/// u = ρ0 ∇g and ∇·u with g = ∂_t^k (v - v')|_{t0}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceField {
    pub k: usize,
    pub u: Vec<f64>,
    pub div_u: Vec<f64>,
}

/// Tolerance below which a potential difference counts as a constant.
pub const CONSTANT_TOL: f64 = 1e-12;

/// Builds u for the differentiating order k. Orders below k must differ by at
/// most a constant; order k itself must not. Identical potentials give u ≡ 0.
pub fn compute_u(
    grid: &Grid1d,
    rho0: &[f64],
    v: &PotentialField,
    v_prime: &PotentialField,
    k: usize,
) -> Result<DivergenceField> {
    let n = grid.n_interior;
    if rho0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "ground-state density",
            expected: n,
            found: rho0.len(),
        });
    }
    v.validate(n)?;
    v_prime.validate(n)?;
    let diff = |j: usize| -> Vec<f64> {
        v.time_derivative(j)
            .iter()
            .zip(v_prime.time_derivative(j))
            .map(|(a, b)| a - b)
            .collect()
    };
    for j in 0..k {
        if !profile_is_constant(&diff(j), CONSTANT_TOL) {
            return Err(Error::NotMinimalOrder {
                order: k,
                violating: j,
            });
        }
    }
    let g = diff(k);
    if profile_is_constant(&g, CONSTANT_TOL) {
        let top = v.max_order().max(v_prime.max_order()).max(k);
        let identical = (0..=top).all(|j| max_abs(&diff(j)) <= CONSTANT_TOL);
        if identical {
            return Ok(DivergenceField {
                k,
                u: vec![0.0; n],
                div_u: vec![0.0; n],
            });
        }
        return Err(Error::ConstantDifference { order: k });
    }
    let h = grid.dx;
    let grad: Vec<f64> = (0..n)
        .map(|j| match j {
            0 => (-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * h),
            _ if j == n - 1 => (3.0 * g[j] - 4.0 * g[j - 1] + g[j - 2]) / (2.0 * h),
            _ => (g[j + 1] - g[j - 1]) / (2.0 * h),
        })
        .collect();
    let u: Vec<f64> = rho0.iter().zip(&grad).map(|(r, dg)| r * dg).collect();
    // ρ0 vanishes on the walls, so u does too
    let at = |j: isize| -> f64 {
        if j < 0 || j >= n as isize {
            0.0
        } else {
            u[j as usize]
        }
    };
    let div_u = (0..n as isize)
        .map(|j| (at(j + 1) - at(j - 1)) / (2.0 * h))
        .collect();
    Ok(DivergenceField { k, u, div_u })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RgParams {
    /// Differentiating order; 0 or 1.
    pub k: usize,
    pub dt: f64,
    /// Closed interval on which the identity is also reported separately.
    pub subinterval: Option<(f64, f64)>,
}

impl RgParams {
    pub fn new(dt: f64) -> Self {
        Self {
            k: 0,
            dt,
            subinterval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubintervalReport {
    pub lower: f64,
    pub upper: f64,
    pub max_lhs: f64,
    pub max_div_u: f64,
    pub residual: f64,
    pub relative_residual: f64,
    /// ∇·u does not vanish identically on the subinterval.
    pub div_u_nonzero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RgReport {
    pub dx: f64,
    pub dt: f64,
    pub k: usize,
    pub max_lhs: f64,
    pub max_div_u: f64,
    /// max |∂^{k+2}(ρ-ρ') - ∇·u|
    pub residual: f64,
    pub relative_residual: f64,
    /// The same against -∇·u.
    pub flipped_relative_residual: f64,
    /// Rounding floor of the time-difference stencil.
    pub noise_floor: f64,
    /// Signal does not clear the noise floor.
    pub inconclusive: bool,
    pub norm_drift: f64,
    pub subinterval: Option<SubintervalReport>,
    pub warnings: Vec<String>,
    /// Grid nodes with both sides of the identity at each.
    pub x: Vec<f64>,
    pub lhs: Vec<f64>,
    pub div_u: Vec<f64>,
}

/// Propagates ψ0 under v and v', differentiates ρ - ρ' in time at t0 = 0 and
/// compares with ∇·u. Both potentials are shifted by the same reference
/// constant first, so a common gauge shift leaves the report unchanged.
pub fn check_rg_identity(
    psi0: &GridWavefunction,
    v: &PotentialField,
    v_prime: &PotentialField,
    params: &RgParams,
) -> Result<RgReport> {
    let grid = psi0.grid;
    let n = grid.n_interior;
    if psi0.psi.len() != n {
        return Err(Error::DimensionMismatch {
            context: "wavefunction",
            expected: n,
            found: psi0.psi.len(),
        });
    }
    v.validate(n)?;
    v_prime.validate(n)?;
    if !(params.dt > 0.0 && params.dt.is_finite()) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    let norm = psi0.norm_squared();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput(format!(
            "initial state is not normalised: Σ|ψ|²dx = {norm}"
        )));
    }
    let mut warnings = Vec::new();
    let (weights, denom): (Vec<f64>, f64) = match params.k {
        0 => (
            vec![-1.0, 16.0, -30.0, 16.0, -1.0],
            12.0 * params.dt * params.dt,
        ),
        1 => {
            let msg = "k = 1 uses a third time difference; rounding grows as dt^-3";
            log::warn!("{msg}");
            warnings.push(msg.to_string());
            (vec![-1.0, 2.0, 0.0, -2.0, 1.0], 2.0 * params.dt.powi(3))
        }
        k => {
            return Err(Error::InvalidInput(format!(
                "differentiating order k = {k} is not supported (0 or 1)"
            )))
        }
    };
    if params.dt > 1e-3 {
        warnings.push(format!("dt = {} exceeds the recommended 1e-3", params.dt));
    }

    let reference = v.time_derivative(0)[0];
    let v = v.shifted(reference);
    let v_prime = v_prime.shifted(reference);
    let field = compute_u(&grid, &psi0.density(), &v, &v_prime, params.k)?;

    let ((rho, drift_a), (rho_p, drift_b)) = rayon::join(
        || density_stencil(psi0, &v, params.dt),
        || density_stencil(psi0, &v_prime, params.dt),
    );
    let lhs: Vec<f64> = (0..n)
        .map(|j| {
            weights
                .iter()
                .enumerate()
                .map(|(s, w)| w * (rho[s][j] - rho_p[s][j]))
                .sum::<f64>()
                / denom
        })
        .collect();
    let rho_max = max_abs(&rho[2]);
    let noise_floor = 1e-15 * rho_max * weights.iter().map(|w| w.abs()).sum::<f64>() / denom;
    let max_lhs = max_abs(&lhs);
    let max_div_u = max_abs(&field.div_u);
    let residual = lhs
        .iter()
        .zip(&field.div_u)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let flipped = lhs
        .iter()
        .zip(&field.div_u)
        .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    let scale = max_div_u.max(noise_floor).max(f64::MIN_POSITIVE);
    let inconclusive = max_div_u <= noise_floor && max_lhs <= noise_floor.max(max_div_u);
    if inconclusive {
        warnings.push(format!(
            "signal below noise floor: max |lhs| = {max_lhs:.3e}, max |∇·u| = {max_div_u:.3e}, floor = {noise_floor:.3e}"
        ));
    }

    let subinterval = params.subinterval.map(|(lower, upper)| {
        let idx: Vec<usize> = (0..n)
            .filter(|&j| {
                let x = grid.x(j);
                x >= lower - 1e-12 && x <= upper + 1e-12
            })
            .collect();
        let pick = |f: &dyn Fn(usize) -> f64| idx.iter().fold(0.0f64, |m, &j| m.max(f(j)));
        let max_lhs = pick(&|j| lhs[j].abs());
        let max_div_u = pick(&|j| field.div_u[j].abs());
        let residual = pick(&|j| (lhs[j] - field.div_u[j]).abs());
        SubintervalReport {
            lower,
            upper,
            max_lhs,
            max_div_u,
            residual,
            relative_residual: residual / max_div_u.max(noise_floor).max(f64::MIN_POSITIVE),
            div_u_nonzero: max_div_u > noise_floor,
        }
    });

    Ok(RgReport {
        dx: grid.dx,
        dt: params.dt,
        k: params.k,
        max_lhs,
        max_div_u,
        residual,
        relative_residual: residual / scale,
        flipped_relative_residual: flipped / scale,
        noise_floor,
        inconclusive,
        norm_drift: drift_a.max(drift_b),
        subinterval,
        warnings,
        x: grid.points(),
        lhs,
        div_u: field.div_u,
    })
}

/// The standard benchmark: ground state of v = x²/2 on [-L, L] and
/// v' = v - ε x²/2 (k = 0) or v' = v - ε t x²/2 (k = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmonicBenchmark {
    pub half_width: f64,
    pub epsilon: f64,
    /// Constant added to both potentials.
    pub gauge: f64,
    pub subinterval: Option<(f64, f64)>,
    /// Order at which the potentials first differ: 0 for a static
    /// perturbation, 1 for one switched on linearly in time.
    pub k: usize,
}

impl Default for HarmonicBenchmark {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            epsilon: 0.1,
            gauge: 0.0,
            subinterval: Some((0.5, 1.5)),
            k: 0,
        }
    }
}

impl HarmonicBenchmark {
    pub fn potentials(&self, grid: &Grid1d) -> (PotentialField, PotentialField) {
        let v = grid.sample(|x| 0.5 * x * x + self.gauge);
        let eps = self.epsilon;
        if self.k == 0 {
            let vp = grid.sample(|x| 0.5 * x * x - 0.5 * eps * x * x + self.gauge);
            (
                PotentialField::static_only(v),
                PotentialField::static_only(vp),
            )
        } else {
            let vp = PotentialField::static_only(v.clone())
                .with_term(self.k, grid.sample(|x| -0.5 * eps * x * x));
            (PotentialField::static_only(v), vp)
        }
    }

    pub fn run(&self, dx: f64, dt: f64) -> Result<RgReport> {
        let grid = Grid1d::symmetric(self.half_width, dx)?;
        let (v, vp) = self.potentials(&grid);
        let ground = ground_state_1d(&grid, &v.static_part)?;
        let mut params = RgParams::new(dt);
        params.k = self.k;
        params.subinterval = self.subinterval;
        let mut report = check_rg_identity(&ground.wavefunction, &v, &vp, &params)?;
        report.warnings.extend(ground.warnings);
        Ok(report)
    }
}

pub const DEFAULT_LADDER: [(f64, f64); 3] = [
    (1.0 / 64.0, 5e-4),
    (1.0 / 128.0, 2.5e-4),
    (1.0 / 256.0, 1.25e-4),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderReport {
    pub levels: Vec<RgReport>,
    /// Least-squares slope of log(residual) against log(dx).
    pub fitted_order: f64,
}

/// Runs the benchmark at each (dx, dt) level concurrently.
pub fn refinement_ladder(bench: &HarmonicBenchmark, levels: &[(f64, f64)]) -> Result<LadderReport> {
    if levels.len() < 2 {
        return Err(Error::InvalidInput(
            "a refinement ladder needs at least two levels".into(),
        ));
    }
    let levels = levels
        .par_iter()
        .map(|&(dx, dt)| bench.run(dx, dt))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(f64, f64)> = levels.iter().map(|r| (r.dx, r.relative_residual)).collect();
    Ok(LadderReport {
        fitted_order: fitted_order(&points),
        levels,
    })
}

/// Slope of log(err) against log(h) by least squares.
pub fn fitted_order(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn harmonic_ground_energy() {
        let grid = Grid1d::symmetric(8.0, 1.0 / 64.0).unwrap();
        let gs = ground_state_1d(&grid, &grid.sample(|x| 0.5 * x * x)).unwrap();
        assert!((gs.energy - 0.5).abs() < 1e-4, "{}", gs.energy);
        assert!((gs.wavefunction.norm_squared() - 1.0).abs() < 1e-12);
        assert!(gs.warnings.is_empty());
    }

    #[test]
    fn infinite_well_energy_and_warning() {
        let l = 2.0;
        let dx = 1.0 / 128.0;
        let grid = Grid1d::symmetric(l, dx).unwrap();
        let gs = ground_state_1d(&grid, &vec![0.0; grid.n_interior]).unwrap();
        let exact = PI * PI / (8.0 * l * l);
        // the three-point spectrum is (1 - cos(k dx)) / dx² with k = π / 2L
        let discrete = (1.0 - (PI * dx / (2.0 * l)).cos()) / (dx * dx);
        assert!((gs.energy - discrete).abs() < 1e-10);
        assert!((gs.energy - exact).abs() < 1e-4 * exact);
        assert_eq!(gs.warnings.len(), 1);
    }

    #[test]
    fn symmetric_potential_gives_symmetric_state() {
        let grid = Grid1d::symmetric(6.0, 1.0 / 32.0).unwrap();
        let gs = ground_state_1d(&grid, &grid.sample(|x| 0.3 * x.powi(4) - x * x)).unwrap();
        let psi = &gs.wavefunction.psi;
        let n = psi.len();
        for j in 0..n {
            assert!((psi[j].norm() - psi[n - 1 - j].norm()).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_potentials_give_zero_field() {
        let grid = Grid1d::symmetric(4.0, 1.0 / 16.0).unwrap();
        let v = PotentialField::static_only(grid.sample(|x| 0.5 * x * x));
        let rho = vec![1.0; grid.n_interior];
        let f = compute_u(&grid, &rho, &v, &v, 0).unwrap();
        assert!(f.u.iter().chain(&f.div_u).all(|&x| x == 0.0));
    }

    #[test]
    fn constant_difference_is_rejected() {
        let grid = Grid1d::symmetric(4.0, 1.0 / 16.0).unwrap();
        let v = PotentialField::static_only(grid.sample(|x| 0.5 * x * x));
        let vp = PotentialField::static_only(grid.sample(|x| 0.5 * x * x + 0.3));
        let rho = vec![1.0; grid.n_interior];
        assert!(matches!(
            compute_u(&grid, &rho, &v, &vp, 0),
            Err(Error::ConstantDifference { order: 0 })
        ));
    }

    #[test]
    fn non_minimal_order_names_the_lower_order() {
        let grid = Grid1d::symmetric(4.0, 1.0 / 16.0).unwrap();
        let v = PotentialField::static_only(grid.sample(|x| 0.5 * x * x));
        let vp = PotentialField::static_only(grid.sample(|x| 0.4 * x * x))
            .with_term(1, grid.sample(|x| x));
        let rho = vec![1.0; grid.n_interior];
        assert!(matches!(
            compute_u(&grid, &rho, &v, &vp, 1),
            Err(Error::NotMinimalOrder {
                order: 1,
                violating: 0
            })
        ));
    }

    #[test]
    fn gaussian_divergence_matches_closed_form() {
        let eps = 0.1;
        let mut errors = Vec::new();
        for dx in [1.0 / 32.0, 1.0 / 64.0] {
            let grid = Grid1d::symmetric(8.0, dx).unwrap();
            let rho = grid.sample(|x| (-x * x).exp() / PI.sqrt());
            let v = PotentialField::static_only(grid.sample(|x| 0.5 * eps * x * x));
            let vp = PotentialField::static_only(vec![0.0; grid.n_interior]);
            let f = compute_u(&grid, &rho, &v, &vp, 0).unwrap();
            let err = grid
                .points()
                .iter()
                .zip(&f.div_u)
                .map(|(x, d)| (d - eps * (1.0 - 2.0 * x * x) * (-x * x).exp() / PI.sqrt()).abs())
                .fold(0.0, f64::max);
            errors.push(err);
        }
        assert!(errors[0] < 5e-3);
        let ratio = errors[0] / errors[1];
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn crank_nicolson_conserves_norm_and_reverses() {
        let grid = Grid1d::symmetric(8.0, 1.0 / 32.0).unwrap();
        let v = grid.sample(|x| 0.5 * x * x);
        let gs = ground_state_1d(&grid, &v).unwrap();
        let vp = grid.sample(|x| 0.45 * x * x);
        let mut psi = gs.wavefunction.psi.clone();
        for _ in 0..50 {
            psi = crank_nicolson_step(&grid, &vp, 1e-3, &psi);
        }
        let wf = GridWavefunction {
            grid,
            psi: psi.clone(),
        };
        assert!((wf.norm_squared() - 1.0).abs() < 1e-10);
        for _ in 0..50 {
            psi = crank_nicolson_step(&grid, &vp, -1e-3, &psi);
        }
        let back = psi
            .iter()
            .zip(&gs.wavefunction.psi)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(back < 1e-10, "{back}");
    }

    #[test]
    fn common_constant_changes_nothing() {
        let base = HarmonicBenchmark {
            half_width: 4.0,
            ..HarmonicBenchmark::default()
        };
        let a = base.run(1.0 / 32.0, 5e-4).unwrap();
        for gauge in [2.0, -0.375, 0.1] {
            let b = HarmonicBenchmark { gauge, ..base }
                .run(1.0 / 32.0, 5e-4)
                .unwrap();
            for (name, x, y) in [
                ("residual", a.residual, b.residual),
                (
                    "relative residual",
                    a.relative_residual,
                    b.relative_residual,
                ),
                ("max lhs", a.max_lhs, b.max_lhs),
                ("max div u", a.max_div_u, b.max_div_u),
                ("norm drift", a.norm_drift, b.norm_drift),
            ] {
                assert!(
                    (x - y).abs() <= 1e-12 * x.abs().max(1.0),
                    "gauge {gauge}, {name}: {x:e} vs {y:e}"
                );
            }
            let lhs = a
                .lhs
                .iter()
                .zip(&b.lhs)
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(
                lhs <= 1e-12 * a.max_lhs.max(1.0),
                "gauge {gauge}: lhs moved by {lhs:e}"
            );
        }
    }

    #[test]
    fn fitted_order_of_exact_power_law() {
        let pts = [(0.1, 3e-4), (0.05, 7.5e-5), (0.025, 1.875e-5)];
        assert!((fitted_order(&pts) - 2.0).abs() < 1e-12);
    }
}
