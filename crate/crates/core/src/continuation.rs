//! Analytic continuation of gridded samples by chained Taylor expansions.
//!
//! A [`TaylorModel`] is fitted to samples on a box D, its convergence radius is
//! estimated from the decay of the coefficients, and the expansion point is
//! walked along a path into the target region U. Inside D each new model is
//! refitted from data; outside, it is re-expanded from the previous one by an
//! exact binomial shift. Target nodes take their value from the nearest
//! expansion whose trusted ball contains them.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;
pub const DEFAULT_MAX_ORDER: usize = 10;
pub const DEFAULT_SAFETY: f64 = 0.5;
/// A least-squares fit whose orders above max_order stay below this relative
/// size is treated as an exact polynomial (unbounded radius).
pub const POLYNOMIAL_TAIL: f64 = 1e-10;

/// Exponents γ = (γ_1, …, γ_d) of a mixed partial derivative.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(components: Vec<u32>) -> Self {
        Self(components)
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[u32] {
        &self.0
    }

    /// |γ| = Σ γ_i.
    pub fn order(&self) -> usize {
        self.0.iter().map(|&g| g as usize).sum()
    }

    /// γ! = Π γ_i!, exact; `None` on overflow.
    pub fn factorial(&self) -> Option<u128> {
        let mut acc: u128 = 1;
        for &g in &self.0 {
            for k in 2..=g as u128 {
                acc = acc.checked_mul(k)?;
            }
        }
        Some(acc)
    }

    /// x^γ = Π x_i^γ_i.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .map(|(&g, &xi)| xi.powi(g as i32))
            .product()
    }

    /// All indices of dimension `dim` with |γ| ≤ max_order, by increasing order.
    pub fn all_up_to(dim: usize, max_order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        for order in 0..=max_order {
            let mut current = vec![0u32; dim];
            push_compositions(&mut out, &mut current, 0, order);
        }
        out
    }

    fn dominates(&self, other: &MultiIndex) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }
}

fn push_compositions(
    out: &mut Vec<MultiIndex>,
    current: &mut Vec<u32>,
    axis: usize,
    remaining: usize,
) {
    let dim = current.len();
    if dim == 0 {
        if remaining == 0 {
            out.push(MultiIndex(Vec::new()));
        }
        return;
    }
    if axis == dim - 1 {
        current[axis] = remaining as u32;
        out.push(MultiIndex(current.clone()));
        return;
    }
    for k in (0..=remaining).rev() {
        current[axis] = k as u32;
        push_compositions(out, current, axis + 1, remaining - k);
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Uniform tensor grid; node values are stored with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub spacing: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, spacing: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "dimension must be 1..={MAX_DIM}, got {d}"
            )));
        }
        if spacing.len() != d || counts.len() != d {
            return Err(Error::DimensionMismatch {
                context: "grid axes",
                expected: d,
                found: spacing.len().min(counts.len()),
            });
        }
        if spacing.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidInput("grid spacing must be positive".into()));
        }
        if counts.iter().any(|&n| n < 2) {
            return Err(Error::InvalidInput(
                "every axis needs at least two nodes".into(),
            ));
        }
        Ok(Self {
            lower,
            spacing,
            counts,
        })
    }

    /// `counts[i]` nodes spanning [lower[i], upper[i]] inclusive.
    pub fn spanning(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != counts.len() {
            return Err(Error::DimensionMismatch {
                context: "box corners",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        let spacing = lower
            .iter()
            .zip(upper)
            .zip(counts)
            .map(|((a, b), &n)| (b - a) / (n.max(2) - 1) as f64)
            .collect();
        Self::new(lower.to_vec(), spacing, counts.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn upper(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.lower[i] + self.spacing[i] * (self.counts[i] - 1) as f64)
            .collect()
    }

    pub fn bounds(&self) -> BoxDomain {
        BoxDomain {
            lower: self.lower.clone(),
            upper: self.upper(),
        }
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn linear(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.counts)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn multi(&self, mut linear: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            idx[axis] = linear % self.counts[axis];
            linear /= self.counts[axis];
        }
        idx
    }

    pub fn coord(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(axis, &i)| self.lower[axis] + self.spacing[axis] * i as f64)
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |k| self.coord(&self.multi(k)))
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "box corners",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidInput(
                "box lower corner exceeds upper corner".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&xi, (&a, &b))| xi >= a - slack && xi <= b + slack)
    }

    pub fn hull(&self, other: &BoxDomain) -> BoxDomain {
        BoxDomain {
            lower: self
                .lower
                .iter()
                .zip(&other.lower)
                .map(|(a, b)| a.min(*b))
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    pub fn touches(&self, other: &BoxDomain, slack: f64) -> bool {
        (0..self.dim()).all(|i| {
            self.lower[i] <= other.upper[i] + slack && other.lower[i] <= self.upper[i] + slack
        })
    }

    pub fn diameter(&self) -> f64 {
        distance(&self.lower, &self.upper)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Function values on every node of a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl SampledFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                context: "sample values",
                expected: grid.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sample values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = grid.nodes().map(|x| f(&x)).collect();
        Self::new(grid, values)
    }

    /// Rebuilds the grid from scattered (coordinates, value) rows, which must
    /// cover a complete uniform tensor grid in any order.
    pub fn from_nodes(rows: &[(Vec<f64>, f64)]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidInput("no sample rows".into()))?;
        let d = first.0.len();
        let mut axes: Vec<Vec<f64>> = vec![Vec::new(); d];
        for (x, _) in rows {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "sample row",
                    expected: d,
                    found: x.len(),
                });
            }
            for (axis, &xi) in x.iter().enumerate() {
                axes[axis].push(xi);
            }
        }
        let mut lower = Vec::with_capacity(d);
        let mut spacing = Vec::with_capacity(d);
        let mut counts = Vec::with_capacity(d);
        for (axis, coords) in axes.iter_mut().enumerate() {
            coords.sort_by(f64::total_cmp);
            let extent = coords[coords.len() - 1] - coords[0];
            let tol = 1e-9 * extent.abs().max(1.0);
            coords.dedup_by(|a, b| (*a - *b).abs() <= tol);
            if coords.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "axis {axis} has a single coordinate"
                )));
            }
            let h = extent / (coords.len() - 1) as f64;
            for (k, &c) in coords.iter().enumerate() {
                if (c - (coords[0] + h * k as f64)).abs() > 1e-6 * h {
                    return Err(Error::InvalidInput(format!(
                        "axis {axis} is not uniformly spaced"
                    )));
                }
            }
            lower.push(coords[0]);
            spacing.push(h);
            counts.push(coords.len());
        }
        let grid = Grid::new(lower, spacing, counts)?;
        let mut values = vec![f64::NAN; grid.len()];
        for (x, v) in rows {
            let idx: Vec<usize> = (0..d)
                .map(|axis| ((x[axis] - grid.lower[axis]) / grid.spacing[axis]).round() as usize)
                .collect();
            values[grid.linear(&idx)] = *v;
        }
        if values.iter().any(|v| v.is_nan()) || rows.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows do not form a complete {:?} grid",
                rows.len(),
                grid.counts
            )));
        }
        Self::new(grid, values)
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn domain(&self) -> BoxDomain {
        self.grid.bounds()
    }

    pub fn rows(&self) -> impl Iterator<Item = (Vec<f64>, f64)> + '_ {
        self.grid.nodes().zip(self.values.iter().copied())
    }

    pub fn max_abs_diff(&self, other: &SampledFunction) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::InvalidInput("sample grids differ".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// Least-squares polynomial of degree max_order+2 on a centred tensor
    /// stencil of max_order+4 nodes per axis (rounded up to odd), truncated
    /// to max_order. The stencil stride is the largest that fits in D.
    #[default]
    LeastSquares,
    /// Central finite differences with 2·max_order+3 nodes per axis at unit
    /// stride, i.e. derivatives of the interpolating polynomial.
    FiniteDifference,
}

/// Truncated Taylor expansion Σ_γ a_γ (x - x0)^γ with a_γ = ∂^γ f(x0) / γ!.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorModel {
    pub x0: Vec<f64>,
    pub max_order: usize,
    pub terms: Vec<(MultiIndex, f64)>,
    /// Estimated convergence radius after clamping.
    pub radius_estimate: f64,
    /// Raw estimate before clamping; infinite when the coefficients give no
    /// decay information (e.g. all zero) or the samples are a polynomial of
    /// degree ≤ max_order.
    pub raw_radius: f64,
    /// Largest fitted coefficient above max_order relative to the largest one,
    /// in stencil-scaled units. Zero for finite-difference fits.
    pub fit_tail: f64,
}

impl TaylorModel {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn coeff(&self, gamma: &MultiIndex) -> f64 {
        self.terms
            .iter()
            .find(|(g, _)| g == gamma)
            .map(|(_, c)| *c)
            .unwrap_or(0.0)
    }

    /// ∂^γ f(x0) = γ! a_γ.
    pub fn derivative(&self, gamma: &MultiIndex) -> f64 {
        self.coeff(gamma) * gamma.factorial().map(|f| f as f64).unwrap_or(f64::INFINITY)
    }

    /// Evaluates the polynomial without any radius check.
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let dx: Vec<f64> = x.iter().zip(&self.x0).map(|(a, b)| a - b).collect();
        self.terms.iter().map(|(g, c)| c * g.monomial(&dx)).sum()
    }

    /// Evaluates only inside the trusted ball |x - x0| < safety · radius.
    pub fn eval(&self, x: &[f64], safety: f64) -> Result<f64> {
        let distance = distance(x, &self.x0);
        let allowed = safety * self.radius_estimate;
        if distance >= allowed && distance > 0.0 {
            return Err(Error::RadiusExceeded {
                center: self.x0.clone(),
                distance,
                allowed,
            });
        }
        Ok(self.eval_unchecked(x))
    }

    /// Re-expands the same polynomial about `x1` (exact binomial shift).
    pub fn shifted(&self, x1: &[f64]) -> TaylorModel {
        let delta: Vec<f64> = x1.iter().zip(&self.x0).map(|(a, b)| a - b).collect();
        let terms = self
            .terms
            .iter()
            .map(|(beta, _)| {
                let value = self
                    .terms
                    .iter()
                    .filter(|(gamma, _)| gamma.dominates(beta))
                    .map(|(gamma, a)| {
                        let weight: f64 = gamma
                            .0
                            .iter()
                            .zip(&beta.0)
                            .zip(&delta)
                            .map(|((&g, &b), &d)| binomial(g, b) * d.powi((g - b) as i32))
                            .product();
                        a * weight
                    })
                    .sum();
                (beta.clone(), value)
            })
            .collect();
        TaylorModel {
            x0: x1.to_vec(),
            max_order: self.max_order,
            terms,
            radius_estimate: self.radius_estimate,
            raw_radius: self.raw_radius,
            fit_tail: self.fit_tail,
        }
    }

    /// Largest order carrying a coefficient above `rel` times the largest one.
    pub fn effective_order(&self, rel: f64) -> usize {
        let scale = self.terms.iter().map(|(_, c)| c.abs()).fold(0.0, f64::max);
        self.terms
            .iter()
            .filter(|(_, c)| c.abs() > rel * scale)
            .map(|(g, _)| g.order())
            .max()
            .unwrap_or(0)
    }

    fn set_radius(&mut self, lower: f64, upper: f64) {
        self.raw_radius = estimate_radius(&self.terms, self.dim(), self.max_order);
        self.radius_estimate = self.raw_radius.clamp(lower, upper.max(lower));
    }
}

fn slice_directions(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0]],
        2 => (0..8)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 8.0;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut dirs = Vec::new();
            for a in -1i32..=1 {
                for b in -1i32..=1 {
                    for c in -1i32..=1 {
                        let v = [a, b, c];
                        let first = v.iter().find(|&&x| x != 0);
                        if first == Some(&1) {
                            let n = ((a * a + b * b + c * c) as f64).sqrt();
                            dirs.push(v.iter().map(|&x| x as f64 / n).collect());
                        }
                    }
                }
            }
            dirs
        }
    }
}

/// Cauchy–Hadamard estimate on directional slices: along a unit direction e
/// the series has coefficients b_k = Σ_{|γ|=k} a_γ e^γ, and the radius is
/// 1 / max_{k ≥ N/2} (|b_k| / |b_j|)^{1/(k-j)}, with b_j the largest of the
/// lower-half coefficients. The smallest radius over the directions is
/// returned; infinity if no slice shows any decay data.
pub fn estimate_radius(terms: &[(MultiIndex, f64)], dim: usize, max_order: usize) -> f64 {
    if max_order == 0 {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    for dir in slice_directions(dim) {
        let mut slice = vec![0.0; max_order + 1];
        for (gamma, a) in terms {
            slice[gamma.order()] += a * gamma.monomial(&dir);
        }
        let start = max_order.div_ceil(2).max(1);
        let (pivot, scale) = slice[..start]
            .iter()
            .enumerate()
            .map(|(j, b)| (j, b.abs()))
            .fold(
                (0, 0.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if scale == 0.0 {
            continue;
        }
        let rho = (start..=max_order)
            .map(|k| (slice[k].abs() / scale).powf(1.0 / (k - pivot) as f64))
            .fold(0.0, f64::max);
        if rho > 0.0 {
            best = best.min(1.0 / rho);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitOptions {
    pub max_order: usize,
    pub method: FitMethod,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_order: DEFAULT_MAX_ORDER,
            method: FitMethod::LeastSquares,
        }
    }
}

impl FitOptions {
    pub fn new(max_order: usize) -> Self {
        Self {
            max_order,
            ..Self::default()
        }
    }

    fn nodes_per_axis(&self) -> usize {
        match self.method {
            FitMethod::LeastSquares => (self.max_order + 4) | 1,
            FitMethod::FiniteDifference => 2 * self.max_order + 3,
        }
    }
}

/// Centre node and stride per axis for a stencil about `x0`, if it fits.
fn stencil_layout(grid: &Grid, x0: &[f64], opts: &FitOptions) -> Option<Vec<(usize, usize)>> {
    let half = opts.nodes_per_axis() / 2;
    let mut layout = Vec::with_capacity(grid.dim());
    for axis in 0..grid.dim() {
        let pos = (x0[axis] - grid.lower[axis]) / grid.spacing[axis];
        let n = grid.counts[axis];
        if !(pos >= -1e-9 && pos <= (n - 1) as f64 + 1e-9) {
            return None;
        }
        let centre = (pos.round() as usize).min(n - 1);
        let room = centre.min(n - 1 - centre);
        let stride = match opts.method {
            FitMethod::LeastSquares => room / half,
            FitMethod::FiniteDifference => usize::from(room >= half),
        };
        if stride == 0 {
            return None;
        }
        layout.push((centre, stride));
    }
    Some(layout)
}

/// Fits a truncated Taylor model to the samples about `x0`. The radius is
/// clamped to [min grid spacing, `radius_cap`] (defaults to diam D).
pub fn fit_taylor(samples: &SampledFunction, x0: &[f64], opts: &FitOptions) -> Result<TaylorModel> {
    fit_taylor_capped(samples, x0, opts, samples.domain().diameter())
}

fn fit_taylor_capped(
    samples: &SampledFunction,
    x0: &[f64],
    opts: &FitOptions,
    radius_cap: f64,
) -> Result<TaylorModel> {
    let grid = &samples.grid;
    if x0.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            context: "expansion point",
            expected: grid.dim(),
            found: x0.len(),
        });
    }
    let layout = stencil_layout(grid, x0, opts)
        .ok_or_else(|| Error::StencilOutOfBounds { point: x0.to_vec() })?;
    let (terms, fit_tail) = match opts.method {
        FitMethod::LeastSquares => least_squares_terms(samples, x0, opts, &layout)?,
        FitMethod::FiniteDifference => (finite_difference_terms(samples, x0, opts, &layout), 0.0),
    };
    let mut model = TaylorModel {
        x0: x0.to_vec(),
        max_order: opts.max_order,
        terms,
        radius_estimate: 0.0,
        raw_radius: 0.0,
        fit_tail,
    };
    model.set_radius(grid.min_spacing(), radius_cap);
    if opts.method == FitMethod::LeastSquares && fit_tail < POLYNOMIAL_TAIL {
        model.raw_radius = f64::INFINITY;
        model.radius_estimate = radius_cap.max(grid.min_spacing());
    }
    Ok(model)
}

fn stencil_nodes(grid: &Grid, layout: &[(usize, usize)], per_axis: usize) -> Vec<Vec<usize>> {
    let half = (per_axis / 2) as isize;
    let d = grid.dim();
    let total = per_axis.pow(d as u32);
    (0..total)
        .map(|mut k| {
            let mut idx = vec![0usize; d];
            for axis in (0..d).rev() {
                let offset = (k % per_axis) as isize - half;
                k /= per_axis;
                let (centre, stride) = layout[axis];
                idx[axis] = (centre as isize + offset * stride as isize) as usize;
            }
            idx
        })
        .collect()
}

fn least_squares_terms(
    samples: &SampledFunction,
    x0: &[f64],
    opts: &FitOptions,
    layout: &[(usize, usize)],
) -> Result<(Vec<(MultiIndex, f64)>, f64)> {
    let grid = &samples.grid;
    let per_axis = opts.nodes_per_axis();
    let half = per_axis / 2;
    let scale: Vec<f64> = layout
        .iter()
        .enumerate()
        .map(|(axis, &(_, stride))| grid.spacing[axis] * (stride * half) as f64)
        .collect();
    let degree = opts.max_order + 2;
    let basis = MultiIndex::all_up_to(grid.dim(), degree);
    let nodes = stencil_nodes(grid, layout, per_axis);
    let mut a = DMatrix::<f64>::zeros(nodes.len(), basis.len());
    let mut b = DVector::<f64>::zeros(nodes.len());
    for (row, idx) in nodes.iter().enumerate() {
        let xi: Vec<f64> = grid
            .coord(idx)
            .iter()
            .zip(x0)
            .zip(&scale)
            .map(|((x, c), s)| (x - c) / s)
            .collect();
        let values: Vec<Vec<f64>> = xi.iter().map(|&t| legendre_values(t, degree)).collect();
        for (col, gamma) in basis.iter().enumerate() {
            a[(row, col)] = gamma
                .0
                .iter()
                .zip(&values)
                .map(|(&g, v)| v[g as usize])
                .product();
        }
        b[row] = samples.values[grid.linear(idx)];
    }
    let qr = a.qr();
    let rhs = qr.q().transpose() * b;
    let d = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Numerical("rank-deficient least-squares stencil".into()))?;
    // Legendre products -> monomials in the scaled coordinates
    let table = legendre_table(degree);
    let c: Vec<f64> = basis
        .iter()
        .map(|beta| {
            basis
                .iter()
                .zip(d.iter())
                .filter(|(gamma, _)| gamma.dominates(beta))
                .map(|(gamma, &dg)| {
                    dg * gamma
                        .0
                        .iter()
                        .zip(&beta.0)
                        .map(|(&g, &b)| table[g as usize][b as usize])
                        .product::<f64>()
                })
                .sum()
        })
        .collect();
    let largest = c.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let tail = basis
        .iter()
        .zip(c.iter())
        .filter(|(gamma, _)| gamma.order() > opts.max_order)
        .map(|(_, x)| x.abs())
        .fold(0.0, f64::max);
    let fit_tail = if largest > 0.0 { tail / largest } else { 0.0 };
    let terms = basis
        .into_iter()
        .zip(c.iter())
        .filter(|(gamma, _)| gamma.order() <= opts.max_order)
        .map(|(gamma, &ci)| {
            let denom: f64 = gamma
                .0
                .iter()
                .zip(&scale)
                .map(|(&g, s)| s.powi(g as i32))
                .product();
            (gamma, ci / denom)
        })
        .collect();
    Ok((terms, fit_tail))
}

/// P_0(t), …, P_n(t).
fn legendre_values(t: f64, n: usize) -> Vec<f64> {
    let mut p = vec![1.0; n + 1];
    if n >= 1 {
        p[1] = t;
    }
    for k in 1..n {
        p[k + 1] = ((2 * k + 1) as f64 * t * p[k] - k as f64 * p[k - 1]) / (k + 1) as f64;
    }
    p
}

/// Monomial coefficients: `table[n][k]` is the coefficient of t^k in P_n(t).
fn legendre_table(n: usize) -> Vec<Vec<f64>> {
    let mut table = vec![vec![0.0; n + 1]; n + 1];
    table[0][0] = 1.0;
    if n >= 1 {
        table[1][1] = 1.0;
    }
    for k in 1..n {
        for j in 0..=n {
            let shifted = if j > 0 { table[k][j - 1] } else { 0.0 };
            table[k + 1][j] =
                ((2 * k + 1) as f64 * shifted - k as f64 * table[k - 1][j]) / (k + 1) as f64;
        }
    }
    table
}

/// Fornberg weights: `w[k][j]` is the weight of node j in the k-th derivative
/// at `z` of the interpolating polynomial through `nodes`.
pub fn fornberg_weights(z: f64, nodes: &[f64], max_deriv: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; n]; max_deriv + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - z;
    for i in 1..n {
        let mn = i.min(max_deriv);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - z;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

fn finite_difference_terms(
    samples: &SampledFunction,
    x0: &[f64],
    opts: &FitOptions,
    layout: &[(usize, usize)],
) -> Vec<(MultiIndex, f64)> {
    let grid = &samples.grid;
    let per_axis = opts.nodes_per_axis();
    let half = (per_axis / 2) as isize;
    let weights: Vec<Vec<Vec<f64>>> = layout
        .iter()
        .enumerate()
        .map(|(axis, &(centre, _))| {
            let nodes: Vec<f64> = (-half..=half)
                .map(|o| grid.lower[axis] + grid.spacing[axis] * (centre as isize + o) as f64)
                .collect();
            fornberg_weights(x0[axis], &nodes, opts.max_order)
        })
        .collect();
    let nodes = stencil_nodes(grid, layout, per_axis);
    MultiIndex::all_up_to(grid.dim(), opts.max_order)
        .into_iter()
        .map(|gamma| {
            let deriv: f64 = nodes
                .iter()
                .enumerate()
                .map(|(flat, idx)| {
                    let mut k = flat;
                    let mut w = 1.0;
                    for axis in (0..grid.dim()).rev() {
                        let j = k % per_axis;
                        k /= per_axis;
                        w *= weights[axis][gamma.0[axis] as usize][j];
                    }
                    w * samples.values[grid.linear(idx)]
                })
                .sum();
            let fact = gamma.factorial().map(|f| f as f64).unwrap_or(f64::INFINITY);
            (gamma, deriv / fact)
        })
        .collect()
}

/// Ball around a declared non-analytic point that paths must avoid.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Exclusion {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationParams {
    pub fit: FitOptions,
    /// Step length as a fraction of the current radius estimate, in (0, 1).
    pub step_fraction: f64,
    /// Evaluation is trusted only within safety · radius of an expansion point.
    pub safety: f64,
    pub exclusions: Vec<Exclusion>,
    pub max_steps: usize,
    /// A walk refits from data only when the new stencil spans at least this
    /// fraction of the first stencil on the path; otherwise it shifts.
    pub min_refit_span: f64,
}

impl Default for ContinuationParams {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            step_fraction: 0.5,
            safety: DEFAULT_SAFETY,
            exclusions: Vec::new(),
            max_steps: 100_000,
            min_refit_span: 0.5,
        }
    }
}

impl ContinuationParams {
    pub fn new(max_order: usize, step_fraction: f64) -> Self {
        Self {
            fit: FitOptions::new(max_order),
            step_fraction,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "step_fraction must lie in (0, 1), got {}",
                self.step_fraction
            )));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "safety must lie in (0, 1], got {}",
                self.safety
            )));
        }
        if self.exclusions.iter().any(|e| !(e.radius > 0.0)) {
            return Err(Error::InvalidInput(
                "exclusion radii must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Distance from x to the nearest exclusion ball (infinite if none).
    fn clearance(&self, x: &[f64]) -> f64 {
        self.exclusions
            .iter()
            .map(|e| distance(x, &e.center) - e.radius)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    Data,
    Shift,
}

/// Per-expansion diagnostics of a continuation walk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub x0: Vec<f64>,
    pub source: ModelSource,
    pub radius: f64,
    pub raw_radius: f64,
    /// Trusted radius actually used (after exclusions and safety).
    pub trusted: f64,
    /// Largest order with a coefficient above 1e-14 of the largest one.
    pub max_order_used: usize,
    /// max |a_γ| over |γ| = N relative to max |a_γ| over all γ.
    pub top_order_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationResult {
    pub values: SampledFunction,
    pub steps: Vec<StepDiagnostics>,
}

fn diagnostics(model: &TaylorModel, source: ModelSource, trusted: f64) -> StepDiagnostics {
    let scale = model.terms.iter().map(|(_, c)| c.abs()).fold(0.0, f64::max);
    let top = model
        .terms
        .iter()
        .filter(|(g, _)| g.order() == model.max_order)
        .map(|(_, c)| c.abs())
        .fold(0.0, f64::max);
    StepDiagnostics {
        x0: model.x0.clone(),
        source,
        radius: model.radius_estimate,
        raw_radius: model.raw_radius,
        trusted,
        max_order_used: model.effective_order(1e-14),
        top_order_decay: if scale > 0.0 { top / scale } else { 0.0 },
    }
}

fn check_connected(d: &BoxDomain, u: &BoxDomain, path: &[Vec<f64>], slack: f64) -> Result<()> {
    if !d.touches(u, slack) {
        return Err(Error::NotConnected(
            "target box does not touch the sample box".into(),
        ));
    }
    for seg in path.windows(2) {
        for k in 0..=64 {
            let s = k as f64 / 64.0;
            let x: Vec<f64> = seg[0]
                .iter()
                .zip(&seg[1])
                .map(|(a, b)| a + s * (b - a))
                .collect();
            if !(d.contains(&x, slack) || u.contains(&x, slack)) {
                return Err(Error::NotConnected(format!("path leaves D ∪ U near {x:?}")));
            }
        }
    }
    Ok(())
}

/// Models along the walk with their trusted radii.
type Chain = Vec<(TaylorModel, f64)>;

/// Walks the expansion point along each path, collecting the chain of models.
fn walk(
    samples: &SampledFunction,
    target: &Grid,
    paths: &[Vec<Vec<f64>>],
    params: &ContinuationParams,
) -> Result<(Chain, Vec<StepDiagnostics>)> {
    params.validate()?;
    let d_box = samples.domain();
    let u_box = target.bounds();
    if target.dim() != samples.dim() {
        return Err(Error::DimensionMismatch {
            context: "target grid",
            expected: samples.dim(),
            found: target.dim(),
        });
    }
    let spacing = samples.grid.min_spacing();
    let slack = 1e-9 * d_box.hull(&u_box).diameter();
    let cap = d_box.hull(&u_box).diameter();
    let mut chain = Vec::new();
    let mut diags = Vec::new();
    for path in paths {
        if path.is_empty() || path.iter().any(|p| p.len() != samples.dim()) {
            return Err(Error::InvalidInput(
                "path points must match the sample dimension".into(),
            ));
        }
        let interior =
            (0..samples.dim()).all(|i| path[0][i] > d_box.lower[i] && path[0][i] < d_box.upper[i]);
        if !interior {
            return Err(Error::InvalidInput(format!(
                "path must start strictly inside D, got {:?}",
                path[0]
            )));
        }
        check_connected(&d_box, &u_box, path, slack)?;
        for x in path {
            if params.clearance(x) <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "path vertex {x:?} lies inside an exclusion"
                )));
            }
        }

        let mut model = fit_taylor_capped(samples, &path[0], &params.fit, cap)?;
        let first_strides: Vec<usize> = stencil_layout(&samples.grid, &path[0], &params.fit)
            .map(|l| l.iter().map(|&(_, s)| s).collect())
            .unwrap_or_default();
        let refit_allowed = |x: &[f64]| {
            stencil_layout(&samples.grid, x, &params.fit).is_some_and(|layout| {
                layout
                    .iter()
                    .zip(&first_strides)
                    .all(|(&(_, s), &s0)| s as f64 >= params.min_refit_span * s0 as f64)
            })
        };
        let mut source = ModelSource::Data;
        let mut seg = 0usize;
        let mut along = 0.0;
        let mut steps = 0usize;
        loop {
            if model.raw_radius < spacing {
                return Err(Error::RadiusCollapse {
                    reached: model.x0.clone(),
                    radius: model.raw_radius,
                });
            }
            let clearance = params.clearance(&model.x0);
            if clearance <= 0.0 {
                return Err(Error::NotConnected(format!(
                    "path enters an exclusion at {:?}",
                    model.x0
                )));
            }
            let reach = model.radius_estimate.min(clearance);
            let trusted = params.safety * reach;
            diags.push(diagnostics(&model, source, trusted));
            chain.push((model.clone(), trusted));

            // advance along the polyline by step_fraction · reach
            let mut remaining = params.step_fraction * reach;
            let mut next = None;
            while seg + 1 < path.len() {
                let len = distance(&path[seg], &path[seg + 1]);
                if len - along > remaining {
                    along += remaining;
                    let s = along / len;
                    next = Some(
                        path[seg]
                            .iter()
                            .zip(&path[seg + 1])
                            .map(|(a, b)| a + s * (b - a))
                            .collect::<Vec<f64>>(),
                    );
                    break;
                }
                remaining -= len - along;
                seg += 1;
                along = 0.0;
            }
            let next = match next {
                Some(x) => x,
                None => {
                    let end = path[path.len() - 1].clone();
                    if distance(&end, &model.x0) <= 1e-12 * cap {
                        break;
                    }
                    end
                }
            };
            steps += 1;
            if steps > params.max_steps {
                return Err(Error::RadiusCollapse {
                    reached: model.x0.clone(),
                    radius: model.radius_estimate,
                });
            }
            model = if refit_allowed(&next) {
                source = ModelSource::Data;
                fit_taylor_capped(samples, &next, &params.fit, cap)?
            } else {
                let mut m = model.shifted(&next);
                if model.raw_radius.is_finite() {
                    m.set_radius(spacing, cap);
                }
                source = ModelSource::Shift;
                m
            };
        }
    }
    Ok((chain, diags))
}

/// Continues the samples onto `target` along one or more polyline paths that
/// start inside D and stay inside D ∪ U.
pub fn continue_along_paths(
    samples: &SampledFunction,
    target: &Grid,
    paths: &[Vec<Vec<f64>>],
    params: &ContinuationParams,
) -> Result<ContinuationResult> {
    let (chain, steps) = walk(samples, target, paths, params)?;
    let mut values = Vec::with_capacity(target.len());
    for x in target.nodes() {
        let mut best: Option<(f64, &TaylorModel)> = None;
        let mut nearest: Option<(f64, &TaylorModel, f64)> = None;
        for (model, trusted) in &chain {
            let dist = distance(&x, &model.x0);
            if nearest.is_none_or(|(d, _, _)| dist < d) {
                nearest = Some((dist, model, *trusted));
            }
            if dist < *trusted && best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, model));
            }
        }
        match best {
            Some((_, model)) => values.push(model.eval_unchecked(&x)),
            None => {
                let (distance, model, allowed) = nearest.expect("walk yields at least one model");
                return Err(Error::RadiusExceeded {
                    center: model.x0.clone(),
                    distance,
                    allowed,
                });
            }
        }
    }
    Ok(ContinuationResult {
        values: SampledFunction::new(target.clone(), values)?,
        steps,
    })
}

pub fn continue_along_path(
    samples: &SampledFunction,
    target: &Grid,
    path: &[Vec<f64>],
    params: &ContinuationParams,
) -> Result<ContinuationResult> {
    continue_along_paths(samples, target, &[path.to_vec()], params)
}

/// A single expansion at `x0` evaluated on every target node, with the radius
/// gate applied.
pub fn single_expansion(
    samples: &SampledFunction,
    x0: &[f64],
    target: &Grid,
    params: &ContinuationParams,
) -> Result<SampledFunction> {
    params.validate()?;
    let cap = samples.domain().hull(&target.bounds()).diameter();
    let model = fit_taylor_capped(samples, x0, &params.fit, cap)?;
    let values = target
        .nodes()
        .map(|x| model.eval(&x, params.safety))
        .collect::<Result<Vec<_>>>()?;
    SampledFunction::new(target.clone(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub tol_agree: f64,
    pub max_diff_on_d: f64,
    pub agree_on_d: bool,
    /// Present only when the samples agree on D.
    pub max_diff_on_u: Option<f64>,
    pub steps_f: Vec<StepDiagnostics>,
    pub steps_g: Vec<StepDiagnostics>,
}

/// Compares f and g on D; if they agree within `tol_agree`, continues both to
/// U along the same paths and reports how far the continuations differ.
pub fn certify_uniqueness(
    f: &SampledFunction,
    g: &SampledFunction,
    target: &Grid,
    paths: &[Vec<Vec<f64>>],
    params: &ContinuationParams,
    tol_agree: f64,
) -> Result<UniquenessReport> {
    let max_diff_on_d = f.max_abs_diff(g)?;
    let agree_on_d = max_diff_on_d < tol_agree;
    if !agree_on_d {
        return Ok(UniquenessReport {
            tol_agree,
            max_diff_on_d,
            agree_on_d,
            max_diff_on_u: None,
            steps_f: Vec::new(),
            steps_g: Vec::new(),
        });
    }
    let cf = continue_along_paths(f, target, paths, params)?;
    let cg = continue_along_paths(g, target, paths, params)?;
    Ok(UniquenessReport {
        tol_agree,
        max_diff_on_d,
        agree_on_d,
        max_diff_on_u: Some(cf.values.max_abs_diff(&cg.values)?),
        steps_f: cf.steps,
        steps_g: cg.steps,
    })
}

/// Lookup from multi-index to term position.
pub fn term_index(model: &TaylorModel) -> HashMap<MultiIndex, usize> {
    model
        .terms
        .iter()
        .enumerate()
        .map(|(k, (g, _))| (g.clone(), k))
        .collect()
}
