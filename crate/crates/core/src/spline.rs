//! Uniform B-spline edge activations.
//!
//! Every edge of a KAN layer carries a function
//! `phi(x) = w_base * silu(x) + w_spline * sum_i c_i * B_i(x)`
//! where the `B_i` are degree-`k` B-splines on a uniform knot grid shared by
//! the whole layer. The grid covers `[range_lo, range_hi]` with `G` intervals
//! and is extended by `k` knots on each side. Outside the extended knot span
//! every basis function is zero, so only the base residual remains.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Highest spline degree supported by the stack-allocated evaluator.
pub const MAX_DEGREE: usize = 7;

/// Standard deviation of the initial spline coefficients.
pub const COEFF_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct KnotGrid {
    range_lo: f64,
    range_hi: f64,
    grid_size: usize,
    degree: usize,
    spacing: f64,
    knots: Vec<f64>,
}

/// Serialized form of a grid; the knots are always rebuilt from it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub range_lo: f64,
    pub range_hi: f64,
    pub grid_size: usize,
    pub degree: usize,
}

impl TryFrom<GridSpec> for KnotGrid {
    type Error = KanError;

    fn try_from(spec: GridSpec) -> Result<Self> {
        KnotGrid::new(spec.range_lo, spec.range_hi, spec.grid_size, spec.degree)
    }
}

impl From<KnotGrid> for GridSpec {
    fn from(grid: KnotGrid) -> Self {
        grid.spec()
    }
}

impl KnotGrid {
    /// Builds the uniform knot vector of length `G + 2k + 1` spanning
    /// `[lo - k*h, hi + k*h]` with `h = (hi - lo) / G`.
    pub fn new(range_lo: f64, range_hi: f64, grid_size: usize, degree: usize) -> Result<Self> {
        if !range_lo.is_finite() || !range_hi.is_finite() {
            return Err(KanError::invalid("grid bounds must be finite"));
        }
        if range_lo >= range_hi {
            return Err(KanError::invalid(format!(
                "grid range must satisfy lo < hi, got [{range_lo}, {range_hi}]"
            )));
        }
        if grid_size == 0 {
            return Err(KanError::invalid("grid size must be at least 1"));
        }
        if degree > MAX_DEGREE {
            return Err(KanError::invalid(format!(
                "spline degree {degree} exceeds the supported maximum {MAX_DEGREE}"
            )));
        }
        let spacing = (range_hi - range_lo) / grid_size as f64;
        let knots = (0..grid_size + 2 * degree + 1)
            .map(|i| knot_at(range_lo, spacing, degree, i as isize))
            .collect();
        Ok(KnotGrid {
            range_lo,
            range_hi,
            grid_size,
            degree,
            spacing,
            knots,
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            range_lo: self.range_lo,
            range_hi: self.range_hi,
            grid_size: self.grid_size,
            degree: self.degree,
        }
    }

    pub fn range_lo(&self) -> f64 {
        self.range_lo
    }

    pub fn range_hi(&self) -> f64 {
        self.range_hi
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn basis_count(&self) -> usize {
        self.grid_size + self.degree
    }

    /// Basis values and first derivatives at `x`.
    pub fn basis_eval(&self, x: f64) -> Result<BasisEval> {
        if !x.is_finite() {
            return Err(KanError::invalid(format!("basis input must be finite, got {x}")));
        }
        let mut out = BasisEval {
            values: vec![0.0; self.basis_count()],
            derivs: vec![0.0; self.basis_count()],
        };
        self.eval_into(x, &mut out.values, Some(&mut out.derivs));
        Ok(out)
    }

    /// Fills `values` (and `derivs` when given) with the basis at `x`.
    ///
    /// Both slices must have length `basis_count()`; `x` must be finite.
    /// Only the `k + 1` functions whose support contains `x` are computed,
    /// using the triangular Cox-de Boor scheme on the active knot span.
    pub fn eval_into(&self, x: f64, values: &mut [f64], mut derivs: Option<&mut [f64]>) {
        debug_assert_eq!(values.len(), self.basis_count());
        values.fill(0.0);
        if let Some(d) = derivs.as_deref_mut() {
            d.fill(0.0);
        }

        let k = self.degree;
        let last = self.knots.len() - 1;
        if !(x >= self.knots[0] && x < self.knots[last]) {
            return;
        }

        // Active span j: knots[j] <= x < knots[j + 1].
        let mut span = (((x - self.knots[0]) / self.spacing).floor() as isize).clamp(0, last as isize - 1);
        if x < self.knots[span as usize] {
            span -= 1;
        } else if x >= self.knots[span as usize + 1] {
            span += 1;
        }
        let span = span.clamp(0, last as isize - 1);

        let knot = |i: isize| knot_at(self.range_lo, self.spacing, k, i);

        // n[r] holds B_{span-d+r, d}(x) after processing degree d.
        let mut n = [0.0f64; MAX_DEGREE + 1];
        let mut prev = [0.0f64; MAX_DEGREE + 1];
        let mut left = [0.0f64; MAX_DEGREE + 1];
        let mut right = [0.0f64; MAX_DEGREE + 1];
        n[0] = 1.0;
        for d in 1..=k {
            if d == k {
                prev[..k].copy_from_slice(&n[..k]);
            }
            left[d] = x - knot(span + 1 - d as isize);
            right[d] = knot(span + d as isize) - x;
            let mut saved = 0.0;
            for r in 0..d {
                let temp = n[r] / (right[r + 1] + left[d - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[d - r] * temp;
            }
            n[d] = saved;
        }

        let count = self.basis_count() as isize;
        for r in 0..=k {
            let i = span - k as isize + r as isize;
            if i < 0 || i >= count {
                continue;
            }
            values[i as usize] = n[r];
            if let Some(d) = derivs.as_deref_mut() {
                if k > 0 {
                    let lower = if r >= 1 { prev[r - 1] } else { 0.0 };
                    let upper = if r < k { prev[r] } else { 0.0 };
                    d[i as usize] = (lower - upper) / self.spacing;
                }
            }
        }
    }
}

#[inline]
fn knot_at(lo: f64, spacing: f64, degree: usize, i: isize) -> f64 {
    lo + (i - degree as isize) as f64 * spacing
}

/// Dense basis values and derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
}

/// Reusable buffers for evaluating one grid many times.
#[derive(Debug, Clone)]
pub struct BasisScratch {
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
}

impl BasisScratch {
    pub fn new(grid: &KnotGrid) -> Self {
        BasisScratch {
            values: vec![0.0; grid.basis_count()],
            derivs: vec![0.0; grid.basis_count()],
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// One trainable edge function. The knot grid lives in the owning layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeActivation {
    pub coeffs: Vec<f64>,
    pub w_base: f64,
    pub w_spline: f64,
}

/// Partial derivatives of one edge evaluation, already scaled by the upstream gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGrad {
    pub d_x: f64,
    pub d_coeffs: Vec<f64>,
    pub d_w_base: f64,
    pub d_w_spline: f64,
}

impl EdgeActivation {
    /// Coefficients drawn from `Normal(0, 0.1)`, both weights set to 1.
    pub fn init<R: Rng + ?Sized>(grid: &KnotGrid, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, COEFF_INIT_STD).expect("valid normal parameters");
        EdgeActivation {
            coeffs: (0..grid.basis_count()).map(|_| normal.sample(rng)).collect(),
            w_base: 1.0,
            w_spline: 1.0,
        }
    }

    pub fn zeros(grid: &KnotGrid) -> Self {
        EdgeActivation {
            coeffs: vec![0.0; grid.basis_count()],
            w_base: 0.0,
            w_spline: 0.0,
        }
    }

    /// Number of trainable scalars: coefficients plus the two weights.
    pub fn param_count(&self) -> usize {
        self.coeffs.len() + 2
    }

    fn check(&self, x: f64, grid: &KnotGrid) -> Result<()> {
        if !x.is_finite() {
            return Err(KanError::invalid(format!("edge input must be finite, got {x}")));
        }
        if self.coeffs.len() != grid.basis_count() {
            return Err(KanError::invalid(format!(
                "edge has {} coefficients but the grid has {} basis functions",
                self.coeffs.len(),
                grid.basis_count()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: f64, grid: &KnotGrid) -> Result<f64> {
        self.check(x, grid)?;
        let mut scratch = BasisScratch::new(grid);
        Ok(self.forward_with(x, grid, &mut scratch))
    }

    /// Unchecked evaluation reusing `scratch`; `x` must be finite.
    pub fn forward_with(&self, x: f64, grid: &KnotGrid, scratch: &mut BasisScratch) -> f64 {
        grid.eval_into(x, &mut scratch.values, None);
        self.w_base * silu(x) + self.w_spline * dot(&self.coeffs, &scratch.values)
    }

    pub fn backward(&self, x: f64, grid: &KnotGrid, upstream: f64) -> Result<EdgeGrad> {
        self.check(x, grid)?;
        let mut scratch = BasisScratch::new(grid);
        let mut grad = vec![0.0; self.param_count()];
        let d_x = self.accumulate_backward(x, grid, upstream, &mut scratch, &mut grad);
        let n = self.coeffs.len();
        Ok(EdgeGrad {
            d_x,
            d_coeffs: grad[..n].to_vec(),
            d_w_base: grad[n],
            d_w_spline: grad[n + 1],
        })
    }

    /// Adds this edge's parameter gradients into `grad` (layout: coeffs, w_base,
    /// w_spline) and returns the gradient with respect to the input.
    pub fn accumulate_backward(
        &self,
        x: f64,
        grid: &KnotGrid,
        upstream: f64,
        scratch: &mut BasisScratch,
        grad: &mut [f64],
    ) -> f64 {
        if upstream == 0.0 {
            return 0.0;
        }
        grid.eval_into(x, &mut scratch.values, Some(&mut scratch.derivs));
        let n = self.coeffs.len();
        let scaled = upstream * self.w_spline;
        for (g, b) in grad[..n].iter_mut().zip(&scratch.values) {
            *g += scaled * b;
        }
        grad[n] += upstream * silu(x);
        grad[n + 1] += upstream * dot(&self.coeffs, &scratch.values);
        upstream * (self.w_base * silu_derivative(x) + self.w_spline * dot(&self.coeffs, &scratch.derivs))
    }

    /// Multiplies the edge function by `factor`.
    ///
    /// The spline term is bilinear in `w_spline` and the coefficients, so only
    /// the coefficients and `w_base` are scaled.
    pub fn scale(&mut self, factor: f64) {
        self.coeffs.iter_mut().for_each(|c| *c *= factor);
        self.w_base *= factor;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
