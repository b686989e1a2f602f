//! The regularized dyadic extension: boundary data f on the lattice atoms is
//! extended into the Whitney band as
//!
//!   υ_f(x) = Σ_P m_{σ,b(P)}(f) · φ_P(x),
//!
//! the partition-of-unity blend of the boundary averages over the cubes
//! associated to each Whitney cube. The gradient is analytic (quotient rule
//! through the normalized partition), so υ_f plugs directly into the cone,
//! Carleson, and tent machinery as an [`InteriorField`].

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::dyadic::{cube_average, BoundaryFunction};
use crate::functionals::InteriorField;
use crate::whitney::WhitneyGrid;
use crate::Point;

#[derive(Debug, Error)]
pub enum ExtensionError {
    #[error("uncovered point ({0}, {1}): no partition support contains it")]
    UncoveredPoint(f64, f64),
    #[error("boundary data has {data} values but the model carries {model} atoms")]
    AtomMismatch { data: usize, model: usize },
}

/// The extension field: a Whitney grid plus one cached boundary average per
/// cube. Values are convex combinations of the cached averages (the
/// partition is normalized), so min m ≤ υ_f(x) ≤ max m over the cubes
/// whose supports contain x.
pub struct UpsilonField {
    grid: Arc<WhitneyGrid>,
    /// m_{σ,b(P)}(f) per Whitney cube; cubes at least as large as the
    /// boundary use the global mean (the whole boundary stands in for b(P)).
    coeffs: Vec<f64>,
    global_mean: f64,
}

impl UpsilonField {
    pub fn grid(&self) -> &Arc<WhitneyGrid> {
        &self.grid
    }

    /// Cached boundary average attached to cube `p`.
    pub fn coefficient(&self, p: u32) -> f64 {
        self.coeffs[p as usize]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    /// Value and gradient where the band covers x; None outside every
    /// partition support.
    pub fn eval(&self, x: Point) -> Option<(f64, [f64; 2])> {
        blend_eval(&self.grid, &self.coeffs, x)
    }

    /// Evaluation that signals uncovered points instead of extending by 0.
    pub fn value_checked(&self, x: Point) -> Result<f64, ExtensionError> {
        self.eval(x)
            .map(|(v, _)| v)
            .ok_or(ExtensionError::UncoveredPoint(x[0], x[1]))
    }
}

impl InteriorField for UpsilonField {
    /// 0 outside the covered band (band-truncated by design; use
    /// [`UpsilonField::value_checked`] to detect uncovered points).
    fn value(&self, x: Point) -> f64 {
        self.eval(x).map(|(v, _)| v).unwrap_or(0.0)
    }

    fn gradient(&self, x: Point) -> [f64; 2] {
        self.eval(x).map(|(_, g)| g).unwrap_or([0.0, 0.0])
    }

    fn origin(&self) -> &'static str {
        "upsilon"
    }

    fn scale_band(&self) -> Option<(f64, f64)> {
        Some((self.grid.stats.delta_floor, f64::MAX))
    }
}

/// Normalized partition blend Σ_P c_P·φ_P: value and gradient at x, or None
/// where the partition vanishes. With S = Σψ and N = Σ c·ψ the value is N/S
/// and the gradient (∇N − (N/S)·∇S)/S — shared by every field built from
/// per-cube coefficients.
pub(crate) fn blend_eval(
    grid: &WhitneyGrid,
    coeffs: &[f64],
    x: Point,
) -> Option<(f64, [f64; 2])> {
    let (s, grad_s, contrib) = grid.partition_sum(x);
    if s <= 0.0 {
        return None;
    }
    let mut num = 0.0;
    let mut gnum = [0.0, 0.0];
    for (p, psi, gpsi) in contrib {
        let c = coeffs[p as usize];
        num += c * psi;
        gnum[0] += c * gpsi[0];
        gnum[1] += c * gpsi[1];
    }
    let v = num / s;
    let g = [(gnum[0] - v * grad_s[0]) / s, (gnum[1] - v * grad_s[1]) / s];
    Some((v, g))
}

/// Builds the extension of f over the grid's band: caches m_{σ,b(P)}(f) for
/// every Whitney cube eagerly (the same averages feed the stopping-time and
/// approximation constructions). Cubes with ℓ(P) ≥ diam(∂Ω) use the global
/// mean of f.
pub fn upsilon(grid: &Arc<WhitneyGrid>, f: &BoundaryFunction) -> Result<UpsilonField, ExtensionError> {
    let model = grid.model();
    if f.values().len() != model.atoms.len() {
        return Err(ExtensionError::AtomMismatch {
            data: f.values().len(),
            model: model.atoms.len(),
        });
    }
    let global_mean = f.range_integral(0, model.atoms.len() as u32) / model.total_mass;
    let lattice = &grid.lattice;
    let coeffs: Vec<f64> = grid
        .cubes
        .par_iter()
        .map(|p| {
            if p.side >= model.diam_boundary {
                global_mean
            } else {
                cube_average(lattice, p.b, f)
            }
        })
        .collect();
    Ok(UpsilonField { grid: grid.clone(), coeffs, global_mean })
}
