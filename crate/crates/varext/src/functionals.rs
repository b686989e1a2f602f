//! Boundary norms and interior operators: Campanato/BMO oscillation norms,
//! Hajłasz upper gradients, truncated cones, non-tangential and sharp
//! maximal operators, Carleson and area functionals, tent-space norms and
//! the band seminorm pairing a field with its weighted gradient.
//!
//! Every supremum over a continuous range of radii or points is replaced by
//! a supremum over an explicit dyadic grid named by the caller, so results
//! are reproducible bit for bit. Ball means and sups use one fixed tensor
//! quadrature rule ([`BALL_RULE`]²  points, disk-filtered) so measured
//! constants are stable across runs.

use rayon::prelude::*;
use thiserror::Error;

use crate::dyadic::BoundaryFunction;
use crate::geometry::BoundaryModel;
use crate::whitney::WhitneyGrid;
use crate::{dist, Point};

/// Boundary parameter n of the ambient space ℝ^{n+1}; the plane fixes n = 1.
/// The interior weight is ω_s(x) = δ(x)^{s−n} and the area functional
/// integrates against δ(x)^{−n}.
pub const CODIM_N: f64 = 1.0;

/// Tensor resolution for ball means/sups: a BALL_RULE × BALL_RULE midpoint
/// grid over the bounding square, filtered to the disk, equal weights.
pub const BALL_RULE: usize = 16;

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error("the oscillation family is empty")]
    EmptyFamily,
    #[error("cone at ({0}, {1}) has no samples after truncation")]
    EmptyCone(f64, f64),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("no candidate upper gradient satisfied the pairwise inequality; worst pair ({0}, {1})")]
    HajlaszViolation(usize, usize),
}

// ---------------------------------------------------------------------------
// Interior fields
// ---------------------------------------------------------------------------

/// An interior scalar field on the window's band: deterministic pointwise
/// value and gradient. Where a field is declared smooth the gradient must
/// match finite differences to 1e-4 relative (checked in tests for the
/// concrete implementations).
pub trait InteriorField: Sync {
    fn value(&self, x: Point) -> f64;
    fn gradient(&self, x: Point) -> [f64; 2];
    /// What produced the field (plumbing metadata for reports).
    fn origin(&self) -> &'static str {
        "field"
    }
    /// Optional [δ_lo, δ_hi] band on which evaluation is trustworthy.
    fn scale_band(&self) -> Option<(f64, f64)> {
        None
    }
}

impl<T: InteriorField + ?Sized> InteriorField for &T {
    fn value(&self, x: Point) -> f64 {
        (**self).value(x)
    }

    fn gradient(&self, x: Point) -> [f64; 2] {
        (**self).gradient(x)
    }

    fn origin(&self) -> &'static str {
        (**self).origin()
    }

    fn scale_band(&self) -> Option<(f64, f64)> {
        (**self).scale_band()
    }
}

/// A field given by closed-form value and gradient closures.
pub struct AnalyticField<V, G>
where
    V: Fn(Point) -> f64 + Sync,
    G: Fn(Point) -> [f64; 2] + Sync,
{
    value_fn: V,
    grad_fn: G,
    origin: &'static str,
}

impl<V, G> AnalyticField<V, G>
where
    V: Fn(Point) -> f64 + Sync,
    G: Fn(Point) -> [f64; 2] + Sync,
{
    pub fn new(origin: &'static str, value_fn: V, grad_fn: G) -> Self {
        AnalyticField { value_fn, grad_fn, origin }
    }
}

impl<V, G> InteriorField for AnalyticField<V, G>
where
    V: Fn(Point) -> f64 + Sync,
    G: Fn(Point) -> [f64; 2] + Sync,
{
    fn value(&self, x: Point) -> f64 {
        (self.value_fn)(x)
    }

    fn gradient(&self, x: Point) -> [f64; 2] {
        (self.grad_fn)(x)
    }

    fn origin(&self) -> &'static str {
        self.origin
    }
}

/// A smooth mixture of Gaussian bumps a·exp(−|x−p|²/s²) with analytic
/// gradient — the stock of "random smooth fields" used by the measured
/// comparability suites.
#[derive(Clone, Debug)]
pub struct GaussianMix {
    /// (amplitude, center, scale) per term.
    pub terms: Vec<(f64, Point, f64)>,
}

impl GaussianMix {
    pub fn new(terms: Vec<(f64, Point, f64)>) -> Self {
        GaussianMix { terms }
    }
}

impl InteriorField for GaussianMix {
    fn value(&self, x: Point) -> f64 {
        self.terms
            .iter()
            .map(|&(a, p, s)| {
                let d2 = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
                a * (-d2 / (s * s)).exp()
            })
            .sum()
    }

    fn gradient(&self, x: Point) -> [f64; 2] {
        let mut g = [0.0, 0.0];
        for &(a, p, s) in &self.terms {
            let d = [x[0] - p[0], x[1] - p[1]];
            let e = a * (-(d[0] * d[0] + d[1] * d[1]) / (s * s)).exp();
            g[0] += e * (-2.0 * d[0] / (s * s));
            g[1] += e * (-2.0 * d[1] / (s * s));
        }
        g
    }

    fn origin(&self) -> &'static str {
        "gaussian-mix"
    }
}

// ---------------------------------------------------------------------------
// Oscillation norms on the boundary
// ---------------------------------------------------------------------------

/// A family of surface balls B(atom, r) over which oscillation suprema are
/// taken. Truncated-scale semantics: only the listed balls enter the sup,
/// so the norm is exact for the family and a lower bound for the full
/// continuous-scale seminorm.
#[derive(Clone, Debug)]
pub struct OscillationFamily {
    /// (center atom index, radius) pairs.
    pub balls: Vec<(usize, f64)>,
}

impl OscillationFamily {
    /// Balls centered on every `stride`-th atom with dyadic radii
    /// diam·2^{−k} clipped to [r_min, r_max].
    pub fn dyadic_balls(model: &BoundaryModel, stride: usize, r_min: f64, r_max: f64) -> Self {
        let stride = stride.max(1);
        let mut radii = Vec::new();
        let mut r = model.diam_boundary;
        while r >= r_min * (1.0 - 1e-12) {
            if r <= r_max * (1.0 + 1e-12) {
                radii.push(r);
            }
            r /= 2.0;
        }
        let mut balls = Vec::new();
        for i in (0..model.atoms.len()).step_by(stride) {
            for &r in &radii {
                balls.push((i, r));
            }
        }
        OscillationFamily { balls }
    }
}

/// r^{−β}-scaled mean oscillation of f over one surface ball (two passes
/// over the atoms; the ball selects atoms by Euclidean distance).
fn ball_oscillation(
    model: &BoundaryModel,
    f: &BoundaryFunction,
    center: Point,
    r: f64,
    beta: f64,
) -> f64 {
    let vals = f.values();
    let mut mass = 0.0;
    let mut integral = 0.0;
    for ((a, w), v) in model.atoms.iter().zip(&model.weights).zip(vals) {
        if dist(*a, center) <= r {
            mass += w;
            integral += w * v;
        }
    }
    if mass <= 0.0 {
        return 0.0;
    }
    let mean = integral / mass;
    let mut osc = 0.0;
    for ((a, w), v) in model.atoms.iter().zip(&model.weights).zip(vals) {
        if dist(*a, center) <= r {
            osc += w * (v - mean).abs();
        }
    }
    osc / mass / r.powf(beta)
}

/// Campanato seminorm: sup over the family of r^{−β} · mean oscillation.
/// β = 0 is the (truncated) BMO norm.
pub fn campanato_seminorm(
    model: &BoundaryModel,
    f: &BoundaryFunction,
    beta: f64,
    family: &OscillationFamily,
) -> Result<f64, FunctionalError> {
    if family.balls.is_empty() {
        return Err(FunctionalError::EmptyFamily);
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(FunctionalError::BadParameter(format!("beta = {beta} outside [0, 1)")));
    }
    Ok(family
        .balls
        .par_iter()
        .map(|&(i, r)| ball_oscillation(model, f, model.atoms[i], r, beta))
        .reduce(|| 0.0, f64::max))
}

/// Truncated BMO norm over the given ball family.
pub fn bmo_norm(
    model: &BoundaryModel,
    f: &BoundaryFunction,
    family: &OscillationFamily,
) -> Result<f64, FunctionalError> {
    campanato_seminorm(model, f, 0.0, family)
}

// ---------------------------------------------------------------------------
// Hajłasz upper gradient
// ---------------------------------------------------------------------------

/// Pair scans are capped to dyadic index blocks of this many consecutive
/// atoms; below the cap the verification is exhaustive over all pairs.
pub const HAJLASZ_BLOCK: usize = 1024;

/// Constructs a Hajłasz upper gradient of f: the least member of the
/// documented candidate family g_r(x) = ½ · local Lipschitz constant of f
/// over the r-neighborhood of x, for dyadic radii r, that satisfies
/// |f(x) − f(y)| ≤ |x − y| (g(x) + g(y)) on every tested atom pair.
/// Pairs are tested exhaustively within each dyadic index block
/// ([`HAJLASZ_BLOCK`] atoms; a single block when the boundary is small).
pub fn hajlasz_gradient(
    model: &BoundaryModel,
    f: &BoundaryFunction,
) -> Result<BoundaryFunction, FunctionalError> {
    let n = model.atoms.len();
    let vals = f.values();
    let blocks: Vec<std::ops::Range<usize>> =
        (0..n).step_by(HAJLASZ_BLOCK).map(|s| s..(s + HAJLASZ_BLOCK).min(n)).collect();

    // Dyadic neighborhood radii, coarsest last; the final candidate uses the
    // full diameter, for which ½·(pointwise Lipschitz constant) is always an
    // upper gradient: |f(x)−f(y)| ≤ |x−y|·min(L(x), L(y)) ≤ |x−y|(L(x)+L(y))/2.
    let mut radii = Vec::new();
    let mut r = 4.0 * model.atom_spacing;
    while r < model.diam_boundary {
        radii.push(r);
        r *= 2.0;
    }
    radii.push(f64::INFINITY);

    let mut worst = (0usize, 0usize);
    for r in radii {
        let g: Vec<f64> = blocks
            .par_iter()
            .flat_map_iter(|blk| {
                blk.clone().map(|i| {
                    let mut lip = 0.0f64;
                    for j in blk.clone() {
                        if j == i {
                            continue;
                        }
                        let d = dist(model.atoms[i], model.atoms[j]);
                        if d <= r {
                            lip = lip.max((vals[i] - vals[j]).abs() / d);
                        }
                    }
                    0.5 * lip
                })
            })
            .collect();

        let violation = blocks
            .par_iter()
            .filter_map(|blk| {
                for i in blk.clone() {
                    for j in (i + 1)..blk.end {
                        let d = dist(model.atoms[i], model.atoms[j]);
                        let lhs = (vals[i] - vals[j]).abs();
                        let rhs = d * (g[i] + g[j]);
                        if lhs > rhs * (1.0 + 1e-12) + 1e-15 {
                            return Some((i, j));
                        }
                    }
                }
                None
            })
            .find_any(|_| true);

        match violation {
            None => return Ok(BoundaryFunction::from_values(model, g)),
            Some(pair) => worst = pair,
        }
    }
    Err(FunctionalError::HajlaszViolation(worst.0, worst.1))
}

// ---------------------------------------------------------------------------
// Cones
// ---------------------------------------------------------------------------

/// Sampling plan for a truncated cone γ_α(ξ) ∩ {ρ_min ≤ |x−ξ| ≤ ρ_max}.
/// Rings are anchored at ρ_max (radii ρ_max·2^{−k/rings_per_octave}), so
/// deepening the truncation (smaller ρ_min) or widening the aperture only
/// adds samples — sup-type values are monotone under those changes.
#[derive(Clone, Copy, Debug)]
pub struct ConeParams {
    pub aperture: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub angles: usize,
    pub rings_per_octave: usize,
}

impl ConeParams {
    pub fn new(aperture: f64, rho_min: f64, rho_max: f64) -> Self {
        ConeParams { aperture, rho_min, rho_max, angles: 64, rings_per_octave: 4 }
    }

    /// The same truncated cone sampled `k`× denser in both angle and radius.
    pub fn denser(mut self, k: usize) -> Self {
        self.angles *= k;
        self.rings_per_octave *= k;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConeSample {
    pub x: Point,
    pub delta: f64,
}

/// A truncated cone with vertex on the boundary: the region
/// {x : |x−ξ| < (1+α)δ(x)} ∩ {ρ_min ≤ |x−ξ| ≤ ρ_max} together with its
/// dyadic-ring sample set. Every stored sample satisfies the defining
/// inequality strictly and has δ > 0.
#[derive(Clone, Debug)]
pub struct Cone {
    pub vertex: Point,
    pub aperture: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub samples: Vec<ConeSample>,
}

impl Cone {
    /// Membership test for the truncated cone region (used by region
    /// quadratures, which supply their own points).
    pub fn contains_region(&self, x: Point, delta: f64) -> bool {
        let d = dist(x, self.vertex);
        d >= self.rho_min && d <= self.rho_max && d < (1.0 + self.aperture) * delta
    }

    /// A sample-free cone used purely as a region descriptor.
    pub fn region(vertex: Point, aperture: f64, rho_min: f64, rho_max: f64) -> Self {
        Cone { vertex, aperture, rho_min, rho_max, samples: Vec::new() }
    }
}

/// Samples the truncated cone at ξ on dyadic rings × uniform angles,
/// keeping the points that satisfy |x−ξ| < (1+α)δ(x) strictly.
pub fn build_cone(
    model: &BoundaryModel,
    vertex: Point,
    p: &ConeParams,
) -> Result<Cone, FunctionalError> {
    if !(p.aperture > 0.0) {
        return Err(FunctionalError::BadParameter(format!("aperture = {}", p.aperture)));
    }
    if !(p.rho_min > 0.0 && p.rho_min < p.rho_max) {
        return Err(FunctionalError::BadParameter(format!(
            "truncation radii [{}, {}]",
            p.rho_min, p.rho_max
        )));
    }
    if p.angles < 8 || p.rings_per_octave < 1 {
        return Err(FunctionalError::BadParameter("sampling density too low".into()));
    }
    let mut samples = Vec::new();
    let mut k = 0u32;
    loop {
        let r = p.rho_max * 0.5f64.powf(k as f64 / p.rings_per_octave as f64);
        if r < p.rho_min * (1.0 - 1e-12) {
            break;
        }
        for j in 0..p.angles {
            let th = 2.0 * std::f64::consts::PI * j as f64 / p.angles as f64;
            let x = [vertex[0] + r * th.cos(), vertex[1] + r * th.sin()];
            let d = model.delta(x);
            if dist(x, vertex) < (1.0 + p.aperture) * d {
                samples.push(ConeSample { x, delta: d });
            }
        }
        k += 1;
    }
    if samples.is_empty() {
        return Err(FunctionalError::EmptyCone(vertex[0], vertex[1]));
    }
    Ok(Cone {
        vertex,
        aperture: p.aperture,
        rho_min: p.rho_min,
        rho_max: p.rho_max,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Ball quadrature and pointwise maximal quantities
// ---------------------------------------------------------------------------

/// One pass of the fixed disk-filtered tensor rule over B(center, radius):
/// returns (mean, sup |field − mean|, sup |field|) over the kept points.
pub fn ball_scan(field: &dyn InteriorField, center: Point, radius: f64) -> (f64, f64, f64) {
    let n = BALL_RULE;
    let step = 2.0 * radius / n as f64;
    let mut vals = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dx = -radius + (i as f64 + 0.5) * step;
            let dy = -radius + (j as f64 + 0.5) * step;
            if dx * dx + dy * dy <= radius * radius {
                vals.push(field.value([center[0] + dx, center[1] + dy]));
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let mut dev = 0.0f64;
    let mut sup = 0.0f64;
    for v in &vals {
        dev = dev.max((v - mean).abs());
        sup = sup.max(v.abs());
    }
    (mean, dev, sup)
}

/// m_{∞,c}(F)(x): sup of |F| over the ball B(x, c·δ(x)) (quadrature points).
pub fn m_infty(field: &dyn InteriorField, x: Point, c: f64, delta_x: f64) -> f64 {
    ball_scan(field, x, c * delta_x).2
}

/// m_{♯,c}(F)(x): sup over B(x, c·δ(x)) of |F − (ball mean of F)|.
pub fn m_sharp(field: &dyn InteriorField, x: Point, c: f64, delta_x: f64) -> f64 {
    ball_scan(field, x, c * delta_x).1
}

fn check_averaging_constant(c: f64) -> Result<(), FunctionalError> {
    if !(c > 0.0 && c <= 0.5) {
        return Err(FunctionalError::BadParameter(format!("averaging constant c = {c}")));
    }
    Ok(())
}

/// Non-tangential maximal value: sup of |field| over the cone samples.
pub fn nt_maximal(field: &dyn InteriorField, cone: &Cone) -> f64 {
    cone.samples
        .par_iter()
        .map(|s| field.value(s.x).abs())
        .reduce(|| 0.0, f64::max)
}

/// Sharp non-tangential maximal value:
/// sup over cone samples x of δ(x)^{−β} · m_{♯,c}(field)(x).
pub fn sharp_nt_maximal(
    field: &dyn InteriorField,
    cone: &Cone,
    c: f64,
    beta: f64,
) -> Result<f64, FunctionalError> {
    check_averaging_constant(c)?;
    if !(0.0..1.0).contains(&beta) {
        return Err(FunctionalError::BadParameter(format!("beta = {beta} outside [0, 1)")));
    }
    Ok(cone
        .samples
        .par_iter()
        .map(|s| s.delta.powf(-beta) * m_sharp(field, s.x, c, s.delta))
        .reduce(|| 0.0, f64::max))
}

// ---------------------------------------------------------------------------
// Exact disk ∩ box area
// ---------------------------------------------------------------------------

/// ∫ √(r²−t²) dt evaluated at x (antiderivative, clamped to the disk).
fn disk_segment_integral(x: f64, r: f64) -> f64 {
    let xc = x.clamp(-r, r);
    0.5 * (xc * (r * r - xc * xc).max(0.0).sqrt() + r * r * (xc / r).clamp(-1.0, 1.0).asin())
}

/// Exact (closed-form) area of B(center, r) ∩ [lo, hi]. Fast paths skip the
/// piecewise integration for boxes wholly inside or outside the disk, which
/// is what makes per-cube ball quadratures affordable on large grids.
pub fn disk_box_area(center: Point, r: f64, lo: Point, hi: Point) -> f64 {
    if r <= 0.0 || lo[0] >= hi[0] || lo[1] >= hi[1] {
        return 0.0;
    }
    let (x0, x1) = (lo[0] - center[0], hi[0] - center[0]);
    let (y0, y1) = (lo[1] - center[1], hi[1] - center[1]);
    // Nearest point of the box to the disk center.
    let nx = 0.0f64.clamp(x0, x1);
    let ny = 0.0f64.clamp(y0, y1);
    if nx * nx + ny * ny >= r * r {
        return 0.0;
    }
    // Farthest corner.
    let fx = x0.abs().max(x1.abs());
    let fy = y0.abs().max(y1.abs());
    if fx * fx + fy * fy <= r * r {
        return (x1 - x0) * (y1 - y0);
    }

    let a = x0.max(-r);
    let b = x1.min(r);
    if a >= b {
        return 0.0;
    }
    // Regime changes of min(y1, g) and max(y0, −g), g(x) = √(r²−x²), happen
    // exactly where g crosses |y0| or |y1|.
    let mut cuts = vec![a, b];
    for y in [y0, y1] {
        if y.abs() < r {
            let xc = (r * r - y * y).sqrt();
            for cand in [-xc, xc] {
                if cand > a && cand < b {
                    cuts.push(cand);
                }
            }
        }
    }
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (p, q) = (w[0], w[1]);
        if q - p <= 0.0 {
            continue;
        }
        let mid = 0.5 * (p + q);
        let gmid = (r * r - mid * mid).max(0.0).sqrt();
        let top_is_box = y1 <= gmid;
        let bot_is_box = y0 >= -gmid;
        if y1.min(gmid) <= y0.max(-gmid) {
            continue;
        }
        let seg = disk_segment_integral(q, r) - disk_segment_integral(p, r);
        let top = if top_is_box { y1 * (q - p) } else { seg };
        let bot = if bot_is_box { y0 * (q - p) } else { -seg };
        area += top - bot;
    }
    area.max(0.0)
}

// ---------------------------------------------------------------------------
// Interior quadrature over the Whitney band
// ---------------------------------------------------------------------------

/// Midpoint data of one Whitney cube: the integrand is treated as the
/// constant `value` on the square [corner, corner + side]².
#[derive(Clone, Copy, Debug)]
pub struct GridSample {
    pub corner: Point,
    pub side: f64,
    pub center: Point,
    pub delta: f64,
    pub value: f64,
}

/// Evaluates `magnitude(center, δ(center))` once per Whitney cube. The
/// resulting sample set is the shared quadrature for the Carleson, area and
/// tent functionals.
pub fn sample_on_grid(
    grid: &WhitneyGrid,
    magnitude: &(dyn Fn(Point, f64) -> f64 + Sync),
) -> Vec<GridSample> {
    let model = grid.model();
    grid.cubes
        .par_iter()
        .map(|p| {
            let center = p.center();
            let delta = model.delta(center);
            GridSample { corner: p.corner, side: p.side, center, delta, value: magnitude(center, delta) }
        })
        .collect()
}

/// Like [`sample_on_grid`] but averaging the integrand over a k×k uniform
/// sub-grid of each cube. Needed when the integrand concentrates on bands
/// thinner than a cube — e.g. gradients of partition blends, which vanish
/// wherever a single bump covers the point and live on the ~0.05ℓ support
/// overlaps; k ≥ 12 places sub-grid rows inside those bands.
pub fn sample_on_grid_refined(
    grid: &WhitneyGrid,
    magnitude: &(dyn Fn(Point, f64) -> f64 + Sync),
    k: usize,
) -> Vec<GridSample> {
    let model = grid.model();
    let k = k.max(1);
    grid.cubes
        .par_iter()
        .map(|p| {
            let center = p.center();
            let delta = model.delta(center);
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let x = [
                        p.corner[0] + (i as f64 + 0.5) / k as f64 * p.side,
                        p.corner[1] + (j as f64 + 0.5) / k as f64 * p.side,
                    ];
                    acc += magnitude(x, model.delta(x));
                }
            }
            GridSample {
                corner: p.corner,
                side: p.side,
                center,
                delta,
                value: acc / (k * k) as f64,
            }
        })
        .collect()
}

/// Like [`sample_on_grid_refined`] but with per-axis dyadically graded
/// midpoint cells concentrated at the cube faces. Blend gradients built from
/// exponential bumps change on an ≈ 0.005ℓ scale right next to the faces —
/// far below any affordable uniform rule — while vanishing identically deep
/// inside supports. Each axis is split into the dyadic cells
/// [2^{−j−1}, 2^{−j}]·side measured from either face (j = 1 … levels) plus
/// the innermost remainder, each sampled at its midpoint with the cell width
/// as weight, so `value` is again a weighted cube average.
pub fn sample_on_grid_graded(
    grid: &WhitneyGrid,
    magnitude: &(dyn Fn(Point, f64) -> f64 + Sync),
    levels: usize,
) -> Vec<GridSample> {
    let mut axis: Vec<(f64, f64)> = Vec::new();
    let mut hi = 0.5f64;
    for _ in 0..levels.max(1) {
        let lo = 0.5 * hi;
        axis.push((0.5 * (lo + hi), hi - lo));
        hi = lo;
    }
    axis.push((0.5 * hi, hi));
    let mirrored: Vec<(f64, f64)> = axis.iter().map(|&(o, w)| (1.0 - o, w)).collect();
    axis.extend(mirrored);
    let model = grid.model();
    grid.cubes
        .par_iter()
        .map(|p| {
            let center = p.center();
            let delta = model.delta(center);
            let mut acc = 0.0;
            for &(ox, wx) in &axis {
                for &(oy, wy) in &axis {
                    let x = [p.corner[0] + ox * p.side, p.corner[1] + oy * p.side];
                    acc += wx * wy * magnitude(x, model.delta(x));
                }
            }
            GridSample { corner: p.corner, side: p.side, center, delta, value: acc }
        })
        .collect()
}

/// r^{−s−β} ∫_{B(ξ,r) ∩ band} |value| ω_s dx for every r in the grid, with
/// per-cube constant integrand and the exact cube ∩ ball area.
pub fn carleson_profile(
    samples: &[GridSample],
    xi: Point,
    s: f64,
    beta: f64,
    r_grid: &[f64],
) -> Vec<(f64, f64)> {
    r_grid
        .iter()
        .map(|&r| {
            let integral: f64 = samples
                .par_iter()
                .map(|q| {
                    if q.value == 0.0 {
                        return 0.0;
                    }
                    let hi = [q.corner[0] + q.side, q.corner[1] + q.side];
                    let a = disk_box_area(xi, r, q.corner, hi);
                    if a > 0.0 {
                        q.value.abs() * q.delta.powf(s - CODIM_N) * a
                    } else {
                        0.0
                    }
                })
                .sum();
            (r, integral / r.powf(s + beta))
        })
        .collect()
}

/// Carleson functional 𝒞_s^{(β)} of the sampled integrand at ξ: sup over the
/// radius grid of the normalized band integrals (0 when nothing intersects).
pub fn carleson_sup(samples: &[GridSample], xi: Point, s: f64, beta: f64, r_grid: &[f64]) -> f64 {
    carleson_profile(samples, xi, s, beta, r_grid)
        .into_iter()
        .fold(0.0, |acc, (_, v)| acc.max(v))
}

/// Modified Carleson functional: 𝒞_s^{(β)} applied to m_{∞,c}(field).
/// The ball sup is evaluated at every cube midpoint with the fixed rule.
pub fn carleson_modified(
    grid: &WhitneyGrid,
    field: &dyn InteriorField,
    xi: Point,
    s: f64,
    beta: f64,
    c: f64,
    r_grid: &[f64],
) -> Result<f64, FunctionalError> {
    check_averaging_constant(c)?;
    let samples = sample_on_grid(grid, &|x, d| m_infty(field, x, c, d));
    Ok(carleson_sup(&samples, xi, s, beta, r_grid))
}

/// Area functional over a truncated cone: Σ over cubes with midpoint in the
/// cone of |value| · δ^{−n} · ℓ(P)² (midpoint membership, midpoint value).
pub fn area_from_samples(samples: &[GridSample], cone: &Cone) -> f64 {
    samples
        .par_iter()
        .map(|q| {
            if cone.contains_region(q.center, q.delta) {
                q.value.abs() * q.delta.powf(-CODIM_N) * q.side * q.side
            } else {
                0.0
            }
        })
        .sum()
}

/// 𝒜(G)(ξ) = ∫_{γ_α(ξ) ∩ truncation} |G| δ^{−n} dx by Whitney-cube
/// midpoint quadrature. The cone must be truncated above the band floor:
/// the integrand is singular at the vertex.
pub fn area_functional(
    grid: &WhitneyGrid,
    magnitude: &(dyn Fn(Point, f64) -> f64 + Sync),
    cone: &Cone,
) -> f64 {
    area_from_samples(&sample_on_grid(grid, magnitude), cone)
}

// ---------------------------------------------------------------------------
// Tent norms and the band seminorm
// ---------------------------------------------------------------------------

/// Sum of atom weights over each stride block, so strided sweeps still
/// integrate the full boundary mass.
fn strided_weights(model: &BoundaryModel, stride: usize) -> Vec<(usize, f64)> {
    let n = model.atoms.len();
    (0..n)
        .step_by(stride.max(1))
        .map(|i| {
            let end = (i + stride.max(1)).min(n);
            (i, model.weights[i..end].iter().sum::<f64>())
        })
        .collect()
}

/// T^p_2 norm: L^p(σ) over (strided) atoms of (𝒜(field²/δ))^{1/2}, with the
/// cone truncation fixed by `params`.
pub fn tent_p_norm(
    grid: &WhitneyGrid,
    field: &dyn InteriorField,
    p: f64,
    params: &ConeParams,
    stride: usize,
) -> Result<f64, FunctionalError> {
    if !(p > 0.0) {
        return Err(FunctionalError::BadParameter(format!("tent exponent p = {p}")));
    }
    let model = grid.model();
    let samples = sample_on_grid(grid, &|x, d| field.value(x).powi(2) / d);
    let total: f64 = strided_weights(model, stride)
        .par_iter()
        .map(|&(i, w)| {
            let cone = Cone::region(model.atoms[i], params.aperture, params.rho_min, params.rho_max);
            w * area_from_samples(&samples, &cone).sqrt().powf(p)
        })
        .sum();
    Ok(total.powf(1.0 / p))
}

/// T^∞_{s,2} norm: sup over (strided) atoms of 𝒞_s(field²/δ)^{1/2} with the
/// given radius grid.
pub fn tent_inf_norm(
    grid: &WhitneyGrid,
    field: &dyn InteriorField,
    r_grid: &[f64],
    stride: usize,
) -> Result<f64, FunctionalError> {
    if r_grid.is_empty() {
        return Err(FunctionalError::BadParameter("empty radius grid".into()));
    }
    let model = grid.model();
    let samples = sample_on_grid(grid, &|x, d| field.value(x).powi(2) / d);
    Ok(strided_weights(model, stride)
        .par_iter()
        .map(|&(i, _)| carleson_sup(&samples, model.atoms[i], model.s, 0.0, r_grid).sqrt())
        .reduce(|| 0.0, f64::max))
}

/// Band seminorm ‖u‖ = sup_ξ 𝒩_{♯,c}(u)(ξ) + sup_ξ 𝒩(δ∇u)(ξ), both sups
/// over (strided) atoms with cones built from `params`.
pub fn nsum_seminorm(
    model: &BoundaryModel,
    field: &dyn InteriorField,
    params: &ConeParams,
    c: f64,
    stride: usize,
) -> Result<f64, FunctionalError> {
    check_averaging_constant(c)?;
    let idx: Vec<usize> = (0..model.atoms.len()).step_by(stride.max(1)).collect();
    let parts: Vec<(f64, f64)> = idx
        .par_iter()
        .map(|&i| {
            let cone = build_cone(model, model.atoms[i], params)?;
            let mut sharp = 0.0f64;
            let mut grad = 0.0f64;
            for smp in &cone.samples {
                sharp = sharp.max(m_sharp(field, smp.x, c, smp.delta));
                let g = field.gradient(smp.x);
                grad = grad.max(smp.delta * (g[0] * g[0] + g[1] * g[1]).sqrt());
            }
            Ok((sharp, grad))
        })
        .collect::<Result<_, FunctionalError>>()?;
    let sharp = parts.iter().fold(0.0f64, |a, p| a.max(p.0));
    let grad = parts.iter().fold(0.0f64, |a, p| a.max(p.1));
    Ok(sharp + grad)
}

/// Dyadic radius grid r_max, r_max/2, … down to r_min (inclusive).
pub fn dyadic_radii(r_min: f64, r_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = r_max;
    while r >= r_min * (1.0 - 1e-12) {
        out.push(r);
        r /= 2.0;
    }
    out
}

/// Norm-sweep rows (ξ, value) in the CSV layout consumed by the renderer.
pub fn sweep_csv(rows: &[(Point, f64)]) -> String {
    let mut out = String::from("xi_x,xi_y,value\n");
    for (xi, v) in rows {
        out.push_str(&format!("{},{},{}\n", xi[0], xi[1], v));
    }
    out
}
