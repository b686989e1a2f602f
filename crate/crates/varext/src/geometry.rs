//! Concrete boundary scenarios: the analytic boundary set, its s-dimensional
//! surface measure (as a finite atomic quadrature), the interior distance
//! oracle, corkscrew points and carrot ("good") curves.
//!
//! Four scenarios are supported, all in the plane (n = 1, ambient dimension 2):
//! the upper half-plane, the four-corner Cantor set (4 maps of ratio 1/4,
//! s = 1), a lower-dimensional linear Cantor set (2 maps of ratio 1/4,
//! s = 1/2) and a Lipschitz graph. Cantor scenarios are resolved to a finite
//! generation G: the measure is an atomic approximation with one atom per
//! generation-G cell, and distances are computed against the generation-G
//! covering cells, which differs from the true distance by at most
//! `distance_bias` (recorded on the model).

use std::collections::HashMap;
use std::sync::Mutex;

use crate::{dist, Point};

/// Ambient dimension is frozen at 2, i.e. n = 1 in the estimates' notation.
pub const AMBIENT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioKind {
    HalfPlane,
    FourCornerCantor { generation: u32 },
    LowerDimCantor { generation: u32 },
    LipschitzGraph { profile: GraphProfile, lip: f64 },
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::HalfPlane => "half_plane",
            ScenarioKind::FourCornerCantor { .. } => "four_corner_cantor",
            ScenarioKind::LowerDimCantor { .. } => "lower_dim_cantor",
            ScenarioKind::LipschitzGraph { .. } => "lipschitz_graph",
        }
    }
}

/// Boundary profile for the Lipschitz-graph scenario. `Triangle` is a
/// piecewise-linear sawtooth of slope exactly ±L (period 2 in t), so distances
/// to it are exact; `Sine` is t ↦ L·sin(t), handled through a fine polyline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphProfile {
    Triangle,
    Sine,
}

/// Axis-aligned box limiting all computations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub min: Point,
    pub max: Point,
}

impl Window {
    pub fn new(min: Point, max: Point) -> Self {
        Window { min, max }
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn diam(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("scenario parameter out of range: {0}")]
    BadParameter(String),
    #[error("window {0:?}..{1:?} does not intersect the boundary")]
    WindowMissesBoundary(Point, Point),
    #[error("no corkscrew candidate at ({0}, {1}) radius {2}: resolution too coarse")]
    NoCorkscrew(f64, f64, f64),
    #[error("cannot build a carrot curve at ({0}, {1}) radius {2}: {3}")]
    NoCurve(f64, f64, f64, String),
}

/// Build request: which scenario, over which window, at what resolution.
/// `line_atoms` is the atom count for the scenarios whose boundary is a curve
/// (half-plane, graph); Cantor scenarios derive their atom count from the
/// generation.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub window: Option<Window>,
    pub line_atoms: usize,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        ScenarioSpec { kind, window: None, line_atoms: 1 << 10 }
    }

    pub fn with_window(mut self, w: Window) -> Self {
        self.window = Some(w);
        self
    }

    pub fn with_line_atoms(mut self, n: usize) -> Self {
        self.line_atoms = n;
        self
    }
}

const MAX_CANTOR_GENERATION: u32 = 8;

/// Scenario-specific geometry backing the distance oracle.
#[derive(Clone, Debug)]
enum ScenarioGeom {
    /// δ(x) = max(y, 0).
    HalfPlane,
    /// Distance to the union of generation-G squares of the four-corner set.
    CantorSquares { generation: u32 },
    /// Distance to the union of generation-G intervals on the line y = 0.
    CantorIntervals { generation: u32 },
    /// Distance to a polyline graph (exact for the triangle profile);
    /// δ(x) = 0 at and below the graph.
    Graph { vertices: Vec<Point> },
}

/// A frozen boundary scenario: atomic surface measure, distance oracle inputs
/// and the measured regularity metadata. All queries are pure; models are
/// immutable after `build_scenario`.
#[derive(Clone, Debug)]
pub struct BoundaryModel {
    pub kind: ScenarioKind,
    /// Hausdorff dimension of the boundary measure, in (0, n].
    pub s: f64,
    pub window: Window,
    pub atoms: Vec<Point>,
    pub weights: Vec<f64>,
    /// Σ weights — the measure of the window portion of the boundary.
    pub total_mass: f64,
    /// Scale factor applied to raw cell weights so ball masses match r^s.
    pub normalization: f64,
    pub diam_boundary: f64,
    /// Minimal distance between distinct atoms.
    pub atom_spacing: f64,
    /// |oracle δ − true δ| bound coming from the finite-generation covering.
    pub distance_bias: f64,
    /// Measured two-sided Ahlfors constant (with a 1.25 safety factor):
    /// C₀⁻¹ rˢ ≤ σ(B(x,r)) ≤ C₀ rˢ on the probed range.
    pub ahlfors_c0: f64,
    /// Radii range [r_min, r_max] over which `ahlfors_c0` was probed.
    pub ahlfors_range: (f64, f64),
    geom: ScenarioGeom,
}

/// Builds a frozen model and measures its regularity constants.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<BoundaryModel, GeomError> {
    let (kind, window) = (spec.kind.clone(), spec.window);
    let mut model = match kind {
        ScenarioKind::HalfPlane => {
            let window = window.unwrap_or(Window::new([-2.0, 0.0], [3.0, 1.0]));
            if window.min[1] > 0.0 || window.max[1] <= 0.0 {
                return Err(GeomError::WindowMissesBoundary(window.min, window.max));
            }
            let n = spec.line_atoms.max(2);
            let w = window.width();
            let h = w / n as f64;
            let atoms: Vec<Point> =
                (0..n).map(|i| [window.min[0] + (i as f64 + 0.5) * h, 0.0]).collect();
            BoundaryModel {
                kind: ScenarioKind::HalfPlane,
                s: 1.0,
                window,
                weights: vec![h; n],
                total_mass: w,
                normalization: 1.0,
                diam_boundary: w,
                atom_spacing: h,
                distance_bias: 0.0,
                ahlfors_c0: 0.0,
                ahlfors_range: (0.0, 0.0),
                geom: ScenarioGeom::HalfPlane,
                atoms,
            }
        }
        ScenarioKind::FourCornerCantor { generation } => {
            if generation == 0 || generation > MAX_CANTOR_GENERATION {
                return Err(GeomError::BadParameter(format!(
                    "four_corner_cantor generation must be in 1..={MAX_CANTOR_GENERATION}, got {generation}"
                )));
            }
            let window = window.unwrap_or(Window::new([0.0, 0.0], [1.0, 1.0]));
            if !window.contains([0.0, 0.0]) && !window.contains([1.0, 1.0]) {
                return Err(GeomError::WindowMissesBoundary(window.min, window.max));
            }
            // One atom per generation-G square, placed at the square's
            // lower-left corner: that corner survives every later generation,
            // so it lies on the limit set exactly. Atoms are kept in
            // depth-first cell order so that every self-similar cell owns a
            // contiguous atom range (the dyadic lattice relies on this).
            let side = 0.25f64.powi(generation as i32);
            let mut atoms = Vec::with_capacity(4usize.pow(generation));
            fn descend(corner: Point, s: f64, depth: u32, target: u32, out: &mut Vec<Point>) {
                if depth == target {
                    out.push(corner);
                    return;
                }
                let c = s / 4.0;
                for off in [[0.0, 0.0], [3.0 * c, 0.0], [0.0, 3.0 * c], [3.0 * c, 3.0 * c]] {
                    descend([corner[0] + off[0], corner[1] + off[1]], c, depth + 1, target, out);
                }
            }
            descend([0.0, 0.0], 1.0, 0, generation, &mut atoms);
            let wgt = 0.25f64.powi(generation as i32);
            let n = atoms.len();
            BoundaryModel {
                kind,
                s: 1.0,
                window,
                weights: vec![wgt; n],
                total_mass: 1.0,
                normalization: 1.0,
                diam_boundary: std::f64::consts::SQRT_2,
                atom_spacing: 3.0 * side,
                distance_bias: std::f64::consts::SQRT_2 * side,
                ahlfors_c0: 0.0,
                ahlfors_range: (0.0, 0.0),
                geom: ScenarioGeom::CantorSquares { generation },
                atoms,
            }
        }
        ScenarioKind::LowerDimCantor { generation } => {
            if generation == 0 || generation > MAX_CANTOR_GENERATION {
                return Err(GeomError::BadParameter(format!(
                    "lower_dim_cantor generation must be in 1..={MAX_CANTOR_GENERATION}, got {generation}"
                )));
            }
            let window = window.unwrap_or(Window::new([-0.25, -0.625], [1.25, 0.625]));
            if window.min[1] > 0.0 || window.max[1] < 0.0 {
                return Err(GeomError::WindowMissesBoundary(window.min, window.max));
            }
            // Left endpoints of the generation-G intervals; s = log 2 / log 4.
            // Depth-first (= increasing-x) order keeps cells contiguous.
            let len = 0.25f64.powi(generation as i32);
            let mut atoms = Vec::with_capacity(1 << generation);
            fn descend(a: f64, l: f64, depth: u32, target: u32, out: &mut Vec<Point>) {
                if depth == target {
                    out.push([a, 0.0]);
                    return;
                }
                descend(a, l / 4.0, depth + 1, target, out);
                descend(a + 0.75 * l, l / 4.0, depth + 1, target, out);
            }
            descend(0.0, 1.0, 0, generation, &mut atoms);
            let wgt = 0.5f64.powi(generation as i32);
            let n = atoms.len();
            BoundaryModel {
                kind,
                s: 0.5,
                window,
                weights: vec![wgt; n],
                total_mass: 1.0,
                normalization: 1.0,
                diam_boundary: 1.0,
                atom_spacing: 3.0 * len,
                distance_bias: len,
                ahlfors_c0: 0.0,
                ahlfors_range: (0.0, 0.0),
                geom: ScenarioGeom::CantorIntervals { generation },
                atoms,
            }
        }
        ScenarioKind::LipschitzGraph { profile, lip } => {
            if !(lip > 0.0) || lip > 4.0 {
                return Err(GeomError::BadParameter(format!(
                    "lipschitz_graph slope must be in (0, 4], got {lip}"
                )));
            }
            let window = window.unwrap_or(Window::new([-2.0, -1.5], [2.0, 2.0]));
            let n = spec.line_atoms.max(2);
            let t0 = window.min[0];
            let t1 = window.max[0];
            let dt = (t1 - t0) / n as f64;
            let g = |t: f64| graph_height(profile, lip, t);
            if (0..=8).all(|i| {
                let y = g(t0 + (t1 - t0) * i as f64 / 8.0);
                y < window.min[1] || y > window.max[1]
            }) {
                return Err(GeomError::WindowMissesBoundary(window.min, window.max));
            }
            let atoms: Vec<Point> = (0..n)
                .map(|i| {
                    let t = t0 + (i as f64 + 0.5) * dt;
                    [t, g(t)]
                })
                .collect();
            // Per-atom weight = arclength of the graph over the subinterval.
            // Exact for the triangle profile; 8-point midpoint rule otherwise.
            let weights: Vec<f64> = (0..n)
                .map(|i| {
                    let a = t0 + i as f64 * dt;
                    match profile {
                        GraphProfile::Triangle => dt * (1.0 + lip * lip).sqrt(),
                        GraphProfile::Sine => {
                            let m = 8;
                            (0..m)
                                .map(|k| {
                                    let t = a + (k as f64 + 0.5) * dt / m as f64;
                                    (1.0 + (lip * t.cos()).powi(2)).sqrt() * dt / m as f64
                                })
                                .sum()
                        }
                    }
                })
                .collect();
            // Distance polyline: triangle profile is piecewise linear with
            // kinks at integer multiples of the half-period, so vertices at
            // every quarter unit capture it exactly; the sine profile gets a
            // fine polyline (documented resolution).
            let mv = 16 * (t1 - t0).ceil() as usize * 4;
            let vertices: Vec<Point> =
                (0..=mv).map(|i| {
                    let t = t0 + (t1 - t0) * i as f64 / mv as f64;
                    [t, g(t)]
                }).collect();
            let total: f64 = weights.iter().sum();
            let diam = dist(vertices[0], vertices[mv]).max(t1 - t0);
            BoundaryModel {
                kind,
                s: 1.0,
                window,
                atoms,
                weights,
                total_mass: total,
                normalization: 1.0,
                diam_boundary: diam,
                atom_spacing: dt,
                distance_bias: if profile == GraphProfile::Triangle {
                    0.0
                } else {
                    // polyline sag bound: (segment length)² · max curvature / 8
                    let seg = (t1 - t0) / mv as f64;
                    seg * seg * lip / 8.0
                },
                ahlfors_c0: 0.0,
                ahlfors_range: (0.0, 0.0),
                geom: ScenarioGeom::Graph { vertices },
            }
        }
    };
    debug_assert!(model.s > 0.0 && model.s <= (AMBIENT_DIM - 1) as f64);
    let (c0, range) = measure_ahlfors(&model);
    model.ahlfors_c0 = c0;
    model.ahlfors_range = range;
    Ok(model)
}

fn graph_height(profile: GraphProfile, lip: f64, t: f64) -> f64 {
    match profile {
        // Period-2 sawtooth through the origin with slope exactly ±lip.
        GraphProfile::Triangle => {
            let u = (t.rem_euclid(2.0) - 1.0).abs(); // ∈ [0,1], slope ±1
            lip * (1.0 - u) - lip * 0.5
        }
        GraphProfile::Sine => lip * t.sin(),
    }
}

/// Distance from a point to a filled axis-aligned box.
fn dist_to_box(p: Point, min: Point, max: Point) -> f64 {
    let dx = (min[0] - p[0]).max(0.0).max(p[0] - max[0]);
    let dy = (min[1] - p[1]).max(0.0).max(p[1] - max[1]);
    dx.hypot(dy)
}

/// Distance between two axis-aligned boxes (0 when they intersect).
fn box_box_dist(amin: Point, amax: Point, bmin: Point, bmax: Point) -> f64 {
    let dx = (bmin[0] - amax[0]).max(0.0).max(amin[0] - bmax[0]);
    let dy = (bmin[1] - amax[1]).max(0.0).max(amin[1] - bmax[1]);
    dx.hypot(dy)
}

fn seg_box_dist(a: Point, b: Point, bmin: Point, bmax: Point) -> f64 {
    // convex vs convex with no interior test needed by callers (they only
    // call this when the sets are known disjoint): the minimum is attained
    // at a vertex of one of the two sets
    let corners =
        [bmin, [bmax[0], bmin[1]], bmax, [bmin[0], bmax[1]]];
    let mut best = f64::INFINITY;
    for c in corners {
        best = best.min(dist_to_segment(c, a, b));
    }
    for p in [a, b] {
        best = best.min(dist_to_box(p, bmin, bmax));
    }
    best
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Best-first descent over the self-similar square hierarchy with pruning by
/// the bounding-box distance.
fn cantor_square_dist(p: Point, corner: Point, side: f64, depth: u32, best: &mut f64) {
    let lb = dist_to_box(p, corner, [corner[0] + side, corner[1] + side]);
    if lb >= *best {
        return;
    }
    if depth == 0 {
        *best = lb;
        return;
    }
    let c = side / 4.0;
    let mut children = [
        [corner[0], corner[1]],
        [corner[0] + 3.0 * c, corner[1]],
        [corner[0], corner[1] + 3.0 * c],
        [corner[0] + 3.0 * c, corner[1] + 3.0 * c],
    ];
    // visit nearer children first so pruning bites
    children.sort_by(|a, b| {
        let da = dist_to_box(p, *a, [a[0] + c, a[1] + c]);
        let db = dist_to_box(p, *b, [b[0] + c, b[1] + c]);
        da.partial_cmp(&db).unwrap()
    });
    for ch in children {
        cantor_square_dist(p, ch, c, depth - 1, best);
    }
}

fn cantor_interval_dist(p: Point, a: f64, len: f64, depth: u32, best: &mut f64) {
    let lb = dist_to_box(p, [a, 0.0], [a + len, 0.0]);
    if lb >= *best {
        return;
    }
    if depth == 0 {
        *best = lb;
        return;
    }
    let c = len / 4.0;
    let first_right = (p[0] - a) > len / 2.0;
    let order = if first_right { [a + 3.0 * c, a] } else { [a, a + 3.0 * c] };
    for ch in order {
        cantor_interval_dist(p, ch, c, depth - 1, best);
    }
}

/// Box-query analogue of `cantor_square_dist`.
fn cantor_square_box_dist(
    bmin: Point,
    bmax: Point,
    corner: Point,
    side: f64,
    depth: u32,
    best: &mut f64,
) {
    let lb = box_box_dist(bmin, bmax, corner, [corner[0] + side, corner[1] + side]);
    if lb >= *best {
        return;
    }
    if depth == 0 {
        *best = lb;
        return;
    }
    let c = side / 4.0;
    for off in [[0.0, 0.0], [3.0 * c, 0.0], [0.0, 3.0 * c], [3.0 * c, 3.0 * c]] {
        cantor_square_box_dist(bmin, bmax, [corner[0] + off[0], corner[1] + off[1]], c, depth - 1, best);
    }
}

fn cantor_interval_box_dist(
    bmin: Point,
    bmax: Point,
    a: f64,
    len: f64,
    depth: u32,
    best: &mut f64,
) {
    let lb = box_box_dist(bmin, bmax, [a, 0.0], [a + len, 0.0]);
    if lb >= *best {
        return;
    }
    if depth == 0 {
        *best = lb;
        return;
    }
    let c = len / 4.0;
    for ch in [a, a + 3.0 * c] {
        cantor_interval_box_dist(bmin, bmax, ch, c, depth - 1, best);
    }
}

impl BoundaryModel {
    /// δ_Ω(x) = dist(x, Ω^c). Exact for half-plane and the triangle graph;
    /// Cantor scenarios measure against the generation-G covering cells
    /// (two-sided bias at most `distance_bias`).
    pub fn delta(&self, x: Point) -> f64 {
        match &self.geom {
            ScenarioGeom::HalfPlane => x[1].max(0.0),
            ScenarioGeom::CantorSquares { generation } => {
                let mut best = f64::INFINITY;
                cantor_square_dist(x, [0.0, 0.0], 1.0, *generation, &mut best);
                best
            }
            ScenarioGeom::CantorIntervals { generation } => {
                let mut best = f64::INFINITY;
                cantor_interval_dist(x, 0.0, 1.0, *generation, &mut best);
                best
            }
            ScenarioGeom::Graph { vertices } => {
                // Points on/below the graph are outside the domain.
                let i = vertices
                    .partition_point(|v| v[0] < x[0])
                    .clamp(1, vertices.len() - 1);
                let (a, b) = (vertices[i - 1], vertices[i]);
                let y_graph = if b[0] > a[0] {
                    a[1] + (b[1] - a[1]) * (x[0] - a[0]) / (b[0] - a[0])
                } else {
                    a[1]
                };
                if x[1] <= y_graph {
                    return 0.0;
                }
                let mut best = f64::INFINITY;
                // widen the scan window until the best distance is certain
                let mut lo = i - 1;
                let mut hi = i;
                loop {
                    for j in lo..hi {
                        best = best.min(dist_to_segment(x, vertices[j], vertices[j + 1]));
                    }
                    let left_bound =
                        if lo == 0 { f64::INFINITY } else { (x[0] - vertices[lo][0]).abs() };
                    let right_bound = if hi == vertices.len() - 1 {
                        f64::INFINITY
                    } else {
                        (vertices[hi][0] - x[0]).abs()
                    };
                    if best <= left_bound.min(right_bound) {
                        return best;
                    }
                    lo = lo.saturating_sub(4);
                    hi = (hi + 4).min(vertices.len() - 1);
                }
            }
        }
    }

    /// Distance from an axis-aligned box to Ω^c — the exact box analogue of
    /// `delta` (0 when the box touches or crosses the complement). Used by
    /// the Whitney construction, where certified per-square distances are
    /// needed rather than point samples.
    pub fn dist_box(&self, bmin: Point, bmax: Point) -> f64 {
        match &self.geom {
            ScenarioGeom::HalfPlane => bmin[1].max(0.0),
            ScenarioGeom::CantorSquares { generation } => {
                let mut best = f64::INFINITY;
                cantor_square_box_dist(bmin, bmax, [0.0, 0.0], 1.0, *generation, &mut best);
                best
            }
            ScenarioGeom::CantorIntervals { generation } => {
                let mut best = f64::INFINITY;
                cantor_interval_box_dist(bmin, bmax, 0.0, 1.0, *generation, &mut best);
                best
            }
            ScenarioGeom::Graph { vertices } => {
                // the subgraph {y ≤ g(x)} meets the box iff g reaches the
                // box's bottom edge somewhere over its x-range
                let lo = vertices.partition_point(|v| v[0] < bmin[0]).saturating_sub(1);
                let hi = vertices.partition_point(|v| v[0] <= bmax[0]).min(vertices.len() - 1);
                let g_at = |x: f64| -> f64 {
                    let i = vertices.partition_point(|v| v[0] < x).clamp(1, vertices.len() - 1);
                    let (a, b) = (vertices[i - 1], vertices[i]);
                    if b[0] > a[0] {
                        a[1] + (b[1] - a[1]) * (x - a[0]) / (b[0] - a[0])
                    } else {
                        a[1]
                    }
                };
                let mut gmax = g_at(bmin[0]).max(g_at(bmax[0]));
                for v in &vertices[lo..=hi] {
                    if v[0] >= bmin[0] && v[0] <= bmax[0] {
                        gmax = gmax.max(v[1]);
                    }
                }
                if gmax >= bmin[1] {
                    return 0.0;
                }
                let mut best = f64::INFINITY;
                for w in vertices.windows(2) {
                    // cheap reject by x-gap before the exact segment test
                    let gap = (bmin[0] - w[1][0]).max(w[0][0] - bmax[0]).max(0.0);
                    if gap < best {
                        best = best.min(seg_box_dist(w[0], w[1], bmin, bmax));
                    }
                }
                best
            }
        }
    }

    /// Sum of atom weights in the closed ball B̄(ξ, r); exact with respect to
    /// the discrete measure.
    pub fn surface_ball_mass(&self, xi: Point, r: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .filter(|(a, _)| dist(**a, xi) <= r)
            .map(|(_, w)| w)
            .sum()
    }

    /// Deterministic corkscrew search. Stage 1 scans 64 angles on the circle
    /// of radius r/2 around ξ and accepts if the best candidate achieves the
    /// ideal quality δ ≥ r/2. Stage 2 scans the full polar grid
    /// (15 radii × 64 angles) inside the window, maximizing δ; ties resolve
    /// to the earliest grid point.
    pub fn corkscrew_point(&self, xi: Point, r: f64) -> Result<Point, GeomError> {
        if !(r > 0.0) || r >= self.window.diam() {
            return Err(GeomError::NoCorkscrew(xi[0], xi[1], r));
        }
        let angle = |j: usize| 2.0 * std::f64::consts::PI * j as f64 / 64.0;
        let cand = |rho: f64, j: usize| {
            [xi[0] + rho * angle(j).cos(), xi[1] + rho * angle(j).sin()]
        };
        let mut best: Option<(f64, Point)> = None;
        for j in 0..64 {
            let p = cand(r / 2.0, j);
            if !self.window.contains(p) {
                continue;
            }
            let d = self.delta(p);
            if best.map_or(true, |(bd, _)| d > bd + 1e-15) {
                best = Some((d, p));
            }
        }
        if let Some((d, p)) = best {
            if d >= r / 2.0 - 1e-12 {
                return Ok(p);
            }
        }
        for i in 1..16 {
            let rho = r * i as f64 / 16.0;
            for j in 0..64 {
                let p = cand(rho, j);
                if !self.window.contains(p) {
                    continue;
                }
                let d = self.delta(p);
                if best.map_or(true, |(bd, _)| d > bd + 1e-15) {
                    best = Some((d, p));
                }
            }
        }
        let floor = (0.05 * r).max(4.0 * self.distance_bias);
        match best {
            Some((d, p)) if d >= floor => Ok(p),
            _ => Err(GeomError::NoCorkscrew(xi[0], xi[1], r)),
        }
    }

    /// Carrot curve from ξ into the domain, ending at a corkscrew point for
    /// (ξ, r). Constructions are per-scenario and deterministic:
    /// a vertical dyadic descent where the complement lies above the boundary
    /// (half-plane, graph, linear Cantor), and the nested-cell center chain
    /// with L-shaped waypoints for the four-corner set. The carrot property
    /// δ(γ(t)) ≥ λ·t is certified at the polyline vertices and λ is recorded.
    pub fn good_curve(&self, xi: Point, r: f64) -> Result<GoodCurve, GeomError> {
        if r < 2.0 * self.atom_spacing {
            return Err(GeomError::NoCurve(
                xi[0],
                xi[1],
                r,
                format!("radius below atom spacing {:.3e}", self.atom_spacing),
            ));
        }
        if !(r < self.window.diam()) {
            return Err(GeomError::NoCurve(xi[0], xi[1], r, "radius exceeds window".into()));
        }
        let vertices = match &self.geom {
            ScenarioGeom::HalfPlane | ScenarioGeom::CantorIntervals { .. } | ScenarioGeom::Graph { .. } => {
                let h0 = (r / 2.0).min(self.window.max[1] - xi[1]);
                if h0 <= 0.0 {
                    return Err(GeomError::NoCurve(xi[0], xi[1], r, "no vertical room".into()));
                }
                let floor = (2.0 * self.distance_bias).max(self.atom_spacing / 2.0).max(h0 * 2e-5);
                let mut vs = vec![xi];
                let mut k = 0;
                let mut heights = Vec::new();
                loop {
                    let h = h0 * 0.5f64.powi(k);
                    if h < floor || k > 60 {
                        break;
                    }
                    heights.push(h);
                    k += 1;
                }
                heights.reverse();
                vs.extend(heights.into_iter().map(|h| [xi[0], xi[1] + h]));
                vs
            }
            ScenarioGeom::CantorSquares { generation } => {
                let g = *generation;
                // nested squares containing ξ, root first
                let mut chain = vec![([0.0f64, 0.0f64], 1.0f64)];
                for _ in 0..g {
                    let (corner, side) = *chain.last().unwrap();
                    let c = side / 4.0;
                    let child = [
                        [corner[0], corner[1]],
                        [corner[0] + 3.0 * c, corner[1]],
                        [corner[0], corner[1] + 3.0 * c],
                        [corner[0] + 3.0 * c, corner[1] + 3.0 * c],
                    ]
                    .into_iter()
                    .find(|ch| {
                        xi[0] >= ch[0] - c * 0.125
                            && xi[0] <= ch[0] + c * 1.125
                            && xi[1] >= ch[1] - c * 0.125
                            && xi[1] <= ch[1] + c * 1.125
                    });
                    match child {
                        Some(ch) => chain.push((ch, c)),
                        None => {
                            return Err(GeomError::NoCurve(
                                xi[0],
                                xi[1],
                                r,
                                "point is not on the boundary set".into(),
                            ))
                        }
                    }
                }
                // start scale: the largest cell whose center stays in B(ξ, r)
                let k0 = chain
                    .iter()
                    .position(|(_, side)| std::f64::consts::SQRT_2 * side <= 0.75 * r)
                    .ok_or_else(|| {
                        GeomError::NoCurve(xi[0], xi[1], r, "radius exceeds root cell".into())
                    })?;
                let kend = (g as usize).saturating_sub(1);
                if k0 > kend {
                    return Err(GeomError::NoCurve(
                        xi[0],
                        xi[1],
                        r,
                        "radius below cell resolution".into(),
                    ));
                }
                let center =
                    |i: usize| -> Point {
                        let (c, s) = chain[i];
                        [c[0] + s / 2.0, c[1] + s / 2.0]
                    };
                // descend: center of cell k, L-waypoint through the central
                // column of cell k, center of cell k+1, ...
                let mut vs = vec![xi];
                let mut down: Vec<Point> = Vec::new();
                for k in k0..=kend {
                    down.push(center(k));
                    if k < kend {
                        down.push([center(k)[0], center(k + 1)[1]]);
                    }
                }
                down.reverse();
                vs.extend(down);
                vs
            }
        };
        let mut arclens = vec![0.0];
        for i in 1..vertices.len() {
            arclens.push(arclens[i - 1] + dist(vertices[i - 1], vertices[i]));
        }
        // arclength is measured from ξ = vertices[0]
        let mut lambda = f64::INFINITY;
        for i in 1..vertices.len() {
            lambda = lambda.min(self.delta(vertices[i]) / arclens[i]);
        }
        if !(lambda > 0.0) {
            return Err(GeomError::NoCurve(xi[0], xi[1], r, "chain stalled at the boundary".into()));
        }
        Ok(GoodCurve { vertices, arclens, lambda })
    }
}

/// Polyline from a boundary point to a corkscrew point, with the measured
/// carrot constant λ = min over vertices of δ(γ(t))/t.
#[derive(Clone, Debug)]
pub struct GoodCurve {
    pub vertices: Vec<Point>,
    pub arclens: Vec<f64>,
    pub lambda: f64,
}

impl GoodCurve {
    /// Interior endpoint (the corkscrew point).
    pub fn tip(&self) -> Point {
        *self.vertices.last().unwrap()
    }
}

/// Probes ball masses over a deterministic grid of atoms × dyadic radii and
/// returns the two-sided Ahlfors constant with a 1.25 safety factor, together
/// with the probed radius range.
fn measure_ahlfors(model: &BoundaryModel) -> (f64, (f64, f64)) {
    let r_min = 4.0 * model.atom_spacing;
    let r_max = model.window.diam() / 4.0;
    let mut c0: f64 = 1.0;
    let stride = (model.atoms.len() / 64).max(1);
    let mut r = r_max;
    while r >= r_min {
        for (i, &a) in model.atoms.iter().enumerate().step_by(stride) {
            let _ = i;
            let mass = model.surface_ball_mass(a, r);
            let ratio = mass / r.powf(model.s);
            if ratio > 0.0 {
                c0 = c0.max(ratio).max(1.0 / ratio);
            }
        }
        r /= 2.0;
    }
    (1.25 * c0, (r_min, r_max))
}

/// Memoizing wrapper around `BoundaryModel::delta`, keyed by grid-snapped
/// points (hits require exact coordinates, so no snapping error is
/// introduced). Bounded size; safe for concurrent use.
pub struct DistanceOracle<'a> {
    pub model: &'a BoundaryModel,
    snap: f64,
    cap_per_shard: usize,
    shards: Vec<Mutex<HashMap<(i64, i64), (Point, f64)>>>,
}

impl<'a> DistanceOracle<'a> {
    pub fn new(model: &'a BoundaryModel) -> Self {
        let snap = (model.atom_spacing / 8.0).max(1e-9);
        DistanceOracle {
            model,
            snap,
            cap_per_shard: 1 << 14,
            shards: (0..16).map(|_| Mutex::new(HashMap::new())).collect(),
        }
    }

    pub fn delta(&self, x: Point) -> f64 {
        let key = ((x[0] / self.snap).round() as i64, (x[1] / self.snap).round() as i64);
        let shard = &self.shards[((key.0 ^ key.1).rem_euclid(16)) as usize];
        {
            let m = shard.lock().unwrap();
            if let Some((p, d)) = m.get(&key) {
                if *p == x {
                    return *d;
                }
            }
        }
        let d = self.model.delta(x);
        let mut m = shard.lock().unwrap();
        if m.len() >= self.cap_per_shard {
            m.clear();
        }
        m.insert(key, (x, d));
        d
    }
}
