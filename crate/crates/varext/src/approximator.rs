//! The ε-approximating field of the dyadic extension.
//!
//! A corona decomposition splits the boundary lattice into trees on which the
//! data's averages stay ε-close to the tree top's average. The approximant
//! replaces the extension's per-cube coefficient m_{σ,b(P)}(f) with the tree
//! top's average m_{σ,R}(f) wherever that is safe, so the blended field is
//! locally constant on the interior of each tree — its gradient concentrates
//! on a small "crossing" zone near tree boundaries while staying uniformly
//! ε-close to the extension itself.
//!
//! Families computed from the Whitney grid and the corona forest:
//!
//! * `crossing` — Whitney cubes whose 1.2-dilation meets the 1.2-dilation of
//!   a cube anchored in a *different* tree; these keep the extension's own
//!   coefficient so the blend stays consistent across the seam,
//! * `crossing_neighbors` — cubes whose 1.2-dilation meets a crossing cube
//!   (always a superset of `crossing`),
//! * `tree_boundary(R)` — boundary cubes of tree R that anchor a crossing
//!   cube; `tree_boundary_ext(R)` widens to anchors of crossing neighbors,
//! * `bad_whitney` — Whitney cubes anchored in the forest's excluded (bad)
//!   family; they also keep the extension coefficient,
//! * A-closeness: two lattice cubes are A-close when their diameters are
//!   within a factor A of each other and their gap is at most A times the
//!   diameter sum. Every tree-boundary cube has an A-close cube in another
//!   tree; the smallest such A is measured at build time.
//!
//! All families are frozen after construction; evaluation is pure and safe to
//! run concurrently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::corona::{packing_profile, CoronaForest, StoppingMode};
use crate::dyadic::{cube_average, BoundaryFunction, CubeId, DyadicLattice};
use crate::extension::{blend_eval, ExtensionError};
use crate::functionals::InteriorField;
use crate::whitney::WhitneyGrid;
use crate::Point;

/// Dilation used by the crossing-family scans (fattened supports may touch
/// without the actual 1.1-supports overlapping).
pub const CROSSING_DILATION: f64 = 1.2;
/// Dilation of the actual partition supports.
pub const SUPPORT_DILATION: f64 = 1.1;

#[derive(Debug, thiserror::Error)]
pub enum ApproxError {
    #[error("anchor cube {0:?} is neither in a tree nor in the bad family — \
             the corona forest does not cover the grid's lattice")]
    UnassignedAnchor(CubeId),
    #[error(transparent)]
    Extension(#[from] ExtensionError),
}

/// Axis-aligned gap between two boxes (0 when they touch or overlap).
fn box_gap(a_min: Point, a_max: Point, b_min: Point, b_max: Point) -> f64 {
    let dx = (b_min[0] - a_max[0]).max(a_min[0] - b_max[0]).max(0.0);
    let dy = (b_min[1] - a_max[1]).max(a_min[1] - b_max[1]).max(0.0);
    dx.hypot(dy)
}

/// Whether two lattice cubes are A-close: diameters within a factor `a` of
/// each other and gap at most `a` times the diameter sum. Comparisons are
/// multiplicative, so degenerate single-atom cells (diameter 0) are handled
/// without dividing: such a cell is A-close only to touching cells of
/// diameter 0.
pub fn a_close(lattice: &DyadicLattice, q1: CubeId, q2: CubeId, a: f64) -> bool {
    let (c1, c2) = (lattice.cube(q1), lattice.cube(q2));
    let (d1, d2) = (c1.diam(), c2.diam());
    let gap = box_gap(c1.box_min, c1.box_max, c2.box_min, c2.box_max);
    d1 <= a * d2 && d2 <= a * d1 && gap <= a * (d1 + d2)
}

/// Smallest `a` for which `a_close(q1, q2, a)` holds (∞ when no finite value
/// works, i.e. positive gap between zero-diameter cells).
fn needed_a(lattice: &DyadicLattice, q1: CubeId, q2: CubeId) -> f64 {
    let (c1, c2) = (lattice.cube(q1), lattice.cube(q2));
    let (d1, d2) = (c1.diam(), c2.diam());
    let gap = box_gap(c1.box_min, c1.box_max, c2.box_min, c2.box_max);
    if d1 <= 0.0 || d2 <= 0.0 {
        return if gap <= 0.0 && d1 == d2 { 1.0 } else { f64::INFINITY };
    }
    (d1 / d2).max(d2 / d1).max(gap / (d1 + d2)).max(1.0)
}

/// The boundary families feeding the approximant's coefficient rule.
#[derive(Clone, Debug)]
pub struct ApproximantFamilies {
    /// Effective closeness parameter: max of the requested floor and the
    /// measured smallest admissible value, so the closeness invariant holds.
    pub a: f64,
    /// Smallest `a` for which every tree-boundary cube has an a-close cube
    /// in a different tree on this grid (1 when no tree boundary exists).
    pub a_measured: f64,
    /// Whitney cubes whose 1.2-dilations meet a 1.2-dilated cube anchored in
    /// a different tree.
    pub crossing: BTreeSet<u32>,
    /// Whitney cubes whose 1.2-dilation meets a crossing cube (⊇ crossing).
    pub crossing_neighbors: BTreeSet<u32>,
    /// Whitney cubes anchored in the forest's bad family.
    pub bad_whitney: BTreeSet<u32>,
    /// Tree top ↦ its boundary cubes (anchors of crossing cubes), sorted.
    pub tree_boundary: BTreeMap<CubeId, Vec<CubeId>>,
    /// Tree top ↦ anchors of crossing-neighbor cubes in that tree, sorted.
    pub tree_boundary_ext: BTreeMap<CubeId, Vec<CubeId>>,
    /// Union of all tree boundaries, deduplicated and sorted.
    pub boundary_union: Vec<CubeId>,
    /// Union of all extended tree boundaries, deduplicated and sorted.
    pub ext_union: Vec<CubeId>,
    /// Lattice cube ↦ its tree top, merged over all forest parts.
    pub top_of: BTreeMap<CubeId, CubeId>,
    /// Lattice cubes excluded by root splitting.
    pub bad_cubes: BTreeSet<CubeId>,
    /// Carleson packing profile of `boundary_union`, recorded at build.
    pub boundary_packing: f64,
    /// Carleson packing profile of `ext_union`, recorded at build.
    pub ext_packing: f64,
}

impl ApproximantFamilies {
    /// One row per Whitney cube:
    /// `cube,level,b_generation,b_index,crossing,neighbor,bad`.
    pub fn whitney_csv(&self, grid: &WhitneyGrid) -> String {
        let mut out = String::from("cube,level,b_generation,b_index,crossing,neighbor,bad\n");
        for (i, c) in grid.cubes.iter().enumerate() {
            let i = i as u32;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                i,
                c.level,
                c.b.generation,
                c.b.index,
                u8::from(self.crossing.contains(&i)),
                u8::from(self.crossing_neighbors.contains(&i)),
                u8::from(self.bad_whitney.contains(&i)),
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    /// One row per tree-boundary cube:
    /// `generation,index,top_generation,top_index,extended`
    /// (`extended=0` for the core boundary, `1` for members only of the
    /// extended boundary).
    pub fn boundary_csv(&self) -> String {
        let core: BTreeSet<CubeId> = self.boundary_union.iter().copied().collect();
        let mut out = String::from("generation,index,top_generation,top_index,extended\n");
        for (top, cubes) in &self.tree_boundary_ext {
            for q in cubes {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    q.generation,
                    q.index,
                    top.generation,
                    top.index,
                    u8::from(!core.contains(q)),
                )
                .expect("writing to a String cannot fail");
            }
        }
        out
    }
}

/// Scan the grid against the corona forest: crossing cubes, their neighbors,
/// tree boundaries, bad anchors, the measured closeness parameter, and the
/// packing profiles of the boundary families. `a_floor` is the smallest
/// closeness parameter the caller wants recorded; the effective `a` is the
/// max of the floor and the measured value (pass 1.0 for the pure measured
/// default).
pub fn build_families(
    grid: &WhitneyGrid,
    forest: &CoronaForest,
    a_floor: f64,
) -> ApproximantFamilies {
    let lattice = &grid.lattice;
    let mut top_of: BTreeMap<CubeId, CubeId> = BTreeMap::new();
    for part in &forest.parts {
        for (&q, &top) in &part.tree_of {
            top_of.insert(q, top);
        }
    }
    let bad_cubes: BTreeSet<CubeId> = forest.bad.iter().copied().collect();

    // Crossing cubes: fattened supports meet across two different trees.
    let anchors: Vec<Option<CubeId>> = grid
        .cubes
        .iter()
        .map(|c| top_of.get(&c.b).map(|_| c.b))
        .collect();
    let mut crossing: BTreeSet<u32> = BTreeSet::new();
    for (i, cube) in grid.cubes.iter().enumerate() {
        let Some(b_i) = anchors[i] else { continue };
        let t_i = top_of[&b_i];
        for &j in &cube.neighbors_12 {
            let Some(b_j) = anchors[j as usize] else { continue };
            if top_of[&b_j] != t_i {
                crossing.insert(i as u32);
                break;
            }
        }
    }

    // Neighbors of the crossing family (1.2-dilations again; neighbor lists
    // include the cube itself, so the crossing family is contained).
    let mut crossing_neighbors: BTreeSet<u32> = BTreeSet::new();
    for (i, cube) in grid.cubes.iter().enumerate() {
        if cube.neighbors_12.iter().any(|j| crossing.contains(j)) {
            crossing_neighbors.insert(i as u32);
        }
    }

    let bad_whitney: BTreeSet<u32> = grid
        .cubes
        .iter()
        .enumerate()
        .filter(|(_, c)| bad_cubes.contains(&c.b))
        .map(|(i, _)| i as u32)
        .collect();

    // Tree boundaries: anchors of crossing cubes, grouped by tree top.
    let mut tree_boundary: BTreeMap<CubeId, BTreeSet<CubeId>> = BTreeMap::new();
    for &i in &crossing {
        let b = grid.cubes[i as usize].b;
        tree_boundary.entry(top_of[&b]).or_default().insert(b);
    }
    let mut tree_boundary_ext: BTreeMap<CubeId, BTreeSet<CubeId>> = BTreeMap::new();
    for &i in &crossing_neighbors {
        let b = grid.cubes[i as usize].b;
        if let Some(&top) = top_of.get(&b) {
            tree_boundary_ext.entry(top).or_default().insert(b);
        }
    }
    let boundary_union: Vec<CubeId> = tree_boundary
        .values()
        .flat_map(|s| s.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ext_union: Vec<CubeId> = tree_boundary_ext
        .values()
        .flat_map(|s| s.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    // Smallest closeness parameter: every boundary cube must find an A-close
    // cube in a different tree.
    let mut a_measured = 1.0f64;
    for &q in &boundary_union {
        let t_q = top_of[&q];
        let mut best = f64::INFINITY;
        for (&q2, &t2) in &top_of {
            if t2 != t_q {
                best = best.min(needed_a(lattice, q, q2));
            }
        }
        a_measured = a_measured.max(best);
    }

    let boundary_packing = forest
        .roots
        .iter()
        .map(|&r| packing_profile(lattice, &boundary_union, r))
        .fold(0.0, f64::max);
    let ext_packing = forest
        .roots
        .iter()
        .map(|&r| packing_profile(lattice, &ext_union, r))
        .fold(0.0, f64::max);

    ApproximantFamilies {
        a: a_floor.max(a_measured),
        a_measured,
        crossing,
        crossing_neighbors,
        bad_whitney,
        tree_boundary: tree_boundary
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect(),
        tree_boundary_ext: tree_boundary_ext
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect(),
        boundary_union,
        ext_union,
        top_of,
        bad_cubes,
        boundary_packing,
        ext_packing,
    }
}

/// The approximating field: the same partition blend as the extension, with
/// per-cube coefficients snapped to tree-top averages away from crossings.
/// Values are convex combinations of the coefficients; at a point all of
/// whose overlapping cubes anchor in one tree's interior, the value is that
/// tree's top average exactly and the gradient vanishes.
pub struct ApproximantField {
    grid: Arc<WhitneyGrid>,
    coeffs: Vec<f64>,
    families: ApproximantFamilies,
    global_mean: f64,
    /// Stopping parameters carried over from the corona forest, for reports.
    pub epsilon: f64,
    pub mode: StoppingMode,
}

impl std::fmt::Debug for ApproximantField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApproximantField")
            .field("cubes", &self.coeffs.len())
            .field("epsilon", &self.epsilon)
            .field("mode", &self.mode)
            .field("crossing", &self.families.crossing.len())
            .finish_non_exhaustive()
    }
}

impl ApproximantField {
    pub fn grid(&self) -> &Arc<WhitneyGrid> {
        &self.grid
    }

    pub fn coefficient(&self, p: u32) -> f64 {
        self.coeffs[p as usize]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn families(&self) -> &ApproximantFamilies {
        &self.families
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    /// Value and gradient where the band covers x; None outside.
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

impl InteriorField for ApproximantField {
    fn value(&self, x: Point) -> f64 {
        self.eval(x).map(|(v, _)| v).unwrap_or(0.0)
    }

    fn gradient(&self, x: Point) -> [f64; 2] {
        self.eval(x).map(|(_, g)| g).unwrap_or([0.0, 0.0])
    }

    fn origin(&self) -> &'static str {
        "approximant"
    }

    fn scale_band(&self) -> Option<(f64, f64)> {
        Some((self.grid.stats.delta_floor, f64::MAX))
    }
}

/// Build the approximant of the extension of `f`. Coefficient rule per
/// Whitney cube `P`:
///
/// * `ℓ(P) ≥ diam(∂Ω)` → the global mean (same as the extension, so the two
///   fields agree on oversize cubes),
/// * `b(P)` bad, or `P` crossing → the extension's own m_{σ,b(P)}(f),
/// * otherwise → m_{σ,R}(f) for the tree top `R` above `b(P)`.
pub fn approximant(
    grid: &Arc<WhitneyGrid>,
    forest: &CoronaForest,
    families: ApproximantFamilies,
    f: &BoundaryFunction,
) -> Result<ApproximantField, ApproxError> {
    let model = grid.model();
    if f.values().len() != model.atoms.len() {
        return Err(ExtensionError::AtomMismatch {
            data: f.values().len(),
            model: model.atoms.len(),
        }
        .into());
    }
    let lattice = &grid.lattice;
    let global_mean = f.range_integral(0, model.atoms.len() as u32) / model.total_mass;
    let coeffs: Vec<f64> = grid
        .cubes
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.side >= model.diam_boundary {
                return Ok(global_mean);
            }
            if families.bad_cubes.contains(&p.b) || families.crossing.contains(&(i as u32)) {
                return Ok(cube_average(lattice, p.b, f));
            }
            match families.top_of.get(&p.b) {
                Some(&top) => Ok(cube_average(lattice, top, f)),
                None => Err(ApproxError::UnassignedAnchor(p.b)),
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(ApproximantField {
        grid: grid.clone(),
        coeffs,
        families,
        global_mean,
        epsilon: forest.epsilon,
        mode: forest.mode,
    })
}

// ---------------------------------------------------------------------------
