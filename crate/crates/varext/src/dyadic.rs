//! Dyadic lattice on the boundary: a forest of nested cubes aligned to the
//! ambient dyadic grid, boundary functions with exact cube averages, and the
//! dyadic / truncated / centered / non-centered maximal operators.
//!
//! Generations are binary throughout: a cube of generation j has nominal side
//! ℓ(Q) = 2⁻ʲ, and its geometric diameter is comparable to ℓ(Q) within the
//! lattice's recorded constants. For the Cantor scenarios the natural cell
//! hierarchy is quartic (each cell splits in 4 two binary octaves down), so
//! odd binary generations hold *passthrough* cubes — the same geometric cell
//! re-listed with halved nominal side and a single child. This keeps a cube of
//! every binary side available, which the Whitney boundary association
//! requires, while the quartic levels carry the self-similar partition.

use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::geometry::{BoundaryModel, ScenarioKind};
use crate::{dist, Point};

#[derive(Debug, thiserror::Error)]
pub enum LatticeError {
    #[error("level range [{0}, {1}] is invalid")]
    BadRange(i32, i32),
    #[error("finest level {0} is below the atomic resolution (spacing {1:.3e})")]
    RangeTooFine(i32, f64),
    #[error("point ({0}, {1}) lies outside the lattice support")]
    OutsideSupport(f64, f64),
}

/// Address of a cube: binary generation (ℓ(Q) = 2⁻ʲ) and position within the
/// generation's cube list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CubeId {
    pub generation: i32,
    pub index: u32,
}

#[derive(Clone, Debug)]
pub struct DyadicCube {
    pub id: CubeId,
    /// Representative boundary point: the atom nearest the cell's geometric
    /// center (lowest index on ties).
    pub center: Point,
    /// Nominal side ℓ(Q) = 2^{-generation}.
    pub side: f64,
    /// Geometric hull of the cell (degenerate in y for linear boundaries).
    pub box_min: Point,
    pub box_max: Point,
    pub mass: f64,
    /// Atoms of the cube: contiguous range into the model's atom list.
    pub atom_start: u32,
    pub atom_end: u32,
    pub parent: Option<u32>,
    /// Children occupy child_start..child_start+child_count in the next
    /// generation's list.
    pub child_start: u32,
    pub child_count: u8,
}

impl DyadicCube {
    pub fn diam(&self) -> f64 {
        let dx = self.box_max[0] - self.box_min[0];
        let dy = self.box_max[1] - self.box_min[1];
        dx.hypot(dy)
    }

    pub fn n_atoms(&self) -> usize {
        (self.atom_end - self.atom_start) as usize
    }
}

/// Measured comparability constants of a built lattice.
#[derive(Clone, Copy, Debug)]
pub struct LatticeStats {
    /// min/max over cubes of diam(Q)/ℓ(Q) (diameter of single-atom cells
    /// counts as 0 and is excluded from the min).
    pub diam_over_side: (f64, f64),
    /// min/max over cubes of σ(Q)/ℓ(Q)^s.
    pub mass_over_side_s: (f64, f64),
}

static LATTICE_SEQ: AtomicU64 = AtomicU64::new(1);

/// A frozen forest of dyadic boundary cubes. Built once, then queried purely.
pub struct DyadicLattice {
    pub model: Arc<BoundaryModel>,
    /// Unique id used by boundary functions to key their average caches.
    pub uid: u64,
    /// generations[k] holds all cubes of binary generation gen_min + k.
    pub generations: Vec<Vec<DyadicCube>>,
    pub gen_min: i32,
    pub gen_max: i32,
    pub stats: LatticeStats,
}

impl DyadicLattice {
    pub fn cube(&self, id: CubeId) -> &DyadicCube {
        &self.generations[(id.generation - self.gen_min) as usize][id.index as usize]
    }

    pub fn level(&self, generation: i32) -> &[DyadicCube] {
        &self.generations[(generation - self.gen_min) as usize]
    }

    pub fn parent_of(&self, id: CubeId) -> Option<CubeId> {
        self.cube(id).parent.map(|p| CubeId { generation: id.generation - 1, index: p })
    }

    pub fn children_of(&self, id: CubeId) -> impl Iterator<Item = CubeId> + '_ {
        let c = self.cube(id);
        let gen = id.generation + 1;
        (c.child_start..c.child_start + c.child_count as u32)
            .map(move |i| CubeId { generation: gen, index: i })
    }

    pub fn roots(&self) -> impl Iterator<Item = CubeId> + '_ {
        (0..self.generations[0].len() as u32)
            .map(|i| CubeId { generation: self.gen_min, index: i })
    }

    pub fn leaves(&self) -> impl Iterator<Item = CubeId> + '_ {
        let last = self.generations.len() - 1;
        (0..self.generations[last].len() as u32)
            .map(move |i| CubeId { generation: self.gen_max, index: i })
    }

    pub fn n_cubes(&self) -> usize {
        self.generations.iter().map(|g| g.len()).sum()
    }

    /// All cubes of the subtree rooted at `top`, including `top` itself.
    pub fn descendants(&self, top: CubeId) -> Vec<CubeId> {
        let mut out = vec![top];
        let mut frontier = vec![top];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for q in frontier {
                for c in self.children_of(q) {
                    out.push(c);
                    next.push(c);
                }
            }
            frontier = next;
        }
        out
    }

    /// Leaf cube whose cell contains ξ, found by descending the forest.
    pub fn locate_leaf(&self, xi: Point) -> Result<CubeId, LatticeError> {
        let tol = self.model.atom_spacing * 0.125 + 1e-12;
        let inside = |c: &DyadicCube| {
            xi[0] >= c.box_min[0] - tol
                && xi[0] <= c.box_max[0] + tol
                && xi[1] >= c.box_min[1] - tol
                && xi[1] <= c.box_max[1] + tol
        };
        let mut cur = self
            .roots()
            .find(|id| inside(self.cube(*id)))
            .ok_or(LatticeError::OutsideSupport(xi[0], xi[1]))?;
        while cur.generation < self.gen_max {
            cur = self
                .children_of(cur)
                .find(|id| inside(self.cube(*id)))
                .ok_or(LatticeError::OutsideSupport(xi[0], xi[1]))?;
        }
        Ok(cur)
    }

    /// CSV dump (gen, index, parent, center_x, center_y, side, mass).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gen,index,parent,center_x,center_y,side,mass\n");
        for level in &self.generations {
            for c in level {
                let parent = c.parent.map(|p| p.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                    c.id.generation, c.id.index, parent, c.center[0], c.center[1], c.side, c.mass
                ));
            }
        }
        out
    }
}

/// Builds the lattice between two levels of the scenario's natural cell
/// hierarchy. Levels are binary octaves for the curve scenarios (half-plane,
/// graph) and quartic generations for the Cantor scenarios (mapped to binary
/// generations 2·level internally, with passthrough cubes between).
pub fn build_lattice(
    model: &Arc<BoundaryModel>,
    level_min: i32,
    level_max: i32,
) -> Result<DyadicLattice, LatticeError> {
    if level_min > level_max || level_min < 0 {
        return Err(LatticeError::BadRange(level_min, level_max));
    }
    let quartic = matches!(
        model.kind,
        ScenarioKind::FourCornerCantor { .. } | ScenarioKind::LowerDimCantor { .. }
    );
    match model.kind {
        ScenarioKind::FourCornerCantor { generation } | ScenarioKind::LowerDimCantor { generation } => {
            if level_max > generation as i32 {
                return Err(LatticeError::RangeTooFine(level_max, model.atom_spacing));
            }
        }
        _ => {
            if 0.5f64.powi(level_max) < 2.0 * model.atom_spacing * (1.0 - 1e-12) {
                return Err(LatticeError::RangeTooFine(level_max, model.atom_spacing));
            }
        }
    }
    let (gen_min, gen_max) =
        if quartic { (2 * level_min, 2 * level_max) } else { (level_min, level_max) };

    let n = model.atoms.len();
    let mut weight_prefix = Vec::with_capacity(n + 1);
    weight_prefix.push(0.0);
    for w in &model.weights {
        weight_prefix.push(weight_prefix.last().unwrap() + w);
    }

    // Top level: group atoms into the coarsest cells.
    let mut generations: Vec<Vec<DyadicCube>> = Vec::new();
    let top_ranges: Vec<(u32, u32, Point, f64)> = match model.kind {
        ScenarioKind::HalfPlane | ScenarioKind::LipschitzGraph { .. } => {
            // dyadic intervals of the ambient grid in the first coordinate
            let side = 0.5f64.powi(gen_min);
            let mut ranges = Vec::new();
            let mut i = 0usize;
            while i < n {
                let k = (model.atoms[i][0] / side).floor();
                let hi = model.atoms[i..].partition_point(|a| a[0] < (k + 1.0) * side) + i;
                ranges.push((i as u32, hi as u32, [k * side, 0.0], side));
                i = hi;
            }
            ranges
        }
        ScenarioKind::FourCornerCantor { .. } | ScenarioKind::LowerDimCantor { .. } => {
            // descend the self-similar hierarchy to the requested level
            let mut cells = vec![(0u32, n as u32, [0.0f64, 0.0f64], 1.0f64)];
            for _ in 0..level_min {
                let mut next = Vec::new();
                for (s, e, corner, side) in cells {
                    next.extend(split_cell(model, &model.atoms, s, e, corner, side));
                }
                cells = next;
            }
            cells
        }
    };

    let top: Vec<DyadicCube> = top_ranges
        .iter()
        .enumerate()
        .map(|(i, &(s, e, corner, cell_side))| {
            make_cube(model, &weight_prefix, gen_min, i as u32, s, e, corner, cell_side, None)
        })
        .collect();
    generations.push(top);

    // Refine one binary generation at a time.
    for gen in gen_min + 1..=gen_max {
        let passthrough = quartic && (gen - gen_min) % 2 == 1;
        let prev_idx = generations.len() - 1;
        let mut level: Vec<DyadicCube> = Vec::new();
        let mut parents_children: Vec<(u32, u8)> = Vec::new();
        for (pi, p) in generations[prev_idx].iter().enumerate() {
            let start = level.len() as u32;
            let corner = p.box_min;
            let cell_side = p.box_max[0] - p.box_min[0];
            if passthrough {
                // same geometric cell, halved nominal side, single child
                level.push(make_cube(
                    model,
                    &weight_prefix,
                    gen,
                    start,
                    p.atom_start,
                    p.atom_end,
                    corner,
                    cell_side,
                    Some(pi as u32),
                ));
            } else if quartic {
                for (s, e, c, sd) in
                    split_cell(model, &model.atoms, p.atom_start, p.atom_end, corner, cell_side)
                {
                    let idx = level.len() as u32;
                    level.push(make_cube(model, &weight_prefix, gen, idx, s, e, c, sd, Some(pi as u32)));
                }
            } else {
                // binary split of the interval at its dyadic midpoint
                let side = 0.5f64.powi(gen);
                let k2 = (corner[0] / side).round() as i64;
                let mid = (k2 + 1) as f64 * side;
                let rel = &model.atoms[p.atom_start as usize..p.atom_end as usize];
                let cut = rel.partition_point(|a| a[0] < mid) as u32 + p.atom_start;
                for (s, e, c) in [(p.atom_start, cut, corner), (cut, p.atom_end, [mid, 0.0])] {
                    if s < e {
                        let idx = level.len() as u32;
                        level.push(make_cube(model, &weight_prefix, gen, idx, s, e, c, side, Some(pi as u32)));
                    }
                }
            }
            parents_children.push((start, (level.len() as u32 - start) as u8));
        }
        for (pi, (cs, cc)) in parents_children.into_iter().enumerate() {
            generations[prev_idx][pi].child_start = cs;
            generations[prev_idx][pi].child_count = cc;
        }
        generations.push(level);
    }

    // measured comparability constants
    let mut diam_ratio = (f64::INFINITY, 0.0f64);
    let mut mass_ratio = (f64::INFINITY, 0.0f64);
    for level in &generations {
        for c in level {
            let d = c.diam();
            if d > 0.0 {
                diam_ratio = (diam_ratio.0.min(d / c.side), diam_ratio.1.max(d / c.side));
            }
            let m = c.mass / c.side.powf(model.s);
            mass_ratio = (mass_ratio.0.min(m), mass_ratio.1.max(m));
        }
    }

    Ok(DyadicLattice {
        model: model.clone(),
        uid: LATTICE_SEQ.fetch_add(1, Ordering::Relaxed),
        generations,
        gen_min,
        gen_max,
        stats: LatticeStats { diam_over_side: diam_ratio, mass_over_side_s: mass_ratio },
    })
}

/// Partition a self-similar cell's atom range among its children (4 for the
/// planar set, 2 for the linear one). Atoms are in depth-first cell order, so
/// each child is a contiguous sub-range.
fn split_cell(
    model: &BoundaryModel,
    atoms: &[Point],
    start: u32,
    end: u32,
    corner: Point,
    side: f64,
) -> Vec<(u32, u32, Point, f64)> {
    let c = side / 4.0;
    let child_of = |a: &Point| -> usize {
        match model.kind {
            ScenarioKind::FourCornerCantor { .. } => {
                let right = a[0] - corner[0] >= side / 2.0;
                let up = a[1] - corner[1] >= side / 2.0;
                (right as usize) + 2 * (up as usize)
            }
            _ => (a[0] - corner[0] >= side / 2.0) as usize,
        }
    };
    let child_corner = |d: usize| -> Point {
        match model.kind {
            ScenarioKind::FourCornerCantor { .. } => [
                corner[0] + if d % 2 == 1 { 3.0 * c } else { 0.0 },
                corner[1] + if d >= 2 { 3.0 * c } else { 0.0 },
            ],
            _ => [corner[0] + if d == 1 { 3.0 * side / 4.0 } else { 0.0 }, corner[1]],
        }
    };
    let mut out = Vec::new();
    let mut i = start;
    while i < end {
        let d = child_of(&atoms[i as usize]);
        let mut j = i + 1;
        while j < end && child_of(&atoms[j as usize]) == d {
            j += 1;
        }
        out.push((i, j, child_corner(d), c));
        i = j;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn make_cube(
    model: &BoundaryModel,
    weight_prefix: &[f64],
    gen: i32,
    index: u32,
    start: u32,
    end: u32,
    cell_corner: Point,
    cell_side: f64,
    parent: Option<u32>,
) -> DyadicCube {
    let atoms = &model.atoms[start as usize..end as usize];
    let (box_min, box_max) = match model.kind {
        ScenarioKind::FourCornerCantor { .. } => {
            (cell_corner, [cell_corner[0] + cell_side, cell_corner[1] + cell_side])
        }
        ScenarioKind::LowerDimCantor { .. } => {
            (cell_corner, [cell_corner[0] + cell_side, cell_corner[1]])
        }
        _ => {
            // hull of the atoms over the dyadic interval
            let mut lo = [cell_corner[0], f64::INFINITY];
            let mut hi = [cell_corner[0] + cell_side, f64::NEG_INFINITY];
            for a in atoms {
                lo[1] = lo[1].min(a[1]);
                hi[1] = hi[1].max(a[1]);
            }
            (lo, hi)
        }
    };
    let gc = [(box_min[0] + box_max[0]) / 2.0, (box_min[1] + box_max[1]) / 2.0];
    let mut center = atoms[0];
    let mut best = dist(atoms[0], gc);
    for a in atoms.iter().skip(1) {
        let d = dist(*a, gc);
        if d < best - 1e-15 {
            best = d;
            center = *a;
        }
    }
    DyadicCube {
        id: CubeId { generation: gen, index },
        center,
        side: 0.5f64.powi(gen),
        box_min,
        box_max,
        mass: weight_prefix[end as usize] - weight_prefix[start as usize],
        atom_start: start,
        atom_end: end,
        parent,
        child_start: 0,
        child_count: 0,
    }
}

/// Boundary data: one value per measure atom, with prefix sums against the
/// model's weights so that cube averages are O(1) and exactly additive.
#[derive(Clone, Debug)]
pub struct BoundaryFunction {
    values: Vec<f64>,
    prefix_wf: Vec<f64>,
    prefix_wabs: Vec<f64>,
}

impl BoundaryFunction {
    pub fn from_values(model: &BoundaryModel, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), model.atoms.len(), "one value per atom");
        let mut prefix_wf = Vec::with_capacity(values.len() + 1);
        let mut prefix_wabs = Vec::with_capacity(values.len() + 1);
        prefix_wf.push(0.0);
        prefix_wabs.push(0.0);
        for (v, w) in values.iter().zip(&model.weights) {
            prefix_wf.push(prefix_wf.last().unwrap() + v * w);
            prefix_wabs.push(prefix_wabs.last().unwrap() + v.abs() * w);
        }
        BoundaryFunction { values, prefix_wf, prefix_wabs }
    }

    pub fn from_fn(model: &BoundaryModel, f: impl Fn(Point) -> f64) -> Self {
        let values = model.atoms.iter().map(|a| f(*a)).collect();
        Self::from_values(model, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, atom: usize) -> f64 {
        self.values[atom]
    }

    /// Integral of f over an atom range, exact martingale additivity.
    pub fn range_integral(&self, start: u32, end: u32) -> f64 {
        self.prefix_wf[end as usize] - self.prefix_wf[start as usize]
    }

    pub fn range_integral_abs(&self, start: u32, end: u32) -> f64 {
        self.prefix_wabs[end as usize] - self.prefix_wabs[start as usize]
    }

    /// Essential sup of |f| over the atoms.
    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// m_{σ,Q} f — the σ-average of f over a cube.
pub fn cube_average(lattice: &DyadicLattice, q: CubeId, f: &BoundaryFunction) -> f64 {
    let c = lattice.cube(q);
    assert!(c.mass > 0.0, "zero-mass cube cannot occur on a valid lattice");
    f.range_integral(c.atom_start, c.atom_end) / c.mass
}

/// Average of |f| over a cube.
pub fn cube_average_abs(lattice: &DyadicLattice, q: CubeId, f: &BoundaryFunction) -> f64 {
    let c = lattice.cube(q);
    f.range_integral_abs(c.atom_start, c.atom_end) / c.mass
}

/// Truncated dyadic maximal function: max over the ancestor chain R ⊇ Q
/// (including Q itself) of the average of |f| over R.
pub fn truncated_maximal(lattice: &DyadicLattice, q: CubeId, f: &BoundaryFunction) -> f64 {
    let mut best = 0.0f64;
    let mut cur = Some(q);
    while let Some(id) = cur {
        best = best.max(cube_average_abs(lattice, id, f));
        cur = lattice.parent_of(id);
    }
    best
}

/// Dyadic Hardy–Littlewood maximal function at a boundary point: sup of
/// |f|-averages over the lattice cubes containing ξ.
pub fn dyadic_maximal(
    lattice: &DyadicLattice,
    f: &BoundaryFunction,
    xi: Point,
) -> Result<f64, LatticeError> {
    let leaf = lattice.locate_leaf(xi)?;
    Ok(truncated_maximal(lattice, leaf, f))
}

/// Centered Hardy–Littlewood maximal function over a dyadic radius grid:
/// max over r in the grid of the σ-average of |f| on B(ξ, r). Radii whose
/// ball carries no mass are skipped.
pub fn hl_maximal(
    model: &BoundaryModel,
    f: &BoundaryFunction,
    xi: Point,
    r_grid: &[f64],
) -> Result<f64, LatticeError> {
    if r_grid.is_empty() {
        return Err(LatticeError::BadRange(0, -1));
    }
    let mut best = 0.0f64;
    for &r in r_grid {
        let mut mass = 0.0;
        let mut int = 0.0;
        for ((a, w), v) in model.atoms.iter().zip(&model.weights).zip(f.values()) {
            if dist(*a, xi) <= r {
                mass += w;
                int += w * v.abs();
            }
        }
        if mass > 0.0 {
            best = best.max(int / mass);
        }
    }
    Ok(best)
}

/// Non-centered analogue: for each grid radius the ball centers range over a
/// documented finite family — ξ itself plus at most 32 atoms within distance
/// r of ξ (every 1-in-stride atom of that set, deterministically). Each such
/// ball contains ξ, so this is a genuine lower approximation of the
/// non-centered maximal function.
pub fn noncentered_maximal(
    model: &BoundaryModel,
    f: &BoundaryFunction,
    xi: Point,
    r_grid: &[f64],
) -> Result<f64, LatticeError> {
    if r_grid.is_empty() {
        return Err(LatticeError::BadRange(0, -1));
    }
    let mut best = 0.0f64;
    for &r in r_grid {
        let near: Vec<Point> = model
            .atoms
            .iter()
            .filter(|a| dist(**a, xi) <= r)
            .copied()
            .collect();
        let stride = (near.len() / 32).max(1);
        for center in std::iter::once(xi).chain(near.into_iter().step_by(stride)) {
            let mut mass = 0.0;
            let mut int = 0.0;
            for ((a, w), v) in model.atoms.iter().zip(&model.weights).zip(f.values()) {
                if dist(*a, center) <= r {
                    mass += w;
                    int += w * v.abs();
                }
            }
            if mass > 0.0 {
                best = best.max(int / mass);
            }
        }
    }
    Ok(best)
}
