//! Whitney decomposition of the domain inside the window, the boundary
//! association P ↦ b(P), Whitney regions w(Q), and the smooth partition of
//! unity subordinate to the slightly fattened cubes 1.1P.
//!
//! Squares are dyadic in the ambient grid: a cube of level j has side 2⁻ʲ and
//! corner on the 2⁻ʲ lattice. A square is accepted when
//! diam(P) < dist(P, ∂Ω)/20, with the *exact* square-to-boundary distance
//! supplied by the scenario's box oracle, and it is maximal in the sense that
//! its dyadic parent violates the same test (squares at the coarsest band
//! level are accepted without the parent test; the band is the cost knob).

use std::collections::HashMap;
use std::sync::Arc;

use crate::dyadic::{CubeId, DyadicLattice};
use crate::geometry::BoundaryModel;
use crate::{dist, Point};

#[derive(Debug, thiserror::Error)]
pub enum WhitneyError {
    #[error("scale band [{0}, {1}] is invalid or not covered by the boundary lattice [{2}, {3}]")]
    BandMismatch(i32, i32, i32, i32),
    #[error("the scale band produced no Whitney cubes inside the window")]
    EmptyDecomposition,
    #[error("point ({0}, {1}) is outside the covered band (Σψ = 0)")]
    UncoveredPoint(f64, f64),
}

#[derive(Clone, Debug)]
pub struct WhitneyCube {
    /// side = 2^{-level}; corner on the ambient dyadic grid.
    pub level: i32,
    pub corner: Point,
    pub side: f64,
    /// Exact distance from the square to ∂Ω (box oracle).
    pub dist: f64,
    /// Associated boundary cube with ℓ(b(P)) = ℓ(P), nearest in box
    /// distance, ties to the lowest index.
    pub b: CubeId,
    /// dist(P, b(P)), recorded.
    pub b_dist: f64,
    /// Cubes P′ (indices into the grid) with 1.1P ∩ 1.1P′ ≠ ∅ (includes P).
    pub neighbors_11: Vec<u32>,
    /// Same with the 1.2-dilated supports (used by approximant families).
    pub neighbors_12: Vec<u32>,
}

impl WhitneyCube {
    pub fn center(&self) -> Point {
        [self.corner[0] + self.side / 2.0, self.corner[1] + self.side / 2.0]
    }

    pub fn diam(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.side
    }

    pub fn box_max(&self) -> Point {
        [self.corner[0] + self.side, self.corner[1] + self.side]
    }

    /// Box of the cube dilated by `factor` about its center.
    pub fn dilated(&self, factor: f64) -> (Point, Point) {
        let c = self.center();
        let h = factor * self.side / 2.0;
        ([c[0] - h, c[1] - h], [c[0] + h, c[1] + h])
    }

    pub fn contains(&self, x: Point, factor: f64) -> bool {
        let (lo, hi) = self.dilated(factor);
        x[0] >= lo[0] && x[0] <= hi[0] && x[1] >= lo[1] && x[1] <= hi[1]
    }
}

/// Per-cube bump data: a tensor product of the compactly supported profile
/// t ↦ exp(1 − 1/(1−t²)) scaled so the support is exactly 1.1P.
#[derive(Clone, Copy, Debug)]
pub struct PartitionBump {
    pub center: Point,
    /// Support halfwidth 0.55·ℓ(P) per axis.
    pub half: f64,
}

impl PartitionBump {
    fn profile(t: f64) -> (f64, f64) {
        // value and derivative; hard zero outside |t| < 1 (and just inside,
        // where the exponential underflows anyway)
        if t.abs() >= 1.0 - 1e-8 {
            return (0.0, 0.0);
        }
        let s = 1.0 - t * t;
        let v = (1.0 - 1.0 / s).exp();
        (v, v * (-2.0 * t) / (s * s))
    }

    /// Unnormalized bump ψ_P and its gradient.
    pub fn eval(&self, x: Point) -> (f64, [f64; 2]) {
        let u = (x[0] - self.center[0]) / self.half;
        let v = (x[1] - self.center[1]) / self.half;
        let (pu, du) = Self::profile(u);
        let (pv, dv) = Self::profile(v);
        (pu * pv, [du * pv / self.half, pu * dv / self.half])
    }
}

/// Measured constants of a built decomposition.
#[derive(Clone, Copy, Debug)]
pub struct WhitneyStats {
    /// Smallest integer dilation Λ with ΛP ∩ ∂Ω ≠ ∅ certified for all P.
    pub lambda: f64,
    /// Max number of fattened supports 1.1P covering any sampled point.
    pub d0: usize,
    /// Remark-2.16 constant: b(P′) ⊂ B(x_{b(P)}, C_w ℓ(P)) for all neighbor
    /// pairs, measured exhaustively.
    pub c_w: f64,
    /// Max cubes per Whitney region w(Q).
    pub n_w: usize,
    /// Max dist(P, b(P))/ℓ(P).
    pub c_b: f64,
    /// Max |∇φ_P|·ℓ(P) over the measurement samples.
    pub c_phi: f64,
    /// Certified cover floor: every window point with δ(x) ≥ delta_floor
    /// lies in some cube.
    pub delta_floor: f64,
}

pub struct WhitneyGrid {
    pub lattice: Arc<DyadicLattice>,
    pub cubes: Vec<WhitneyCube>,
    pub bumps: Vec<PartitionBump>,
    pub j_lo: i32,
    pub j_hi: i32,
    pub stats: WhitneyStats,
    /// w(Q): indices of cubes with b(P) = Q.
    region: HashMap<CubeId, Vec<u32>>,
    /// Per level (j − j_lo): cell → cubes whose 1.2-support overlaps the
    /// cell; cells have size 2^{-j}.
    index: Vec<HashMap<(i64, i64), Vec<u32>>>,
}

impl WhitneyGrid {
    pub fn model(&self) -> &BoundaryModel {
        &self.lattice.model
    }

    /// All cubes whose `factor`-dilated box contains x (factor ≤ 1.2).
    pub fn cubes_at(&self, x: Point, factor: f64) -> Vec<u32> {
        debug_assert!(factor <= 1.2 + 1e-12);
        let mut out = Vec::new();
        for (k, cells) in self.index.iter().enumerate() {
            let side = 0.5f64.powi(self.j_lo + k as i32);
            let key = ((x[0] / side).floor() as i64, (x[1] / side).floor() as i64);
            if let Some(cands) = cells.get(&key) {
                for &i in cands {
                    if self.cubes[i as usize].contains(x, factor) {
                        out.push(i);
                    }
                }
            }
        }
        out
    }

    /// δ at the center of a cube is comparable to its side; expose the cube
    /// whose closed box contains x (if any), preferring the finest level.
    pub fn cube_containing(&self, x: Point) -> Option<u32> {
        self.cubes_at(x, 1.0).into_iter().max_by_key(|&i| self.cubes[i as usize].level)
    }

    /// w(Q): all P with b(P) = Q (possibly empty).
    pub fn whitney_region(&self, q: CubeId) -> &[u32] {
        self.region.get(&q).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Σ_{P} ψ_P(x) with gradient, plus the contributing cubes.
    pub fn partition_sum(&self, x: Point) -> (f64, [f64; 2], Vec<(u32, f64, [f64; 2])>) {
        let mut s = 0.0;
        let mut gs = [0.0, 0.0];
        let mut parts = Vec::new();
        for i in self.cubes_at(x, 1.1) {
            let (v, g) = self.bumps[i as usize].eval(x);
            if v > 0.0 || g[0] != 0.0 || g[1] != 0.0 {
                s += v;
                gs[0] += g[0];
                gs[1] += g[1];
                parts.push((i, v, g));
            }
        }
        (s, gs, parts)
    }

    /// φ_P(x) = ψ_P(x)/Σψ with the quotient-rule gradient. Points with
    /// Σψ = 0 are outside the covered band and signal an error.
    pub fn bump_eval(&self, p: u32, x: Point) -> Result<(f64, [f64; 2]), WhitneyError> {
        let (s, gs, _) = self.partition_sum(x);
        if s <= 0.0 {
            return Err(WhitneyError::UncoveredPoint(x[0], x[1]));
        }
        let (v, g) = self.bumps[p as usize].eval(x);
        let phi = v / s;
        let grad = [(g[0] * s - v * gs[0]) / (s * s), (g[1] * s - v * gs[1]) / (s * s)];
        Ok((phi, grad))
    }

    /// CSV dump (corner_x, corner_y, side, dist, b_gen, b_index).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("corner_x,corner_y,side,dist,b_gen,b_index\n");
        for c in &self.cubes {
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{},{}\n",
                c.corner[0], c.corner[1], c.side, c.dist, c.b.generation, c.b.index
            ));
        }
        out
    }
}

/// Builds the Whitney decomposition over the scale band [j_lo, j_hi]
/// (sides 2^{-j_lo} down to 2^{-j_hi}). The boundary lattice must provide
/// cubes at every binary generation in the band for the b(P) association.
pub fn build_whitney(
    lattice: &Arc<DyadicLattice>,
    j_lo: i32,
    j_hi: i32,
) -> Result<WhitneyGrid, WhitneyError> {
    if j_lo > j_hi || j_lo < lattice.gen_min || j_hi > lattice.gen_max {
        return Err(WhitneyError::BandMismatch(j_lo, j_hi, lattice.gen_min, lattice.gen_max));
    }
    let model = &lattice.model;
    let win = model.window;

    // Quadtree descent from the coarsest tiles covering the window.
    let mut cubes: Vec<WhitneyCube> = Vec::new();
    let l0 = 0.5f64.powi(j_lo);
    let kx0 = (win.min[0] / l0).floor() as i64;
    let kx1 = (win.max[0] / l0).ceil() as i64;
    let ky0 = (win.min[1] / l0).floor() as i64;
    let ky1 = (win.max[1] / l0).ceil() as i64;
    let mut stack: Vec<(Point, i32)> = Vec::new();
    for ky in (ky0..ky1).rev() {
        for kx in kx0..kx1 {
            stack.push(([kx as f64 * l0, ky as f64 * l0], j_lo));
        }
    }
    stack.reverse();
    while let Some((corner, j)) = stack.pop() {
        let side = 0.5f64.powi(j);
        if corner[0] + side <= win.min[0]
            || corner[0] >= win.max[0]
            || corner[1] + side <= win.min[1]
            || corner[1] >= win.max[1]
        {
            continue;
        }
        let bmax = [corner[0] + side, corner[1] + side];
        let d = model.dist_box(corner, bmax);
        if d > 20.0 * std::f64::consts::SQRT_2 * side {
            cubes.push(WhitneyCube {
                level: j,
                corner,
                side,
                dist: d,
                b: CubeId { generation: j, index: 0 },
                b_dist: 0.0,
                neighbors_11: Vec::new(),
                neighbors_12: Vec::new(),
            });
            continue;
        }
        if j == j_hi {
            continue; // below the band: dropped, not subdivided
        }
        let h = side / 2.0;
        for off in [[0.0, 0.0], [h, 0.0], [0.0, h], [h, h]] {
            stack.push(([corner[0] + off[0], corner[1] + off[1]], j + 1));
        }
    }
    if cubes.is_empty() {
        return Err(WhitneyError::EmptyDecomposition);
    }

    // b(P): nearest boundary cube of equal nominal side via branch-and-bound
    // over the lattice forest (children boxes nest inside parents).
    for c in cubes.iter_mut() {
        let (lo, hi) = (c.corner, c.box_max());
        let mut best = (f64::INFINITY, u32::MAX);
        let mut frontier: Vec<CubeId> = lattice.roots().collect();
        while let Some(id) = frontier.pop() {
            let q = lattice.cube(id);
            let d = box_gap(lo, hi, q.box_min, q.box_max);
            // prune strictly worse subtrees only: ties must keep descending
            // so the lowest-index candidate wins deterministically
            if d > best.0 {
                continue;
            }
            if id.generation == c.level {
                if d < best.0 || (d == best.0 && id.index < best.1) {
                    best = (d, id.index);
                }
                continue;
            }
            frontier.extend(lattice.children_of(id));
        }
        assert!(best.1 != u32::MAX, "no boundary cube at generation {}", c.level);
        c.b = CubeId { generation: c.level, index: best.1 };
        c.b_dist = best.0;
    }

    // Spatial index: per level, cells of the level's side, each cube
    // registered in every cell its 1.2-support overlaps.
    let mut index: Vec<HashMap<(i64, i64), Vec<u32>>> =
        (0..=(j_hi - j_lo) as usize).map(|_| HashMap::new()).collect();
    for (i, c) in cubes.iter().enumerate() {
        let k = (c.level - j_lo) as usize;
        let (lo, hi) = c.dilated(1.2);
        let cx0 = (lo[0] / c.side).floor() as i64;
        let cx1 = (hi[0] / c.side).floor() as i64;
        let cy0 = (lo[1] / c.side).floor() as i64;
        let cy1 = (hi[1] / c.side).floor() as i64;
        for cx in cx0..=cx1 {
            for cy in cy0..=cy1 {
                index[k].entry((cx, cy)).or_default().push(i as u32);
            }
        }
    }

    // Neighbor lists from the index (levels within ±1 can't be skipped:
    // adjacent Whitney cubes have side ratio in [1/2, 2]).
    let n = cubes.len();
    let mut nb11: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut nb12: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 0..n {
        let (lo12, hi12) = cubes[i].dilated(1.2);
        let (lo11, hi11) = cubes[i].dilated(1.1);
        let mut cand: Vec<u32> = Vec::new();
        for m in cubes[i].level - 1..=cubes[i].level + 1 {
            if m < j_lo || m > j_hi {
                continue;
            }
            let k = (m - j_lo) as usize;
            let side = 0.5f64.powi(m);
            let cx0 = (lo12[0] / side).floor() as i64;
            let cx1 = (hi12[0] / side).floor() as i64;
            let cy0 = (lo12[1] / side).floor() as i64;
            let cy1 = (hi12[1] / side).floor() as i64;
            for cx in cx0..=cx1 {
                for cy in cy0..=cy1 {
                    if let Some(v) = index[k].get(&(cx, cy)) {
                        cand.extend_from_slice(v);
                    }
                }
            }
        }
        cand.sort_unstable();
        cand.dedup();
        for j in cand {
            let (plo12, phi12) = cubes[j as usize].dilated(1.2);
            if boxes_meet(lo12, hi12, plo12, phi12) {
                nb12[i].push(j);
            }
            let (plo11, phi11) = cubes[j as usize].dilated(1.1);
            if boxes_meet(lo11, hi11, plo11, phi11) {
                nb11[i].push(j);
            }
        }
    }
    for (i, c) in cubes.iter_mut().enumerate() {
        c.neighbors_11 = std::mem::take(&mut nb11[i]);
        c.neighbors_12 = std::mem::take(&mut nb12[i]);
    }

    // Whitney regions w(Q).
    let mut region: HashMap<CubeId, Vec<u32>> = HashMap::new();
    for (i, c) in cubes.iter().enumerate() {
        region.entry(c.b).or_default().push(i as u32);
    }

    let bumps: Vec<PartitionBump> =
        cubes.iter().map(|c| PartitionBump { center: c.center(), half: 0.55 * c.side }).collect();

    let mut grid = WhitneyGrid {
        lattice: lattice.clone(),
        cubes,
        bumps,
        j_lo,
        j_hi,
        stats: WhitneyStats {
            lambda: 0.0,
            d0: 0,
            c_w: 0.0,
            n_w: 0,
            c_b: 0.0,
            c_phi: 0.0,
            delta_floor: 42.0 * std::f64::consts::SQRT_2 * 0.5f64.powi(j_hi),
        },
        region,
        index,
    };
    measure_stats(&mut grid);
    Ok(grid)
}

fn box_gap(amin: Point, amax: Point, bmin: Point, bmax: Point) -> f64 {
    let dx = (bmin[0] - amax[0]).max(0.0).max(amin[0] - bmax[0]);
    let dy = (bmin[1] - amax[1]).max(0.0).max(amin[1] - bmax[1]);
    dx.hypot(dy)
}

fn boxes_meet(amin: Point, amax: Point, bmin: Point, bmax: Point) -> bool {
    amin[0] <= bmax[0] && bmin[0] <= amax[0] && amin[1] <= bmax[1] && bmin[1] <= amax[1]
}

fn measure_stats(grid: &mut WhitneyGrid) {
    let lattice = grid.lattice.clone();
    let mut lambda = 1.0f64;
    let mut c_b = 0.0f64;
    let mut c_w = 0.0f64;
    let mut d0 = 0usize;
    let mut c_phi = 0.0f64;
    for (i, c) in grid.cubes.iter().enumerate() {
        lambda = lambda.max(1.0 + 2.0 * c.dist / c.side);
        c_b = c_b.max(c.b_dist / c.side);
        let xb = lattice.cube(c.b).center;
        for &j in &c.neighbors_11 {
            let bq = lattice.cube(grid.cubes[j as usize].b);
            for corner in [
                bq.box_min,
                [bq.box_max[0], bq.box_min[1]],
                bq.box_max,
                [bq.box_min[0], bq.box_max[1]],
            ] {
                c_w = c_w.max(dist(corner, xb) / c.side);
            }
        }
        // overlap and gradient samples: center, corners, edge midpoints of
        // the 1.05-dilated box (where bump transitions live)
        let (lo, hi) = c.dilated(1.05);
        let samples = [
            c.center(),
            lo,
            [hi[0], lo[1]],
            hi,
            [lo[0], hi[1]],
            [(lo[0] + hi[0]) / 2.0, lo[1]],
            [(lo[0] + hi[0]) / 2.0, hi[1]],
            [lo[0], (lo[1] + hi[1]) / 2.0],
            [hi[0], (lo[1] + hi[1]) / 2.0],
        ];
        for x in samples {
            let (s, gs, parts) = grid.partition_sum(x);
            d0 = d0.max(grid.cubes_at(x, 1.1).len());
            if s > 0.0 {
                for (p, v, g) in parts {
                    let side = grid.cubes[p as usize].side;
                    let gx = (g[0] * s - v * gs[0]) / (s * s);
                    let gy = (g[1] * s - v * gs[1]) / (s * s);
                    c_phi = c_phi.max(gx.hypot(gy) * side);
                }
            }
        }
        let _ = i;
    }
    grid.stats.lambda = lambda.ceil();
    grid.stats.c_b = c_b;
    grid.stats.c_w = c_w;
    grid.stats.d0 = d0;
    grid.stats.c_phi = c_phi;
    grid.stats.n_w = grid.region.values().map(|v| v.len()).max().unwrap_or(0);
}
