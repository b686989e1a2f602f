//! Stopping-time (corona) decomposition of a dyadic boundary lattice.
//!
//! Given boundary data `f`, a root cube `R₀`, and a threshold parameter `ε`,
//! the decomposition splits the subtree `𝒟(R₀)` into *trees* on which the
//! dyadic averages of `f` stay ε-close to the average at the tree's top:
//!
//! * `Stop(R)` — the maximal cubes `S ⊊ R` with `|m_R f − m_S f| ≥ ε·threshold(S)`,
//! * `Top`    — `{R₀}`, then the stop cubes of `R₀`, then their stop cubes, …,
//! * `Tree(R)` — every `Q ⊆ R` not contained in any member of `Stop(R)`.
//!
//! The threshold is either the truncated dyadic maximal function `Mf(S)`
//! ([`StoppingMode::Lp`], for merely integrable data) or a fixed bound such as
//! the BMO seminorm of `f` ([`StoppingMode::Bmo`]). The decomposition quality
//! is quantified by the Carleson packing of the top family (mass of family
//! members inside `S`, relative to `σ(S)`) and by the stopped square function,
//! which accumulates the squared jumps of the averages between consecutive
//! family members above a point.
//!
//! Lattices whose support splits across several coarse cells (or where no
//! single bounded root is available) are handled by [`build_corona_forest`]:
//! the cubes of a chosen generation become a pairwise-disjoint family of roots
//! covering the whole support, each root is decomposed independently, and the
//! finitely many cubes coarser than the chosen generation form the excluded
//! "bad" family `ℬ`, which itself satisfies a packing bound.
//!
//! Decompositions are immutable once built; construction is single-threaded,
//! queries (`packing_*`, [`stopped_square_function`], CSV dumps) may run
//! concurrently.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::dyadic::{
    cube_average, truncated_maximal, BoundaryFunction, CubeId, DyadicLattice, LatticeError,
};
use crate::Point;

#[derive(Debug, thiserror::Error)]
pub enum CoronaError {
    #[error("stopping parameter ε must be positive, got {0}")]
    BadThreshold(f64),
    #[error("fixed-norm stopping mode needs a finite nonnegative norm, got {0}")]
    BadNorm(f64),
    #[error("cube {0:?} does not belong to the lattice")]
    UnknownCube(CubeId),
    #[error("root generation {got} outside the lattice range [{lo}, {hi}]")]
    BadRootGeneration { got: i32, lo: i32, hi: i32 },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// How the stopping condition `|m_R f − m_S f| ≥ ε·threshold(S)` measures
/// oscillation. Cubes where the threshold vanishes (identically zero data in
/// `Lp` mode, constant data in `Bmo` mode) never stop: there is no
/// oscillation scale to compare against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StoppingMode {
    /// `threshold(S) = Mf(S)`, the truncated dyadic maximal function of the
    /// data at `S` (sup of `m_Q|f|` over the ancestor chain of `S`, capped at
    /// the lattice root rather than at arbitrarily coarse scales).
    Lp,
    /// `threshold(S) = norm`, a fixed scale — typically the BMO seminorm of
    /// the data, computed up front with `functionals::bmo_norm`.
    Bmo { norm: f64 },
}

impl StoppingMode {
    fn validate(self) -> Result<(), CoronaError> {
        if let StoppingMode::Bmo { norm } = self {
            if !norm.is_finite() || norm < 0.0 {
                return Err(CoronaError::BadNorm(norm));
            }
        }
        Ok(())
    }
}

/// The full stopping-time decomposition of `𝒟(root)`.
#[derive(Clone, Debug)]
pub struct CoronaDecomposition {
    pub root: CubeId,
    pub epsilon: f64,
    pub mode: StoppingMode,
    /// `Stop(R)` for every top cube `R`, each list in lexicographic cube order.
    pub stop: BTreeMap<CubeId, Vec<CubeId>>,
    /// Top cubes in build order, tagged with their stopping generation
    /// (`root` has tag 0, its stop cubes tag 1, and so on).
    pub tops: Vec<(CubeId, u32)>,
    /// Number of top cubes per stopping generation (`counts[k]` = tops with tag `k`).
    pub generation_counts: Vec<usize>,
    /// Tree assignment: every cube of `𝒟(root)` maps to the top of its tree.
    pub tree_of: BTreeMap<CubeId, CubeId>,
    /// Cubes excluded from every tree by a root-splitting step; empty when
    /// the decomposition was built from a single root.
    pub bad: Vec<CubeId>,
}

impl CoronaDecomposition {
    /// Top of the tree containing `q`, if `q ∈ 𝒟(root)`.
    pub fn top_of(&self, q: CubeId) -> Option<CubeId> {
        self.tree_of.get(&q).copied()
    }

    /// All members of `Tree(top)`, in lexicographic cube order.
    pub fn tree(&self, top: CubeId) -> Vec<CubeId> {
        self.tree_of
            .iter()
            .filter(|&(_, &r)| r == top)
            .map(|(&q, _)| q)
            .collect()
    }

    /// The top cubes themselves, in build order (tag-major).
    pub fn top_family(&self) -> Vec<CubeId> {
        self.tops.iter().map(|&(r, _)| r).collect()
    }

    /// Union of all `Stop(R)` — exactly the tops with tag ≥ 1.
    pub fn stop_family(&self) -> Vec<CubeId> {
        self.tops
            .iter()
            .filter(|&&(_, k)| k >= 1)
            .map(|&(r, _)| r)
            .collect()
    }

    /// One row per cube of `𝒟(root)`:
    /// `generation,index,top_generation,top_index,is_stop,is_top`.
    /// Rows are sorted by cube id, so equal inputs dump byte-identical text.
    pub fn to_csv(&self) -> String {
        let top_set: BTreeSet<CubeId> = self.tops.iter().map(|&(r, _)| r).collect();
        let stop_set: BTreeSet<CubeId> =
            self.tops.iter().filter(|&&(_, k)| k >= 1).map(|&(r, _)| r).collect();
        let mut out = String::from("generation,index,top_generation,top_index,is_stop,is_top\n");
        for (q, top) in &self.tree_of {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                q.generation,
                q.index,
                top.generation,
                top.index,
                u8::from(stop_set.contains(q)),
                u8::from(top_set.contains(q)),
            )
            .expect("writing to a String cannot fail");
        }
        out
    }
}

/// A family of independent decompositions whose roots tile the support.
#[derive(Debug)]
pub struct CoronaForest {
    /// Pairwise-disjoint roots covering every atom (one full lattice generation).
    pub roots: Vec<CubeId>,
    /// One decomposition per root, in root order.
    pub parts: Vec<CoronaDecomposition>,
    /// Cubes coarser than the root generation — not contained in any root.
    pub bad: Vec<CubeId>,
    pub epsilon: f64,
    pub mode: StoppingMode,
}

impl CoronaForest {
    /// Number of bad cubes per lattice generation above the roots.
    pub fn bad_generation_counts(&self, lattice: &DyadicLattice) -> Vec<(i32, usize)> {
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for b in &self.bad {
            *counts.entry(b.generation).or_insert(0) += 1;
        }
        let _ = lattice;
        counts.into_iter().collect()
    }

    /// Packing profile of the bad family over the whole lattice
    /// (max over every root's subtree).
    pub fn bad_packing_profile(&self, lattice: &DyadicLattice) -> f64 {
        lattice
            .roots()
            .map(|r| packing_profile(lattice, &self.bad, r))
            .fold(0.0, f64::max)
    }
}

fn check_cube(lattice: &DyadicLattice, q: CubeId) -> Result<(), CoronaError> {
    if q.generation < lattice.gen_min
        || q.generation > lattice.gen_max
        || q.index as usize >= lattice.level(q.generation).len()
    {
        return Err(CoronaError::UnknownCube(q));
    }
    Ok(())
}

/// `a ⊆ b`, decided through the contiguous atom ranges (exact on a lattice
/// whose cubes partition the atoms generation by generation).
pub fn is_subcube(lattice: &DyadicLattice, a: CubeId, b: CubeId) -> bool {
    if a.generation < b.generation {
        return false;
    }
    let (ca, cb) = (lattice.cube(a), lattice.cube(b));
    ca.atom_start >= cb.atom_start && ca.atom_end <= cb.atom_end
}

/// The maximal cubes `S ⊊ R` with `|m_R f − m_S f| ≥ ε·threshold(S)`.
///
/// Maximality is enforced breadth-first: a cube is tested only if no ancestor
/// strictly below `R` already stopped; cubes that stop are not descended into.
/// The returned list is sorted by cube id. Recursion exhausts at leaf depth,
/// so the call always terminates.
pub fn stop_cubes(
    lattice: &DyadicLattice,
    r: CubeId,
    f: &BoundaryFunction,
    epsilon: f64,
    mode: StoppingMode,
) -> Result<Vec<CubeId>, CoronaError> {
    if !(epsilon > 0.0) {
        return Err(CoronaError::BadThreshold(epsilon));
    }
    mode.validate()?;
    check_cube(lattice, r)?;

    let m_r = cube_average(lattice, r, f);
    let mut stops = Vec::new();
    let mut queue: VecDeque<CubeId> = lattice.children_of(r).collect();
    while let Some(q) = queue.pop_front() {
        let gap = (cube_average(lattice, q, f) - m_r).abs();
        let threshold = match mode {
            StoppingMode::Lp => truncated_maximal(lattice, q, f),
            StoppingMode::Bmo { norm } => norm,
        };
        if threshold > 0.0 && gap >= epsilon * threshold {
            stops.push(q);
        } else {
            queue.extend(lattice.children_of(q));
        }
    }
    stops.sort_unstable();
    Ok(stops)
}

/// Iterate `stop_cubes` from `root` until the leaves: the stop cubes of each
/// top become the tops of the next stopping generation, and every cube of
/// `𝒟(root)` is assigned to the tree of the deepest top above it.
pub fn build_corona(
    lattice: &DyadicLattice,
    root: CubeId,
    f: &BoundaryFunction,
    epsilon: f64,
    mode: StoppingMode,
) -> Result<CoronaDecomposition, CoronaError> {
    check_cube(lattice, root)?;
    let mut deco = CoronaDecomposition {
        root,
        epsilon,
        mode,
        stop: BTreeMap::new(),
        tops: Vec::new(),
        generation_counts: Vec::new(),
        tree_of: BTreeMap::new(),
        bad: Vec::new(),
    };
    let mut frontier = vec![(root, 0u32)];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for (r, tag) in frontier {
            deco.tops.push((r, tag));
            let stops = stop_cubes(lattice, r, f, epsilon, mode)?;
            let stop_set: BTreeSet<CubeId> = stops.iter().copied().collect();
            // Tree(r): descend from r, halting at (and excluding) stop cubes;
            // each stop cube starts its own tree in the next generation.
            let mut walk = vec![r];
            while let Some(q) = walk.pop() {
                deco.tree_of.insert(q, r);
                for c in lattice.children_of(q) {
                    if !stop_set.contains(&c) {
                        walk.push(c);
                    }
                }
            }
            next.extend(stops.iter().map(|&s| (s, tag + 1)));
            deco.stop.insert(r, stops);
        }
        frontier = next;
    }
    for &(_, tag) in &deco.tops {
        let tag = tag as usize;
        if deco.generation_counts.len() <= tag {
            deco.generation_counts.resize(tag + 1, 0);
        }
        deco.generation_counts[tag] += 1;
    }
    Ok(deco)
}

/// Root-splitting builder: the cubes of `root_generation` become a disjoint
/// family of roots covering every atom; each is decomposed independently.
/// The finitely many cubes coarser than `root_generation` are returned as the
/// bad family (on the forest and on every part).
pub fn build_corona_forest(
    lattice: &DyadicLattice,
    f: &BoundaryFunction,
    epsilon: f64,
    mode: StoppingMode,
    root_generation: i32,
) -> Result<CoronaForest, CoronaError> {
    if root_generation < lattice.gen_min || root_generation > lattice.gen_max {
        return Err(CoronaError::BadRootGeneration {
            got: root_generation,
            lo: lattice.gen_min,
            hi: lattice.gen_max,
        });
    }
    let roots: Vec<CubeId> = (0..lattice.level(root_generation).len() as u32)
        .map(|index| CubeId { generation: root_generation, index })
        .collect();
    let bad: Vec<CubeId> = (lattice.gen_min..root_generation)
        .flat_map(|generation| {
            (0..lattice.level(generation).len() as u32)
                .map(move |index| CubeId { generation, index })
        })
        .collect();
    let mut parts = Vec::with_capacity(roots.len());
    for &r in &roots {
        let mut part = build_corona(lattice, r, f, epsilon, mode)?;
        part.bad = bad.clone();
        parts.push(part);
    }
    Ok(CoronaForest { roots, parts, bad, epsilon, mode })
}

/// `Σ_{R ∈ family, R ⊆ S} σ(R) / σ(S)` — the packing of the family inside `S`.
pub fn packing_constant(lattice: &DyadicLattice, family: &[CubeId], s: CubeId) -> f64 {
    let mass_s = lattice.cube(s).mass;
    family
        .iter()
        .filter(|&&r| is_subcube(lattice, r, s))
        .map(|&r| lattice.cube(r).mass)
        .sum::<f64>()
        / mass_s
}

/// Packing of the family inside every `S ∈ 𝒟(under)` that contains at least
/// one family member, sorted by cube id. (All other cubes pack to 0.)
pub fn packing_table(
    lattice: &DyadicLattice,
    family: &[CubeId],
    under: CubeId,
) -> Vec<(CubeId, f64)> {
    let mut acc: BTreeMap<CubeId, f64> = BTreeMap::new();
    for &r in family {
        if !is_subcube(lattice, r, under) {
            continue;
        }
        let sigma = lattice.cube(r).mass;
        let mut s = Some(r);
        while let Some(q) = s {
            *acc.entry(q).or_insert(0.0) += sigma;
            if q == under {
                break;
            }
            s = lattice.parent_of(q);
        }
    }
    acc.into_iter()
        .map(|(q, total)| (q, total / lattice.cube(q).mass))
        .collect()
}

/// `max_{S ∈ 𝒟(under)}` of the packing constant — the Carleson packing norm
/// of the family relative to `under`.
pub fn packing_profile(lattice: &DyadicLattice, family: &[CubeId], under: CubeId) -> f64 {
    packing_table(lattice, family, under)
        .iter()
        .map(|&(_, v)| v)
        .fold(0.0, f64::max)
}

/// CSV dump of a packing table: `generation,index,packing`.
pub fn packing_csv(table: &[(CubeId, f64)]) -> String {
    let mut out = String::from("generation,index,packing\n");
    for &(q, v) in table {
        writeln!(out, "{},{},{:.17e}", q.generation, q.index, v)
            .expect("writing to a String cannot fail");
    }
    out
}

/// The stopped square function of `family` at the atom `ξ`:
/// `(Σ |m_Q f − m_{Q*} f|²)^{1/2}` over the family cubes `Q ∋ ξ`, where `Q*`
/// is the stopping parent of `Q` — the minimal family cube strictly
/// containing `Q`. The coarsest family cube above `ξ` has no stopping parent
/// and contributes nothing.
pub fn stopped_square_function(
    lattice: &DyadicLattice,
    family: &[CubeId],
    f: &BoundaryFunction,
    xi: Point,
) -> Result<f64, CoronaError> {
    let leaf = lattice.locate_leaf(xi)?;
    let fam: BTreeSet<CubeId> = family.iter().copied().collect();
    // Family cubes containing ξ are exactly the ancestors-or-self of the leaf
    // that lie in the family; walking upward lists them finest-first, so each
    // one's stopping parent is simply the next entry.
    let mut chain = Vec::new();
    let mut q = Some(leaf);
    while let Some(c) = q {
        if fam.contains(&c) {
            chain.push(c);
        }
        q = lattice.parent_of(c);
    }
    let sum: f64 = chain
        .windows(2)
        .map(|w| {
            let jump = cube_average(lattice, w[0], f) - cube_average(lattice, w[1], f);
            jump * jump
        })
        .sum();
    Ok(sum.sqrt())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::{build_lattice, dyadic_maximal};
    use crate::functionals::{bmo_norm, OscillationFamily};
    use crate::geometry::BoundaryModel;
    use crate::testkit::{half_plane, random_martingale};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rayon::prelude::*;
    use std::sync::Arc;

    // ---- oracles (independent re-derivations used by the tests below) -----

    /// Average of f over a cube by a direct loop over its atoms — no prefix
    /// sums, no library averaging.
    fn scan_average(
        lattice: &DyadicLattice,
        model: &BoundaryModel,
        q: CubeId,
        f: &BoundaryFunction,
    ) -> f64 {
        let c = lattice.cube(q);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in c.atom_start as usize..c.atom_end as usize {
            num += model.weights[i] * f.value(i);
            den += model.weights[i];
        }
        num / den
    }

    /// Truncated maximal function by an explicit ancestor walk over scanned
    /// absolute averages.
    fn scan_maximal(
        lattice: &DyadicLattice,
        model: &BoundaryModel,
        q: CubeId,
        f: &BoundaryFunction,
    ) -> f64 {
        let mut best = 0.0f64;
        let mut cur = Some(q);
        while let Some(c) = cur {
            let cube = lattice.cube(c);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in cube.atom_start as usize..cube.atom_end as usize {
                num += model.weights[i] * f.value(i).abs();
                den += model.weights[i];
            }
            best = best.max(num / den);
            cur = lattice.parent_of(c);
        }
        best
    }

    /// The stopping condition at q relative to root r, re-derived from scans.
    fn oracle_condition(
        lattice: &DyadicLattice,
        model: &BoundaryModel,
        r: CubeId,
        q: CubeId,
        f: &BoundaryFunction,
        epsilon: f64,
        mode: StoppingMode,
    ) -> bool {
        let gap = (scan_average(lattice, model, q, f) - scan_average(lattice, model, r, f)).abs();
        let threshold = match mode {
            StoppingMode::Lp => scan_maximal(lattice, model, q, f),
            StoppingMode::Bmo { norm } => norm,
        };
        threshold > 0.0 && gap >= epsilon * threshold
    }

    /// Brute-force maximal stopping set: enumerate every strict descendant of
    /// r, keep those satisfying the condition with no strict ancestor (below
    /// r) also satisfying it.
    fn oracle_stop_set(
        lattice: &DyadicLattice,
        model: &BoundaryModel,
        r: CubeId,
        f: &BoundaryFunction,
        epsilon: f64,
        mode: StoppingMode,
    ) -> Vec<CubeId> {
        let mut out = Vec::new();
        for q in lattice.descendants(r) {
            if q == r || !oracle_condition(lattice, model, r, q, f, epsilon, mode) {
                continue;
            }
            let mut blocked = false;
            let mut a = lattice.parent_of(q);
            while let Some(p) = a {
                if p == r {
                    break;
                }
                if oracle_condition(lattice, model, r, p, f, epsilon, mode) {
                    blocked = true;
                    break;
                }
                a = lattice.parent_of(p);
            }
            if !blocked {
                out.push(q);
            }
        }
        out.sort_unstable();
        out
    }

    // ---- fixtures ----------------------------------------------------------

    fn unit_lattice(atoms: usize, level_max: i32) -> (Arc<BoundaryModel>, DyadicLattice) {
        let model = half_plane([0.0, 0.0], [1.0, 1.0], atoms);
        let lattice = build_lattice(&model, 0, level_max).expect("lattice");
        (model, lattice)
    }

    fn single_root(lattice: &DyadicLattice) -> CubeId {
        let roots: Vec<CubeId> = lattice.roots().collect();
        assert_eq!(roots.len(), 1, "unit window should produce one root");
        roots[0]
    }

    fn indicator_left_half(model: &BoundaryModel) -> BoundaryFunction {
        BoundaryFunction::from_fn(model, |p| if p[0] < 0.5 { 1.0 } else { 0.0 })
    }

    fn dense_bmo(model: &BoundaryModel, f: &BoundaryFunction) -> f64 {
        let family = OscillationFamily::dyadic_balls(
            model,
            1,
            4.0 * model.atom_spacing,
            model.diam_boundary,
        );
        bmo_norm(model, f, &family).expect("bmo norm")
    }

    fn l2_norm(model: &BoundaryModel, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&model.weights)
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    // ---- stop_cubes --------------------------------------------------------

    #[test]
    fn constant_data_never_stops() {
        let (model, lattice) = unit_lattice(256, 7);
        let r = single_root(&lattice);
        let f = BoundaryFunction::from_fn(&model, |_| 3.0);
        let lp = stop_cubes(&lattice, r, &f, 0.2, StoppingMode::Lp).expect("lp");
        assert!(lp.is_empty(), "constant data has no oscillation, got {} stops", lp.len());
        // Constant data has BMO norm 0; a vanishing threshold must not stop.
        let bmo = stop_cubes(&lattice, r, &f, 0.2, StoppingMode::Bmo { norm: 0.0 }).expect("bmo");
        assert!(bmo.is_empty(), "zero threshold must never stop, got {} stops", bmo.len());
        // Identically zero data has M f ≡ 0: the Lp threshold vanishes too.
        let zero = BoundaryFunction::from_fn(&model, |_| 0.0);
        let zl = stop_cubes(&lattice, r, &zero, 0.2, StoppingMode::Lp).expect("zero lp");
        assert!(zl.is_empty(), "zero data must never stop, got {} stops", zl.len());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let (model, lattice) = unit_lattice(256, 7);
        let r = single_root(&lattice);
        let f = BoundaryFunction::from_fn(&model, |p| p[0]);
        for eps in [0.0, -1.0, f64::NAN] {
            let err = stop_cubes(&lattice, r, &f, eps, StoppingMode::Lp).unwrap_err();
            assert!(
                matches!(err, CoronaError::BadThreshold(_)),
                "ε={eps} should be rejected, got {err}"
            );
        }
        for norm in [-0.5, f64::NAN, f64::INFINITY] {
            let err =
                stop_cubes(&lattice, r, &f, 0.1, StoppingMode::Bmo { norm }).unwrap_err();
            assert!(matches!(err, CoronaError::BadNorm(_)), "norm={norm} rejected, got {err}");
        }
        let ghost = CubeId { generation: 0, index: 99 };
        let err = stop_cubes(&lattice, ghost, &f, 0.1, StoppingMode::Lp).unwrap_err();
        assert!(matches!(err, CoronaError::UnknownCube(_)), "ghost cube rejected, got {err}");
        let err = build_corona_forest(&lattice, &f, 0.1, StoppingMode::Lp, -3).unwrap_err();
        assert!(
            matches!(err, CoronaError::BadRootGeneration { .. }),
            "bad root generation rejected, got {err}"
        );
    }

    #[test]
    fn indicator_children_stop_at_explicit_threshold() {
        let (model, lattice) = unit_lattice(1024, 9);
        let r = single_root(&lattice);
        let f = indicator_left_half(&model);
        let norm = dense_bmo(&model, &f);
        assert!(
            norm > 0.2 && norm <= 0.5 + 1e-9,
            "indicator BMO norm should be near 1/2, got {norm}"
        );
        // The two halves average to 1 and 0 against a root average of 1/2, so
        // the gap 1/2 clears ε·norm ≤ 0.05 by an order of magnitude.
        let m_r = cube_average(&lattice, r, &f);
        assert!((m_r - 0.5).abs() < 1e-12, "root average should be 1/2, got {m_r}");
        let children: Vec<CubeId> = lattice.children_of(r).collect();
        assert_eq!(children.len(), 2);
        for &c in &children {
            let gap = (cube_average(&lattice, c, &f) - m_r).abs();
            assert!((gap - 0.5).abs() < 1e-12, "child gap should be 1/2, got {gap}");
            assert!(gap >= 0.1 * norm, "explicit stopping inequality must hold");
        }
        let stops = stop_cubes(&lattice, r, &f, 0.1, StoppingMode::Bmo { norm }).expect("stops");
        assert_eq!(stops, children, "exactly the two children stop");
    }

    #[test]
    fn stopping_family_matches_exhaustive_oracle() {
        // 512 atoms / leaf level 8 → 256 leaves, small enough to enumerate
        // every cube of the tree in the oracle.
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..6 {
            let values: Vec<f64> = (0..model.atoms.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let f = BoundaryFunction::from_values(&model, values);
            for epsilon in [0.1, 0.5] {
                for mode in [StoppingMode::Lp, StoppingMode::Bmo { norm: 0.35 }] {
                    let got = stop_cubes(&lattice, r, &f, epsilon, mode).expect("stops");
                    let want = oracle_stop_set(&lattice, &model, r, &f, epsilon, mode);
                    assert_eq!(
                        got, want,
                        "trial {trial}, ε={epsilon}, mode {mode:?}: breadth-first \
                         stopping must equal the brute-force maximal set"
                    );
                }
            }
        }
    }

    // ---- build_corona ------------------------------------------------------

    #[test]
    fn constant_data_yields_single_tree() {
        let (model, lattice) = unit_lattice(256, 7);
        let r = single_root(&lattice);
        let f = BoundaryFunction::from_fn(&model, |_| 2.0);
        let deco = build_corona(&lattice, r, &f, 0.25, StoppingMode::Lp).expect("corona");
        assert_eq!(deco.tops, vec![(r, 0)], "Top should be exactly the root");
        assert_eq!(deco.generation_counts, vec![1]);
        assert!(deco.stop[&r].is_empty());
        assert!(deco.bad.is_empty(), "single-root build leaves the bad family empty");
        let all = lattice.descendants(r);
        assert_eq!(deco.tree_of.len(), all.len(), "one tree covering the whole subtree");
        for q in all {
            assert_eq!(deco.top_of(q), Some(r), "{q:?} should sit in the root tree");
        }
    }

    /// Exact partition, ancestor closure, and stop maximality on a random
    /// dyadic martingale, for both stopping modes.
    #[test]
    fn martingale_corona_partitions_the_lattice_exactly() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_martingale(&lattice, &model, &mut rng);
        let norm = dense_bmo(&model, &f);
        assert!(norm > 0.0, "martingale data should have positive BMO norm");
        for mode in [StoppingMode::Lp, StoppingMode::Bmo { norm }] {
            let deco = build_corona(&lattice, r, &f, 0.25, mode).expect("corona");
            let all = lattice.descendants(r);

            // Every cube in exactly one tree (the map covers 𝒟(R₀) once).
            assert_eq!(deco.tree_of.len(), all.len(), "tree map must cover 𝒟(R₀)");
            for &q in &all {
                let top = deco.top_of(q).expect("assigned");
                assert!(is_subcube(&lattice, q, top), "{q:?} must lie inside its top {top:?}");
            }

            // Ancestor closure: walking up from any member stays in the same
            // tree until the top is reached.
            for (&q, &top) in &deco.tree_of {
                if q != top {
                    let p = lattice.parent_of(q).expect("non-top cubes have parents");
                    assert_eq!(
                        deco.top_of(p),
                        Some(top),
                        "parent of {q:?} must share its tree"
                    );
                }
            }

            // Single maximal cube per tree: the top maps to itself, and every
            // stop list member heads its own tree.
            for &(top, _) in &deco.tops {
                assert_eq!(deco.top_of(top), Some(top), "top must head its own tree");
            }
            for (r_top, stops) in &deco.stop {
                for &s in stops {
                    assert_eq!(deco.top_of(s), Some(s), "stop cube starts the next tree");
                    assert!(
                        is_subcube(&lattice, s, *r_top) && s != *r_top,
                        "stop cube must be a strict descendant of its tree top"
                    );
                }
            }
        }
    }

    #[test]
    fn top_generation_tags_strictly_descend() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_martingale(&lattice, &model, &mut rng);
        let deco = build_corona(&lattice, r, &f, 0.2, StoppingMode::Lp).expect("corona");
        let tag_of: BTreeMap<CubeId, u32> = deco.tops.iter().map(|&(q, k)| (q, k)).collect();
        assert_eq!(tag_of[&r], 0);
        for (r_top, stops) in &deco.stop {
            for s in stops {
                assert_eq!(
                    tag_of[s],
                    tag_of[r_top] + 1,
                    "stop cubes carry their parent's tag plus one"
                );
                assert!(
                    s.generation > r_top.generation,
                    "stopping strictly descends in lattice generation"
                );
            }
        }
        let deepest = deco.tops.iter().map(|&(_, k)| k).max().unwrap();
        assert!(
            (deepest as i32) <= lattice.gen_max - lattice.gen_min,
            "tags are bounded by the lattice depth"
        );
    }

    /// Replays the stopping inequality over the finished decomposition: strict
    /// failure inside trees, success exactly on the stop cubes. No tolerance.
    #[test]
    fn threshold_dichotomy_is_exact() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = random_martingale(&lattice, &model, &mut rng);
        for mode in [StoppingMode::Lp, StoppingMode::Bmo { norm: 0.4 }] {
            let deco = build_corona(&lattice, r, &f, 0.3, mode).expect("corona");
            let condition = |r_top: CubeId, q: CubeId| -> bool {
                let gap = (cube_average(&lattice, q, &f) - cube_average(&lattice, r_top, &f)).abs();
                let threshold = match mode {
                    StoppingMode::Lp => truncated_maximal(&lattice, q, &f),
                    StoppingMode::Bmo { norm } => norm,
                };
                threshold > 0.0 && gap >= 0.3 * threshold
            };
            for (&q, &top) in &deco.tree_of {
                if q != top {
                    assert!(
                        !condition(top, q),
                        "tree member {q:?} of {top:?} must fail the stopping inequality"
                    );
                }
            }
            for (r_top, stops) in &deco.stop {
                for &s in stops {
                    assert!(
                        condition(*r_top, s),
                        "stop cube {s:?} of {r_top:?} must satisfy the stopping inequality"
                    );
                }
            }
        }
    }

    // ---- packing -----------------------------------------------------------

    #[test]
    fn packing_of_root_alone_is_one() {
        let (model, lattice) = unit_lattice(256, 7);
        let r = single_root(&lattice);
        assert!((packing_constant(&lattice, &[r], r) - 1.0).abs() < 1e-15);
        // Constant data: Top = {R₀}, so its profile is exactly 1.
        let f = BoundaryFunction::from_fn(&model, |_| 5.0);
        let deco = build_corona(&lattice, r, &f, 0.5, StoppingMode::Lp).expect("corona");
        let profile = packing_profile(&lattice, &deco.top_family(), r);
        assert!((profile - 1.0).abs() < 1e-15, "profile of a lone top is 1, got {profile}");
    }

    #[test]
    fn packing_table_agrees_with_direct_constant() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f = random_martingale(&lattice, &model, &mut rng);
        let deco = build_corona(&lattice, r, &f, 0.25, StoppingMode::Lp).expect("corona");
        let family = deco.top_family();
        let table = packing_table(&lattice, &family, r);
        assert!(!table.is_empty());
        for &(s, v) in table.iter().step_by(7) {
            let direct = packing_constant(&lattice, &family, s);
            assert!(
                (v - direct).abs() <= 1e-12 * direct.max(1.0),
                "table and direct packing disagree at {s:?}: {v} vs {direct}"
            );
        }
        let profile = packing_profile(&lattice, &family, r);
        let direct_max = table.iter().map(|&(_, v)| v).fold(0.0, f64::max);
        assert_eq!(profile, direct_max);
    }

    /// For the half-indicator the decomposition is tiny and the packing value
    /// is known in closed form: Top = {R₀, left child, right child}, so the
    /// profile is (σ(R₀)+σ(L)+σ(R))/σ(R₀) = 2 exactly, for every ε ≤ 1/2.
    /// The ε-scaling law profile·ε² ≤ C is then checked on martingale data,
    /// where stopping genuinely cascades.
    #[test]
    fn packing_profile_obeys_inverse_square_law() {
        let (model, lattice) = unit_lattice(1024, 9);
        let r = single_root(&lattice);
        let f = indicator_left_half(&model);
        let norm = dense_bmo(&model, &f);
        for epsilon in [0.5, 0.25, 0.125] {
            let deco =
                build_corona(&lattice, r, &f, epsilon, StoppingMode::Bmo { norm }).expect("bmo");
            let tops = deco.top_family();
            assert_eq!(tops.len(), 3, "indicator splits once: root plus two children");
            let profile = packing_profile(&lattice, &tops, r);
            assert!(
                (profile - 2.0).abs() < 1e-12,
                "hand-computed indicator profile is 2, got {profile} at ε={epsilon}"
            );
            assert!(profile * epsilon * epsilon <= 1.0, "law holds trivially here");
        }

        // Martingale data: stopping cascades, profiles grow as ε shrinks, and
        // profile·ε² stays below a single constant (cap measured, then pinned).
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let f = random_martingale(&lattice, &model, &mut rng);
        let mut law = Vec::new();
        for epsilon in [0.5, 0.25, 0.125] {
            let deco = build_corona(&lattice, r, &f, epsilon, StoppingMode::Lp).expect("lp");
            let profile = packing_profile(&lattice, &deco.top_family(), r);
            law.push(profile * epsilon * epsilon);
        }
        println!("martingale packing law profile*eps^2: {law:?}");
        for (value, epsilon) in law.iter().zip([0.5, 0.25, 0.125]) {
            assert!(
                *value <= 2.5,
                "packing law constant blew past the pinned cap at ε={epsilon}: {value}"
            );
        }
    }

    // ---- stopped square function -------------------------------------------

    #[test]
    fn stopped_square_vanishes_for_constant_data() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let f = indicator_left_half(&model);
        let deco = build_corona(&lattice, r, &f, 0.1, StoppingMode::Bmo { norm: 0.4 })
            .expect("corona");
        let family = deco.top_family();
        let constant = BoundaryFunction::from_fn(&model, |_| -4.0);
        for &xi in model.atoms.iter().step_by(61) {
            let s = stopped_square_function(&lattice, &family, &constant, xi).expect("sqf");
            assert_eq!(s, 0.0, "constant data has zero jumps along any chain");
        }
    }

    /// Single-jump indicator: the square function at an atom must equal the
    /// hand-enumerated chain sum, with family membership, stopping parents,
    /// and averages all re-derived by direct scans.
    #[test]
    fn stopped_square_matches_chain_enumeration() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let f = indicator_left_half(&model);
        let norm = dense_bmo(&model, &f);
        let deco =
            build_corona(&lattice, r, &f, 0.1, StoppingMode::Bmo { norm }).expect("corona");
        let family = deco.top_family();
        assert!(family.len() >= 3, "need a nontrivial family for the chain test");

        let mut checked = 0usize;
        for (i, &xi) in model.atoms.iter().enumerate().step_by(37) {
            // Oracle: collect family cubes whose atom range holds atom i, find
            // each one's stopping parent by scanning for the minimal strict
            // superset, and add up the squared jumps of scanned averages.
            let holders: Vec<CubeId> = family
                .iter()
                .copied()
                .filter(|&q| {
                    let c = lattice.cube(q);
                    (c.atom_start as usize) <= i && i < (c.atom_end as usize)
                })
                .collect();
            let mut expected = 0.0f64;
            for &q in &holders {
                let mut parent: Option<CubeId> = None;
                for &cand in &holders {
                    if cand == q || !is_subcube(&lattice, q, cand) {
                        continue;
                    }
                    let better = match parent {
                        None => true,
                        Some(p) => is_subcube(&lattice, cand, p) && cand != p,
                    };
                    if better {
                        parent = Some(cand);
                    }
                }
                if let Some(p) = parent {
                    let jump = scan_average(&lattice, &model, q, &f)
                        - scan_average(&lattice, &model, p, &f);
                    expected += jump * jump;
                }
            }
            let expected = expected.sqrt();
            let got = stopped_square_function(&lattice, &family, &f, xi).expect("sqf");
            assert!(
                (got - expected).abs() <= 1e-13 * expected.max(1.0),
                "chain sum mismatch at atom {i}: got {got}, enumerated {expected}"
            );
            if expected > 0.0 {
                checked += 1;
            }
        }
        assert!(checked >= 3, "the jump must be visible from several atoms, saw {checked}");
    }

    /// L² control of the stopped square function by the dyadic maximal
    /// function over 30 random data sets; the constant is recorded and capped.
    #[test]
    fn stopped_square_is_l2_controlled_by_maximal() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst = 0.0f64;
        for trial in 0..30 {
            let values: Vec<f64> = (0..model.atoms.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let f = BoundaryFunction::from_values(&model, values);
            let deco = build_corona(&lattice, r, &f, 0.25, StoppingMode::Lp).expect("corona");
            let family = deco.top_family();
            // Queries run concurrently across atoms — the decomposition and
            // lattice are shared immutably.
            let (sq, mx): (Vec<f64>, Vec<f64>) = model
                .atoms
                .par_iter()
                .map(|&xi| {
                    let s = stopped_square_function(&lattice, &family, &f, xi).expect("sqf");
                    let m = dyadic_maximal(&lattice, &f, xi).expect("maximal");
                    (s, m)
                })
                .unzip();
            let ratio = l2_norm(&model, &sq) / l2_norm(&model, &mx);
            assert!(ratio.is_finite(), "trial {trial}: ratio must be finite");
            worst = worst.max(ratio);
        }
        println!("stopped-square / maximal L2 ratio, worst of 30: {worst:.4}");
        assert!(
            worst <= 2.0,
            "square function L2 norm should be controlled by the maximal function, got {worst}"
        );
    }

    /// Per-tree L² chain: ε²·‖f‖²_BMO·Σ_stop σ(S) ≤ Σ_{Q⊆R} ‖Δ_Q f‖² ≤
    /// ‖1_R (f − m_R f)‖²₂. The middle term sums martingale differences
    /// ‖Δ_Q f‖² = Σ_children σ(c)(m_c − m_Q)².
    #[test]
    fn bmo_l2_chain_holds_per_tree() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let martingale = random_martingale(&lattice, &model, &mut rng);
        let indicator = indicator_left_half(&model);
        for f in [&indicator, &martingale] {
            let norm = dense_bmo(&model, f);
            let epsilon = 0.25;
            let deco =
                build_corona(&lattice, r, f, epsilon, StoppingMode::Bmo { norm }).expect("bmo");
            let mut trees_with_stops = 0usize;
            for &(top, _) in &deco.tops {
                let stops = &deco.stop[&top];
                let lhs: f64 = epsilon * epsilon
                    * norm
                    * norm
                    * stops.iter().map(|&s| lattice.cube(s).mass).sum::<f64>();
                let mut mid = 0.0f64;
                for q in lattice.descendants(top) {
                    let m_q = cube_average(&lattice, q, f);
                    for c in lattice.children_of(q) {
                        let d = cube_average(&lattice, c, f) - m_q;
                        mid += lattice.cube(c).mass * d * d;
                    }
                }
                let m_top = cube_average(&lattice, top, f);
                let cube = lattice.cube(top);
                let mut rhs = 0.0f64;
                for i in cube.atom_start as usize..cube.atom_end as usize {
                    let d = f.value(i) - m_top;
                    rhs += model.weights[i] * d * d;
                }
                let slack = 1e-9 * rhs.max(1.0);
                assert!(
                    lhs <= mid + slack,
                    "stop mass bound failed on tree {top:?}: {lhs} > {mid}"
                );
                assert!(
                    mid <= rhs + slack,
                    "martingale difference sum exceeded the L2 mass on tree {top:?}: {mid} > {rhs}"
                );
                if !stops.is_empty() {
                    trees_with_stops += 1;
                }
            }
            assert!(trees_with_stops >= 1, "data should stop at least once");
        }
    }

    // ---- root splitting (forest) -------------------------------------------

    #[test]
    fn forest_roots_tile_the_support_and_bad_family_packs() {
        // Window of width 3: three unit roots, so root splitting is visible.
        let model = half_plane([-1.0, 0.0], [2.0, 1.0], 768);
        let lattice = build_lattice(&model, 0, 7).expect("lattice");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_martingale(&lattice, &model, &mut rng);
        let root_generation = 2;
        let forest = build_corona_forest(&lattice, &f, 0.25, StoppingMode::Lp, root_generation)
            .expect("forest");

        // Roots: one lattice generation, pairwise disjoint, covering all atoms.
        assert_eq!(forest.roots.len(), lattice.level(root_generation).len());
        let mut covered = vec![false; model.atoms.len()];
        for &r in &forest.roots {
            let c = lattice.cube(r);
            for cell in covered
                .iter_mut()
                .take(c.atom_end as usize)
                .skip(c.atom_start as usize)
            {
                assert!(!*cell, "roots must be pairwise disjoint");
                *cell = true;
            }
        }
        assert!(covered.iter().all(|&b| b), "roots must cover every atom");

        // Bad family: exactly the cubes coarser than the root generation,
        // finitely many per generation, never more than a full generation.
        let expected_bad: usize = (lattice.gen_min..root_generation)
            .map(|g| lattice.level(g).len())
            .sum();
        assert_eq!(forest.bad.len(), expected_bad);
        for (generation, count) in forest.bad_generation_counts(&lattice) {
            assert!(
                count <= lattice.level(root_generation).len(),
                "per-generation excess must stay bounded, got {count} at {generation}"
            );
        }
        for part in &forest.parts {
            assert_eq!(part.bad, forest.bad, "parts carry the shared bad family");
        }

        // Every cube at or below the root generation sits in exactly one
        // part's tree map.
        for generation in root_generation..=lattice.gen_max {
            for index in 0..lattice.level(generation).len() as u32 {
                let q = CubeId { generation, index };
                let owners = forest
                    .parts
                    .iter()
                    .filter(|p| p.tree_of.contains_key(&q))
                    .count();
                assert_eq!(owners, 1, "{q:?} must belong to exactly one part");
            }
        }

        // The bad family packs: one cube per generation above any fixed root
        // chain, so the profile is exactly the number of excluded generations.
        let profile = forest.bad_packing_profile(&lattice);
        let expected = (root_generation - lattice.gen_min) as f64;
        assert!(
            (profile - expected).abs() < 1e-12,
            "bad-family packing profile should be {expected}, got {profile}"
        );
    }

    // ---- dumps --------------------------------------------------------------

    #[test]
    fn csv_dumps_are_deterministic_and_well_formed() {
        let (model, lattice) = unit_lattice(512, 8);
        let r = single_root(&lattice);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_martingale(&lattice, &model, &mut rng);
        let deco = build_corona(&lattice, r, &f, 0.25, StoppingMode::Lp).expect("corona");
        let csv = deco.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("generation,index,top_generation,top_index,is_stop,is_top")
        );
        assert_eq!(csv.lines().count(), deco.tree_of.len() + 1, "one row per cube plus header");
        let row = lines.next().expect("at least one data row");
        assert_eq!(row.split(',').count(), 6);
        // Rebuilding from the same inputs dumps byte-identical text.
        let again = build_corona(&lattice, r, &f, 0.25, StoppingMode::Lp).expect("corona");
        assert_eq!(csv, again.to_csv());

        let table = packing_table(&lattice, &deco.top_family(), r);
        let pcsv = packing_csv(&table);
        assert!(pcsv.starts_with("generation,index,packing\n"));
        assert_eq!(pcsv.lines().count(), table.len() + 1);
        // The root row records the full-family packing (every top is inside R₀).
        let root_row = pcsv
            .lines()
            .find(|l| l.starts_with(&format!("{},{},", r.generation, r.index)))
            .expect("root row present");
        let value: f64 = root_row.rsplit(',').next().unwrap().parse().expect("parsable");
        let direct = packing_constant(&lattice, &deco.top_family(), r);
        assert!((value - direct).abs() <= 1e-12 * direct.max(1.0));
    }
}
