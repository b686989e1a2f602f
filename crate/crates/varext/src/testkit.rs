//! Shared test fixtures: boundary models and Whitney grids built once per
//! test process (OnceLock), plus small field helpers. Test-only.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::dyadic::{build_lattice, BoundaryFunction, CubeId, DyadicLattice};
use crate::functionals::{build_cone, Cone, ConeParams, GaussianMix, InteriorField};
use crate::geometry::{build_scenario, BoundaryModel, ScenarioKind, ScenarioSpec, Window};
use crate::whitney::{build_whitney, WhitneyGrid};
use crate::Point;

pub fn half_plane(min: Point, max: Point, atoms: usize) -> Arc<BoundaryModel> {
    let spec = ScenarioSpec::new(ScenarioKind::HalfPlane)
        .with_window(Window::new(min, max))
        .with_line_atoms(atoms);
    Arc::new(build_scenario(&spec).expect("half-plane scenario"))
}

pub fn cantor_model(generation: u32) -> Arc<BoundaryModel> {
    Arc::new(
        build_scenario(&ScenarioSpec::new(ScenarioKind::FourCornerCantor { generation }))
            .expect("cantor scenario"),
    )
}

pub fn grid_fixture(
    min: Point,
    max: Point,
    atoms: usize,
    lat: (i32, i32),
    band: (i32, i32),
) -> Arc<WhitneyGrid> {
    let model = half_plane(min, max, atoms);
    let lattice = Arc::new(build_lattice(&model, lat.0, lat.1).expect("lattice"));
    Arc::new(build_whitney(&lattice, band.0, band.1).expect("whitney grid"))
}

/// Wide shallow band: window [−1,2]×[0,1], Whitney levels 5..10.
pub fn wide_grid() -> &'static Arc<WhitneyGrid> {
    static G: OnceLock<Arc<WhitneyGrid>> = OnceLock::new();
    G.get_or_init(|| grid_fixture([-1.0, 0.0], [2.0, 1.0], 8192, (0, 10), (5, 10)))
}

/// Fine band on the unit square: Whitney levels 5..12.
pub fn fine_grid() -> &'static Arc<WhitneyGrid> {
    static G: OnceLock<Arc<WhitneyGrid>> = OnceLock::new();
    G.get_or_init(|| grid_fixture([0.0, 0.0], [1.0, 1.0], 8192, (0, 12), (5, 12)))
}

/// Mid-resolution wide band, same window as `wide_grid` but one level
/// shallower — the canonical "two band widths" comparison partner.
pub fn mid_grid() -> &'static Arc<WhitneyGrid> {
    static G: OnceLock<Arc<WhitneyGrid>> = OnceLock::new();
    G.get_or_init(|| grid_fixture([-1.0, 0.0], [2.0, 1.0], 8192, (0, 9), (5, 9)))
}

/// Small coarse band on the unit square for many-field sweeps.
pub fn coarse_grid() -> &'static Arc<WhitneyGrid> {
    static G: OnceLock<Arc<WhitneyGrid>> = OnceLock::new();
    G.get_or_init(|| grid_fixture([0.0, 0.0], [1.0, 1.0], 2048, (0, 7), (5, 7)))
}

/// Whitney band around the four-corner Cantor set, generation 5
/// (quartic lattice levels 0..=5, Whitney levels 4..10).
pub fn cantor_grid() -> &'static Arc<WhitneyGrid> {
    static G: OnceLock<Arc<WhitneyGrid>> = OnceLock::new();
    G.get_or_init(|| {
        let model = cantor_model(5);
        let lattice = Arc::new(build_lattice(&model, 0, 5).expect("cantor lattice"));
        Arc::new(build_whitney(&lattice, 4, 10).expect("cantor whitney grid"))
    })
}

/// Seeded stock of smooth test fields.
pub fn random_mix(rng: &mut ChaCha8Rng, k: usize, amp: (f64, f64), nonneg: bool) -> GaussianMix {
    let terms = (0..k)
        .map(|_| {
            let mut a = rng.random_range(amp.0..amp.1);
            if !nonneg && rng.random_range(0.0..1.0) < 0.5 {
                a = -a;
            }
            let p = [rng.random_range(-0.2..1.2), rng.random_range(0.1..0.9)];
            let s = rng.random_range(0.25..0.45);
            (a, p, s)
        })
        .collect();
    GaussianMix::new(terms)
}

/// Builds the cone and drops samples the Whitney band does not cover
/// (below the floor or clipped by the window); band-truncated norms
/// evaluate fields only on covered samples. A point is covered as soon as
/// some partition support reaches it — the unnormalized bump sum is tiny
/// near cube corners, so this is a positivity test, not a ≈1 test.
pub fn covered_cone(grid: &WhitneyGrid, vertex: Point, params: &ConeParams) -> Option<Cone> {
    let mut cone = build_cone(grid.model(), vertex, params).ok()?;
    cone.samples.retain(|s| grid.partition_sum(s.x).0 > 1e-9);
    if cone.samples.is_empty() {
        None
    } else {
        Some(cone)
    }
}

pub struct Scaled<'a>(pub f64, pub &'a dyn InteriorField);

impl InteriorField for Scaled<'_> {
    fn value(&self, x: Point) -> f64 {
        self.0 * self.1.value(x)
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        let g = self.1.gradient(x);
        [self.0 * g[0], self.0 * g[1]]
    }
}

pub struct Summed<'a>(pub &'a dyn InteriorField, pub &'a dyn InteriorField);

impl InteriorField for Summed<'_> {
    fn value(&self, x: Point) -> f64 {
        self.0.value(x) + self.1.value(x)
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        let a = self.0.gradient(x);
        let b = self.1.gradient(x);
        [a[0] + b[0], a[1] + b[1]]
    }
}

/// Uniformly random points inside the covered part of the band: rejection
/// sampling against the (unnormalized) partition positivity test.
pub fn covered_points(
    grid: &WhitneyGrid,
    rng: &mut ChaCha8Rng,
    n: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let x = [
            rng.random_range(x_range.0..x_range.1),
            rng.random_range(y_range.0..y_range.1),
        ];
        if grid.partition_sum(x).0 > 1e-9 {
            pts.push(x);
        }
    }
    pts
}

/// A dyadic martingale: start at 0 at the root and add an independent
/// uniform step at every child, so averages genuinely oscillate at all
/// scales. Atom values are the leaf values.
pub fn random_martingale(
    lattice: &DyadicLattice,
    model: &BoundaryModel,
    rng: &mut ChaCha8Rng,
) -> BoundaryFunction {
    let mut values = vec![0.0f64; model.atoms.len()];
    let mut level: BTreeMap<CubeId, f64> = lattice.roots().map(|r| (r, 0.0)).collect();
    loop {
        let mut next: BTreeMap<CubeId, f64> = BTreeMap::new();
        for (&q, &v) in &level {
            let children: Vec<CubeId> = lattice.children_of(q).collect();
            if children.is_empty() {
                let c = lattice.cube(q);
                for value in values
                    .iter_mut()
                    .take(c.atom_end as usize)
                    .skip(c.atom_start as usize)
                {
                    *value = v;
                }
            } else {
                for child in children {
                    next.insert(child, v + rng.random_range(-1.0..1.0));
                }
            }
        }
        if next.is_empty() {
            break;
        }
        level = next;
    }
    BoundaryFunction::from_values(model, values)
}

/// Per-axis probe offsets biased toward the cube faces, where the blend
/// gradients live (the partition is locally constant deep inside supports).
pub const PROBE_OFFSETS: [f64; 9] = [0.01, 0.025, 0.04, 0.2, 0.5, 0.8, 0.96, 0.975, 0.99];

/// 9×9 probe grid inside Whitney cube `p`, face-biased per [`PROBE_OFFSETS`].
pub fn cube_probe_points(grid: &WhitneyGrid, p: u32) -> Vec<Point> {
    let cube = &grid.cubes[p as usize];
    let mut pts = Vec::with_capacity(81);
    for oi in PROBE_OFFSETS {
        for oj in PROBE_OFFSETS {
            pts.push([cube.corner[0] + oi * cube.side, cube.corner[1] + oj * cube.side]);
        }
    }
    pts
}
