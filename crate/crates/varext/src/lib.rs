//! Constructive harmonic-analysis toolkit for desk-scale planar domains with
//! Ahlfors-regular boundaries: dyadic boundary lattices, Whitney decompositions,
//! partition-of-unity extensions of boundary data, corona (stopping-time)
//! decompositions, epsilon-approximants, mollified fields and iterated
//! Varopoulos extensions — together with the numerical verification suite for
//! the packing / Carleson / maximal / trace / decay inequalities they satisfy.

pub mod approximator;
pub mod corona;
pub mod dyadic;
pub mod extension;
pub mod functionals;
pub mod geometry;
pub mod mollifier;
#[cfg(test)]
pub(crate) mod testkit;
pub mod whitney;

pub type Point = [f64; 2];

/// Euclidean distance between two points.
pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
