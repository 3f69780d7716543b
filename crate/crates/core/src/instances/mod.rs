//! Routing instances and solutions: generation, objectives, validation,
//! TSPLIB95 parsing and the dataset container.

mod dataset;
mod generate;
mod objective;
mod tsplib;
mod validate;

pub use dataset::{Dataset, Record, DATASET_MAGIC, DATASET_VERSION};
pub use generate::{generate_cvrp, generate_tsp, MAX_DEMAND};
pub use objective::{cvrp_cost, cvrp_cost_scaled, dist, objective, tour_length};
pub use tsplib::{parse_library_file, parse_library_str, parse_tour_str, LibraryInstance};
pub use validate::{validate, validate_cvrp, validate_tsp, Violation, ViolationReport};

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TspInstance {
    pub coords: Vec<Point>,
}

impl TspInstance {
    pub fn new(coords: Vec<Point>) -> Result<Self, InstanceError> {
        if coords.len() < 3 {
            return Err(InstanceError::InvalidSize(coords.len()));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(InstanceError::Invalid("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }
}

/// Depot plus `n` customers with integer demands and a vehicle capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct CvrpInstance {
    pub depot: Point,
    pub customers: Vec<Point>,
    pub demands: Vec<u32>,
    pub capacity: u32,
}

impl CvrpInstance {
    pub fn new(depot: Point, customers: Vec<Point>, demands: Vec<u32>, capacity: u32) -> Result<Self, InstanceError> {
        if customers.is_empty() {
            return Err(InstanceError::InvalidSize(0));
        }
        if customers.len() != demands.len() {
            return Err(InstanceError::Invalid(format!(
                "{} customers but {} demands",
                customers.len(),
                demands.len()
            )));
        }
        if capacity == 0 {
            return Err(InstanceError::InvalidCapacity(capacity));
        }
        if let Some(i) = demands.iter().position(|&d| d == 0 || d > capacity) {
            return Err(InstanceError::Invalid(format!(
                "customer {i} has demand {} outside 1..={capacity}",
                demands[i]
            )));
        }
        Ok(Self { depot, customers, demands, capacity })
    }

    pub fn n(&self) -> usize {
        self.customers.len()
    }
}

/// A closed tour visiting every node once, as a permutation of `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TspTour {
    pub order: Vec<usize>,
}

impl TspTour {
    pub fn new(order: Vec<usize>) -> Self {
        Self { order }
    }

    pub fn reversed(&self) -> Self {
        Self { order: self.order.iter().rev().copied().collect() }
    }

    pub fn rotated(&self, k: usize) -> Self {
        let mut order = self.order.clone();
        if !order.is_empty() {
            let k = k % order.len();
            order.rotate_left(k);
        }
        Self { order }
    }
}

/// Customer visit order with one flag per position: `true` when the customer
/// is reached from the depot (starting a new sub-tour), `false` when reached
/// from the previous customer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CvrpSolution {
    pub order: Vec<usize>,
    pub via_depot: Vec<bool>,
}

impl CvrpSolution {
    pub fn new(order: Vec<usize>, via_depot: Vec<bool>) -> Self {
        Self { order, via_depot }
    }

    /// Builds the flat encoding from explicit routes.
    pub fn from_routes(routes: &[Vec<usize>]) -> Self {
        let mut order = Vec::new();
        let mut via_depot = Vec::new();
        for r in routes.iter().filter(|r| !r.is_empty()) {
            for (k, &c) in r.iter().enumerate() {
                order.push(c);
                via_depot.push(k == 0);
            }
        }
        Self { order, via_depot }
    }

    /// Sub-tours as customer lists.
    pub fn routes(&self) -> Vec<Vec<usize>> {
        let mut routes: Vec<Vec<usize>> = Vec::new();
        for (k, (&c, &flag)) in self.order.iter().zip(&self.via_depot).enumerate() {
            if flag || k == 0 {
                routes.push(Vec::new());
            }
            routes.last_mut().expect("route started").push(c);
        }
        routes
    }

    /// The same set of sub-tours traversed in the opposite direction and
    /// opposite order; the cost is unchanged.
    pub fn reversed(&self) -> Self {
        let mut routes = self.routes();
        routes.reverse();
        for r in &mut routes {
            r.reverse();
        }
        Self::from_routes(&routes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instance {
    Tsp(TspInstance),
    Cvrp(CvrpInstance),
}

impl Instance {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Instance::Tsp(_) => ProblemKind::Tsp,
            Instance::Cvrp(_) => ProblemKind::Cvrp,
        }
    }

    /// Number of nodes (TSP) or customers (CVRP).
    pub fn n(&self) -> usize {
        match self {
            Instance::Tsp(t) => t.n(),
            Instance::Cvrp(c) => c.n(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Solution {
    Tsp(TspTour),
    Cvrp(CvrpSolution),
}

impl Solution {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Solution::Tsp(_) => ProblemKind::Tsp,
            Solution::Cvrp(_) => ProblemKind::Cvrp,
        }
    }

    pub fn order(&self) -> &[usize] {
        match self {
            Solution::Tsp(t) => &t.order,
            Solution::Cvrp(c) => &c.order,
        }
    }

    pub fn reversed(&self) -> Self {
        match self {
            Solution::Tsp(t) => Solution::Tsp(t.reversed()),
            Solution::Cvrp(c) => Solution::Cvrp(c.reversed()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    None,
    /// TSPLIB `nint`: every edge length rounded to the nearest integer.
    NearestInteger,
}

/// Map from model coordinates in the unit square back to original units:
/// `original = scaled * scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledCoordinates {
    pub offset: Point,
    pub scale: f64,
    pub rounding: Rounding,
}

impl ScaledCoordinates {
    pub fn identity() -> Self {
        Self { offset: [0.0, 0.0], scale: 1.0, rounding: Rounding::None }
    }

    /// Uniform min-max scaling of `points` into `[0,1]^2`, preserving aspect ratio.
    pub fn fit(points: &[Point], rounding: Rounding) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let scale = if span > 0.0 && span.is_finite() { span } else { 1.0 };
        Self { offset: lo, scale, rounding }
    }

    pub fn to_unit(&self, p: Point) -> Point {
        [(p[0] - self.offset[0]) / self.scale, (p[1] - self.offset[1]) / self.scale]
    }

    pub fn to_original(&self, p: Point) -> Point {
        [p[0] * self.scale + self.offset[0], p[1] * self.scale + self.offset[1]]
    }

    /// Length of the edge between two scaled points, in original units.
    pub fn edge(&self, a: Point, b: Point) -> f64 {
        let d = dist(self.to_original(a), self.to_original(b));
        match self.rounding {
            Rounding::None => d,
            Rounding::NearestInteger => (d + 0.5).floor(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InstanceError {
    #[error("invalid size {0}: at least 3 nodes are required")]
    InvalidSize(usize),
    #[error("invalid capacity {0}: must be at least the largest possible demand")]
    InvalidCapacity(u32),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("infeasible solution: {0}")]
    Infeasible(ViolationReport),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("dataset version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: String, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_round_trip_and_reverse() {
        let sol = CvrpSolution::new(
            vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            vec![true, false, false, true, false, true, false, true, false, false],
        );
        let routes = sol.routes();
        assert_eq!(routes, vec![vec![0, 1, 2], vec![3, 4], vec![5, 6], vec![7, 8, 9]]);
        assert_eq!(CvrpSolution::from_routes(&routes), sol);
        let rev = sol.reversed();
        assert_eq!(rev.order, vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(rev.via_depot, vec![true, false, false, true, false, true, false, true, false, false]);
        assert_eq!(rev.reversed(), sol);
    }

    #[test]
    fn scaling_round_trips() {
        let pts = vec![[100.0, 50.0], [300.0, 75.0], [120.0, 250.0]];
        let s = ScaledCoordinates::fit(&pts, Rounding::None);
        assert_eq!(s.scale, 200.0);
        for p in &pts {
            let u = s.to_unit(*p);
            assert!(u[0] >= 0.0 && u[0] <= 1.0 && u[1] >= 0.0 && u[1] <= 1.0);
            let back = s.to_original(u);
            assert!((back[0] - p[0]).abs() <= 1e-6 * p[0].abs() && (back[1] - p[1]).abs() <= 1e-6 * p[1].abs());
        }
    }
}
