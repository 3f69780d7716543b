use std::fmt;

use super::{CvrpInstance, CvrpSolution, Instance, Solution, TspTour};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// `node` appears again at position `index`.
    Duplicate { index: usize, node: usize },
    OutOfRange { index: usize, node: usize },
    Missing { node: usize },
    FlagCount { expected: usize, found: usize },
    FirstFlagUnset,
    /// Sub-tour `subtour` (0-based, in visit order) carries `load` > `capacity`.
    Capacity { subtour: usize, load: u64, capacity: u32 },
    KindMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Duplicate { index, node } => write!(f, "node {node} repeated at index {index}"),
            Violation::OutOfRange { index, node } => write!(f, "node {node} at index {index} is out of range"),
            Violation::Missing { node } => write!(f, "node {node} is never visited"),
            Violation::FlagCount { expected, found } => write!(f, "expected {expected} depot flags, found {found}"),
            Violation::FirstFlagUnset => write!(f, "first customer must be reached from the depot"),
            Violation::Capacity { subtour, load, capacity } => {
                write!(f, "sub-tour {subtour} load {load} exceeds capacity {capacity}")
            }
            Violation::KindMismatch => write!(f, "solution kind does not match instance kind"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViolationReport(pub Vec<Violation>);

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ViolationReport {}

fn permutation_violations(order: &[usize], n: usize) -> Vec<Violation> {
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for (index, &node) in order.iter().enumerate() {
        if node >= n {
            out.push(Violation::OutOfRange { index, node });
        } else if seen[node] {
            out.push(Violation::Duplicate { index, node });
        } else {
            seen[node] = true;
        }
    }
    out.extend(seen.iter().enumerate().filter(|(_, s)| !**s).map(|(node, _)| Violation::Missing { node }));
    out
}

/// Ok iff `tour.order` is a permutation of `0..n`.
pub fn validate_tsp(tour: &TspTour, n: usize) -> Result<(), ViolationReport> {
    let v = permutation_violations(&tour.order, n);
    if v.is_empty() {
        Ok(())
    } else {
        Err(ViolationReport(v))
    }
}

/// Ok iff the order is a permutation of the customers, the first flag is set
/// and no sub-tour exceeds the capacity.
pub fn validate_cvrp(inst: &CvrpInstance, sol: &CvrpSolution) -> Result<(), ViolationReport> {
    let n = inst.n();
    let mut v = permutation_violations(&sol.order, n);
    if sol.via_depot.len() != sol.order.len() {
        v.push(Violation::FlagCount { expected: sol.order.len(), found: sol.via_depot.len() });
        return Err(ViolationReport(v));
    }
    if sol.via_depot.first() == Some(&false) {
        v.push(Violation::FirstFlagUnset);
    }
    let mut subtour = 0;
    let mut load: u64 = 0;
    for (k, (&c, &flag)) in sol.order.iter().zip(&sol.via_depot).enumerate() {
        if flag && k > 0 {
            if load > inst.capacity as u64 {
                v.push(Violation::Capacity { subtour, load, capacity: inst.capacity });
            }
            subtour += 1;
            load = 0;
        }
        if c < n {
            load += inst.demands[c] as u64;
        }
    }
    if load > inst.capacity as u64 {
        v.push(Violation::Capacity { subtour, load, capacity: inst.capacity });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(ViolationReport(v))
    }
}

pub fn validate(inst: &Instance, sol: &Solution) -> Result<(), ViolationReport> {
    match (inst, sol) {
        (Instance::Tsp(i), Solution::Tsp(s)) => validate_tsp(s, i.n()),
        (Instance::Cvrp(i), Solution::Cvrp(s)) => validate_cvrp(i, s),
        _ => Err(ViolationReport(vec![Violation::KindMismatch])),
    }
}
