//! Construction heuristics and small reference solvers.

use rand::seq::SliceRandom;

use crate::instances::{dist, tour_length, CvrpInstance, CvrpSolution, Solution, TspInstance, TspTour};
use crate::rng::seeded;

/// Largest instance accepted by [`brute_force_tsp`].
pub const BRUTE_FORCE_MAX_N: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMethod {
    BruteForce,
    TwoOpt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub solution: Solution,
    pub objective: f64,
    pub method: OracleMethod,
}

impl OracleResult {
    pub fn tour(&self) -> &TspTour {
        match &self.solution {
            Solution::Tsp(t) => t,
            Solution::Cvrp(_) => unreachable!("oracles only produce TSP tours"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HeuristicError {
    #[error("brute force is limited to n <= {max}, got {n}")]
    SizeLimit { n: usize, max: usize },
    #[error(transparent)]
    Instance(#[from] crate::instances::InstanceError),
}

/// Random insertion: a random 3-node cycle, then the remaining nodes in random
/// order, each placed where `d(j,i) + d(i,k) - d(j,k)` is smallest.
pub fn random_insertion_tsp(inst: &TspInstance, seed: u64) -> TspTour {
    let c = &inst.coords;
    let n = c.len();
    let mut rng = seeded(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut tour: Vec<usize> = Vec::with_capacity(n);
    tour.extend_from_slice(&perm[..3.min(n)]);
    for &i in &perm[3.min(n)..] {
        let p = c[i];
        let m = tour.len();
        let mut best = f64::INFINITY;
        let mut best_pos = 0;
        for k in 0..m {
            let a = c[tour[k]];
            let b = c[tour[(k + 1) % m]];
            let cost = dist(a, p) + dist(p, b) - dist(a, b);
            if cost < best {
                best = cost;
                best_pos = k + 1;
            }
        }
        tour.insert(best_pos, i);
    }
    TspTour::new(tour)
}

/// Random insertion for the CVRP. Each customer (in random order) goes to the
/// cheapest capacity-feasible slot of an existing route; opening a new route at
/// `2 d(depot, i)` is considered last and must be strictly cheaper. Ties fall to
/// the lowest (route, position).
pub fn random_insertion_cvrp(inst: &CvrpInstance, seed: u64) -> CvrpSolution {
    let n = inst.n();
    let mut rng = seeded(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let pos = |i: usize| inst.customers[i];
    let depot = inst.depot;
    let mut routes: Vec<Vec<usize>> = Vec::new();
    let mut loads: Vec<u32> = Vec::new();
    for &i in &perm {
        let p = pos(i);
        let dem = inst.demands[i];
        let mut best = f64::INFINITY;
        let mut slot: Option<(usize, usize)> = None;
        for (r, route) in routes.iter().enumerate() {
            if loads[r] + dem > inst.capacity {
                continue;
            }
            for k in 0..=route.len() {
                let a = if k == 0 { depot } else { pos(route[k - 1]) };
                let b = if k == route.len() { depot } else { pos(route[k]) };
                let cost = dist(a, p) + dist(p, b) - dist(a, b);
                if cost < best {
                    best = cost;
                    slot = Some((r, k));
                }
            }
        }
        let fresh = 2.0 * dist(depot, p);
        match slot {
            Some((r, k)) if best <= fresh => {
                routes[r].insert(k, i);
                loads[r] += dem;
            }
            _ => {
                routes.push(vec![i]);
                loads.push(dem);
            }
        }
    }
    CvrpSolution::from_routes(&routes)
}

/// Exact optimum by enumerating every tour that starts at node 0, keeping one
/// of each mirror pair.
pub fn brute_force_tsp(inst: &TspInstance) -> Result<OracleResult, HeuristicError> {
    let n = inst.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(HeuristicError::SizeLimit { n, max: BRUTE_FORCE_MAX_N });
    }
    let c = &inst.coords;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = dist(c[i], c[j]);
        }
    }
    let mut rest: Vec<usize> = (1..n).collect();
    let mut best = f64::INFINITY;
    let mut best_tour = Vec::new();
    loop {
        if rest[0] < rest[rest.len() - 1] {
            let mut len = d[rest[0]] + d[rest[rest.len() - 1] * n];
            for w in rest.windows(2) {
                len += d[w[0] * n + w[1]];
            }
            if len < best {
                best = len;
                best_tour = rest.clone();
            }
        }
        if !next_permutation(&mut rest) {
            break;
        }
    }
    let mut order = vec![0];
    order.extend(best_tour);
    let tour = TspTour::new(order);
    let objective = tour_length(inst, &tour, None)?;
    Ok(OracleResult { solution: Solution::Tsp(tour), objective, method: OracleMethod::BruteForce })
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// First-improvement 2-opt. Pairs are scanned in a fixed order and the scan
/// restarts after every accepted move; a move is accepted when it shortens the
/// tour by more than 1e-12.
pub fn two_opt_oracle(inst: &TspInstance, start: &TspTour) -> Result<OracleResult, HeuristicError> {
    tour_length(inst, start, None)?;
    let c = &inst.coords;
    let mut t = start.order.clone();
    let n = t.len();
    'scan: loop {
        for i in 0..n.saturating_sub(1) {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (c[t[i]], c[t[i + 1]]);
                let (x, y) = (c[t[j]], c[t[(j + 1) % n]]);
                let delta = dist(a, x) + dist(b, y) - dist(a, b) - dist(x, y);
                if delta < -1e-12 {
                    t[i + 1..=j].reverse();
                    continue 'scan;
                }
            }
        }
        break;
    }
    let tour = TspTour::new(t);
    let objective = tour_length(inst, &tour, None)?;
    Ok(OracleResult { solution: Solution::Tsp(tour), objective, method: OracleMethod::TwoOpt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{cvrp_cost, generate_cvrp, generate_tsp, validate_cvrp, validate_tsp};
    use proptest::prelude::*;

    fn square() -> TspInstance {
        TspInstance::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).unwrap()
    }

    /// Heap's algorithm over all permutations of all nodes, with no symmetry pruning.
    fn heap_optimum(inst: &TspInstance) -> f64 {
        let n = inst.n();
        let mut a: Vec<usize> = (0..n).collect();
        let mut c = vec![0usize; n];
        let len = |a: &[usize]| -> f64 {
            (0..n).map(|k| {
                let p = inst.coords[a[k]];
                let q = inst.coords[a[(k + 1) % n]];
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
            }).sum()
        };
        let mut best = len(&a);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 { a.swap(0, i) } else { a.swap(c[i], i) }
                best = best.min(len(&a));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn three_nodes_give_the_unique_cycle() {
        let inst = generate_tsp(3, 0).unwrap();
        for s in 0..5 {
            let t = random_insertion_tsp(&inst, s);
            assert!(validate_tsp(&t, 3).is_ok());
        }
    }

    #[test]
    fn insertion_within_25_percent_of_optimum_n8() {
        let inst = generate_tsp(8, 42).unwrap();
        let opt = brute_force_tsp(&inst).unwrap().objective;
        let ri = tour_length(&inst, &random_insertion_tsp(&inst, 42), None).unwrap();
        assert!(ri >= opt - 1e-12);
        assert!(ri <= 1.25 * opt, "ri {ri} opt {opt}");
    }

    #[test]
    fn brute_force_small_cases() {
        assert!((brute_force_tsp(&square()).unwrap().objective - 4.0).abs() < 1e-12);
        let line = TspInstance::new(vec![[0.0, 0.0], [0.25, 0.0], [0.5, 0.0], [1.0, 0.0]]).unwrap();
        assert!((brute_force_tsp(&line).unwrap().objective - 2.0).abs() < 1e-12);
        assert!(matches!(brute_force_tsp(&generate_tsp(13, 0).unwrap()), Err(HeuristicError::SizeLimit { .. })));
    }

    #[test]
    fn brute_force_agrees_with_heap_enumeration_n9() {
        let inst = generate_tsp(9, 7).unwrap();
        let a = brute_force_tsp(&inst).unwrap().objective;
        let b = heap_optimum(&inst);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn two_opt_fixed_point_and_uncrossing() {
        let sq = square();
        let r = two_opt_oracle(&sq, &TspTour::new(vec![0, 1, 2, 3])).unwrap();
        assert_eq!(r.tour().order, vec![0, 1, 2, 3]);
        let r = two_opt_oracle(&sq, &TspTour::new(vec![0, 2, 1, 3])).unwrap();
        assert!((r.objective - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_opt_improves_random_insertion_tsp100() {
        let inst = generate_tsp(100, 42).unwrap();
        let start = random_insertion_tsp(&inst, 42);
        let before = tour_length(&inst, &start, None).unwrap();
        let r = two_opt_oracle(&inst, &start).unwrap();
        assert!(r.objective < before);
        assert!((r.objective - tour_length(&inst, r.tour(), None).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn cvrp_insertion_edge_cases() {
        let one = CvrpInstance::new([0.0, 0.0], vec![[0.5, 0.5]], vec![3], 9).unwrap();
        let s = random_insertion_cvrp(&one, 0);
        assert_eq!(s.via_depot, vec![true]);
        let full = generate_cvrp(12, 9, 1).unwrap();
        let full = CvrpInstance::new(full.depot, full.customers, vec![9; 12], 9).unwrap();
        let s = random_insertion_cvrp(&full, 3);
        assert!(s.via_depot.iter().all(|&f| f));
    }

    #[test]
    fn cvrp20_within_60_percent_of_two_opt_reference() {
        let inst = generate_cvrp(20, 30, 42).unwrap();
        let sol = random_insertion_cvrp(&inst, 42);
        let cost = cvrp_cost(&inst, &sol).unwrap();
        // Reference: each insertion route improved by 2-opt through the depot.
        let mut reference = 0.0;
        for route in sol.routes() {
            let mut coords = vec![inst.depot];
            coords.extend(route.iter().map(|&c| inst.customers[c]));
            if coords.len() < 3 {
                reference += 2.0 * dist(inst.depot, coords[coords.len() - 1]);
                continue;
            }
            let t = TspInstance::new(coords).unwrap();
            let start = TspTour::new((0..t.n()).collect());
            reference += two_opt_oracle(&t, &start).unwrap().objective;
        }
        assert!(reference <= cost + 1e-9);
        assert!(cost <= 1.6 * reference, "cost {cost} reference {reference}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn insertion_is_always_feasible(n in 3usize..60, seed in any::<u64>()) {
            let inst = generate_tsp(n, seed).unwrap();
            prop_assert!(validate_tsp(&random_insertion_tsp(&inst, seed ^ 1), n).is_ok());
        }

        #[test]
        fn cvrp_insertion_is_always_feasible(n in 1usize..60, cap in 9u32..40, seed in any::<u64>()) {
            let inst = generate_cvrp(n, cap, seed).unwrap();
            prop_assert!(validate_cvrp(&inst, &random_insertion_cvrp(&inst, seed)).is_ok());
        }

        #[test]
        fn two_opt_never_beats_brute_force(n in 4usize..=8, seed in any::<u64>()) {
            let inst = generate_tsp(n, seed).unwrap();
            let opt = brute_force_tsp(&inst).unwrap().objective;
            let r = two_opt_oracle(&inst, &random_insertion_tsp(&inst, seed)).unwrap();
            prop_assert!(r.objective >= opt - 1e-12);
        }

        #[test]
        fn brute_force_bounds_random_tours(n in 4usize..=7, seed in any::<u64>()) {
            let inst = generate_tsp(n, seed).unwrap();
            let opt = brute_force_tsp(&inst).unwrap().objective;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeded(seed));
            prop_assert!(opt <= tour_length(&inst, &TspTour::new(order), None).unwrap() + 1e-12);
        }
    }
}
