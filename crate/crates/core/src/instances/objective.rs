use super::{
    validate_cvrp, validate_tsp, CvrpInstance, CvrpSolution, Instance, InstanceError, Point, ScaledCoordinates,
    Solution, TspInstance, TspTour,
};

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Length of the closed tour. With a scaling record the length is measured in
/// original units, applying its rounding convention edge by edge.
pub fn tour_length(inst: &TspInstance, tour: &TspTour, scaling: Option<&ScaledCoordinates>) -> Result<f64, InstanceError> {
    validate_tsp(tour, inst.n()).map_err(InstanceError::Infeasible)?;
    let c = &inst.coords;
    let n = tour.order.len();
    let edge = |a: usize, b: usize| match scaling {
        Some(s) => s.edge(c[a], c[b]),
        None => dist(c[a], c[b]),
    };
    Ok((0..n).map(|k| edge(tour.order[k], tour.order[(k + 1) % n])).sum())
}

/// Total length of all sub-tours, each starting and ending at the depot.
pub fn cvrp_cost(inst: &CvrpInstance, sol: &CvrpSolution) -> Result<f64, InstanceError> {
    cvrp_cost_scaled(inst, sol, None)
}

pub fn cvrp_cost_scaled(
    inst: &CvrpInstance,
    sol: &CvrpSolution,
    scaling: Option<&ScaledCoordinates>,
) -> Result<f64, InstanceError> {
    validate_cvrp(inst, sol).map_err(InstanceError::Infeasible)?;
    let edge = |a: Point, b: Point| match scaling {
        Some(s) => s.edge(a, b),
        None => dist(a, b),
    };
    let depot = inst.depot;
    let mut total = 0.0;
    for route in sol.routes() {
        let mut prev = depot;
        for &c in &route {
            let p = inst.customers[c];
            total += edge(prev, p);
            prev = p;
        }
        total += edge(prev, depot);
    }
    Ok(total)
}

pub fn objective(inst: &Instance, sol: &Solution) -> Result<f64, InstanceError> {
    match (inst, sol) {
        (Instance::Tsp(i), Solution::Tsp(s)) => tour_length(i, s, None),
        (Instance::Cvrp(i), Solution::Cvrp(s)) => cvrp_cost(i, s),
        _ => Err(InstanceError::Invalid("solution kind does not match instance kind".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_cvrp, generate_tsp, Rounding};
    use crate::rng::seeded;
    use rand::seq::SliceRandom;

    fn square() -> TspInstance {
        TspInstance::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).unwrap()
    }

    #[test]
    fn unit_square_perimeter() {
        assert_eq!(tour_length(&square(), &TspTour::new(vec![0, 1, 2, 3]), None).unwrap(), 4.0);
    }

    #[test]
    fn three_node_tours_are_congruent() {
        let inst = generate_tsp(3, 11).unwrap();
        let a = tour_length(&inst, &TspTour::new(vec![0, 1, 2]), None).unwrap();
        let b = tour_length(&inst, &TspTour::new(vec![0, 2, 1]), None).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn matches_independent_distance_sum() {
        let inst = generate_tsp(10, 42).unwrap();
        let mut order: Vec<usize> = (0..10).collect();
        order.shuffle(&mut seeded(5));
        // independent oracle: hypot over explicit successor pairs
        let mut oracle = 0.0f64;
        for k in 0..10 {
            let a = inst.coords[order[k]];
            let b = inst.coords[order[(k + 1) % 10]];
            oracle += (a[0] - b[0]).hypot(a[1] - b[1]);
        }
        let got = tour_length(&inst, &TspTour::new(order), None).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn invalid_tour_is_a_feasibility_error() {
        assert!(matches!(
            tour_length(&square(), &TspTour::new(vec![0, 1, 1, 3]), None),
            Err(InstanceError::Infeasible(_))
        ));
    }

    #[test]
    fn rounded_integer_square() {
        let inst = TspInstance::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).unwrap();
        let s = ScaledCoordinates { offset: [0.0, 0.0], scale: 100.0, rounding: Rounding::NearestInteger };
        assert_eq!(tour_length(&inst, &TspTour::new(vec![0, 1, 2, 3]), Some(&s)).unwrap(), 400.0);
    }

    #[test]
    fn single_customer_out_and_back() {
        let inst = CvrpInstance::new([0.0, 0.0], vec![[0.5, 0.5]], vec![3], 9).unwrap();
        let c = cvrp_cost(&inst, &CvrpSolution::new(vec![0], vec![true])).unwrap();
        assert!((c - 2.0 * 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_singleton_routes_decompose() {
        let inst = CvrpInstance::new([0.0, 0.0], vec![[0.3, 0.4], [1.0, 0.0]], vec![5, 5], 9).unwrap();
        let c = cvrp_cost(&inst, &CvrpSolution::new(vec![0, 1], vec![true, true])).unwrap();
        assert!((c - (2.0 * 0.5 + 2.0 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cvrp20_matches_route_sum_oracle() {
        let inst = generate_cvrp(20, 30, 42).unwrap();
        // hand-built feasible solution: consecutive customers, new route when the load would exceed D
        let mut routes: Vec<Vec<usize>> = vec![vec![]];
        let mut load = 0;
        for c in 0..20 {
            if load + inst.demands[c] > inst.capacity {
                routes.push(vec![]);
                load = 0;
            }
            load += inst.demands[c];
            routes.last_mut().unwrap().push(c);
        }
        let mut oracle = 0.0f64;
        for r in &routes {
            let mut pts = vec![inst.depot];
            pts.extend(r.iter().map(|&c| inst.customers[c]));
            pts.push(inst.depot);
            oracle += pts.windows(2).map(|w| (w[0][0] - w[1][0]).hypot(w[0][1] - w[1][1])).sum::<f64>();
        }
        let got = cvrp_cost(&inst, &CvrpSolution::from_routes(&routes)).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }
}
