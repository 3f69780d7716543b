use rand::Rng;

use super::{CvrpInstance, InstanceError, Point, TspInstance};
use crate::rng::seeded;

/// Demands are drawn uniformly from `1..=MAX_DEMAND`.
pub const MAX_DEMAND: u32 = 9;

fn unit_point<R: Rng>(rng: &mut R) -> Point {
    let x = rng.gen::<f64>();
    let y = rng.gen::<f64>();
    [x, y]
}

/// `n` i.i.d. uniform points in the unit square.
pub fn generate_tsp(n: usize, seed: u64) -> Result<TspInstance, InstanceError> {
    if n < 3 {
        return Err(InstanceError::InvalidSize(n));
    }
    let mut rng = seeded(seed);
    Ok(TspInstance { coords: (0..n).map(|_| unit_point(&mut rng)).collect() })
}

/// Uniform depot and customers with demands uniform in `1..=9`.
pub fn generate_cvrp(n: usize, capacity: u32, seed: u64) -> Result<CvrpInstance, InstanceError> {
    if n == 0 {
        return Err(InstanceError::InvalidSize(n));
    }
    if capacity < MAX_DEMAND {
        return Err(InstanceError::InvalidCapacity(capacity));
    }
    let mut rng = seeded(seed);
    let depot = unit_point(&mut rng);
    let customers = (0..n).map(|_| unit_point(&mut rng)).collect();
    let demands = (0..n).map(|_| rng.gen_range(1..=MAX_DEMAND)).collect();
    Ok(CvrpInstance { depot, customers, demands, capacity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsp_points_in_unit_square() {
        let inst = generate_tsp(1000, 1).unwrap();
        assert_eq!(inst.n(), 1000);
        assert!(inst.coords.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tsp_is_deterministic() {
        let a = generate_tsp(5, 7).unwrap();
        let b = generate_tsp(5, 7).unwrap();
        assert_eq!(a.coords.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.coords.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, generate_tsp(5, 8).unwrap());
    }

    #[test]
    fn tsp_too_small() {
        assert!(matches!(generate_tsp(2, 0), Err(InstanceError::InvalidSize(2))));
    }

    #[test]
    fn mean_nearest_neighbour_distance_matches_poisson_estimate() {
        // For uniform points the expected nearest-neighbour distance is about 0.5/sqrt(n)
        // (boundary effects push it slightly up).
        let n = 1000;
        let mut total = 0.0;
        let seeds = 128;
        for seed in 0..seeds {
            let inst = generate_tsp(n, seed).unwrap();
            let c = &inst.coords;
            let mut acc = 0.0;
            for i in 0..n {
                let mut best = f64::INFINITY;
                for j in 0..n {
                    if i != j {
                        best = best.min(super::super::dist(c[i], c[j]));
                    }
                }
                acc += best;
            }
            total += acc / n as f64;
        }
        let mean = total / seeds as f64;
        let expected = 0.5 / (n as f64).sqrt();
        assert!((mean - expected).abs() / expected < 0.10, "mean nn distance {mean} vs {expected}");
    }

    #[test]
    fn cvrp_demands_in_range() {
        let inst = generate_cvrp(1000, 250, 3).unwrap();
        assert_eq!(inst.n(), 1000);
        assert!(inst.demands.iter().all(|d| (1..=9).contains(d)));
        assert!(generate_cvrp(10, 9, 0).is_ok());
        assert!(matches!(generate_cvrp(10, 8, 0), Err(InstanceError::InvalidCapacity(8))));
    }

    #[test]
    fn cvrp_demand_mean_is_five() {
        let inst = generate_cvrp(5000, 500, 2).unwrap();
        let mean = inst.demands.iter().map(|&d| d as f64).sum::<f64>() / 5000.0;
        assert!((mean - 5.0).abs() <= 0.2, "mean demand {mean}");
    }
}
