//! Parallel local reconstruction: sample non-overlapping windows of a
//! solution, re-decode each window greedily between its fixed endpoints, keep
//! strict improvements and merge them back.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::instances::{
    dist, objective, validate_cvrp, CvrpInstance, CvrpSolution, Instance, InstanceError, Solution, TspTour,
};
use crate::model::{construct, Action, Construction, DecodeMode, Model, ModelError};
use crate::rng::{derive_seed, seeded, Rng64};
use crate::tensor::Eager;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrcConfig {
    pub l_max: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PrcConfig {
    fn default() -> Self {
        Self { l_max: 1000, iterations: 100, seed: 0 }
    }
}

impl PrcConfig {
    pub fn validate(&self) -> Result<(), PrcError> {
        if self.l_max < 4 {
            return Err(PrcError::Config(format!("l_max must be at least 4, got {}", self.l_max)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// A window of `nodes.len()` consecutive positions of an oriented solution.
/// `nodes[0]` is the fixed start and the last node the fixed destination.
/// TSP nodes are node ids; CVRP nodes are customer indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub position: usize,
    pub direction: Direction,
    pub nodes: Vec<usize>,
    /// CVRP: flag of each node (the start's flag is never changed). Empty for the TSP.
    pub via_depot: Vec<bool>,
    /// CVRP: capacity left after serving the start node.
    pub entering: u32,
    /// CVRP: load served after the destination on the destination's route.
    pub tail_load: u32,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn interior(&self) -> &[usize] {
        &self.nodes[1..self.nodes.len() - 1]
    }

    /// Length of the transitions inside the window. A via-depot arrival at
    /// `v` from `u` costs `d(u, depot) + d(depot, v)`.
    pub fn cost(&self, inst: &Instance) -> f64 {
        match inst {
            Instance::Tsp(t) => self.nodes.windows(2).map(|w| dist(t.coords[w[0]], t.coords[w[1]])).sum(),
            Instance::Cvrp(c) => (1..self.nodes.len())
                .map(|k| {
                    let u = c.customers[self.nodes[k - 1]];
                    let v = c.customers[self.nodes[k]];
                    if self.via_depot[k] {
                        dist(u, c.depot) + dist(c.depot, v)
                    } else {
                        dist(u, v)
                    }
                })
                .sum(),
        }
    }
}

/// Segments sampled from one solution, all addressing positions of `oriented`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub direction: Direction,
    pub omega: usize,
    pub oriented: Solution,
    pub segments: Vec<Segment>,
}

#[derive(Debug, thiserror::Error)]
pub enum PrcError {
    #[error("instance too small for reconstruction: n = {0} (at least 4 required)")]
    TooSmall(usize),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("invalid reconstruction config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

pub fn orient(sol: &Solution, direction: Direction) -> Solution {
    match direction {
        Direction::Forward => sol.clone(),
        Direction::Backward => sol.reversed(),
    }
}

/// `omega` uniform on `[4, min(l_max, n)]`.
pub fn sample_omega(n: usize, l_max: usize, rng: &mut Rng64) -> usize {
    rng.gen_range(4..=l_max.min(n))
}

/// Uniform composition of `total` into `parts` non-negative integers.
fn random_composition(total: usize, parts: usize, rng: &mut Rng64) -> Vec<usize> {
    if parts == 1 {
        return vec![total];
    }
    let slots = total + parts - 1;
    let bars = rand::seq::index::sample(rng, slots, parts - 1).into_vec();
    let mut bars = bars;
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev: isize = -1;
    for b in bars {
        out.push((b as isize - prev - 1) as usize);
        prev = b as isize;
    }
    out.push((slots as isize - prev - 1) as usize);
    out
}

/// The window of `omega` positions starting at `position` of an oriented
/// solution. TSP windows wrap around; CVRP windows must fit in `0..n`.
pub fn extract_segment(inst: &Instance, oriented: &Solution, position: usize, omega: usize, direction: Direction) -> Segment {
    match (inst, oriented) {
        (Instance::Tsp(_), Solution::Tsp(t)) => {
            let n = t.order.len();
            Segment {
                position,
                direction,
                nodes: (0..omega).map(|k| t.order[(position + k) % n]).collect(),
                via_depot: Vec::new(),
                entering: 0,
                tail_load: 0,
            }
        }
        (Instance::Cvrp(c), Solution::Cvrp(s)) => {
            assert!(position + omega <= s.order.len(), "CVRP windows do not wrap");
            let mut route_start = position;
            while !s.via_depot[route_start] {
                route_start -= 1;
            }
            let before: u32 = s.order[route_start..=position].iter().map(|&i| c.demands[i]).sum();
            let end = position + omega;
            let mut tail_load = 0;
            let mut k = end;
            while k < s.order.len() && !s.via_depot[k] {
                tail_load += c.demands[s.order[k]];
                k += 1;
            }
            Segment {
                position,
                direction,
                nodes: s.order[position..end].to_vec(),
                via_depot: s.via_depot[position..end].to_vec(),
                entering: c.capacity - before,
                tail_load,
            }
        }
        _ => panic!("solution kind does not match instance kind"),
    }
}

/// Samples `M = min(l_max / omega, n / omega)` non-overlapping windows with a
/// shared random direction. Window placement is uniform over all
/// non-overlapping arrangements (cyclic for the TSP, linear for the CVRP).
pub fn sample_segments(inst: &Instance, solution: &Solution, l_max: usize, rng: &mut Rng64) -> Result<SegmentBatch, PrcError> {
    let n = inst.n();
    if n < 4 {
        return Err(PrcError::TooSmall(n));
    }
    if l_max < 4 {
        return Err(PrcError::Config(format!("l_max must be at least 4, got {l_max}")));
    }
    let direction = if rng.gen::<bool>() { Direction::Forward } else { Direction::Backward };
    let oriented = orient(solution, direction);
    let omega = sample_omega(n, l_max, rng);
    let m = (l_max / omega).min(n / omega);
    let free = n - m * omega;
    let mut positions = Vec::with_capacity(m);
    match inst {
        Instance::Tsp(_) => {
            let offset = rng.gen_range(0..n);
            let gaps = random_composition(free, m, rng);
            let mut p = offset;
            for gap in gaps {
                positions.push(p % n);
                p += omega + gap;
            }
        }
        Instance::Cvrp(_) => {
            let gaps = random_composition(free, m + 1, rng);
            let mut p = 0;
            for gap in &gaps[..m] {
                p += gap;
                positions.push(p);
                p += omega;
            }
        }
    }
    let segments = positions.into_iter().map(|p| extract_segment(inst, &oriented, p, omega, direction)).collect();
    Ok(SegmentBatch { direction, omega, oriented, segments })
}

/// The greedy re-decode problem for a segment: fixed endpoints, interior
/// nodes available, CVRP capacity as left by the start node.
pub fn segment_construction(instance: usize, inst: &Instance, seg: &Segment) -> Construction {
    let shift = usize::from(matches!(inst, Instance::Cvrp(_)));
    let mut available: Vec<usize> = seg.interior().iter().map(|&x| x + shift).collect();
    available.sort_unstable();
    Construction {
        instance,
        dest: seg.nodes[seg.nodes.len() - 1] + shift,
        start: seg.nodes[0] + shift,
        available,
        remaining: seg.entering,
        forced: None,
        actions: Vec::new(),
        log_prob: 0.0,
    }
}

/// Teacher-forcing targets: the segment's interior order (and CVRP flags).
pub fn segment_targets(inst: &Instance, seg: &Segment) -> Vec<Action> {
    let cvrp = matches!(inst, Instance::Cvrp(_));
    (1..seg.nodes.len() - 1)
        .map(|k| Action { node: seg.nodes[k] + usize::from(cvrp), via_depot: cvrp && seg.via_depot[k] })
        .collect()
}

/// Builds the re-decoded segment. For the CVRP the destination keeps its
/// flag when the rest of its route still fits, otherwise it opens a new route.
pub fn segment_from_construction(inst: &Instance, old: &Segment, cons: &Construction) -> Segment {
    let mut seg = old.clone();
    let last = old.nodes.len() - 1;
    match inst {
        Instance::Tsp(_) => {
            for (k, a) in cons.actions.iter().enumerate() {
                seg.nodes[k + 1] = a.node;
            }
        }
        Instance::Cvrp(c) => {
            for (k, a) in cons.actions.iter().enumerate() {
                seg.nodes[k + 1] = a.node - 1;
                seg.via_depot[k + 1] = a.via_depot;
            }
            if !old.via_depot[last] {
                let need = c.demands[old.nodes[last]] + old.tail_load;
                seg.via_depot[last] = need > cons.remaining;
            }
        }
    }
    seg
}

/// Greedy re-decode of many segments (possibly of different instances) in
/// shared decoder passes. `jobs[i] = (index into insts, segment)`.
pub fn reconstruct(model: &Model, insts: &[&Instance], jobs: &[(usize, &Segment)]) -> Result<Vec<Segment>, PrcError> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let (features, offsets) = crate::model::stacked_features(model, insts)?;
    let mut g = Eager::new(&model.params);
    let emb = crate::model::encode_graph(&mut g, model, features);
    let mut cons: Vec<Construction> = jobs.iter().map(|&(i, s)| segment_construction(i, insts[i], s)).collect();
    construct(&mut g, model, insts, &emb, &offsets, &mut cons, &mut DecodeMode::Greedy, false)?;
    drop(emb);
    drop(g);
    Ok(jobs.iter().zip(&cons).map(|(&(i, s), c)| segment_from_construction(insts[i], s, c)).collect())
}

pub fn reconstruct_segment(model: &Model, inst: &Instance, seg: &Segment) -> Result<Segment, PrcError> {
    Ok(reconstruct(model, &[inst], &[(0, seg)])?.pop().expect("one segment"))
}

fn check_same_support(old: &Segment, new: &Segment) -> Result<(), PrcError> {
    if old.nodes.len() != new.nodes.len()
        || old.nodes.first() != new.nodes.first()
        || old.nodes.last() != new.nodes.last()
    {
        return Err(PrcError::ContractViolation("segments differ in length or endpoints".into()));
    }
    let mut a = old.nodes.clone();
    let mut b = new.nodes.clone();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(PrcError::ContractViolation("segments cover different node sets".into()));
    }
    Ok(())
}

/// The new segment if it is strictly shorter, otherwise the old one.
pub fn accept_if_better(inst: &Instance, old: &Segment, new: &Segment) -> Result<Segment, PrcError> {
    check_same_support(old, new)?;
    Ok(if new.cost(inst) < old.cost(inst) { new.clone() } else { old.clone() })
}

/// Writes accepted segments into the oriented solution. CVRP segments are
/// applied one at a time and reverted if the result is infeasible; the number
/// of reverted segments is returned alongside the merged solution.
pub fn merge_segments(inst: &Instance, oriented: &Solution, segments: &[Segment]) -> Result<(Solution, usize), PrcError> {
    let n = inst.n();
    let mut used = vec![false; n];
    for s in segments {
        for k in 0..s.len() {
            let p = match inst {
                Instance::Tsp(_) => (s.position + k) % n,
                Instance::Cvrp(_) => s.position + k,
            };
            if p >= n || used[p] {
                return Err(PrcError::ContractViolation(format!("segment at position {} overlaps another", s.position)));
            }
            used[p] = true;
        }
    }
    match (inst, oriented) {
        (Instance::Tsp(_), Solution::Tsp(t)) => {
            let mut order = t.order.clone();
            for s in segments {
                for (k, &node) in s.nodes.iter().enumerate() {
                    order[(s.position + k) % n] = node;
                }
            }
            Ok((Solution::Tsp(TspTour::new(order)), 0))
        }
        (Instance::Cvrp(c), Solution::Cvrp(sol)) => {
            let mut cur = sol.clone();
            let mut reverted = 0;
            for s in segments {
                let saved = (cur.order[s.position..s.position + s.len()].to_vec(), cur.via_depot[s.position..s.position + s.len()].to_vec());
                cur.order[s.position..s.position + s.len()].copy_from_slice(&s.nodes);
                cur.via_depot[s.position..s.position + s.len()].copy_from_slice(&s.via_depot);
                if !route_loads_ok(c, &cur, s.position) {
                    cur.order[s.position..s.position + s.len()].copy_from_slice(&saved.0);
                    cur.via_depot[s.position..s.position + s.len()].copy_from_slice(&saved.1);
                    reverted += 1;
                }
            }
            validate_cvrp(c, &cur).map_err(|r| PrcError::ContractViolation(format!("merged CVRP solution infeasible: {r}")))?;
            Ok((Solution::Cvrp(cur), reverted))
        }
        _ => Err(PrcError::ContractViolation("solution kind does not match instance kind".into())),
    }
}

/// Capacity check of the routes touching positions from the route containing
/// `from` onwards until the first route that starts past the window.
fn route_loads_ok(c: &CvrpInstance, s: &CvrpSolution, from: usize) -> bool {
    if !s.via_depot[0] {
        return false;
    }
    let mut start = from;
    while !s.via_depot[start] {
        start -= 1;
    }
    let mut load = 0u32;
    for k in start..s.order.len() {
        if s.via_depot[k] {
            load = 0;
        }
        load += c.demands[s.order[k]];
        if load > c.capacity {
            return false;
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrcOutcome {
    pub solution: Solution,
    /// Objective before the first iteration and after each iteration.
    pub trace: Vec<f64>,
    pub accepted: usize,
    pub reverted: usize,
}

/// PRC on one instance.
pub fn prc(model: &Model, inst: &Instance, solution: &Solution, config: &PrcConfig) -> Result<PrcOutcome, PrcError> {
    let mut out = prc_batch(model, &[inst], &[solution.clone()], config, 1)?;
    Ok(out.pop().expect("one outcome"))
}

/// Upper bound on decoder rows per batched reconstruction pass.
const ROW_BUDGET: usize = 1 << 14;

/// PRC on many instances. Instance `i` draws its segments from a generator
/// seeded with `derive_seed(config.seed, i)`, so results do not depend on how
/// instances are grouped into decoder passes or on `jobs`.
pub fn prc_batch(
    model: &Model,
    insts: &[&Instance],
    solutions: &[Solution],
    config: &PrcConfig,
    jobs: usize,
) -> Result<Vec<PrcOutcome>, PrcError> {
    config.validate()?;
    if insts.len() != solutions.len() {
        return Err(PrcError::ContractViolation("instance and solution counts differ".into()));
    }
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    let mut rows = 0;
    for (i, inst) in insts.iter().enumerate() {
        model.check_kind(inst.kind())?;
        let r = inst.n().min(config.l_max) * 2;
        if chunks.is_empty() || rows + r > ROW_BUDGET {
            chunks.push(Vec::new());
            rows = 0;
        }
        chunks.last_mut().expect("chunk").push(i);
        rows += r;
    }
    let run = |chunk: &Vec<usize>| -> Result<Vec<(usize, PrcOutcome)>, PrcError> {
        let sub: Vec<&Instance> = chunk.iter().map(|&i| insts[i]).collect();
        let sols: Vec<Solution> = chunk.iter().map(|&i| solutions[i].clone()).collect();
        let mut rngs: Vec<Rng64> = chunk.iter().map(|&i| seeded(derive_seed(config.seed, i as u64))).collect();
        let outs = prc_chunk(model, &sub, sols, config, &mut rngs)?;
        Ok(chunk.iter().copied().zip(outs).collect())
    };
    let results: Vec<Result<Vec<(usize, PrcOutcome)>, PrcError>> = if jobs > 1 {
        chunks.par_iter().map(run).collect()
    } else {
        chunks.iter().map(run).collect()
    };
    let mut out: Vec<Option<PrcOutcome>> = vec![None; insts.len()];
    for r in results {
        for (i, o) in r? {
            out[i] = Some(o);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every instance processed")).collect())
}

fn prc_chunk(
    model: &Model,
    insts: &[&Instance],
    mut sols: Vec<Solution>,
    config: &PrcConfig,
    rngs: &mut [Rng64],
) -> Result<Vec<PrcOutcome>, PrcError> {
    let mut traces: Vec<Vec<f64>> = Vec::with_capacity(insts.len());
    for (inst, sol) in insts.iter().zip(&sols) {
        traces.push(vec![objective(inst, sol)?]);
    }
    let mut accepted = vec![0; insts.len()];
    let mut reverted = vec![0; insts.len()];
    for _ in 0..config.iterations {
        let mut batches: Vec<Option<SegmentBatch>> = Vec::with_capacity(insts.len());
        for (i, inst) in insts.iter().enumerate() {
            batches.push(if inst.n() < 4 { None } else { Some(sample_segments(inst, &sols[i], config.l_max, &mut rngs[i])?) });
        }
        let jobs: Vec<(usize, &Segment)> = batches
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|b| (i, b)))
            .flat_map(|(i, b)| b.segments.iter().map(move |s| (i, s)))
            .collect();
        let rebuilt = reconstruct(model, insts, &jobs)?;
        let mut per_instance: Vec<Vec<Segment>> = vec![Vec::new(); insts.len()];
        for (&(i, old), new) in jobs.iter().zip(rebuilt) {
            if new.cost(insts[i]) < old.cost(insts[i]) {
                check_same_support(old, &new)?;
                per_instance[i].push(new);
            }
        }
        for (i, inst) in insts.iter().enumerate() {
            let prev = *traces[i].last().expect("trace starts with the initial objective");
            if let Some(b) = &batches[i] {
                if !per_instance[i].is_empty() {
                    accepted[i] += per_instance[i].len();
                    let (merged, rev) = merge_segments(inst, &b.oriented, &per_instance[i])?;
                    reverted[i] += rev;
                    let merged = orient(&merged, b.direction);
                    let obj = objective(inst, &merged)?;
                    if obj <= prev {
                        sols[i] = merged;
                        traces[i].push(obj);
                        continue;
                    }
                }
            }
            traces[i].push(prev);
        }
    }
    Ok(sols
        .into_iter()
        .zip(traces)
        .zip(accepted.into_iter().zip(reverted))
        .map(|((solution, trace), (accepted, reverted))| PrcOutcome { solution, trace, accepted, reverted })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heuristics::{random_insertion_cvrp, random_insertion_tsp};
    use crate::instances::{generate_cvrp, generate_tsp, validate, ProblemKind};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn small(kind: ProblemKind) -> Model {
        Model::new(ModelConfig { kind, d: 16, layers: 1, heads: 2, ff_hidden: 16 }, 5).unwrap()
    }

    fn tsp_case(n: usize, seed: u64) -> (Instance, Solution) {
        let t = generate_tsp(n, seed).unwrap();
        let s = Solution::Tsp(random_insertion_tsp(&t, seed));
        (Instance::Tsp(t), s)
    }

    fn cvrp_case(n: usize, cap: u32, seed: u64) -> (Instance, Solution) {
        let c = generate_cvrp(n, cap, seed).unwrap();
        let s = Solution::Cvrp(random_insertion_cvrp(&c, seed));
        (Instance::Cvrp(c), s)
    }

    #[test]
    fn composition_sums() {
        let mut rng = seeded(1);
        for _ in 0..100 {
            let c = random_composition(7, 3, &mut rng);
            assert_eq!(c.len(), 3);
            assert_eq!(c.iter().sum::<usize>(), 7);
        }
        assert_eq!(random_composition(0, 4, &mut rng), vec![0; 4]);
    }

    #[test]
    fn segment_count_follows_l_max_over_omega() {
        let (inst, sol) = tsp_case(2000, 1);
        let mut rng = seeded(2);
        for _ in 0..50 {
            let b = sample_segments(&inst, &sol, 1000, &mut rng).unwrap();
            assert_eq!(b.segments.len(), (1000 / b.omega).min(2000 / b.omega));
            assert!(b.segments.iter().all(|s| s.len() == b.omega));
        }
    }

    #[test]
    fn small_instances_cap_the_segments() {
        let (inst, sol) = tsp_case(16, 3);
        let mut rng = seeded(4);
        for _ in 0..200 {
            let b = sample_segments(&inst, &sol, 1000, &mut rng).unwrap();
            assert!(b.omega <= 16);
            assert!(b.segments.len() <= 16 / b.omega);
            let mut used = [false; 16];
            for s in &b.segments {
                for k in 0..s.len() {
                    let p = (s.position + k) % 16;
                    assert!(!used[p]);
                    used[p] = true;
                }
            }
        }
        let (tiny, ts) = tsp_case(3, 0);
        assert!(matches!(sample_segments(&tiny, &ts, 10, &mut rng), Err(PrcError::TooSmall(3))));
    }

    #[test]
    fn backward_direction_reverses_the_window() {
        let inst = Instance::Tsp(generate_tsp(5, 0).unwrap());
        let tour = Solution::Tsp(TspTour::new(vec![0, 1, 2, 3, 4]));
        let fwd = extract_segment(&inst, &orient(&tour, Direction::Forward), 1, 3, Direction::Forward);
        assert_eq!(fwd.nodes, vec![1, 2, 3]);
        let back = orient(&tour, Direction::Backward);
        let bwd = extract_segment(&inst, &back, 1, 3, Direction::Backward);
        assert_eq!(bwd.nodes, vec![3, 2, 1]);
    }

    #[test]
    fn acceptance_rule() {
        let inst = Instance::Tsp(TspInstance::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).unwrap());
        let good = Segment { position: 0, direction: Direction::Forward, nodes: vec![0, 1, 2, 3], via_depot: vec![], entering: 0, tail_load: 0 };
        let bad = Segment { nodes: vec![0, 2, 1, 3], ..good.clone() };
        assert_eq!(accept_if_better(&inst, &bad, &good).unwrap(), good);
        assert_eq!(accept_if_better(&inst, &good, &bad).unwrap(), good);
        assert_eq!(accept_if_better(&inst, &good, &good.clone()).unwrap(), good);
        let other = Segment { nodes: vec![0, 1, 1, 3], ..good.clone() };
        assert!(matches!(accept_if_better(&inst, &good, &other), Err(PrcError::ContractViolation(_))));
    }
    use crate::instances::TspInstance;

    #[test]
    fn two_interior_nodes_are_bracketed_by_both_orders() {
        let m = small(ProblemKind::Tsp);
        let (inst, sol) = tsp_case(30, 6);
        let b = sample_segments(&inst, &sol, 4, &mut seeded(1)).unwrap();
        assert_eq!(b.omega, 4);
        let s = &b.segments[0];
        let new = reconstruct_segment(&m, &inst, s).unwrap();
        let [a, x, y, z] = s.nodes[..] else { unreachable!() };
        let c1 = Segment { nodes: vec![a, x, y, z], ..s.clone() }.cost(&inst);
        let c2 = Segment { nodes: vec![a, y, x, z], ..s.clone() }.cost(&inst);
        let c = new.cost(&inst);
        assert!(c >= c1.min(c2) - 1e-15 && c <= c1.max(c2) + 1e-15);
    }

    #[test]
    fn merge_delta_is_local() {
        let (inst, sol) = tsp_case(40, 2);
        let seg = extract_segment(&inst, &sol, 5, 6, Direction::Forward);
        let mut better = seg.clone();
        better.nodes[1..5].reverse();
        let (merged, _) = merge_segments(&inst, &sol, &[better.clone()]).unwrap();
        let delta = better.cost(&inst) - seg.cost(&inst);
        let before = objective(&inst, &sol).unwrap();
        let after = objective(&inst, &merged).unwrap();
        assert!((after - (before + delta)).abs() < 1e-9);
        assert_eq!(merge_segments(&inst, &sol, &[]).unwrap().0, sol);
        let overlapping = extract_segment(&inst, &sol, 8, 6, Direction::Forward);
        assert!(merge_segments(&inst, &sol, &[seg, overlapping]).is_err());
    }

    #[test]
    fn zero_iterations_return_input() {
        let m = small(ProblemKind::Tsp);
        let (inst, sol) = tsp_case(20, 1);
        let out = prc(&m, &inst, &sol, &PrcConfig { l_max: 10, iterations: 0, seed: 0 }).unwrap();
        assert_eq!(out.solution, sol);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn grouping_does_not_change_results() {
        let m = small(ProblemKind::Tsp);
        let cases: Vec<(Instance, Solution)> = (0..3).map(|s| tsp_case(25, s)).collect();
        let insts: Vec<&Instance> = cases.iter().map(|c| &c.0).collect();
        let sols: Vec<Solution> = cases.iter().map(|c| c.1.clone()).collect();
        let cfg = PrcConfig { l_max: 12, iterations: 5, seed: 9 };
        let all = prc_batch(&m, &insts, &sols, &cfg, 1).unwrap();
        let first = prc_batch(&m, &insts[..1], &sols[..1], &cfg, 1).unwrap();
        assert_eq!(all[0], first[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tsp_prc_is_monotone_and_feasible(n in 4usize..60, seed in any::<u64>(), l_max in 4usize..40) {
            let m = small(ProblemKind::Tsp);
            let (inst, sol) = tsp_case(n, seed);
            let out = prc(&m, &inst, &sol, &PrcConfig { l_max, iterations: 6, seed }).unwrap();
            prop_assert_eq!(out.trace.len(), 7);
            prop_assert!(out.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
            prop_assert!(validate(&inst, &out.solution).is_ok());
        }

        #[test]
        fn cvrp_prc_is_monotone_and_feasible(n in 4usize..60, cap in 9u32..40, seed in any::<u64>(), l_max in 4usize..40) {
            let m = small(ProblemKind::Cvrp);
            let (inst, sol) = cvrp_case(n, cap, seed);
            let out = prc(&m, &inst, &sol, &PrcConfig { l_max, iterations: 6, seed }).unwrap();
            prop_assert!(out.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
            prop_assert!(validate(&inst, &out.solution).is_ok());
            prop_assert_eq!(out.reverted, 0);
        }

        #[test]
        fn cvrp_segments_conserve_nodes(n in 4usize..50, cap in 9u32..30, seed in any::<u64>()) {
            let m = small(ProblemKind::Cvrp);
            let (inst, sol) = cvrp_case(n, cap, seed);
            let b = sample_segments(&inst, &sol, 20, &mut seeded(seed)).unwrap();
            let jobs: Vec<(usize, &Segment)> = b.segments.iter().map(|s| (0, s)).collect();
            let rebuilt = reconstruct(&m, &[&inst], &jobs).unwrap();
            for (old, new) in b.segments.iter().zip(&rebuilt) {
                prop_assert!(check_same_support(old, new).is_ok());
            }
            let (merged, reverted) = merge_segments(&inst, &b.oriented, &rebuilt).unwrap();
            prop_assert_eq!(reverted, 0);
            prop_assert!(validate(&inst, &merged).is_ok());
        }
    }
}
