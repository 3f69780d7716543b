use std::rc::Rc;

use rand::Rng;

use super::decoder::{decoder_logits, stacked_features, encode_graph, StepGroup};
use super::{Model, ModelError};
use crate::instances::{CvrpSolution, Instance, Solution, TspTour};
use crate::rng::{seeded, Rng64};
use crate::tensor::kernels::group_softmax;
use crate::tensor::{Eager, Graph, PickGroup, PickLayout, Real};

/// A decoding decision. `node` is instance-local (CVRP customers are `1..=n`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action {
    pub node: usize,
    pub via_depot: bool,
}

/// One autoregressive construction: a full rollout or a segment re-decode.
/// The destination is never selectable; the construction ends when
/// `available` is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Construction {
    /// Index into the instance batch.
    pub instance: usize,
    pub dest: usize,
    pub start: usize,
    pub available: Vec<usize>,
    /// CVRP remaining capacity in demand units.
    pub remaining: u32,
    /// Teacher-forcing targets aligned with `actions`.
    pub forced: Option<Vec<Action>>,
    pub actions: Vec<Action>,
    /// Sum of the log-probabilities of the decoded actions.
    pub log_prob: f64,
}

impl Construction {
    /// Same instance-local ids as [`Solution::Tsp`]: the tour is `dest` followed by the actions.
    pub fn tsp_tour(&self) -> TspTour {
        let mut order = vec![self.dest];
        order.extend(self.actions.iter().map(|a| a.node));
        TspTour::new(order)
    }

    pub fn cvrp_solution(&self) -> CvrpSolution {
        CvrpSolution::new(
            self.actions.iter().map(|a| a.node - 1).collect(),
            self.actions.iter().map(|a| a.via_depot).collect(),
        )
    }

    pub fn solution(&self, inst: &Instance) -> Solution {
        match inst {
            Instance::Tsp(_) => Solution::Tsp(self.tsp_tour()),
            Instance::Cvrp(_) => Solution::Cvrp(self.cvrp_solution()),
        }
    }
}

/// Full TSP rollout starting (and ending) at `first`.
pub fn full_tsp(instance: usize, n: usize, first: usize) -> Construction {
    Construction {
        instance,
        dest: first,
        start: first,
        available: (0..n).filter(|&i| i != first).collect(),
        remaining: 0,
        forced: None,
        actions: Vec::new(),
        log_prob: 0.0,
    }
}

/// Full CVRP rollout from the depot. With `first` (a customer index) the
/// first sub-tour is opened at that customer without a model decision.
pub fn full_cvrp(instance: usize, inst: &crate::instances::CvrpInstance, first: Option<usize>) -> Construction {
    let mut c = Construction {
        instance,
        dest: 0,
        start: 0,
        available: (1..=inst.n()).collect(),
        remaining: inst.capacity,
        forced: None,
        actions: Vec::new(),
        log_prob: 0.0,
    };
    if let Some(f) = first {
        apply(&mut c, Action { node: f + 1, via_depot: true }, Some(inst));
    }
    c
}

pub enum DecodeMode<'r> {
    /// Arg-max; ties go to the lowest node id, then via-depot before direct.
    Greedy,
    Sample(&'r mut Rng64),
    /// Follow each construction's `forced` actions.
    Forced,
}

/// Per-group negative log-probabilities of one batched decoding step.
pub struct StepNll<T> {
    pub nll: T,
    /// Construction index of each row of `nll`.
    pub members: Vec<usize>,
}

fn apply(c: &mut Construction, a: Action, cvrp: Option<&crate::instances::CvrpInstance>) {
    let pos = c.available.iter().position(|&x| x == a.node).expect("action node is available");
    c.available.remove(pos);
    if let Some(inst) = cvrp {
        let dem = inst.demands[a.node - 1];
        c.remaining = if a.via_depot { inst.capacity - dem } else { c.remaining - dem };
    }
    c.start = a.node;
    c.actions.push(a);
}

fn direct_allowed(c: &Construction, inst: &crate::instances::CvrpInstance, node: usize) -> bool {
    c.start != 0 && inst.demands[node - 1] <= c.remaining
}

fn allowed_actions(c: &Construction, inst: &Instance) -> Vec<Action> {
    match inst {
        Instance::Tsp(_) => c.available.iter().map(|&node| Action { node, via_depot: false }).collect(),
        Instance::Cvrp(v) => {
            let mut out = Vec::with_capacity(2 * c.available.len());
            for &node in &c.available {
                out.push(Action { node, via_depot: true });
                if direct_allowed(c, v, node) {
                    out.push(Action { node, via_depot: false });
                }
            }
            out
        }
    }
}

/// Runs every construction to completion with batched decoder passes.
/// Steps with a single legal action are taken without a forward pass. With
/// `record`, the per-step negative log-likelihood nodes are returned so a
/// caller can build a loss on a [`crate::tensor::Tape`].
#[allow(clippy::too_many_arguments)]
pub fn construct<'p, G: Graph<'p>>(
    g: &mut G,
    model: &Model,
    insts: &[&Instance],
    emb: &G::T,
    offsets: &[usize],
    cons: &mut [Construction],
    mode: &mut DecodeMode<'_>,
    record: bool,
) -> Result<Vec<StepNll<G::T>>, ModelError> {
    let cols = model.config.actions_per_node();
    let mut steps = Vec::new();
    loop {
        let mut groups = Vec::new();
        let mut members = Vec::new();
        let mut any_left = false;
        for (ci, c) in cons.iter_mut().enumerate() {
            if c.available.is_empty() {
                continue;
            }
            let inst = insts[c.instance];
            let cvrp = match inst {
                Instance::Cvrp(v) => Some(v),
                Instance::Tsp(_) => None,
            };
            let legal = allowed_actions(c, inst);
            let target = match (&*mode, &c.forced) {
                (DecodeMode::Forced, Some(f)) => {
                    let a = *f.get(c.actions.len()).ok_or_else(|| ModelError::InvalidAction("forced sequence too short".into()))?;
                    if !legal.contains(&a) {
                        return Err(ModelError::InvalidAction(format!("{a:?}")));
                    }
                    Some(a)
                }
                (DecodeMode::Forced, None) => return Err(ModelError::InvalidAction("no forced sequence".into())),
                _ => None,
            };
            if legal.len() == 1 {
                apply(c, legal[0], cvrp);
                any_left |= !c.available.is_empty();
                continue;
            }
            any_left = true;
            let off = offsets[c.instance];
            let remaining = cvrp.map_or(0.0, |v| c.remaining as f64 / v.capacity as f64) as Real;
            groups.push(StepGroup {
                dest: off + c.dest,
                start: off + c.start,
                available: c.available.iter().map(|&x| off + x).collect(),
                remaining,
            });
            members.push((ci, target));
        }
        if groups.is_empty() {
            if any_left {
                continue;
            }
            break;
        }
        let (logits, spans) = decoder_logits(g, model, emb, &groups)?;
        let total = g.value(&logits).len();
        let mut mask = vec![false; total];
        for (&(ci, _), &(row0, _)) in members.iter().zip(&spans) {
            let c = &cons[ci];
            let base = row0 * cols;
            mask[base..base + 2 * cols].fill(true);
            if let Instance::Cvrp(v) = insts[c.instance] {
                for (k, &node) in c.available.iter().enumerate() {
                    if !direct_allowed(c, v, node) {
                        mask[base + (k + 2) * 2 + 1] = true;
                    }
                }
            }
        }
        let probs = group_softmax(g.value(&logits), &spans, &mask);
        let mut picks = Vec::with_capacity(members.len());
        for (&(ci, target), &(row0, rows)) in members.iter().zip(&spans) {
            let c = &cons[ci];
            let base = row0 * cols;
            let flat_of = |a: &Action| {
                let k = c.available.iter().position(|&x| x == a.node).expect("available");
                (k + 2) * cols + usize::from(cols == 2 && !a.via_depot)
            };
            let action_of = |flat: usize| {
                let k = flat / cols - 2;
                Action { node: c.available[k], via_depot: cols == 2 && flat % cols == 0 }
            };
            let flat = match (&mut *mode, target) {
                (_, Some(a)) => flat_of(&a),
                (DecodeMode::Greedy, None) => {
                    let mut best: Option<(Real, usize, usize)> = None;
                    for flat in 2 * cols..rows * cols {
                        if mask[base + flat] {
                            continue;
                        }
                        let p = probs[base + flat];
                        let node = c.available[flat / cols - 2];
                        let better = match best {
                            None => true,
                            Some((bp, bnode, bflat)) => p > bp || (p == bp && (node < bnode || (node == bnode && flat < bflat))),
                        };
                        if better {
                            best = Some((p, node, flat));
                        }
                    }
                    best.expect("at least one legal action").2
                }
                (DecodeMode::Sample(rng), None) => {
                    let u: Real = rng.gen::<f64>() as Real;
                    let mut acc = 0.0;
                    let mut chosen = None;
                    for flat in 2 * cols..rows * cols {
                        if mask[base + flat] {
                            continue;
                        }
                        acc += probs[base + flat];
                        chosen = Some(flat);
                        if u < acc {
                            break;
                        }
                    }
                    chosen.expect("at least one legal action")
                }
                (DecodeMode::Forced, None) => unreachable!("forced mode always has a target"),
            };
            picks.push((ci, flat, action_of(flat), probs[base + flat]));
        }
        if record {
            let layout = PickLayout {
                groups: picks
                    .iter()
                    .zip(&spans)
                    .map(|(&(_, flat, _, _), &(row_start, rows))| PickGroup { row_start, rows, target: flat })
                    .collect(),
                mask,
            };
            let nll = g.pick_nll(&logits, Rc::new(layout));
            steps.push(StepNll { nll, members: picks.iter().map(|p| p.0).collect() });
        }
        drop(logits);
        for (ci, _, action, p) in picks {
            let c = &mut cons[ci];
            c.log_prob += (p as f64).ln();
            let cvrp = match insts[c.instance] {
                Instance::Cvrp(v) => Some(v),
                Instance::Tsp(_) => None,
            };
            apply(c, action, cvrp);
        }
    }
    Ok(steps)
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub solutions: Vec<Solution>,
    pub log_probs: Vec<f64>,
}

/// Full rollouts without gradients. `specs[i] = (instance index, first node)`;
/// for the TSP `first` is the start node (default 0), for the CVRP it is an
/// optional forced first customer.
pub fn rollout_batch(
    model: &Model,
    insts: &[&Instance],
    specs: &[(usize, Option<usize>)],
    mode: &mut DecodeMode<'_>,
) -> Result<RolloutOutput, ModelError> {
    let (features, offsets) = stacked_features(model, insts)?;
    let mut g = Eager::new(&model.params);
    let emb = encode_graph(&mut g, model, features);
    let mut cons: Vec<Construction> = specs
        .iter()
        .map(|&(i, first)| match insts[i] {
            Instance::Tsp(t) => full_tsp(i, t.n(), first.unwrap_or(0)),
            Instance::Cvrp(v) => full_cvrp(i, v, first),
        })
        .collect();
    construct(&mut g, model, insts, &emb, &offsets, &mut cons, mode, false)?;
    Ok(RolloutOutput {
        solutions: cons.iter().map(|c| c.solution(insts[c.instance])).collect(),
        log_probs: cons.iter().map(|c| c.log_prob).collect(),
    })
}

/// A single full rollout. The TSP start node is drawn uniformly from `seed`;
/// sampling uses the same generator afterwards.
pub fn rollout(model: &Model, inst: &Instance, greedy: bool, seed: u64) -> Result<(Solution, f64), ModelError> {
    let mut rng = seeded(seed);
    let first = match inst {
        Instance::Tsp(t) => Some(rng.gen_range(0..t.n())),
        Instance::Cvrp(_) => None,
    };
    let mut mode = if greedy { DecodeMode::Greedy } else { DecodeMode::Sample(&mut rng) };
    let out = rollout_batch(model, &[inst], &[(0, first)], &mut mode)?;
    Ok((out.solutions.into_iter().next().expect("one rollout"), out.log_probs[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_cvrp, generate_tsp, validate};
    use crate::model::{decode_step_cvrp, decode_step_tsp, encode, DecoderState, ModelConfig};
    use crate::instances::ProblemKind;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn small(kind: ProblemKind) -> Model {
        Model::new(ModelConfig { kind, d: 16, layers: 2, heads: 4, ff_hidden: 24 }, 11).unwrap()
    }

    #[test]
    fn three_node_tsp_is_the_unique_cycle() {
        let m = small(ProblemKind::Tsp);
        let inst = Instance::Tsp(generate_tsp(3, 0).unwrap());
        for s in 0..4 {
            let (sol, _) = rollout(&m, &inst, s % 2 == 0, s).unwrap();
            assert!(validate(&inst, &sol).is_ok());
            let len = crate::instances::objective(&inst, &sol).unwrap();
            let Instance::Tsp(t) = &inst else { unreachable!() };
            let cycle = crate::instances::tour_length(t, &TspTour::new(vec![0, 1, 2]), None).unwrap();
            assert!((len - cycle).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = small(ProblemKind::Tsp);
        let inst = Instance::Tsp(generate_tsp(30, 2).unwrap());
        assert_eq!(rollout(&m, &inst, true, 5).unwrap(), rollout(&m, &inst, true, 5).unwrap());
        let mc = small(ProblemKind::Cvrp);
        let ci = Instance::Cvrp(generate_cvrp(30, 40, 2).unwrap());
        assert_eq!(rollout(&mc, &ci, true, 5).unwrap(), rollout(&mc, &ci, true, 5).unwrap());
    }

    /// Replays a sampled rollout one state at a time through the public
    /// single-step functions and sums the log-probabilities.
    fn replay_log_prob(m: &Model, inst: &Instance, sol: &Solution) -> f64 {
        let emb = encode(m, inst).unwrap();
        let mut total = 0.0;
        match (inst, sol) {
            (Instance::Tsp(t), Solution::Tsp(tour)) => {
                let first = tour.order[0];
                let mut st = DecoderState { dest: first, start: first, available: (0..t.n()).filter(|&i| i != first).collect(), remaining: 0 };
                for &node in &tour.order[1..] {
                    let p = decode_step_tsp(m, &emb, &st).unwrap();
                    let k = st.available.iter().position(|&x| x == node).unwrap();
                    total += p[k].ln();
                    st.available.remove(k);
                    st.start = node;
                }
            }
            (Instance::Cvrp(v), Solution::Cvrp(s)) => {
                let mut st = DecoderState { dest: 0, start: 0, available: (1..=v.n()).collect(), remaining: v.capacity };
                for (&c, &via) in s.order.iter().zip(&s.via_depot) {
                    let p = decode_step_cvrp(m, v, &emb, &st).unwrap();
                    let a = st.available.len();
                    let k = st.available.iter().position(|&x| x == c + 1).unwrap();
                    total += if via { p[k] } else { p[a + k] }.ln();
                    st.available.remove(k);
                    st.start = c + 1;
                    st.remaining = if via { v.capacity } else { st.remaining } - v.demands[c];
                }
            }
            _ => unreachable!(),
        }
        total
    }

    #[test]
    fn sampled_log_prob_matches_replay() {
        let m = small(ProblemKind::Tsp);
        let inst = Instance::Tsp(generate_tsp(12, 8).unwrap());
        let (sol, lp) = rollout(&m, &inst, false, 3).unwrap();
        assert!((lp - replay_log_prob(&m, &inst, &sol)).abs() < 1e-9);
        let mc = small(ProblemKind::Cvrp);
        let ci = Instance::Cvrp(generate_cvrp(12, 20, 8).unwrap());
        let (sol, lp) = rollout(&mc, &ci, false, 3).unwrap();
        assert!((lp - replay_log_prob(&mc, &ci, &sol)).abs() < 1e-9);
    }

    #[test]
    fn recorded_nll_matches_log_prob() {
        let m = small(ProblemKind::Cvrp);
        let ci = Instance::Cvrp(generate_cvrp(10, 15, 1).unwrap());
        let insts = [&ci];
        let (features, offsets) = stacked_features(&m, &insts).unwrap();
        let mut tape = Tape::new(&m.params);
        let emb = encode_graph(&mut tape, &m, features);
        let mut rng = seeded(4);
        let mut cons = vec![full_cvrp(0, match &ci { Instance::Cvrp(v) => v, _ => unreachable!() }, None)];
        let steps = construct(&mut tape, &m, &insts, &emb, &offsets, &mut cons, &mut DecodeMode::Sample(&mut rng), true).unwrap();
        let total: f64 = steps.iter().map(|s| tape.value(&s.nll).sum() as f64).sum();
        assert!((total + cons[0].log_prob).abs() < 1e-9);
    }

    #[test]
    fn forced_decoding_reproduces_the_target() {
        let m = small(ProblemKind::Tsp);
        let inst = Instance::Tsp(generate_tsp(9, 3).unwrap());
        let (sol, lp) = rollout(&m, &inst, false, 9).unwrap();
        let Solution::Tsp(t) = &sol else { unreachable!() };
        let mut c = full_tsp(0, 9, t.order[0]);
        c.forced = Some(t.order[1..].iter().map(|&node| Action { node, via_depot: false }).collect());
        let (features, offsets) = stacked_features(&m, &[&inst]).unwrap();
        let mut g = Eager::new(&m.params);
        let emb = encode_graph(&mut g, &m, features);
        let mut cons = vec![c];
        construct(&mut g, &m, &[&inst], &emb, &offsets, &mut cons, &mut DecodeMode::Forced, false).unwrap();
        assert_eq!(cons[0].tsp_tour(), *t);
        assert!((cons[0].log_prob - lp).abs() < 1e-12);
    }

    #[test]
    fn zero_capacity_forces_depot_returns() {
        let m = small(ProblemKind::Cvrp);
        let v = crate::instances::CvrpInstance::new([0.5, 0.5], vec![[0.1, 0.1], [0.9, 0.9], [0.2, 0.8]], vec![9, 9, 9], 9).unwrap();
        let inst = Instance::Cvrp(v);
        let (sol, _) = rollout(&m, &inst, true, 0).unwrap();
        let Solution::Cvrp(s) = sol else { unreachable!() };
        assert!(s.via_depot.iter().all(|&f| f));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rollouts_are_feasible(n in 3usize..25, seed in any::<u64>(), greedy in any::<bool>(), cap in 9u32..30) {
            let m = small(ProblemKind::Tsp);
            let inst = Instance::Tsp(generate_tsp(n, seed).unwrap());
            let (sol, _) = rollout(&m, &inst, greedy, seed).unwrap();
            prop_assert!(validate(&inst, &sol).is_ok());
            let mc = small(ProblemKind::Cvrp);
            let ci = Instance::Cvrp(generate_cvrp(n, cap, seed).unwrap());
            let (sol, _) = rollout(&mc, &ci, greedy, seed).unwrap();
            prop_assert!(validate(&ci, &sol).is_ok());
        }
    }
}
