#![cfg(not(feature = "f32"))]

use std::rc::Rc;

use nco_core::instances::{generate_cvrp, generate_tsp, Instance};
use nco_core::model::{
    build_decoder_inputs, construct, decoder_logits, encode_graph, linear_attention_module, node_features, stacked_features,
    Action, Construction, DecodeMode, Model, ModelConfig, StepGroup,
};
use nco_core::reconstruction::{sample_segments, segment_construction, segment_targets};
use nco_core::rng::seeded;
use nco_core::tensor::{
    attention_layer, grad_check, Array2, AttentionLayerParams, AttnLayout, Graph, ParamId, ParamStore, PickGroup, PickLayout, Real, Tape, Var,
};
use nco_core::training::random_insertion;
use nco_core::ProblemKind;
use rand::Rng;

const EPS: Real = 1e-5;
const TOL: Real = 1e-4;

fn weights(len: usize, seed: u64) -> Rc<[Real]> {
    let mut rng = seeded(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn check_all(store: &mut ParamStore, ids: &[ParamId], loss: impl for<'p> Fn(&mut Tape<'p>) -> Var) {
    for &id in ids {
        let name = store.name(id).to_string();
        let r = grad_check(store, id, EPS, 100, &loss);
        assert!(r.max_relative_error < TOL, "{name}: {r:?}");
        assert!(r.coordinates_checked > 0);
    }
}

fn small(kind: ProblemKind) -> Model {
    Model::new(ModelConfig { kind, d: 8, layers: 2, heads: 2, ff_hidden: 12 }, 11).unwrap()
}

#[test]
fn encoder() {
    for kind in [ProblemKind::Tsp, ProblemKind::Cvrp] {
        let model = small(kind);
        let inst = match kind {
            ProblemKind::Tsp => Instance::Tsp(generate_tsp(7, 1).unwrap()),
            ProblemKind::Cvrp => Instance::Cvrp(generate_cvrp(7, 20, 1).unwrap()),
        };
        let feats = node_features(&inst);
        let w = weights(feats.rows() * model.config.d, 2);
        let mut store = model.params.clone();
        let ids = [model.ids.enc_w, model.ids.enc_b];
        check_all(&mut store, &ids, |t: &mut Tape| {
            let emb = encode_graph(t, &model, feats.clone());
            t.weighted_sum(&emb, w.clone())
        });
    }
}

#[test]
fn attention_layer_all_parameters() {
    let mut rng = seeded(5);
    let mut store = ParamStore::new();
    let p = AttentionLayerParams::init(&mut store, "layer", 8, 12, &mut rng);
    let x = store.add_uniform_shape("x", 8, 5, 8, &mut rng);
    let c = store.add_uniform_shape("c", 8, 4, 8, &mut rng);
    let layout = Rc::new(AttnLayout::from_lengths(&[3, 2], &[1, 3], 2));
    let w = weights(5 * 8, 6);
    let mut ids = p.ids().to_vec();
    ids.extend([x, c]);
    check_all(&mut store, &ids, |t: &mut Tape| {
        let xv = t.param(x);
        let cv = t.param(c);
        let out = attention_layer(t, &xv, &cv, &p, layout.clone());
        t.weighted_sum(&out, w.clone())
    });
}

fn two_groups(offsets: &[usize], n: &[usize]) -> Vec<StepGroup> {
    vec![
        StepGroup { dest: offsets[0], start: offsets[0] + 1, available: (2..n[0]).map(|k| offsets[0] + k).collect(), remaining: 0.6 },
        StepGroup { dest: offsets[1] + 2, start: offsets[1], available: vec![offsets[1] + 1, offsets[1] + 3, offsets[1] + 4], remaining: 0.3 },
    ]
}

#[test]
fn decoder_module() {
    let model = small(ProblemKind::Tsp);
    let insts = [Instance::Tsp(generate_tsp(6, 3).unwrap()), Instance::Tsp(generate_tsp(8, 4).unwrap())];
    let refs: Vec<&Instance> = insts.iter().collect();
    let (feats, offsets) = stacked_features(&model, &refs).unwrap();
    let groups = two_groups(&offsets, &[6, 8]);
    let (agg, bc) = model.ids.modules[0];
    let mut ids = agg.ids().to_vec();
    ids.extend(bc.ids());
    ids.extend([model.ids.w1, model.ids.w2]);
    let rows = 2 + 2 + 4 + 3;
    let wh = weights(rows * model.config.d, 7);
    let wr = weights(4 * model.config.d, 8);
    let mut store = model.params.clone();
    check_all(&mut store, &ids, |t: &mut Tape| {
        let emb = encode_graph(t, &model, feats.clone());
        let inp = build_decoder_inputs(t, &model, &emb, &groups).unwrap();
        let (r, h) = linear_attention_module(t, &model.ids.modules[0], &inp.r0, &inp.h0, &inp.aggregate, &inp.broadcast);
        let a = t.weighted_sum(&h, wh.clone());
        let b = t.weighted_sum(&r, wr.clone());
        t.add(&a, &b)
    });
}

fn head_loss<'p>(
    t: &mut Tape<'p>,
    model: &Model,
    feats: &Array2,
    groups: &[StepGroup],
    targets: &[usize],
    mask_direct: bool,
) -> Var {
    let emb = encode_graph(t, model, feats.clone());
    let (logits, spans) = decoder_logits(t, model, &emb, groups).unwrap();
    let cols = model.config.actions_per_node();
    let mut mask = vec![false; t.value(&logits).len()];
    for &(row0, _) in &spans {
        mask[row0 * cols..(row0 + 2) * cols].fill(true);
    }
    if mask_direct {
        // the first available node of each group may only be reached via the depot
        for &(row0, _) in &spans {
            mask[(row0 + 2) * cols + 1] = true;
        }
    }
    let layout = PickLayout {
        groups: spans.iter().zip(targets).map(|(&(row_start, rows), &target)| PickGroup { row_start, rows, target }).collect(),
        mask,
    };
    let nll = t.pick_nll(&logits, Rc::new(layout));
    t.sum(&nll)
}

#[test]
fn tsp_output_head() {
    let model = small(ProblemKind::Tsp);
    let insts = [Instance::Tsp(generate_tsp(6, 3).unwrap()), Instance::Tsp(generate_tsp(8, 4).unwrap())];
    let refs: Vec<&Instance> = insts.iter().collect();
    let (feats, offsets) = stacked_features(&model, &refs).unwrap();
    let groups = two_groups(&offsets, &[6, 8]);
    let mut store = model.params.clone();
    check_all(&mut store, &[model.ids.w_out, model.ids.w1, model.ids.w2], |t: &mut Tape| head_loss(t, &model, &feats, &groups, &[3, 4], false));
}

#[test]
fn cvrp_output_head() {
    let model = small(ProblemKind::Cvrp);
    let insts = [Instance::Cvrp(generate_cvrp(6, 20, 3).unwrap()), Instance::Cvrp(generate_cvrp(8, 20, 4).unwrap())];
    let refs: Vec<&Instance> = insts.iter().collect();
    let (feats, offsets) = stacked_features(&model, &refs).unwrap();
    let groups = two_groups(&offsets, &[7, 9]);
    let ids = [model.ids.w_out, model.ids.w1, model.ids.w2, model.ids.b1.unwrap(), model.ids.b2.unwrap()];
    let mut store = model.params.clone();
    // one via-depot target and one direct target
    check_all(&mut store, &ids, |t: &mut Tape| head_loss(t, &model, &feats, &groups, &[6, 7], true));
}

/// Central differences against the tape for every coordinate of every
/// parameter, allowing `TOL` relative error plus the roundoff floor of a
/// difference quotient (`|a - n| <= TOL * max(|a|, |n|) + noise`).
fn composed_loss_check(kind: ProblemKind, seed: u64) {
    let model = small(kind);
    let inst = match kind {
        ProblemKind::Tsp => Instance::Tsp(generate_tsp(12, seed).unwrap()),
        ProblemKind::Cvrp => Instance::Cvrp(generate_cvrp(12, 15, seed).unwrap()),
    };
    let sol = random_insertion(&inst, seed);
    let batch = sample_segments(&inst, &sol, 12, &mut seeded(seed)).unwrap();
    let seg = batch.segments.iter().max_by_key(|s| s.len()).unwrap().clone();
    assert!(seg.len() >= 5, "segment too short to exercise several steps");
    let targets: Vec<Action> = segment_targets(&inst, &seg);
    let (feats, offsets) = stacked_features(&model, &[&inst]).unwrap();
    let loss = |t: &mut Tape| {
        let emb = encode_graph(t, &model, feats.clone());
        let mut c: Construction = segment_construction(0, &inst, &seg);
        c.forced = Some(targets.clone());
        let mut cons = vec![c];
        let steps = construct(t, &model, &[&inst], &emb, &offsets, &mut cons, &mut DecodeMode::Forced, true).unwrap();
        assert!(steps.len() >= 2);
        // the first decoding step of a forced segment
        t.sum(&steps[0].nll)
    };
    let mut store = model.params.clone();
    let (value, grads) = {
        let mut t = Tape::new(&store);
        let l = loss(&mut t);
        (t.value(&l).item(), t.backward(l).unwrap())
    };
    let noise = 64.0 * Real::EPSILON * value.abs().max(1.0) / EPS;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut checked = 0;
    for id in ids {
        for idx in 0..store.get(id).len() {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + EPS;
            let plus = { let mut t = Tape::new(&store); let l = loss(&mut t); t.value(&l).item() };
            store.get_mut(id).data_mut()[idx] = orig - EPS;
            let minus = { let mut t = Tape::new(&store); let l = loss(&mut t); t.value(&l).item() };
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = grads.get(id).data()[idx];
            let err = (a - numeric).abs();
            assert!(
                err <= TOL * a.abs().max(numeric.abs()) + noise,
                "{}[{idx}]: analytic {a:e} numeric {numeric:e}",
                store.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn composed_decode_loss_tsp() {
    composed_loss_check(ProblemKind::Tsp, 21);
}

#[test]
fn composed_decode_loss_cvrp() {
    composed_loss_check(ProblemKind::Cvrp, 22);
}
