use std::rc::Rc;

use super::{Model, ModelError};
use crate::instances::{CvrpInstance, Instance, ProblemKind};
use crate::tensor::kernels::group_softmax;
use crate::tensor::{attention_layer, Array2, AttentionLayerParams, AttnLayout, Eager, Graph, Real};

/// Encoder input rows. TSP: `(x, y)` per node. CVRP: row 0 is the depot
/// `(x, y, 0)`, row `i + 1` is customer `i` as `(x, y, demand / capacity)`.
pub fn node_features(inst: &Instance) -> Array2 {
    match inst {
        Instance::Tsp(t) => {
            let data = t.coords.iter().flat_map(|p| [p[0] as Real, p[1] as Real]).collect();
            Array2::from_vec(t.n(), 2, data)
        }
        Instance::Cvrp(c) => {
            let cap = c.capacity as f64;
            let mut data = vec![c.depot[0] as Real, c.depot[1] as Real, 0.0];
            for (p, &dem) in c.customers.iter().zip(&c.demands) {
                data.extend([p[0] as Real, p[1] as Real, (dem as f64 / cap) as Real]);
            }
            Array2::from_vec(c.n() + 1, 3, data)
        }
    }
}

/// `h_i = s_i W0 + b0` for every row of `features`.
pub fn encode_graph<'p, G: Graph<'p>>(g: &mut G, model: &Model, features: Array2) -> G::T {
    let x = g.input(features);
    let w = g.param(model.ids.enc_w);
    let b = g.param(model.ids.enc_b);
    let h = g.matmul(&x, &w);
    g.add_row(&h, &b)
}

pub fn encode(model: &Model, inst: &Instance) -> Result<Array2, ModelError> {
    model.check_kind(inst.kind())?;
    let mut g = Eager::new(&model.params);
    Ok(encode_graph(&mut g, model, node_features(inst)).into_owned())
}

/// Features of several instances stacked row-wise, with the first row of each.
pub fn encode_batch(model: &Model, insts: &[&Instance]) -> Result<(Array2, Vec<usize>), ModelError> {
    let (features, offsets) = stacked_features(model, insts)?;
    let mut g = Eager::new(&model.params);
    Ok((encode_graph(&mut g, model, features).into_owned(), offsets))
}

pub fn stacked_features(model: &Model, insts: &[&Instance]) -> Result<(Array2, Vec<usize>), ModelError> {
    let w = model.config.input_width();
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(insts.len());
    let mut rows = 0;
    for inst in insts {
        model.check_kind(inst.kind())?;
        offsets.push(rows);
        let f = node_features(inst);
        rows += f.rows();
        data.extend_from_slice(f.data());
    }
    Ok((Array2::from_vec(rows, w, data), offsets))
}

/// One decoding state inside a batched forward pass. Indices address rows of
/// the stacked embedding matrix.
#[derive(Clone, Debug)]
pub struct StepGroup {
    pub dest: usize,
    pub start: usize,
    pub available: Vec<usize>,
    /// Normalized remaining capacity `d_r` (CVRP only).
    pub remaining: Real,
}

/// Decoder inputs for a batch of groups. Group `g` owns rows
/// `spans[g].0 .. spans[g].0 + spans[g].1` of `h0`: the destination and start
/// representatives followed by its available nodes.
pub struct DecoderInputs<T> {
    pub r0: T,
    pub h0: T,
    pub spans: Vec<(usize, usize)>,
    pub aggregate: Rc<AttnLayout>,
    pub broadcast: Rc<AttnLayout>,
}

pub fn build_decoder_inputs<'p, G: Graph<'p>>(
    g: &mut G,
    model: &Model,
    emb: &G::T,
    groups: &[StepGroup],
) -> Result<DecoderInputs<G::T>, ModelError> {
    if groups.iter().any(|s| s.available.is_empty()) || groups.is_empty() {
        return Err(ModelError::EmptyAvailable);
    }
    let n = groups.len();
    let dest: Rc<[usize]> = groups.iter().map(|s| s.dest).collect();
    let start: Rc<[usize]> = groups.iter().map(|s| s.start).collect();
    let avail: Rc<[usize]> = groups.iter().flat_map(|s| s.available.iter().copied()).collect();
    let hd = g.gather_rows(emb, dest);
    let hs = g.gather_rows(emb, start);
    let ids = &model.ids;
    let w1 = g.param(ids.w1);
    let w2 = g.param(ids.w2);
    let (rd, rs) = match model.config.kind {
        ProblemKind::Tsp => (g.matmul(&hd, &w1), g.matmul(&hs, &w2)),
        ProblemKind::Cvrp => {
            let rem = g.input(Array2::from_vec(n, 1, groups.iter().map(|s| s.remaining).collect()));
            let fd = g.concat_cols(&hd, &rem);
            let fs = g.concat_cols(&hs, &rem);
            let b1 = g.param(ids.b1.expect("cvrp model has b1"));
            let b2 = g.param(ids.b2.expect("cvrp model has b2"));
            let rd = g.matmul(&fd, &w1);
            let rd = g.add_row(&rd, &b1);
            let rs = g.matmul(&fs, &w2);
            (rd, g.add_row(&rs, &b2))
        }
    };
    let ha = g.gather_rows(emb, avail);
    let all = g.concat_rows(&[&rd, &rs, &ha]);
    let mut perm = Vec::with_capacity(2 * n + groups.iter().map(|s| s.available.len()).sum::<usize>());
    let mut reps = Vec::with_capacity(2 * n);
    let mut spans = Vec::with_capacity(n);
    let mut next_avail = 2 * n;
    for (i, s) in groups.iter().enumerate() {
        spans.push((perm.len(), s.available.len() + 2));
        perm.extend([i, n + i]);
        reps.extend([i, n + i]);
        perm.extend(next_avail..next_avail + s.available.len());
        next_avail += s.available.len();
    }
    let h0 = g.gather_rows(&all, perm.into());
    let r0 = g.gather_rows(&all, reps.into());
    let rows: Vec<usize> = spans.iter().map(|s| s.1).collect();
    let two = vec![2; n];
    let heads = model.config.heads;
    Ok(DecoderInputs {
        r0,
        h0,
        spans,
        aggregate: Rc::new(AttnLayout::from_lengths(&two, &rows, heads)),
        broadcast: Rc::new(AttnLayout::from_lengths(&rows, &two, heads)),
    })
}

/// Aggregate `R' = Layer(R, H)`, then broadcast `H' = Layer(H, R')`.
pub fn linear_attention_module<'p, G: Graph<'p>>(
    g: &mut G,
    params: &(AttentionLayerParams, AttentionLayerParams),
    r: &G::T,
    h: &G::T,
    aggregate: &Rc<AttnLayout>,
    broadcast: &Rc<AttnLayout>,
) -> (G::T, G::T) {
    let r_next = attention_layer(g, r, h, &params.0, aggregate.clone());
    let h_next = attention_layer(g, h, &r_next, &params.1, broadcast.clone());
    (r_next, h_next)
}

/// Logits for every decoder row of every group (representative rows included;
/// callers mask them). Returns the logits and the per-group row spans.
pub fn decoder_logits<'p, G: Graph<'p>>(
    g: &mut G,
    model: &Model,
    emb: &G::T,
    groups: &[StepGroup],
) -> Result<(G::T, Vec<(usize, usize)>), ModelError> {
    let DecoderInputs { mut r0, mut h0, spans, aggregate, broadcast } = build_decoder_inputs(g, model, emb, groups)?;
    for m in &model.ids.modules {
        let (r, h) = linear_attention_module(g, m, &r0, &h0, &aggregate, &broadcast);
        r0 = r;
        h0 = h;
    }
    drop(r0);
    let w = g.param(model.ids.w_out);
    Ok((g.matmul(&h0, &w), spans))
}

/// Reference decoder with full self-attention over every decoder row, using
/// each module's aggregate layer. Memory grows with the square of the row count.
pub fn quadratic_decoder_logits<'p, G: Graph<'p>>(
    g: &mut G,
    model: &Model,
    emb: &G::T,
    groups: &[StepGroup],
) -> Result<(G::T, Vec<(usize, usize)>), ModelError> {
    let DecoderInputs { r0, mut h0, spans, .. } = build_decoder_inputs(g, model, emb, groups)?;
    drop(r0);
    let rows: Vec<usize> = spans.iter().map(|s| s.1).collect();
    let layout = Rc::new(AttnLayout::from_lengths(&rows, &rows, model.config.heads));
    for (agg, _) in &model.ids.modules {
        h0 = attention_layer(g, &h0, &h0, agg, layout.clone());
    }
    let w = g.param(model.ids.w_out);
    Ok((g.matmul(&h0, &w), spans))
}

/// A single decoding state in instance-local node ids. For the CVRP node 0 is
/// the depot and node `i + 1` is customer `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub dest: usize,
    pub start: usize,
    pub available: Vec<usize>,
    /// CVRP remaining capacity in demand units.
    pub remaining: u32,
}

fn single_step(model: &Model, emb: &Array2, state: &DecoderState, remaining: Real) -> Result<Array2, ModelError> {
    if state.available.is_empty() {
        return Err(ModelError::EmptyAvailable);
    }
    let mut g = Eager::new(&model.params);
    let emb = g.input(emb.clone());
    let group = StepGroup { dest: state.dest, start: state.start, available: state.available.clone(), remaining };
    let (logits, _) = decoder_logits(&mut g, model, &emb, &[group])?;
    Ok(logits.into_owned())
}

/// Selection probabilities over `state.available`, in that order.
pub fn decode_step_tsp(model: &Model, emb: &Array2, state: &DecoderState) -> Result<Vec<Real>, ModelError> {
    model.check_kind(ProblemKind::Tsp)?;
    let logits = single_step(model, emb, state, 0.0)?;
    let mut mask = vec![false; logits.len()];
    mask[0] = true;
    mask[1] = true;
    let p = group_softmax(&logits, &[(0, logits.rows())], &mask);
    Ok(p[2..].to_vec())
}

/// Probabilities of length `2a`: first the via-depot action for each available
/// node, then the direct action for each. Direct actions are masked when the
/// node's demand exceeds the remaining capacity or the vehicle is at the depot.
pub fn decode_step_cvrp(
    model: &Model,
    inst: &CvrpInstance,
    emb: &Array2,
    state: &DecoderState,
) -> Result<Vec<Real>, ModelError> {
    model.check_kind(ProblemKind::Cvrp)?;
    let d_r = state.remaining as f64 / inst.capacity as f64;
    let logits = single_step(model, emb, state, d_r as Real)?;
    let a = state.available.len();
    let mut mask = vec![false; logits.len()];
    mask[..4].fill(true);
    for (k, &node) in state.available.iter().enumerate() {
        let demand = inst.demands[node - 1];
        if state.start == 0 || demand > state.remaining {
            mask[2 * (k + 2) + 1] = true;
        }
    }
    let p = group_softmax(&logits, &[(0, logits.rows())], &mask);
    let mut out = Vec::with_capacity(2 * a);
    out.extend((0..a).map(|k| p[2 * (k + 2)]));
    out.extend((0..a).map(|k| p[2 * (k + 2) + 1]));
    Ok(out)
}
