//! Warm-up by multi-start policy gradient, and the self-improved learning
//! loop: reconstruction epochs improve a dataset of solutions, cross-entropy
//! epochs fit the model to segments of them.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::heuristics::{random_insertion_cvrp, random_insertion_tsp};
use crate::instances::{
    generate_cvrp, generate_tsp, objective, validate, Dataset, Instance, InstanceError, ProblemKind, Solution,
};
use crate::model::{
    construct, encode_graph, full_cvrp, full_tsp, rollout_batch, stacked_features, Construction, DecodeMode, Model,
    ModelError,
};
use crate::reconstruction::{
    extract_segment, orient, prc_batch, sample_omega, segment_construction, segment_targets, Direction, PrcConfig, PrcError,
    Segment,
};
use crate::rng::{derive_seed, seeded, Rng64};
use crate::tensor::{AdamState, Eager, Gradients, Graph, Real, Tape, TensorError};

/// Decoder rows a single tape may record before the batch is split.
pub const TAPE_ROW_BUDGET: usize = 40_000;

/// Adam step size for the reduced warm-up (30 x 2000 instances). The full
/// schedule uses 1e-4 over 100 x 50,000 instances.
pub const DESK_WARMUP_LR: f64 = 3e-3;
/// Per-epoch step-size decay for the reduced warm-up; a constant 3e-3 diverges
/// after about 20 epochs.
pub const DESK_WARMUP_DECAY: f64 = 0.925;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("stored solution for record {0} is missing or infeasible")]
    BadPseudoLabel(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prc(#[from] PrcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub instances_per_epoch: usize,
    pub seed: u64,
    /// CVRP vehicle capacity of the generated instances.
    pub capacity: u32,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { n: 20, epochs: 30, batch_size: 64, instances_per_epoch: 2000, seed: 0, capacity: 30 }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.n < 4 {
            return Err(TrainingError::Config(format!("warm-up scale must be at least 4, got {}", self.n)));
        }
        if self.batch_size == 0 || self.instances_per_epoch == 0 {
            return Err(TrainingError::Config("batch size and instances per epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilConfig {
    pub dataset_size: usize,
    pub episodes: usize,
    pub recon_iterations: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub l_max: usize,
    pub seed: u64,
    pub heldout_size: usize,
    /// Relative held-out improvement below which an episode counts as stalled.
    pub threshold: f64,
    /// Worker threads for reconstruction.
    pub jobs: usize,
}

impl Default for SilConfig {
    fn default() -> Self {
        Self {
            dataset_size: 100,
            episodes: 2,
            recon_iterations: 100,
            train_epochs: 20,
            batch_size: 64,
            l_max: 1000,
            seed: 0,
            heldout_size: 64,
            threshold: 1e-4,
            jobs: 1,
        }
    }
}

impl SilConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.dataset_size == 0 || self.recon_iterations == 0 || self.train_epochs == 0 || self.batch_size == 0 || self.heldout_size == 0 {
            return Err(TrainingError::Config("all counts must be positive".into()));
        }
        if self.l_max < 4 {
            return Err(TrainingError::Config(format!("l_max must be at least 4, got {}", self.l_max)));
        }
        Ok(())
    }
}

/// Uniform instance of the model's kind.
pub fn generate(kind: ProblemKind, n: usize, capacity: u32, seed: u64) -> Result<Instance, InstanceError> {
    Ok(match kind {
        ProblemKind::Tsp => Instance::Tsp(generate_tsp(n, seed)?),
        ProblemKind::Cvrp => Instance::Cvrp(generate_cvrp(n, capacity, seed)?),
    })
}

pub fn random_insertion(inst: &Instance, seed: u64) -> Solution {
    match inst {
        Instance::Tsp(t) => Solution::Tsp(random_insertion_tsp(t, seed)),
        Instance::Cvrp(c) => Solution::Cvrp(random_insertion_cvrp(c, seed)),
    }
}

fn chunk_by_rows(costs: &[usize], budget: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut rows = 0;
    for (i, &c) in costs.iter().enumerate() {
        if i > start && rows + c > budget {
            out.push(start..i);
            start = i;
            rows = 0;
        }
        rows += c;
    }
    if start < costs.len() {
        out.push(start..costs.len());
    }
    out
}

/// Decoder rows recorded when decoding `a` free nodes to completion.
fn decode_rows(a: usize) -> usize {
    (2..=a).map(|k| k + 2).sum()
}

/// One greedy rollout per instance; the TSP start node comes from `seed`.
pub fn greedy_objectives(model: &Model, insts: &[Instance], seed: u64) -> Result<Vec<f64>, TrainingError> {
    let mut rng = seeded(seed);
    let specs: Vec<(usize, Option<usize>)> = insts
        .iter()
        .enumerate()
        .map(|(i, inst)| match inst {
            Instance::Tsp(t) => (i, Some(rng.gen_range(0..t.n()))),
            Instance::Cvrp(_) => (i, None),
        })
        .collect();
    let costs: Vec<usize> = insts.iter().map(|i| decode_rows(i.n()).min(1 << 20)).collect();
    let mut out = Vec::with_capacity(insts.len());
    for range in chunk_by_rows(&costs, 1 << 16) {
        let refs: Vec<&Instance> = insts[range.clone()].iter().collect();
        let sub: Vec<(usize, Option<usize>)> = specs[range.clone()].iter().map(|&(i, f)| (i - range.start, f)).collect();
        let res = rollout_batch(model, &refs, &sub, &mut DecodeMode::Greedy)?;
        for (inst, sol) in refs.iter().zip(&res.solutions) {
            out.push(objective(inst, sol)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmupEpochStats {
    /// Mean return over all sampled rollouts (negative mean length).
    pub mean_return: f64,
    pub batches: usize,
    pub rejected_steps: usize,
}

/// Policy-gradient loss of a set of multi-start rollouts, with gradients.
/// `cons` holds `n` consecutive rollouts per instance. Returns the rollout
/// lengths and the gradient of `sum_i w_i * nll_i` where
/// `w_i = (R_i - b) / (batch * n)`, `R = -length` and `b` the per-instance mean.
fn pg_chunk(
    model: &Model,
    insts: &[&Instance],
    mut cons: Vec<Construction>,
    per_instance: usize,
    batch: usize,
    rng: &mut Rng64,
) -> Result<(Vec<f64>, Gradients), TrainingError> {
    let (features, offsets) = stacked_features(model, insts)?;
    let mut tape = Tape::new(&model.params);
    let emb = encode_graph(&mut tape, model, features);
    let steps = construct(&mut tape, model, insts, &emb, &offsets, &mut cons, &mut DecodeMode::Sample(rng), true)?;
    let lengths: Vec<f64> = cons
        .iter()
        .map(|c| objective(insts[c.instance], &c.solution(insts[c.instance])))
        .collect::<Result<_, _>>()?;
    let mut weights = vec![0.0; cons.len()];
    for (block, w) in lengths.chunks(per_instance).zip(weights.chunks_mut(per_instance)) {
        let mean_r = -block.iter().sum::<f64>() / block.len() as f64;
        for (wi, len) in w.iter_mut().zip(block) {
            *wi = (-len - mean_r) / (batch * per_instance) as f64;
        }
    }
    let mut total = None;
    for s in &steps {
        let w: Rc<[Real]> = s.members.iter().map(|&m| weights[m] as Real).collect();
        let term = tape.weighted_sum(&s.nll, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term),
        });
    }
    let grads = match total {
        Some(loss) => tape.backward(loss)?,
        None => Gradients::zeros_like(&model.params),
    };
    Ok((lengths, grads))
}

fn multi_start(i: usize, inst: &Instance) -> Vec<Construction> {
    match inst {
        Instance::Tsp(t) => (0..t.n()).map(|s| full_tsp(i, t.n(), s)).collect(),
        Instance::Cvrp(c) => (0..c.n()).map(|s| full_cvrp(i, c, Some(s))).collect(),
    }
}

/// Multi-start policy-gradient gradient for one batch of instances, split
/// into tapes of at most `TAPE_ROW_BUDGET` rows and summed in order.
pub fn policy_gradient(model: &Model, insts: &[Instance], rng: &mut Rng64) -> Result<(Vec<f64>, Gradients), TrainingError> {
    let costs: Vec<usize> = insts.iter().map(|i| i.n() * decode_rows(i.n())).collect();
    let mut grads = Gradients::zeros_like(&model.params);
    let mut lengths = Vec::new();
    for range in chunk_by_rows(&costs, TAPE_ROW_BUDGET) {
        let refs: Vec<&Instance> = insts[range].iter().collect();
        let per = refs[0].n();
        if refs.iter().any(|i| i.n() != per) {
            return Err(TrainingError::Config("warm-up instances in one batch must share a scale".into()));
        }
        let cons: Vec<Construction> = refs.iter().enumerate().flat_map(|(i, inst)| multi_start(i, inst)).collect();
        let (l, g) = pg_chunk(model, &refs, cons, per, insts.len(), rng)?;
        lengths.extend(l);
        grads.accumulate(&g);
    }
    Ok((lengths, grads))
}

/// One warm-up epoch on freshly generated instances of epoch `epoch`.
pub fn warmup_epoch(model: &mut Model, adam: &mut AdamState, config: &WarmupConfig, epoch: usize) -> Result<WarmupEpochStats, TrainingError> {
    config.validate()?;
    let kind = model.config.kind;
    let epoch_seed = derive_seed(config.seed, epoch as u64);
    let mut rng = seeded(derive_seed(epoch_seed, u64::MAX));
    let mut sum_return = 0.0;
    let mut count = 0usize;
    let mut batches = 0;
    let mut rejected = 0;
    let mut next = 0;
    while next < config.instances_per_epoch {
        let b = config.batch_size.min(config.instances_per_epoch - next);
        let insts: Vec<Instance> = (next..next + b)
            .map(|i| generate(kind, config.n, config.capacity, derive_seed(epoch_seed, i as u64)))
            .collect::<Result<_, _>>()?;
        next += b;
        let (lengths, grads) = policy_gradient(model, &insts, &mut rng)?;
        sum_return -= lengths.iter().sum::<f64>();
        count += lengths.len();
        batches += 1;
        match adam.step(&mut model.params, &grads) {
            Ok(()) => {}
            Err(TensorError::NonFiniteGradient) => rejected += 1,
            Err(e) => return Err(e.into()),
        }
    }
    adam.epoch_decay();
    Ok(WarmupEpochStats { mean_return: sum_return / count.max(1) as f64, batches, rejected_steps: rejected })
}

/// One window with `omega` uniform on `[4, min(l_max, n)]`, uniform position
/// and direction.
pub fn sample_training_segment(inst: &Instance, solution: &Solution, l_max: usize, rng: &mut Rng64) -> Result<Segment, TrainingError> {
    let n = inst.n();
    if n < 4 || l_max < 4 {
        return Err(PrcError::TooSmall(n).into());
    }
    let direction = if rng.gen::<bool>() { Direction::Forward } else { Direction::Backward };
    let oriented = orient(solution, direction);
    let omega = sample_omega(n, l_max, rng);
    let position = match inst {
        Instance::Tsp(_) => rng.gen_range(0..n),
        Instance::Cvrp(_) => rng.gen_range(0..=n - omega),
    };
    Ok(extract_segment(inst, &oriented, position, omega, direction))
}

/// Teacher-forced losses `sum_t -log p(target_t)` of `segments` on one tape.
/// Returns per-item loss values and the gradient of `sum_i scale_i * loss_i`,
/// where items with a non-finite loss get zero scale.
fn teacher_forced_chunk(
    model: &Model,
    insts: &[&Instance],
    segments: &[(usize, &Segment)],
    scale: Real,
) -> Result<(Vec<f64>, Gradients), TrainingError> {
    let (features, offsets) = stacked_features(model, insts)?;
    let mut tape = Tape::new(&model.params);
    let emb = encode_graph(&mut tape, model, features);
    let mut cons: Vec<Construction> = segments
        .iter()
        .map(|&(i, s)| {
            let mut c = segment_construction(i, insts[i], s);
            c.forced = Some(segment_targets(insts[i], s));
            c
        })
        .collect();
    let steps = construct(&mut tape, model, insts, &emb, &offsets, &mut cons, &mut DecodeMode::Forced, true)?;
    let mut losses = vec![0.0f64; segments.len()];
    for s in &steps {
        for (k, &m) in s.members.iter().enumerate() {
            losses[m] += tape.value(&s.nll).data()[k] as f64;
        }
    }
    let mut total = None;
    for s in &steps {
        let w: Rc<[Real]> = s.members.iter().map(|&m| if losses[m].is_finite() { scale } else { 0.0 }).collect();
        let term = tape.weighted_sum(&s.nll, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term),
        });
    }
    let grads = match total {
        Some(loss) => tape.backward(loss)?,
        None => Gradients::zeros_like(&model.params),
    };
    Ok((losses, grads))
}

/// Teacher-forced loss of one segment without gradients.
pub fn teacher_forced_loss(model: &Model, inst: &Instance, seg: &Segment) -> Result<f64, TrainingError> {
    let (features, offsets) = stacked_features(model, &[inst])?;
    let mut g = Eager::new(&model.params);
    let emb = encode_graph(&mut g, model, features);
    let mut c = segment_construction(0, inst, seg);
    c.forced = Some(segment_targets(inst, seg));
    let mut cons = vec![c];
    let steps = construct(&mut g, model, &[inst], &emb, &offsets, &mut cons, &mut DecodeMode::Forced, true)?;
    Ok(steps.iter().map(|s| g.value(&s.nll).data()[0] as f64).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainEpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub skipped_items: usize,
    pub rejected_steps: usize,
}

/// Teacher-forced loss and gradient averaged over a batch of segments.
pub fn segment_gradient(
    model: &Model,
    insts: &[&Instance],
    segments: &[(usize, Segment)],
) -> Result<(Vec<f64>, Gradients), TrainingError> {
    let costs: Vec<usize> = segments.iter().map(|(_, s)| decode_rows(s.len() - 2)).collect();
    let scale = 1.0 / segments.len().max(1) as Real;
    let mut grads = Gradients::zeros_like(&model.params);
    let mut losses = Vec::with_capacity(segments.len());
    for range in chunk_by_rows(&costs, TAPE_ROW_BUDGET) {
        let jobs: Vec<(usize, &Segment)> = segments[range].iter().map(|(i, s)| (*i, s)).collect();
        let (l, g) = teacher_forced_chunk(model, insts, &jobs, scale)?;
        losses.extend(l);
        grads.accumulate(&g);
    }
    Ok((losses, grads))
}

/// One cross-entropy epoch: every record once in shuffled order, one freshly
/// sampled segment per record, one Adam step per batch, then lr decay.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    dataset: &Dataset,
    batch_size: usize,
    l_max: usize,
    rng: &mut Rng64,
) -> Result<TrainEpochStats, TrainingError> {
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(TrainingError::Config("batch size must be positive".into()));
    }
    let insts: Vec<&Instance> = dataset.records.iter().map(|r| &r.instance).collect();
    for (i, r) in dataset.records.iter().enumerate() {
        match &r.solution {
            Some(s) if validate(&r.instance, s).is_ok() => {}
            _ => return Err(TrainingError::BadPseudoLabel(i)),
        }
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut skipped = 0;
    let mut rejected = 0;
    let mut batches = 0;
    for batch in order.chunks(batch_size) {
        let mut segs = Vec::with_capacity(batch.len());
        for &i in batch {
            let sol = dataset.records[i].solution.as_ref().expect("validated above");
            segs.push((i, sample_training_segment(insts[i], sol, l_max, rng)?));
        }
        let (losses, grads) = segment_gradient(model, &insts, &segs)?;
        for l in losses {
            if l.is_finite() {
                loss_sum += l;
                loss_count += 1;
            } else {
                skipped += 1;
            }
        }
        batches += 1;
        match adam.step(&mut model.params, &grads) {
            Ok(()) => {}
            Err(TensorError::NonFiniteGradient) => rejected += 1,
            Err(e) => return Err(e.into()),
        }
    }
    adam.epoch_decay();
    Ok(TrainEpochStats {
        mean_loss: loss_sum / loss_count.max(1) as f64,
        batches,
        skipped_items: skipped,
        rejected_steps: rejected,
    })
}

/// Fills missing solutions with random insertion and records their objective.
pub fn initialize_dataset(dataset: &mut Dataset, seed: u64) -> Result<(), TrainingError> {
    for (i, r) in dataset.records.iter_mut().enumerate() {
        if r.solution.is_none() {
            let s = random_insertion(&r.instance, derive_seed(seed, i as u64));
            r.history.push(objective(&r.instance, &s)?);
            r.solution = Some(s);
        }
    }
    Ok(())
}

pub fn dataset_mean_objective(dataset: &Dataset) -> Result<f64, TrainingError> {
    let mut sum = 0.0;
    for (i, r) in dataset.records.iter().enumerate() {
        let s = r.solution.as_ref().ok_or(TrainingError::BadPseudoLabel(i))?;
        sum += objective(&r.instance, s)?;
    }
    Ok(sum / dataset.len().max(1) as f64)
}

/// PRC over every record; a record's solution is replaced only when the
/// result is strictly better. Returns the new mean objective.
pub fn reconstruction_epoch(model: &Model, dataset: &mut Dataset, prc: &PrcConfig, jobs: usize) -> Result<f64, TrainingError> {
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    initialize_dataset(dataset, prc.seed)?;
    let insts: Vec<&Instance> = dataset.records.iter().map(|r| &r.instance).collect();
    let sols: Vec<Solution> = dataset.records.iter().map(|r| r.solution.clone().expect("initialized")).collect();
    let outcomes = prc_batch(model, &insts, &sols, prc, jobs)?;
    for (r, o) in dataset.records.iter_mut().zip(outcomes) {
        let old = objective(&r.instance, r.solution.as_ref().expect("initialized"))?;
        let new = *o.trace.last().expect("non-empty trace");
        if new < old && validate(&r.instance, &o.solution).is_ok() {
            r.solution = Some(o.solution);
            r.history.push(new);
        }
    }
    dataset.episode += 1;
    dataset_mean_objective(dataset)
}

/// One metrics row. Reconstruction rows have `epoch = 0` and no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub episode: usize,
    pub epoch: usize,
    pub mean_loss: Option<f64>,
    pub dataset_mean_obj: f64,
    pub heldout_mean_obj: Option<f64>,
    pub lr: f64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str = "episode,epoch,mean_loss,dataset_mean_obj,heldout_mean_obj,lr,wallclock_s";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.3}",
            r.episode,
            r.epoch,
            opt(r.mean_loss),
            r.dataset_mean_obj,
            opt(r.heldout_mean_obj),
            r.lr,
            r.wallclock_s
        )?;
    }
    f.flush()
}

#[derive(Clone, Debug)]
pub struct SilReport {
    pub rows: Vec<MetricsRow>,
    /// Dataset mean objective after each reconstruction epoch.
    pub dataset_means: Vec<f64>,
    /// Held-out greedy mean before training (index 0) and after each episode.
    pub heldout_means: Vec<f64>,
    pub best_episode: usize,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

/// Held-out instances at the dataset's scale, from a fixed stream of `seed`.
pub fn heldout_set(kind: ProblemKind, n: usize, capacity: u32, count: usize, seed: u64) -> Result<Vec<Instance>, InstanceError> {
    let base = derive_seed(seed, 0x4845_4c44);
    (0..count).map(|i| generate(kind, n, capacity, derive_seed(base, i as u64))).collect()
}

/// Self-improved learning. Each episode runs one reconstruction epoch and
/// `train_epochs` cross-entropy epochs, then evaluates greedy rollouts on the
/// held-out set. Checkpoints go to `out_dir` when given.
pub fn sil_run(
    model: &mut Model,
    adam: &mut AdamState,
    dataset: &mut Dataset,
    config: &SilConfig,
    out_dir: Option<&Path>,
) -> Result<SilReport, TrainingError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    model.check_kind(dataset.kind)?;
    let clock = Instant::now();
    let first = &dataset.records[0].instance;
    let capacity = match first {
        Instance::Cvrp(c) => c.capacity,
        Instance::Tsp(_) => 0,
    };
    let heldout = heldout_set(dataset.kind, first.n(), capacity, config.heldout_size, config.seed)?;
    let eval_seed = derive_seed(config.seed, 0x4556_414c);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let mut heldout_means = vec![mean(greedy_objectives(model, &heldout, eval_seed)?)];
    initialize_dataset(dataset, derive_seed(config.seed, 0x494e_4954))?;
    let mut report = SilReport {
        rows: Vec::new(),
        dataset_means: Vec::new(),
        heldout_means: Vec::new(),
        best_episode: 0,
        checkpoints: Vec::new(),
        stopped_early: false,
    };
    let mut best = heldout_means[0];
    let mut stalled = 0;
    let mut rng = seeded(derive_seed(config.seed, 0x5452_4149));
    for episode in 1..=config.episodes {
        let prc = PrcConfig { l_max: config.l_max, iterations: config.recon_iterations, seed: derive_seed(config.seed, episode as u64) };
        let ds_mean = reconstruction_epoch(model, dataset, &prc, config.jobs)?;
        report.dataset_means.push(ds_mean);
        report.rows.push(MetricsRow {
            episode,
            epoch: 0,
            mean_loss: None,
            dataset_mean_obj: ds_mean,
            heldout_mean_obj: None,
            lr: adam.lr,
            wallclock_s: clock.elapsed().as_secs_f64(),
        });
        log::info!("episode {episode}: dataset mean {ds_mean:.4}");
        for epoch in 1..=config.train_epochs {
            let lr = adam.lr;
            let stats = train_epoch(model, adam, dataset, config.batch_size, config.l_max, &mut rng)?;
            let last = epoch == config.train_epochs;
            let held = if last { Some(mean(greedy_objectives(model, &heldout, eval_seed)?)) } else { None };
            report.rows.push(MetricsRow {
                episode,
                epoch,
                mean_loss: Some(stats.mean_loss),
                dataset_mean_obj: ds_mean,
                heldout_mean_obj: held,
                lr,
                wallclock_s: clock.elapsed().as_secs_f64(),
            });
            log::info!("episode {episode} epoch {epoch}: loss {:.4}", stats.mean_loss);
            if let Some(h) = held {
                heldout_means.push(h);
            }
        }
        let h = *heldout_means.last().expect("held-out mean");
        if let Some(dir) = out_dir {
            let meta = serde_json::json!({ "episode": episode, "heldout_mean_obj": h, "dataset_mean_obj": ds_mean });
            let path = dir.join(format!("episode_{episode}.ckpt"));
            model.save(&path, meta.clone(), Some(adam.clone()))?;
            report.checkpoints.push(path);
            if h < best {
                model.save(dir.join("best.ckpt"), meta, Some(adam.clone()))?;
            }
        }
        let prev = heldout_means[heldout_means.len() - 2];
        if h < best {
            best = h;
            report.best_episode = episode;
        }
        if (prev - h) / prev < config.threshold {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if stalled >= 2 {
            report.stopped_early = episode < config.episodes;
            break;
        }
    }
    report.heldout_means = heldout_means;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::AdamConfig;
    use proptest::prelude::*;

    fn tiny(kind: ProblemKind) -> Model {
        Model::new(ModelConfig { kind, d: 16, layers: 1, heads: 4, ff_hidden: 16 }, 3).unwrap()
    }

    #[test]
    fn chunking_covers_everything_in_order() {
        let r = chunk_by_rows(&[5, 5, 5, 20, 1], 10);
        assert_eq!(r, vec![0..2, 2..3, 3..4, 4..5]);
    }

    #[test]
    fn three_node_tsp_gives_zero_gradient() {
        // every rollout is the same cycle, so every advantage is zero
        let m = tiny(ProblemKind::Tsp);
        let insts: Vec<Instance> = (0..4).map(|s| generate(ProblemKind::Tsp, 3, 0, s).unwrap()).collect();
        let (_, g) = policy_gradient(&m, &insts, &mut seeded(0)).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn identical_rollouts_cancel() {
        // collinear points: every start yields a tour of the same length
        let pts = vec![[0.0, 0.5], [0.25, 0.5], [0.5, 0.5], [0.75, 0.5]];
        let inst = Instance::Tsp(crate::instances::TspInstance::new(pts).unwrap());
        let m = tiny(ProblemKind::Tsp);
        let (lens, g) = policy_gradient(&m, &[inst], &mut seeded(5)).unwrap();
        if lens.iter().all(|l| (l - lens[0]).abs() < 1e-12) {
            assert!(g.norm() < 1e-12);
        }
    }

    #[test]
    fn warmup_epoch_runs_and_steps() {
        let mut m = tiny(ProblemKind::Cvrp);
        let mut adam = AdamState::new(&m.params, AdamConfig::default());
        let cfg = WarmupConfig { n: 6, epochs: 1, batch_size: 2, instances_per_epoch: 4, seed: 1, capacity: 15 };
        let before = m.params.clone();
        let stats = warmup_epoch(&mut m, &mut adam, &cfg, 0).unwrap();
        assert_eq!(stats.batches, 2);
        assert!(stats.mean_return < 0.0);
        assert_ne!(before, m.params);
        assert!((adam.lr - 1e-4 * 0.97).abs() < 1e-15);
    }

    #[test]
    fn warmup_rejects_small_scale() {
        let cfg = WarmupConfig { n: 3, ..WarmupConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainingError::Config(_))));
    }

    #[test]
    fn omega_four_has_two_targets() {
        let inst = generate(ProblemKind::Tsp, 10, 0, 1).unwrap();
        let sol = random_insertion(&inst, 1);
        let mut rng = seeded(2);
        let seg = sample_training_segment(&inst, &sol, 4, &mut rng).unwrap();
        assert_eq!(segment_targets(&inst, &seg).len(), 2);
    }

    #[test]
    fn backward_window_reverses_targets() {
        let inst = generate(ProblemKind::Tsp, 5, 0, 1).unwrap();
        let sol = Solution::Tsp(crate::instances::TspTour::new(vec![0, 1, 2, 3, 4]));
        let fwd = extract_segment(&inst, &orient(&sol, Direction::Forward), 1, 3, Direction::Forward);
        assert_eq!(fwd.nodes, vec![1, 2, 3]);
        let rev = orient(&sol, Direction::Backward);
        let pos = rev.order().iter().position(|&x| x == 3).unwrap();
        let bwd = extract_segment(&inst, &rev, pos, 3, Direction::Backward);
        assert_eq!(bwd.nodes, vec![3, 2, 1]);
    }

    #[test]
    fn loss_is_reproducible_from_checkpoint() {
        let m = tiny(ProblemKind::Tsp);
        let inst = generate(ProblemKind::Tsp, 12, 0, 4).unwrap();
        let sol = random_insertion(&inst, 4);
        let seg = sample_training_segment(&inst, &sol, 12, &mut seeded(9)).unwrap();
        let a = teacher_forced_loss(&m, &inst, &seg).unwrap();
        let mut buf = Vec::new();
        m.to_checkpoint(serde_json::Value::Null, None).write_to(&mut buf).unwrap();
        let ck = crate::tensor::checkpoint::Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let m2 = Model::from_checkpoint(&ck).unwrap();
        let b = teacher_forced_loss(&m2, &inst, &seg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a >= 0.0);
    }

    #[test]
    fn batched_loss_matches_single() {
        let m = tiny(ProblemKind::Cvrp);
        let insts: Vec<Instance> = (0..3).map(|s| generate(ProblemKind::Cvrp, 15, 20, s).unwrap()).collect();
        let refs: Vec<&Instance> = insts.iter().collect();
        let mut rng = seeded(1);
        let segs: Vec<(usize, Segment)> =
            (0..3).map(|i| (i, sample_training_segment(&insts[i], &random_insertion(&insts[i], 0), 10, &mut rng).unwrap())).collect();
        let (losses, _) = segment_gradient(&m, &refs, &segs).unwrap();
        for (l, (i, s)) in losses.iter().zip(&segs) {
            let single = teacher_forced_loss(&m, &insts[*i], s).unwrap();
            assert!((l - single).abs() < 1e-9, "{l} vs {single}");
        }
    }

    fn small_dataset(kind: ProblemKind, n: usize, count: usize) -> Dataset {
        let insts = (0..count).map(|s| generate(kind, n, 20, 100 + s as u64).unwrap()).collect();
        Dataset::from_instances(kind, insts)
    }

    #[test]
    fn train_epoch_requires_pseudo_labels() {
        let mut m = tiny(ProblemKind::Tsp);
        let mut adam = AdamState::new(&m.params, AdamConfig::default());
        let ds = small_dataset(ProblemKind::Tsp, 8, 2);
        let r = train_epoch(&mut m, &mut adam, &ds, 2, 8, &mut seeded(0));
        assert!(matches!(r, Err(TrainingError::BadPseudoLabel(0))));
        let empty = Dataset::new(ProblemKind::Tsp);
        assert!(matches!(train_epoch(&mut m, &mut adam, &empty, 2, 8, &mut seeded(0)), Err(TrainingError::EmptyDataset)));
    }

    #[test]
    fn zero_iterations_leave_dataset_unchanged() {
        let m = tiny(ProblemKind::Tsp);
        let mut ds = small_dataset(ProblemKind::Tsp, 12, 3);
        initialize_dataset(&mut ds, 0).unwrap();
        let before = ds.records.clone();
        reconstruction_epoch(&m, &mut ds, &PrcConfig { l_max: 12, iterations: 0, seed: 0 }, 1).unwrap();
        assert_eq!(before, ds.records);
    }

    #[test]
    fn sil_episode_schedule_and_monotone_dataset() {
        let mut m = tiny(ProblemKind::Cvrp);
        let mut adam = AdamState::new(&m.params, AdamConfig::default());
        let mut ds = small_dataset(ProblemKind::Cvrp, 12, 4);
        let cfg = SilConfig {
            dataset_size: 4,
            episodes: 2,
            recon_iterations: 3,
            train_epochs: 2,
            batch_size: 2,
            l_max: 8,
            seed: 0,
            heldout_size: 3,
            threshold: -1.0,
            jobs: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let rep = sil_run(&mut m, &mut adam, &mut ds, &cfg, Some(dir.path())).unwrap();
        assert_eq!(rep.rows.len(), 2 * (1 + 2));
        assert!(rep.dataset_means[1] <= rep.dataset_means[0]);
        assert_eq!(rep.heldout_means.len(), 3);
        assert!(dir.path().join("episode_2.ckpt").exists());
        for r in &ds.records {
            assert!(r.history.windows(2).all(|w| w[1] < w[0]));
            validate(&r.instance, r.solution.as_ref().unwrap()).unwrap();
        }
        let csv = dir.path().join("m.csv");
        write_metrics_csv(&csv, &rep.rows).unwrap();
        assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 7);
    }

    #[test]
    fn zero_episodes_return_input_params() {
        let mut m = tiny(ProblemKind::Tsp);
        let before = m.params.clone();
        let mut adam = AdamState::new(&m.params, AdamConfig::default());
        let mut ds = small_dataset(ProblemKind::Tsp, 10, 2);
        let cfg = SilConfig { episodes: 0, dataset_size: 2, heldout_size: 2, l_max: 10, ..SilConfig::default() };
        let rep = sil_run(&mut m, &mut adam, &mut ds, &cfg, None).unwrap();
        assert!(rep.rows.is_empty());
        assert_eq!(before, m.params);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn sampled_segments_are_windows(seed in 0u64..1000, n in 5usize..30, cvrp in any::<bool>()) {
            let kind = if cvrp { ProblemKind::Cvrp } else { ProblemKind::Tsp };
            let inst = generate(kind, n, 20, seed).unwrap();
            let sol = random_insertion(&inst, seed);
            let mut rng = seeded(seed);
            let seg = sample_training_segment(&inst, &sol, 12, &mut rng).unwrap();
            prop_assert!(seg.len() >= 4 && seg.len() <= n.min(12));
            let mut nodes = seg.nodes.clone();
            nodes.sort_unstable();
            nodes.dedup();
            prop_assert_eq!(nodes.len(), seg.len());
            prop_assert!(seg.nodes.iter().all(|x| sol.order().contains(x)));
            let m = tiny(kind);
            let l = teacher_forced_loss(&m, &inst, &seg).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
        }
    }
}
