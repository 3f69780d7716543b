//! Decoder memory and time per step for the linear and quadratic attention
//! variants, and the selection-probability profile by distance rank.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::instances::{dist, Instance, Point};
use crate::model::{
    decode_step_cvrp, decode_step_tsp, decoder_logits, encode, quadratic_decoder_logits, DecoderState, Model, ModelError,
    StepGroup,
};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{AllocationLedger, Array2, Eager, Real};
use crate::training::generate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Linear,
    Quadratic,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Linear => "linear",
            Variant::Quadratic => "quadratic",
        })
    }
}

impl FromStr for Variant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Variant::Linear),
            "quadratic" => Ok(Variant::Quadratic),
            _ => Err(BenchError::InvalidVariant(s.into())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid size list: {0}")]
    InvalidSize(String),
    #[error("unknown attention variant {0:?}")]
    InvalidVariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub size: usize,
    /// Peak live bytes above the pre-step baseline; `None` when out of budget.
    pub peak_bytes: Option<i64>,
    pub step_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub variant: Variant,
    pub entries: Vec<MemoryEntry>,
}

impl MemoryReport {
    /// `peak(b) / peak(a)` for two measured sizes.
    pub fn ratio(&self, a: usize, b: usize) -> Option<f64> {
        let get = |s| self.entries.iter().find(|e| e.size == s).and_then(|e| e.peak_bytes);
        Some(get(b)? as f64 / get(a)? as f64)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "size,variant,peak_bytes,step_ms")?;
        for e in &self.entries {
            match (e.peak_bytes, e.step_ms) {
                (Some(b), Some(t)) => writeln!(f, "{},{},{},{:.3}", e.size, self.variant, b, t)?,
                _ => writeln!(f, "{},{},out_of_budget,", e.size, self.variant)?,
            }
        }
        f.flush()
    }
}

/// Default ceiling on the estimated activation bytes of one measured step.
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

/// Rough upper estimate of one step's activation bytes, used only to skip
/// sizes that would not fit.
pub fn estimated_step_bytes(model: &Model, size: usize, variant: Variant) -> u64 {
    let c = &model.config;
    let s = std::mem::size_of::<Real>() as u64;
    let m = size as u64 + 2;
    let linear = m * (8 * c.d as u64 + 2 * c.ff_hidden as u64) * s;
    match variant {
        Variant::Linear => linear,
        Variant::Quadratic => linear + 2 * c.heads as u64 * m * m * s,
    }
}

/// One decode step per size on a uniform instance: the first node is both
/// start and destination is node 1, every other node is available.
pub fn bench_memory(model: &Model, sizes: &[usize], variant: Variant, budget: u64, seed: u64) -> Result<MemoryReport, BenchError> {
    if sizes.is_empty() {
        return Err(BenchError::InvalidSize("empty".into()));
    }
    if sizes.iter().any(|&s| s < 3) {
        return Err(BenchError::InvalidSize(format!("every size must be at least 3, got {sizes:?}")));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BenchError::InvalidSize(format!("sizes must be strictly increasing, got {sizes:?}")));
    }
    let mut entries = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        if estimated_step_bytes(model, size, variant) > budget {
            entries.push(MemoryEntry { size, peak_bytes: None, step_ms: None });
            continue;
        }
        let inst = generate(model.config.kind, size, 50, derive_seed(seed, i as u64)).map_err(ModelError::from)?;
        let emb = encode(model, &inst)?;
        let cvrp = matches!(inst, Instance::Cvrp(_));
        let group = StepGroup {
            dest: 0,
            start: 1,
            available: (2..emb.rows()).collect(),
            remaining: if cvrp { 1.0 } else { 0.0 },
        };
        let (peak, ms) = measure_step(model, &emb, &group, variant)?;
        entries.push(MemoryEntry { size, peak_bytes: Some(peak), step_ms: Some(ms) });
    }
    Ok(MemoryReport { variant, entries })
}

fn measure_step(model: &Model, emb: &Array2, group: &StepGroup, variant: Variant) -> Result<(i64, f64), ModelError> {
    let groups = std::slice::from_ref(group);
    let mut g = Eager::new(&model.params);
    let emb = std::borrow::Cow::Borrowed(emb);
    let base = AllocationLedger::reset_peak();
    let t = Instant::now();
    let (logits, _) = match variant {
        Variant::Linear => decoder_logits(&mut g, model, &emb, groups)?,
        Variant::Quadratic => quadratic_decoder_logits(&mut g, model, &emb, groups)?,
    };
    let ms = t.elapsed().as_secs_f64() * 1e3;
    drop(logits);
    Ok((AllocationLedger::peak_bytes() - base, ms))
}

/// Least-squares fit `y = a + b x`; returns `(a, b, r_squared)`.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (a, b, r2)
}

/// Per-step node probabilities ordered by distance rank to the start node
/// (nearest first).
#[derive(Clone, Debug, PartialEq)]
pub struct StepProfile {
    pub ranked: Vec<f64>,
}

impl StepProfile {
    /// Mean probability of the `k` nearest and the `k` farthest nodes.
    pub fn near_far(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.ranked.len());
        let near = self.ranked[..k].iter().sum::<f64>() / k as f64;
        let far = self.ranked[self.ranked.len() - k..].iter().sum::<f64>() / k as f64;
        (near, far)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbProfile {
    /// Mean selection probability per distance-rank bucket (bucket 0 nearest).
    pub bucket_means: Vec<f64>,
    pub steps: Vec<StepProfile>,
}

impl ProbProfile {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bucket,mean_probability")?;
        for (b, p) in self.bucket_means.iter().enumerate() {
            writeln!(f, "{b},{p}")?;
        }
        f.flush()
    }

    /// Fraction of steps whose `k` nearest nodes have a higher mean
    /// probability than the `k` farthest.
    pub fn near_beats_far(&self, k: usize) -> f64 {
        let wins = self.steps.iter().filter(|s| {
            let (n, f) = s.near_far(k);
            n > f
        });
        wins.count() as f64 / self.steps.len().max(1) as f64
    }
}

fn coord(inst: &Instance, node: usize) -> Point {
    match inst {
        Instance::Tsp(t) => t.coords[node],
        Instance::Cvrp(c) => {
            if node == 0 {
                c.depot
            } else {
                c.customers[node - 1]
            }
        }
    }
}

/// Follows a greedy decode of each instance from a random start and records
/// every step with at least `min_available` nodes, up to `max_steps` in total.
pub fn prob_distance_profile(
    model: &Model,
    insts: &[Instance],
    max_steps: usize,
    buckets: usize,
    min_available: usize,
    seed: u64,
) -> Result<ProbProfile, BenchError> {
    if buckets == 0 {
        return Err(BenchError::InvalidSize("bucket count must be positive".into()));
    }
    let mut rng = seeded(seed);
    let mut sums = vec![0.0; buckets];
    let mut counts = vec![0usize; buckets];
    let mut steps = Vec::new();
    'outer: for inst in insts {
        model.check_kind(inst.kind())?;
        let emb = encode(model, inst)?;
        let mut state = match inst {
            Instance::Tsp(t) => {
                let first = rng.gen_range(0..t.n());
                DecoderState { dest: first, start: first, available: (0..t.n()).filter(|&x| x != first).collect(), remaining: 0 }
            }
            Instance::Cvrp(c) => DecoderState { dest: 0, start: 0, available: (1..=c.n()).collect(), remaining: c.capacity },
        };
        while state.available.len() >= min_available.max(2) {
            let a = state.available.len();
            let (node_probs, best) = match inst {
                Instance::Tsp(_) => {
                    let p = decode_step_tsp(model, &emb, &state)?;
                    let best = argmax(&p);
                    (p.iter().map(|&x| x as f64).collect::<Vec<_>>(), (best, false))
                }
                Instance::Cvrp(_) => {
                    let Instance::Cvrp(c) = inst else { unreachable!() };
                    let p = decode_step_cvrp(model, c, &emb, &state)?;
                    let best = argmax(&p);
                    let node: Vec<f64> = (0..a).map(|k| (p[k] + p[a + k]) as f64).collect();
                    (node, (best % a, best < a))
                }
            };
            let s = coord(inst, state.start);
            let mut order: Vec<usize> = (0..a).collect();
            order.sort_by(|&x, &y| {
                let dx = dist(s, coord(inst, state.available[x]));
                let dy = dist(s, coord(inst, state.available[y]));
                dx.total_cmp(&dy).then(x.cmp(&y))
            });
            let ranked: Vec<f64> = order.iter().map(|&k| node_probs[k]).collect();
            for (r, p) in ranked.iter().enumerate() {
                let b = r * buckets / a;
                sums[b] += p;
                counts[b] += 1;
            }
            steps.push(StepProfile { ranked });
            if steps.len() >= max_steps {
                break 'outer;
            }
            let (k, via) = best;
            let node = state.available.remove(k);
            if let Instance::Cvrp(c) = inst {
                let dem = c.demands[node - 1];
                state.remaining = if via { c.capacity - dem } else { state.remaining - dem };
            }
            state.start = node;
        }
    }
    let bucket_means = sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    Ok(ProbProfile { bucket_means, steps })
}

fn argmax(p: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}
