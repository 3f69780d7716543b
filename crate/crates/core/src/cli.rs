//! The `nco` command line. Every command reads an optional flat TOML config;
//! flags override its keys, and `--emit-config` prints the resolved values.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_memory, prob_distance_profile, Variant};
use crate::instances::{
    cvrp_cost_scaled, objective, parse_library_file, tour_length, Dataset, Instance, LibraryInstance, ProblemKind,
    ScaledCoordinates, Solution,
};
use crate::model::{Model, ModelConfig, ModelError};
use crate::reconstruction::{prc, PrcConfig};
use crate::rng::derive_seed;
use crate::tensor::{AdamConfig, AdamState, TensorError};
use crate::training::{
    generate, greedy_objectives, heldout_set, random_insertion, sil_run, warmup_epoch, write_metrics_csv, SilConfig,
    WarmupConfig,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "NCO_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "nco", version, about = "Linear-attention routing model: generation, training, solving, evaluation")]
pub struct Cli {
    /// Flat TOML file of run settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    pub emit_config: bool,
    /// Worker threads for per-instance parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset of uniform random instances.
    Gen(Overrides),
    /// Multi-start policy-gradient warm-up on small instances.
    Warmup(Overrides),
    /// Self-improved learning from a warm-up checkpoint.
    Sil(Overrides),
    /// Random insertion followed by reconstruction on a dataset or library file.
    Solve(Overrides),
    /// Gaps of a results file against reference objectives.
    Eval(Overrides),
    /// Decoder memory and time per step.
    Bench(Overrides),
    /// Selection probability by distance rank to the start node.
    Diag(Overrides),
}

/// Flags shared by all commands. Each one overrides the config key of the same name.
#[derive(Args, Debug, Default, Serialize)]
pub struct Overrides {
    #[arg(long, conflicts_with = "cvrp")]
    #[serde(skip)]
    pub tsp: bool,
    #[arg(long)]
    #[serde(skip)]
    pub cvrp: bool,
    #[arg(short = 'n', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output file.
    #[arg(short = 'o', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// Instance source for `solve`: a dataset or a TSPLIB/CVRPLIB file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances_per_epoch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lmax: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Reference objectives for `eval`, one per line.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Results CSV for `eval`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<PathBuf>,
    /// Comma-separated instance sizes for `bench`.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_mb: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buckets: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Also write per-iteration objectives (`solve`).
    #[arg(long)]
    #[serde(skip)]
    pub trace: bool,
    /// Continue from the checkpoint at the output path (`warmup`).
    #[arg(long)]
    #[serde(skip)]
    pub resume: bool,
}

/// Every setting, resolved from defaults, the config file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub kind: ProblemKind,
    pub n: usize,
    pub count: usize,
    pub capacity: u32,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub output: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub instances_per_epoch: usize,
    pub episodes: usize,
    pub lmax: usize,
    pub iters: usize,
    pub train_epochs: usize,
    pub heldout: usize,
    pub threshold: f64,
    pub reference: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub sizes: Vec<usize>,
    pub variant: Variant,
    pub budget_mb: u64,
    pub buckets: usize,
    pub steps: usize,
    pub trace: bool,
    pub resume: bool,
    pub force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(ProblemKind::Tsp);
        let adam = AdamConfig::default();
        let warm = WarmupConfig::default();
        let sil = SilConfig::default();
        Self {
            kind: ProblemKind::Tsp,
            n: warm.n,
            count: 128,
            capacity: warm.capacity,
            seed: 0,
            jobs: 1,
            out_dir: PathBuf::from("."),
            output: None,
            dataset: None,
            ckpt: None,
            input: None,
            d: desk.d,
            layers: desk.layers,
            heads: desk.heads,
            ff_hidden: desk.ff_hidden,
            lr: adam.lr,
            lr_decay: adam.epoch_decay,
            epochs: warm.epochs,
            batch_size: warm.batch_size,
            instances_per_epoch: warm.instances_per_epoch,
            episodes: sil.episodes,
            lmax: sil.l_max,
            iters: sil.recon_iterations,
            train_epochs: sil.train_epochs,
            heldout: sil.heldout_size,
            threshold: sil.threshold,
            reference: None,
            results: None,
            sizes: vec![1000, 2000, 4000],
            variant: Variant::Linear,
            budget_mb: crate::bench::DEFAULT_MEMORY_BUDGET >> 20,
            buckets: 10,
            steps: 1000,
            trace: false,
            resume: false,
            force: false,
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file's keys, then explicit flags.
    pub fn resolve(cli: &Cli, over: &Overrides) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())?;
        if let Some(path) = &cli.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            for (k, v) in file {
                if !table.contains_key(&k) {
                    bail!("unknown config key {k:?} in {}", path.display());
                }
                table.insert(k, v);
            }
        }
        for (k, v) in toml::Table::try_from(over)? {
            let key = if k == "lmax" { "lmax".to_string() } else { k };
            table.insert(key, v);
        }
        if over.tsp {
            table.insert("kind".into(), toml::Value::String("tsp".into()));
        }
        if over.cvrp {
            table.insert("kind".into(), toml::Value::String("cvrp".into()));
        }
        for (flag, key) in [(over.trace, "trace"), (over.resume, "resume"), (cli.force, "force")] {
            if flag {
                table.insert(key.into(), toml::Value::Boolean(true));
            }
        }
        if let Some(j) = cli.jobs {
            table.insert("jobs".into(), toml::Value::Integer(j as i64));
        }
        if let Some(dir) = &cli.out_dir {
            table.insert("out_dir".into(), toml::Value::String(dir.display().to_string()));
        }
        let cfg: RunConfig = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            ("n", self.n),
            ("count", self.count),
            ("jobs", self.jobs),
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_hidden", self.ff_hidden),
            ("batch_size", self.batch_size),
            ("instances_per_epoch", self.instances_per_epoch),
            ("train_epochs", self.train_epochs),
            ("heldout", self.heldout),
            ("buckets", self.buckets),
            ("steps", self.steps),
        ];
        for (k, v) in counts {
            if v == 0 {
                bail!("config key {k} must be positive");
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("config key lr must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { kind: self.kind, d: self.d, layers: self.layers, heads: self.heads, ff_hidden: self.ff_hidden }
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn output_or(&self, default: &str) -> PathBuf {
        self.resolve_path(self.output.as_deref().unwrap_or(Path::new(default)))
    }

    fn required<'a>(&self, v: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        v.as_deref().ok_or_else(|| anyhow!("missing required setting {name}"))
    }
}

fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("output {} exists; pass --force to overwrite", path.display());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print one JSON line on stderr.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code != 0 {
                eprintln!("{}", error_line("usage", &e.to_string()));
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &format!("{e:#}")));
            1
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use crate::instances::InstanceError;
    for cause in e.chain() {
        if let Some(ie) = cause.downcast_ref::<InstanceError>() {
            return match ie {
                InstanceError::Parse { .. } | InstanceError::UnsupportedFormat(_) => "parse",
                InstanceError::Io(_) => "io",
                _ => "instance",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        // transparent wrappers hide the io error from the source chain
        let tensor = match cause.downcast_ref::<ModelError>() {
            Some(ModelError::Tensor(t)) => Some(t),
            Some(ModelError::Instance(InstanceError::Io(_))) => return "io",
            _ => cause.downcast_ref::<TensorError>(),
        };
        if let Some(TensorError::Io(_)) = tensor {
            return "io";
        }
    }
    "error"
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "status": "error", "kind": kind, "message": message.trim() }).to_string()
}

pub fn run(cli: &Cli) -> Result<()> {
    let over = match &cli.command {
        Command::Gen(o) | Command::Warmup(o) | Command::Sil(o) | Command::Solve(o) | Command::Eval(o) | Command::Bench(o) | Command::Diag(o) => o,
    };
    let cfg = RunConfig::resolve(cli, over)?;
    if cli.emit_config {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    if cfg.jobs > 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    match &cli.command {
        Command::Gen(_) => cmd_gen(&cfg),
        Command::Warmup(_) => cmd_warmup(&cfg),
        Command::Sil(_) => cmd_sil(&cfg),
        Command::Solve(_) => cmd_solve(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Bench(_) => cmd_bench(&cfg),
        Command::Diag(_) => cmd_diag(&cfg),
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_or("dataset.ds");
    check_writable(&out, cfg.force)?;
    let insts = (0..cfg.count)
        .map(|i| generate(cfg.kind, cfg.n, cfg.capacity, derive_seed(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::from_instances(cfg.kind, insts).save(&out)?;
    println!("generated count={} kind={} n={} seed={} path={}", cfg.count, cfg.kind, cfg.n, cfg.seed, out.display());
    Ok(())
}

pub fn cmd_warmup(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_or("warmup.ckpt");
    let metrics = out.with_extension("csv");
    let warm = WarmupConfig {
        n: cfg.n,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        instances_per_epoch: cfg.instances_per_epoch,
        seed: cfg.seed,
        capacity: cfg.capacity,
    };
    warm.validate()?;
    let adam_cfg = AdamConfig { lr: cfg.lr, epoch_decay: cfg.lr_decay, ..AdamConfig::default() };
    let (mut model, mut adam, start, mut rows) = if cfg.resume && out.exists() {
        let (model, ck) = Model::load(&out)?;
        if model.config != cfg.model_config() {
            bail!("checkpoint {} has a different model config", out.display());
        }
        let adam = ck.adam.clone().unwrap_or_else(|| AdamState::new(&model.params, adam_cfg));
        let done = ck.metadata.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let rows = std::fs::read_to_string(&metrics).map(|s| s.lines().skip(1).map(String::from).collect()).unwrap_or_default();
        (model, adam, done, rows)
    } else {
        check_writable(&out, cfg.force)?;
        let model = Model::new(cfg.model_config(), cfg.seed)?;
        let adam = AdamState::new(&model.params, adam_cfg);
        (model, adam, 0, Vec::new())
    };
    let heldout = heldout_set(cfg.kind, cfg.n, cfg.capacity, cfg.heldout, cfg.seed)?;
    let eval_seed = derive_seed(cfg.seed, 1);
    let greedy_mean = |m: &Model| -> Result<f64> {
        let v = greedy_objectives(m, &heldout, eval_seed)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let meta = |epoch: usize| serde_json::json!({ "epoch": epoch, "warmup": warm });
    if start == 0 {
        let g = greedy_mean(&model)?;
        rows.push(format!("0,,{g},{},0.000", adam.lr));
        model.save(&out, meta(0), Some(adam.clone()))?;
    }
    let clock = Instant::now();
    for epoch in start..cfg.epochs {
        let lr = adam.lr;
        let stats = warmup_epoch(&mut model, &mut adam, &warm, epoch)?;
        let g = greedy_mean(&model)?;
        log::info!("epoch {}: mean return {:.4}, held-out greedy {:.4}", epoch + 1, stats.mean_return, g);
        rows.push(format!("{},{},{g},{lr},{:.3}", epoch + 1, stats.mean_return, clock.elapsed().as_secs_f64()));
        model.save(&out, meta(epoch + 1), Some(adam.clone()))?;
        write_lines(&metrics, "epoch,mean_return,heldout_greedy_mean,lr,wallclock_s", &rows)?;
    }
    write_lines(&metrics, "epoch,mean_return,heldout_greedy_mean,lr,wallclock_s", &rows)?;
    println!("warmup epochs={} checkpoint={} metrics={}", cfg.epochs, out.display(), metrics.display());
    Ok(())
}

fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.resolve_path(cfg.required(&cfg.ckpt, "ckpt")?);
    let (model, _) = Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

pub fn cmd_sil(cfg: &RunConfig) -> Result<()> {
    let (mut model, ck) = {
        let path = cfg.resolve_path(cfg.required(&cfg.ckpt, "ckpt")?);
        Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?
    };
    let ds_path = cfg.resolve_path(cfg.required(&cfg.dataset, "dataset")?);
    let mut dataset = Dataset::load(&ds_path).with_context(|| format!("loading dataset {}", ds_path.display()))?;
    model.check_kind(dataset.kind)?;
    let out = cfg.output_or("sil");
    if out.join("metrics.csv").exists() && !cfg.force {
        bail!("output {} already holds a run; pass --force to overwrite", out.display());
    }
    std::fs::create_dir_all(&out)?;
    let adam_cfg = AdamConfig { lr: cfg.lr, epoch_decay: cfg.lr_decay, ..AdamConfig::default() };
    let _ = ck;
    let mut adam = AdamState::new(&model.params, adam_cfg);
    let sil = SilConfig {
        dataset_size: dataset.len(),
        episodes: cfg.episodes,
        recon_iterations: cfg.iters,
        train_epochs: cfg.train_epochs,
        batch_size: cfg.batch_size,
        l_max: cfg.lmax,
        seed: cfg.seed,
        heldout_size: cfg.heldout,
        threshold: cfg.threshold,
        jobs: cfg.jobs,
    };
    let report = sil_run(&mut model, &mut adam, &mut dataset, &sil, Some(&out))?;
    write_metrics_csv(&out.join("metrics.csv"), &report.rows)?;
    dataset.save(out.join("dataset.ds"))?;
    println!(
        "sil episodes={} rows={} best_episode={} dir={}",
        report.dataset_means.len(),
        report.rows.len(),
        report.best_episode,
        out.display()
    );
    Ok(())
}

struct SolveItem {
    name: String,
    instance: Instance,
    scaling: Option<ScaledCoordinates>,
}

fn reported_objective(item: &SolveItem, sol: &Solution) -> Result<f64> {
    Ok(match (&item.instance, sol, &item.scaling) {
        (Instance::Tsp(t), Solution::Tsp(s), Some(sc)) => tour_length(t, s, Some(sc))?,
        (Instance::Cvrp(c), Solution::Cvrp(s), Some(sc)) => cvrp_cost_scaled(c, s, Some(sc))?,
        _ => objective(&item.instance, sol)?,
    })
}

fn solve_items(path: &Path) -> Result<Vec<SolveItem>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "tsp" || ext == "vrp" {
        let LibraryInstance { name, instance, scaling } =
            parse_library_file(path).with_context(|| format!("parsing {}", path.display()))?;
        Ok(vec![SolveItem { name, instance, scaling: Some(scaling) }])
    } else {
        let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
        Ok(ds.records.into_iter().enumerate().map(|(i, r)| SolveItem { name: i.to_string(), instance: r.instance, scaling: None }).collect())
    }
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let input = cfg.input.as_ref().or(cfg.dataset.as_ref()).ok_or_else(|| anyhow!("missing required setting input"))?;
    let items = solve_items(&cfg.resolve_path(input))?;
    let out = cfg.output_or("results.csv");
    check_writable(&out, cfg.force)?;
    let solve_one = |(i, item): (usize, &SolveItem)| -> Result<(Solution, f64, f64, Vec<f64>, f64)> {
        model.check_kind(item.instance.kind())?;
        let t = Instant::now();
        let init = random_insertion(&item.instance, derive_seed(cfg.seed, i as u64));
        let init_obj = reported_objective(item, &init)?;
        let prc_cfg = PrcConfig { l_max: cfg.lmax, iterations: cfg.iters, seed: derive_seed(cfg.seed ^ 0x5052_4300, i as u64) };
        let o = prc(&model, &item.instance, &init, &prc_cfg)?;
        let final_obj = reported_objective(item, &o.solution)?;
        Ok((o.solution, init_obj, final_obj, o.trace, t.elapsed().as_secs_f64()))
    };
    let results: Vec<Result<_>> =
        if cfg.jobs > 1 { items.par_iter().enumerate().map(solve_one).collect() } else { items.iter().enumerate().map(solve_one).collect() };
    let mut rows = Vec::with_capacity(items.len());
    let mut trace_rows = Vec::new();
    let mut solved = Dataset::new(model.config.kind);
    for (item, r) in items.iter().zip(results) {
        let (sol, init_obj, final_obj, trace, secs) = r?;
        rows.push(format!("{},{init_obj},{final_obj},{},{secs:.3}", item.name, cfg.iters));
        for (k, v) in trace.iter().enumerate() {
            trace_rows.push(format!("{},{k},{v}", item.name));
        }
        let mut rec = crate::instances::Record::new(item.instance.clone());
        rec.history = vec![objective(&item.instance, &sol)?];
        rec.solution = Some(sol);
        solved.records.push(rec);
    }
    write_lines(&out, "instance,init_obj,final_obj,iters,seconds", &rows)?;
    solved.save(out.with_extension("ds"))?;
    if cfg.trace {
        write_lines(&out.with_extension("trace.csv"), "instance,iteration,objective", &trace_rows)?;
    }
    println!("solved instances={} iters={} results={}", items.len(), cfg.iters, out.display());
    Ok(())
}

/// `(obj - ref) / ref`.
pub fn gap(obj: f64, reference: f64) -> f64 {
    (obj - reference) / reference
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let results = cfg.resolve_path(cfg.required(&cfg.results, "results")?);
    let reference = cfg.resolve_path(cfg.required(&cfg.reference, "reference")?);
    let text = std::fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let obj = f.get(2).and_then(|v| v.trim().parse().ok()).ok_or_else(|| anyhow!("{}:{}: malformed row", results.display(), i + 1))?;
        rows.push((f[0].to_string(), obj));
    }
    let refs: Vec<f64> = std::fs::read_to_string(&reference)
        .with_context(|| format!("reading {}", reference.display()))?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| anyhow!("{}:{}: not a number", reference.display(), i + 1)))
        .collect::<Result<_>>()?;
    if refs.len() != rows.len() {
        bail!("instance count mismatch: {} results, {} reference objectives", rows.len(), refs.len());
    }
    let out = cfg.output_or("gaps.csv");
    check_writable(&out, cfg.force)?;
    let mut lines = Vec::new();
    let mut sum = 0.0;
    println!("{:>10} {:>14} {:>14} {:>9}", "instance", "objective", "reference", "gap");
    for ((name, obj), r) in rows.iter().zip(&refs) {
        let g = gap(*obj, *r);
        sum += g;
        println!("{name:>10} {obj:>14.4} {r:>14.4} {:>8.2}%", 100.0 * g);
        lines.push(format!("{name},{obj},{r},{g}"));
    }
    let mean = sum / rows.len().max(1) as f64;
    println!("{:>10} {:>14} {:>14} {:>8.2}%", "mean", "", "", 100.0 * mean);
    write_lines(&out, "instance,objective,reference,gap", &lines)?;
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let model = match &cfg.ckpt {
        Some(_) => load_model(cfg)?,
        None => Model::new(cfg.model_config(), cfg.seed)?,
    };
    let out = cfg.output_or("bench.csv");
    check_writable(&out, cfg.force)?;
    let report = bench_memory(&model, &cfg.sizes, cfg.variant, cfg.budget_mb << 20, cfg.seed)?;
    report.write_csv(&out)?;
    for e in &report.entries {
        match e.peak_bytes {
            Some(b) => println!("size={} variant={} peak_bytes={b} step_ms={:.3}", e.size, cfg.variant, e.step_ms.unwrap_or(0.0)),
            None => println!("size={} variant={} out_of_budget", e.size, cfg.variant),
        }
    }
    Ok(())
}

pub fn cmd_diag(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let out = cfg.output_or("diag.csv");
    check_writable(&out, cfg.force)?;
    let insts = heldout_set(model.config.kind, cfg.n, cfg.capacity, cfg.count, cfg.seed)?;
    let p = prob_distance_profile(&model, &insts, cfg.steps, cfg.buckets, 10.min(cfg.n - 1), cfg.seed)?;
    p.write_csv(&out)?;
    println!("diag steps={} buckets={} near5_beats_far5={:.4}", p.steps.len(), cfg.buckets, p.near_beats_far(5));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("nco").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "n = 50\nseed = 3\nkind = \"cvrp\"\n").unwrap();
        let cli = parse(&["--config", path.to_str().unwrap(), "gen", "-n", "70"]);
        let Command::Gen(o) = &cli.command else { panic!() };
        let cfg = RunConfig::resolve(&cli, o).unwrap();
        assert_eq!(cfg.n, 70);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.kind, ProblemKind::Cvrp);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "nodes = 50\n").unwrap();
        let cli = parse(&["--config", path.to_str().unwrap(), "gen"]);
        let Command::Gen(o) = &cli.command else { panic!() };
        assert!(RunConfig::resolve(&cli, o).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cli = parse(&["warmup", "--tsp", "-n", "10", "--lr", "0.001"]);
        let Command::Warmup(o) = &cli.command else { panic!() };
        let cfg = RunConfig::resolve(&cli, o).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn gap_arithmetic() {
        assert_eq!(gap(10.0, 10.0), 0.0);
        assert!((gap(11.0, 10.0) - 0.1).abs() < 1e-12);
        assert!(gap(9.0, 10.0) < 0.0);
    }

    #[test]
    fn zero_count_is_invalid() {
        let cli = parse(&["gen", "--count", "0"]);
        let Command::Gen(o) = &cli.command else { panic!() };
        assert!(RunConfig::resolve(&cli, o).is_err());
    }
}
