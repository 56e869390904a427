use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dimrisk::dataset::{generate_synthetic, inject_dimension_noise, load_dataset, save_dataset, split, Dataset};
use dimrisk::eval::{auroc, evaluate, OverlapCurve};
use dimrisk::influence::{global_tracin_self, self_influence, SelfInfluenceTable};
use dimrisk::model::{fit_head, load_head, per_dim_loss, save_head, Scope, Strategy};
use dimrisk::pipeline::{render_text, run_pipeline, write_report, ExperimentReport, PipelineConfig, RefineStrategy};
use dimrisk::refine::{ddp_select, ddr_weights, global_prune_select, loss_prune_select, PruneResult, WeightMatrix};
use dimrisk::Error;

#[derive(Parser)]
#[command(
    name = "dimrisk",
    version,
    about = "Dimension-wise self-influence for multi-head regression"
)]
struct Cli {
    /// Pipeline config (TOML); flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-dimensional regression corpus.
    Gen(GenArgs),
    /// Corrupt labels of selected dimensions by uniform replacement.
    Inject(InjectArgs),
    /// Split a dataset into train/val/test files.
    Split(SplitArgs),
    /// Fit a regression head.
    Fit(FitArgs),
    /// Compute per-dimension self-influence scores.
    Score(ScoreArgs),
    /// Select samples to drop.
    Prune(PruneArgs),
    /// Compute per-dimension sample weights.
    Reweight(ReweightArgs),
    /// AUROC of each score column against the corruption mask.
    DetectNoise(DetectArgs),
    /// Per-dimension Spearman of a head on a dataset.
    Evaluate(EvaluateArgs),
    /// Render an experiment report or an overlap curve.
    Report(ReportArgs),
    /// Run the full experiment pipeline.
    Run(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    n_dims: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    noise_sd: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    label_scale: Option<Vec<f64>>,
    #[arg(long)]
    feature_scale_sd: Option<f64>,
    #[arg(long)]
    teacher_seed: Option<u64>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// train,val,test
    #[arg(long, value_delimiter = ',', num_args = 3)]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Weight matrix JSON from `reweight`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    ridge_alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scope: Option<Scope>,
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Score table (JSONL).
    #[arg(short, long)]
    out: PathBuf,
    /// Also write `id,dim,score` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PruneMethod {
    Ddp,
    Loss,
    Global,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ddp")]
    method: PruneMethod,
    /// Per-dimension ratio, or the total ratio for `--method global`.
    #[arg(long)]
    rho: Option<f64>,
    /// Needed by `loss` and `global`.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReweightArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Dataset carrying the corruption mask.
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// `report.json` from `run`.
    #[arg(long, conflicts_with = "prune")]
    input: Option<PathBuf>,
    /// DDP result from `prune`; renders its overlap curve.
    #[arg(long)]
    prune: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    refine: Option<RefineKind>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    scope: Option<Scope>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineKind {
    None,
    Ddp,
    Ddr,
    LossPrune,
    GlobalPrune,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            e if e.is_numerical() => Failure::Numerical(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn context<T>(stage: &str, r: dimrisk::Result<T>) -> CliResult<T> {
    r.map_err(|e| match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{stage}: {m}")),
        Failure::Data(m) => Failure::Data(format!("{stage}: {m}")),
        Failure::Numerical(m) => Failure::Numerical(format!("{stage}: {m}")),
    })
}

fn io_err(path: &Path, e: io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    let mut out = create(path)?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| io_err(path, e))
}

// a closed pipe (`| head`) is not an error worth reporting
fn say(text: &str) {
    let _ = io::stdout().lock().write_all(text.as_bytes());
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => write_text(path, text),
        None => {
            say(&format!("{text}\n"));
            Ok(())
        }
    }
}

fn read_scores(path: &Path) -> CliResult<SelfInfluenceTable> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    context("reading scores", SelfInfluenceTable::read_jsonl(BufReader::new(file)))
}

fn read_data(path: &Path) -> CliResult<Dataset> {
    context("reading dataset", load_dataset(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("values serialize")
}

fn check_ids(what: &str, ids: &[String], ds: &Dataset) -> CliResult {
    if ids != ds.ids().as_slice() {
        return Err(Failure::Data(format!(
            "{what} rows do not match the dataset's sample ids in order"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(path) => context("reading config", PipelineConfig::load(path))?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Gen(a) => {
            let s = &mut cfg.synth;
            s.n_samples = a.n_samples.unwrap_or(s.n_samples);
            s.feature_dim = a.feature_dim.unwrap_or(s.feature_dim);
            s.n_dims = a.n_dims.unwrap_or(s.n_dims);
            s.label_noise_sd = a.noise_sd.unwrap_or(std::mem::take(&mut s.label_noise_sd));
            s.label_scale = a.label_scale.unwrap_or(std::mem::take(&mut s.label_scale));
            s.feature_scale_sd = a.feature_scale_sd.unwrap_or(s.feature_scale_sd);
            s.teacher_seed = a.teacher_seed.unwrap_or(s.teacher_seed);
            s.sample_seed = a.sample_seed.unwrap_or(s.sample_seed);
            let ds = context("gen", generate_synthetic(s))?;
            context("gen", save_dataset(&ds, &a.out))
        }
        Command::Inject(a) => {
            let ds = read_data(&a.data)?;
            let n = &cfg.noise;
            let dims = a.dims.unwrap_or_else(|| n.dims.clone());
            let noisy = context(
                "inject",
                inject_dimension_noise(&ds, a.rate.unwrap_or(n.rate), &dims, a.seed.unwrap_or(n.seed)),
            )?;
            context("inject", save_dataset(&noisy, &a.out))
        }
        Command::Split(a) => {
            let ds = read_data(&a.data)?;
            let fractions = match a.fractions {
                Some(f) => (f[0], f[1], f[2]),
                None => cfg.split.fractions,
            };
            let (train, val, test) = context("split", split(&ds, fractions, a.seed.unwrap_or(cfg.split.seed)))?;
            for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
                context("split", save_dataset(part, a.out_dir.join(format!("{name}.jsonl"))))?;
            }
            Ok(())
        }
        Command::Fit(a) => {
            let ds = read_data(&a.data)?;
            let t = &mut cfg.train;
            t.strategy = a.strategy.unwrap_or(t.strategy);
            t.lambda = a.lambda.unwrap_or(std::mem::take(&mut t.lambda));
            t.ridge_alpha = a.ridge_alpha.unwrap_or(t.ridge_alpha);
            t.lr = a.lr.unwrap_or(t.lr);
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.seed = a.seed.unwrap_or(t.seed);
            t.hidden_dim = a.hidden_dim.or(t.hidden_dim);
            let weights = match &a.weights {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                    let w = context("reading weights", WeightMatrix::from_json(&text))?;
                    check_ids("weight", &w.sample_ids, &ds)?;
                    Some(w.weights)
                }
                None => None,
            };
            let head = context("fit", fit_head(&ds, weights.as_ref(), t))?;
            context("fit", save_head(&head, &a.out))
        }
        Command::Score(a) => {
            let head = context("reading head", load_head(&a.head))?;
            let ds = read_data(&a.data)?;
            let inf = &mut cfg.influence;
            inf.scope = a.scope.unwrap_or(inf.scope);
            inf.lambda = a.lambda.unwrap_or(std::mem::take(&mut inf.lambda));
            let table = context("score", self_influence(&head, &ds, inf))?;
            context("score", table.write_jsonl(create(&a.out)?))?;
            if let Some(csv) = &a.csv {
                context("score", table.write_csv(create(csv)?))?;
            }
            Ok(())
        }
        Command::Prune(a) => {
            let default_rho = match cfg.refine {
                RefineStrategy::Ddp { rho } | RefineStrategy::LossPrune { rho } => rho,
                RefineStrategy::GlobalPrune { rho_total } => rho_total,
                _ => dimrisk::refine::DEFAULT_RHO,
            };
            let rho = a.rho.unwrap_or(default_rho);
            let head_and_data = || -> CliResult<_> {
                let (Some(h), Some(d)) = (&a.head, &a.data) else {
                    return Err(Failure::Usage("this method needs --head and --data".into()));
                };
                Ok((context("reading head", load_head(h))?, read_data(d)?))
            };
            let result = match a.method {
                PruneMethod::Ddp => {
                    let Some(scores) = &a.scores else {
                        return Err(Failure::Usage("ddp needs --scores".into()));
                    };
                    context("prune", ddp_select(&read_scores(scores)?, rho))?
                }
                PruneMethod::Loss => {
                    let (head, ds) = head_and_data()?;
                    let losses = context("prune", per_dim_loss(&head, &ds))?;
                    context("prune", loss_prune_select(&losses, rho))?
                }
                PruneMethod::Global => {
                    let (head, ds) = head_and_data()?;
                    let global = context("prune", global_tracin_self(&head, &ds, &cfg.influence))?;
                    context("prune", global_prune_select(&ds.ids(), &global, rho))?
                }
            };
            write_text(&a.out, &to_json(&result))?;
            if let Some(csv) = &a.csv {
                context("prune", result.write_csv(create(csv)?))?;
            }
            eprintln!(
                "removed {} of {} samples ({:.3}%)",
                result.removed_ids.len(),
                result.n_samples(),
                100.0 * result.removal_ratio()
            );
            Ok(())
        }
        Command::Reweight(a) => {
            let (mut tau, mut eps) = (dimrisk::refine::DEFAULT_TEMPERATURE, dimrisk::refine::DEFAULT_EPSILON);
            if let RefineStrategy::Ddr { temperature, epsilon } = cfg.refine {
                (tau, eps) = (temperature, epsilon);
            }
            let scores = read_scores(&a.scores)?;
            let weights = context(
                "reweight",
                ddr_weights(&scores, a.temperature.unwrap_or(tau), a.epsilon.unwrap_or(eps)),
            )?;
            write_text(&a.out, &context("reweight", weights.to_json())?)?;
            if let Some(csv) = &a.csv {
                context("reweight", weights.write_csv(create(csv)?))?;
            }
            Ok(())
        }
        Command::DetectNoise(a) => {
            let scores = read_scores(&a.scores)?;
            let ds = read_data(&a.data)?;
            check_ids("score", &scores.sample_ids, &ds)?;
            if !ds.has_corruption_mask() {
                return Err(Failure::Data(
                    "detect-noise: dataset has no corruption mask; AUROC needs corrupted and clean samples".into(),
                ));
            }
            let per_dim: Vec<Option<f64>> = (0..scores.n_dims())
                .map(|k| auroc(&scores.column(k), &ds.corruption_column(k)).ok())
                .collect();
            if per_dim.iter().all(Option::is_none) {
                return Err(Failure::Data(
                    "detect-noise: every dimension is single-class (all clean or all corrupted); AUROC is undefined"
                        .into(),
                ));
            }
            for (k, v) in per_dim.iter().enumerate() {
                if v.is_none() {
                    eprintln!("warning: {} is single-class, AUROC undefined", ds.dim_names()[k]);
                }
            }
            let doc = json!({ "dims": ds.dim_names(), "auroc": per_dim });
            emit(a.out.as_deref(), &to_json(&doc))
        }
        Command::Evaluate(a) => {
            let head = context("reading head", load_head(&a.head))?;
            let ds = read_data(&a.data)?;
            let report = context("evaluate", evaluate(&head, &ds))?;
            emit(a.out.as_deref(), &to_json(&report))
        }
        Command::Report(a) => match (&a.input, &a.prune) {
            (Some(path), _) => {
                let report: ExperimentReport = read_json(path)?;
                if let Some(dir) = &a.out_dir {
                    context("report", write_report(&report, None, None, dir))?;
                }
                say(&render_text(&report));
                Ok(())
            }
            (None, Some(path)) => {
                let prune: PruneResult = read_json(path)?;
                let order: Vec<usize> = (0..prune.per_dim_risk_sets.len()).collect();
                let curve = context("report", OverlapCurve::from_prune(&prune, &order))?;
                if let Some(dir) = &a.out_dir {
                    context("report", curve.write_csv(create(&dir.join("overlap.csv"))?))?;
                }
                let mut text = format!("cumulative removal ratio (%) at rho = {}\n", prune.rho);
                for (j, r) in curve.cumulative_ratios.iter().enumerate() {
                    text += &format!("{:>3} {:.4}\n", j + 1, 100.0 * r);
                }
                say(&text);
                Ok(())
            }
            (None, None) => Err(Failure::Usage("report needs --input or --prune".into())),
        },
        Command::Run(a) => {
            if let Some(dir) = a.out_dir {
                cfg.output_dir = Some(dir);
            }
            if cfg.output_dir.is_none() {
                cfg.output_dir = Some(PathBuf::from("dimrisk-out"));
            }
            if let Some(kind) = a.refine {
                cfg.refine = match kind {
                    RefineKind::None => RefineStrategy::None,
                    RefineKind::Ddp => RefineStrategy::Ddp {
                        rho: dimrisk::refine::DEFAULT_RHO,
                    },
                    RefineKind::Ddr => RefineStrategy::Ddr {
                        temperature: dimrisk::refine::DEFAULT_TEMPERATURE,
                        epsilon: dimrisk::refine::DEFAULT_EPSILON,
                    },
                    RefineKind::LossPrune => RefineStrategy::LossPrune {
                        rho: dimrisk::refine::DEFAULT_RHO,
                    },
                    RefineKind::GlobalPrune => RefineStrategy::GlobalPrune {
                        rho_total: dimrisk::refine::DEFAULT_RHO,
                    },
                };
            }
            match (&mut cfg.refine, a.rho, a.temperature) {
                (RefineStrategy::Ddp { rho } | RefineStrategy::LossPrune { rho }, Some(r), _) => *rho = r,
                (RefineStrategy::GlobalPrune { rho_total }, Some(r), _) => *rho_total = r,
                (RefineStrategy::Ddr { temperature, .. }, _, Some(t)) => *temperature = t,
                (_, None, None) => {}
                _ => {
                    return Err(Failure::Usage(
                        "--rho/--temperature do not apply to this refine strategy".into(),
                    ))
                }
            }
            cfg.train.strategy = a.strategy.unwrap_or(cfg.train.strategy);
            cfg.influence.scope = a.scope.unwrap_or(cfg.influence.scope);
            let report = match run_pipeline(&cfg) {
                Ok(report) => report,
                Err(e) => return context(&format!("{} stage", e.stage), Err(e.source)),
            };
            say(&render_text(&report));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
