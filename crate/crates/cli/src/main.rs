use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use rankdistill::data::{self, make_splits, Dataset, FeatureSubset};
use rankdistill::distill::{
    build_secondary_dataset, fidelity, train_interpreter, ExternalScoreTable, FeatureRegime, InterpreterSpec,
    ScoreSource,
};
use rankdistill::harness::{
    run_experiment, train_base, BaseKind, ExperimentConfig, FidelityReport, HarnessError, ReportRow,
};
use rankdistill::ltr::{Model, Node, SavedModel};

#[derive(Parser)]
#[command(name = "rankdistill", version, about = "Distil blackbox rankers into tree-ensemble interpreters")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Listwise,
    Pairwise,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset into base, interpreter, validation and test regions.
    ///
    /// Writes `splits/<region>.txt` manifests and `splits/<region>.letor` data.
    Split {
        /// LETOR dataset; overrides the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a base ranker.
    TrainBase {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Overrides the config's base kind.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        /// Model path (default: <out>/models/base.model).
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Write a `query_id<TAB>doc_ordinal<TAB>score` table for a dataset.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Destination (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Relabel queries from a base ranking into a secondary dataset.
    ///
    /// Writes the LETOR file plus a `.sidecar.tsv` of the original labels.
    Relabel {
        /// Base model file or score table.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Destination (default: <out>/secondary.letor).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train an interpreter on secondary data.
    TrainInterpreter {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Restrict to an interpretable feature subset (one 1-based id per line).
        #[arg(long)]
        subset: Option<PathBuf>,
        /// Model path (default: <out>/models/interpreter.model).
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Fidelity of one score source against another on a labeled dataset.
    Evaluate {
        /// Reference ranking: model file or score table.
        #[arg(long)]
        base: PathBuf,
        /// Ranking under test: model file or score table.
        #[arg(long)]
        interpreter: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the full grid and write the run directory.
    Experiment,
    /// Print tree and feature-usage statistics of a model.
    InspectModel {
        model: PathBuf,
        /// Also print every tree.
        #[arg(long)]
        dump: bool,
    },
}

type Result<T> = std::result::Result<T, HarnessError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let io = |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(SavedModel::from_text(&read_text(path)?)?.model)
}

/// A model file (JSON) or a tab-separated score table, told apart by the
/// first non-blank character.
fn load_source(path: &Path) -> Result<Box<dyn ScoreSource>> {
    let text = read_text(path)?;
    if text.trim_start().starts_with('{') {
        Ok(Box::new(SavedModel::from_text(&text)?.model))
    } else {
        Ok(Box::new(ExternalScoreTable::parse(&text)?))
    }
}

fn load_optional(path: Option<&PathBuf>, feature_dim: usize) -> Result<Dataset> {
    match path {
        Some(p) => Ok(data::load_dataset(p)?),
        None => Ok(Dataset {
            groups: Vec::new(),
            feature_dim,
        }),
    }
}

fn print_report(report: &FidelityReport, format: Format) {
    match format {
        Format::Csv => print!("{}", report.to_csv()),
        Format::Md => print!("{}", report.to_markdown()),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    let out = config.output_dir.clone();
    match &cli.command {
        Command::Split { data } => {
            if let Some(path) = data {
                config.data.path = Some(path.clone());
                config.data.synthetic = None;
            }
            let dataset = config.load_dataset()?;
            let plan = config.split_plan();
            let splits = make_splits(&dataset, &plan)?;
            let regions = splits.regions(&plan);
            let datasets = std::iter::once(&splits.base_train)
                .chain(&splits.interpreter_splits)
                .chain([&splits.validation, &splits.test]);
            for ((name, ids), region) in regions.iter().zip(datasets) {
                let mut manifest = Vec::new();
                data::write_split_manifest(&[(name.clone(), ids.clone())], &mut manifest)
                    .expect("in-memory write");
                write_file(&out.join(format!("splits/{name}.txt")), &manifest)?;
                let mut letor = Vec::new();
                region.write_letor(&mut letor).expect("in-memory write");
                write_file(&out.join(format!("splits/{name}.letor")), &letor)?;
                println!("{name}\t{}", ids.len());
            }
        }
        Command::TrainBase {
            train,
            validation,
            kind,
            model_out,
        } => {
            if let Some(kind) = kind {
                config.base.kind = match kind {
                    KindArg::Listwise => BaseKind::Listwise,
                    KindArg::Pairwise => BaseKind::Pairwise,
                };
            }
            let params = config.base_params();
            params.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            let train = data::load_dataset(train)?;
            let validation = load_optional(validation.as_ref(), train.feature_dim)?;
            let model = train_base(config.base.kind, &train, &validation, &params)?;
            let path = model_out.clone().unwrap_or_else(|| out.join("models/base.model"));
            write_file(&path, SavedModel::new(model, Some(params)).to_text().as_bytes())?;
            info!("wrote {}", path.display());
        }
        Command::Score { model, data, output } => {
            let model = load_model(model)?;
            let dataset = data::load_dataset(data)?;
            let table = ExternalScoreTable::from_source(&model, &dataset)?;
            let mut text = Vec::new();
            table.write(&mut text).expect("in-memory write");
            match output {
                Some(path) => write_file(path, &text)?,
                None => print!("{}", String::from_utf8_lossy(&text)),
            }
        }
        Command::Relabel { base, data, output } => {
            config.labels.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            let base = load_source(base)?;
            let dataset = data::load_dataset(data)?;
            let secondary = build_secondary_dataset(&*base, &dataset, &config.labels)?;
            let path = output.clone().unwrap_or_else(|| out.join("secondary.letor"));
            let mut letor = Vec::new();
            secondary.dataset.write_letor(&mut letor).expect("in-memory write");
            write_file(&path, &letor)?;
            let mut sidecar = path.clone().into_os_string();
            sidecar.push(".sidecar.tsv");
            write_file(Path::new(&sidecar), secondary.sidecar_text().as_bytes())?;
            info!("wrote {}", path.display());
        }
        Command::TrainInterpreter {
            train,
            validation,
            subset,
            model_out,
        } => {
            let params = config.interpreter_params();
            params.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            let regime = match subset {
                Some(p) => FeatureRegime::Subset(FeatureSubset::load(p).map_err(|e| HarnessError::Config(e.to_string()))?),
                None => FeatureRegime::All,
            };
            let train = data::load_dataset(train)?;
            if let FeatureRegime::Subset(s) = &regime {
                s.validate_for(train.feature_dim).map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            let validation = load_optional(validation.as_ref(), train.feature_dim)?;
            let model = train_interpreter(&train, &validation, &InterpreterSpec { regime, params: params.clone() })?;
            let path = model_out.clone().unwrap_or_else(|| out.join("models/interpreter.model"));
            write_file(&path, SavedModel::new(model, Some(params)).to_text().as_bytes())?;
            info!("wrote {}", path.display());
        }
        Command::Evaluate { base, interpreter, data } => {
            let base = load_source(base)?;
            let interpreter = load_source(interpreter)?;
            let dataset = data::load_dataset(data)?;
            let outcome = fidelity(&*interpreter, &*base, &dataset, &config.eval)?;
            let s = outcome.summary;
            let report = FidelityReport {
                k: config.eval.k,
                rows: vec![ReportRow {
                    split: dataset.num_queries().to_string(),
                    regime: "eval".to_string(),
                    ndcg_at_k: s.ndcg_at_k,
                    precision_at_k: s.precision_at_k,
                    tau: s.tau,
                    tau_at_k: s.tau_at_k,
                }],
            };
            print_report(&report, cli.format);
        }
        Command::Experiment => {
            let (report, manifest) = run_experiment(&config)?;
            info!("run written to {} ({:?})", out.display(), manifest.status);
            print_report(&report, cli.format);
        }
        Command::InspectModel { model, dump } => inspect(&load_model(model)?, *dump),
    }
    Ok(())
}

fn inspect(model: &Model, dump: bool) {
    let Some(ensemble) = model.as_ensemble() else {
        if let Model::PairwiseNet(net) = model {
            println!("kind: pairwise network");
            println!("inputs: {}", net.input_dim);
            println!("hidden units: {}", net.hidden_size);
            println!("parameters: {}", net.num_params());
        }
        return;
    };
    let leaves: Vec<usize> = ensemble.trees.iter().map(|t| t.num_leaves()).collect();
    println!("kind: tree ensemble");
    println!("features: {}", ensemble.feature_dim);
    println!("trees: {}", ensemble.len());
    println!("learning rate: {}", ensemble.learning_rate);
    println!("leaves: {}", leaves.iter().sum::<usize>());
    let usage = ensemble.feature_usage();
    let mut used: Vec<(usize, usize)> = usage.iter().copied().enumerate().filter(|&(_, n)| n > 0).collect();
    used.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    println!("features used: {} of {}", used.len(), ensemble.feature_dim);
    println!("feature\tsplits");
    for (column, count) in used {
        println!("{}\t{count}", column + 1);
    }
    if dump {
        for (i, tree) in ensemble.trees.iter().enumerate() {
            println!("tree {i}:");
            dump_node(&tree.nodes, 0, 1);
        }
    }
}

fn dump_node(nodes: &[Node], at: usize, depth: usize) {
    let pad = "  ".repeat(depth);
    match &nodes[at] {
        Node::Leaf { value } => println!("{pad}leaf {value:.6}"),
        Node::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            println!("{pad}if f{} <= {threshold}", feature + 1);
            dump_node(nodes, *left, depth + 1);
            println!("{pad}else");
            dump_node(nodes, *right, depth + 1);
        }
    }
}
