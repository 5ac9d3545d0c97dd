//! Command-line front end: `train`, `evaluate`, `task-sim`, `synth` and
//! `inspect`.
//!
//! Exit statuses: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fskg::evalkit::evaluate_split;
use fskg::kgdata::{load_dataset, synth_generate, write_bundle, Split, SynthSpec};
use fskg::metatrain::{task_similarity, train, Model};
use fskg::{Error, TrainConfig, TransferPool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.ndjson";

#[derive(Debug, Parser)]
#[command(name = "fskg", version, about = "Few-shot knowledge graph completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a model and write its checkpoint, config and log to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a trained checkpoint on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Also write report.json, report.txt and per_relation.tsv here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the task-similarity matrix as TSV.
    TaskSim {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`; a fresh model is used otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write task_sim.tsv here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        spec: SynthArgs,
    },
    /// Print dataset statistics.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Batch,
    AllTrain,
}

/// Optional overrides for every [`TrainConfig`] field.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with any subset of the config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub wl_depth: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long = "batch")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub transfer: Option<bool>,
    #[arg(long)]
    pub meta: Option<bool>,
    #[arg(long, value_enum)]
    pub transfer_pool: Option<PoolArg>,
    #[arg(long)]
    pub query_size: Option<usize>,
    #[arg(long)]
    pub context_cap: Option<usize>,
    #[arg(long)]
    pub false_contexts: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mp_neighbor_cap: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    /// Rank against raw candidate lists.
    #[arg(long = "raw", num_args = 0..=1, default_missing_value = "true")]
    pub raw_eval: Option<bool>,
    #[arg(long)]
    pub workers: Option<usize>,
}

impl ConfigArgs {
    /// Flag, then `base` (a config file or a trained model's config), then
    /// the built-in default.
    pub fn resolve_over(&self, base: TrainConfig) -> fskg::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => base,
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            shots, dim, margin, lambda, tau, wl_depth, lr, inner_lr, batch_size, warmup_steps, max_steps, eval_every,
            seed, transfer, meta, query_size, context_cap, false_contexts, heads, mp_neighbor_cap, pretrain_epochs,
            pretrain_lr, raw_eval, workers
        );
        if let Some(p) = self.transfer_pool {
            c.transfer_pool = match p {
                PoolArg::Batch => TransferPool::Batch,
                PoolArg::AllTrain => TransferPool::AllTrain,
            };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn resolve(&self) -> fskg::Result<TrainConfig> {
        self.resolve_over(TrainConfig::default())
    }
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().entities)]
    pub entities: usize,
    #[arg(long, default_value_t = SynthSpec::default().relations)]
    pub relations: usize,
    #[arg(long, default_value_t = SynthSpec::default().triples_per_relation)]
    pub triples_per_relation: usize,
    #[arg(long, default_value_t = SynthSpec::default().groups)]
    pub groups: usize,
    #[arg(long, default_value_t = SynthSpec::default().overlap)]
    pub overlap: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    pub noise: f64,
    #[arg(long, default_value_t = SynthSpec::default().valid_per_group)]
    pub valid_per_group: usize,
    #[arg(long, default_value_t = SynthSpec::default().test_per_group)]
    pub test_per_group: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            entities: self.entities,
            relations: self.relations,
            triples_per_relation: self.triples_per_relation,
            groups: self.groups,
            overlap: self.overlap,
            noise: self.noise,
            valid_per_group: self.valid_per_group,
            test_per_group: self.test_per_group,
        }
    }
}

fn create_dir(dir: &Path) -> fskg::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> fskg::Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

/// The config and restored model of a `train` output directory.
fn load_model(dir: &Path, bundle: &fskg::kgdata::DatasetBundle, args: &ConfigArgs) -> fskg::Result<(TrainConfig, Model)> {
    let trained = TrainConfig::from_file(&dir.join(CONFIG_FILE))?;
    let config = args.resolve_over(trained.clone())?;
    if (config.dim, config.heads) != (trained.dim, trained.heads) {
        return Err(Error::Config("dim and heads are fixed by the trained model".into()));
    }
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let mut model = Model::skeleton(bundle.num_entities(), bundle.num_relations(), &config)?;
    model.restore(&bytes)?;
    Ok((config, model))
}

/// Task-similarity matrix with relation names as headers, six decimals.
pub fn similarity_tsv(names: &[String], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("relation");
    for n in names {
        write!(out, "\t{n}").unwrap();
    }
    out.push('\n');
    for (n, row) in names.iter().zip(matrix) {
        out.push_str(n);
        for v in row {
            write!(out, "\t{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn execute(command: Command, stdout: &mut dyn std::io::Write) -> fskg::Result<()> {
    let print = |stdout: &mut dyn std::io::Write, text: &str| {
        stdout.write_all(text.as_bytes()).map_err(|e| Error::Validation(format!("standard output: {e}")))
    };
    match command {
        Command::Train { data, out, config } => {
            let config = config.resolve()?;
            let bundle = load_dataset(&data, &config)?;
            let mut log = Vec::new();
            let trained = train(&bundle, &config, &mut log)?;
            create_dir(&out)?;
            write(&out, CONFIG_FILE, config.to_toml_string())?;
            write(&out, LOG_FILE, &log)?;
            write(&out, CHECKPOINT_FILE, trained.model.checkpoint_bytes())?;
            match (trained.best_step, &trained.best) {
                (Some(step), Some(best)) => log::info!("best validation MRR {:.4} at step {step}", best.mrr),
                _ => log::info!("no validation round ran; kept the final model"),
            }
            Ok(())
        }
        Command::Evaluate { data, model, split, format, out, config } => {
            let base = TrainConfig::from_file(&model.join(CONFIG_FILE))?;
            let bundle = load_dataset(&data, &base)?;
            let (config, model) = load_model(&model, &bundle, &config)?;
            let report = evaluate_split(&bundle, split.into(), &model, &config, config.transfer)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir, "report.json", report.to_json())?;
                write(&dir, "report.txt", report.to_text())?;
                write(&dir, "per_relation.tsv", report.to_tsv())?;
            }
            let text = match format {
                Format::Json => report.to_json() + "\n",
                Format::Text => report.to_text(),
            };
            print(stdout, &text)
        }
        Command::TaskSim { data, model, out, config } => {
            let (bundle, config, model) = match model {
                Some(dir) => {
                    let base = TrainConfig::from_file(&dir.join(CONFIG_FILE))?;
                    let bundle = load_dataset(&data, &base)?;
                    let (config, model) = load_model(&dir, &bundle, &config)?;
                    (bundle, config, model)
                }
                None => {
                    let config = config.resolve()?;
                    let bundle = load_dataset(&data, &config)?;
                    let model = Model::init(&bundle, &config)?;
                    (bundle, config, model)
                }
            };
            let (relations, matrix) = task_similarity(&model, &bundle, &config)?;
            let names: Vec<String> = relations.iter().map(|&r| bundle.graph.relations.name(r).to_string()).collect();
            let tsv = similarity_tsv(&names, &matrix);
            match out {
                Some(dir) => {
                    create_dir(&dir)?;
                    write(&dir, "task_sim.tsv", tsv)
                }
                None => print(stdout, &tsv),
            }
        }
        Command::Synth { out, spec } => {
            let bundle = synth_generate(&spec.spec(), &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
            create_dir(&out)?;
            write_bundle(&bundle, &out)
        }
        Command::Inspect { data } => {
            let bundle = load_dataset(&data, &TrainConfig::default())?;
            let s = bundle.stats();
            print(stdout, &format!("{s}\ntrain={} valid={} test={}\n", s.train_tasks, s.valid_tasks, s.test_tasks))
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status. Results go to `stdout`, diagnostics to standard error.
pub fn run<I, T>(argv: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => {
            let _ = stdout.flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
