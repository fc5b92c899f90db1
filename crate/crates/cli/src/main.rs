use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gccs::attacks::{AttackConfig, AttackKind, TargetRule};
use gccs::data::{Dataset, Split};
use gccs::harness::{
    attack_sweep, evaluate, export_latent, latent_csv, mu_csv, sweep_csv, sweep_mu, train, DataConfig, RunRecord,
    TrainConfig, TrainMode,
};
use gccs::model::{Checkpoint, LossKind, SurrogateKind};
use gccs::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gccs", version, about = "GCCS training, evaluation and adversarial sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier and write its checkpoint.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Run record (JSON) output path.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Clean accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Accuracy under attack over an ε grid.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Curve output (CSV).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// One training run per μ_T, reporting test accuracy.
    SweepMu {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated μ_T values within [0.5, 300].
        #[arg(long, value_delimiter = ',')]
        mu_grid: Option<Vec<f64>>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Latent vectors with labels and predictions as CSV.
    ExportLatent {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Only these classes (comma-separated).
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Contents of a `--config` TOML file: training fields at the top level,
/// attack settings under `[attack]`.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    train: TrainConfig,
    attack: AttackFile,
    epsilons: Option<Vec<f64>>,
    mu_grid: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AttackFile {
    kind: Option<AttackKind>,
    steps: Option<usize>,
    step_size: Option<f64>,
    target: Option<String>,
    surrogate: Option<SurrogateKind>,
    random_start: Option<bool>,
    signed_theta: Option<bool>,
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with IDX files (train-images-idx3-ubyte, ...).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Use the synthetic 3-blob dataset.
    #[arg(long, conflicts_with = "data_dir")]
    blobs: bool,
    /// Which split to evaluate on.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hidden widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// gccs | cross-entropy
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    shrinkage: Option<f64>,
    #[arg(long, conflicts_with = "no_grad_clip")]
    grad_clip: Option<f64>,
    #[arg(long)]
    no_grad_clip: bool,
    /// Plain shuffled batches instead of class-stratified ones.
    #[arg(long, conflicts_with = "stratified")]
    shuffled: bool,
    #[arg(long)]
    stratified: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    fine_tune: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct AttackArgs {
    /// pgd | tgsm | jsma
    #[arg(long)]
    kind: Option<AttackKind>,
    /// Ascending, comma-separated ε grid.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Per-step size relative to each sample's ‖x‖∞.
    #[arg(long)]
    step_size: Option<f64>,
    /// `next` or a class index.
    #[arg(long)]
    target: Option<String>,
    /// distance | logit-ce
    #[arg(long)]
    surrogate: Option<SurrogateKind>,
    #[arg(long)]
    random_start: bool,
    #[arg(long)]
    signed_theta: bool,
    #[arg(long)]
    attack_seed: Option<u64>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split '{other}' (expected train | test)")),
    }
}

fn parse_target(s: &str) -> Result<TargetRule> {
    match s {
        "next" | "next-class" => Ok(TargetRule::NextClass),
        k => k
            .parse()
            .map(TargetRule::Fixed)
            .map_err(|_| Error::config(format!("target must be 'next' or a class index, got '{k}'"))),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

impl DataArgs {
    fn apply(&self, data: &mut DataConfig) {
        if self.blobs {
            *data = DataConfig::default();
        }
        if let Some(dir) = &self.data_dir {
            *data = DataConfig::Idx {
                dir: dir.clone(),
                train_limit: None,
                test_limit: None,
            };
        }
        if let DataConfig::Idx { train_limit, test_limit, .. } = data {
            if self.train_limit.is_some() {
                *train_limit = self.train_limit;
            }
            if self.test_limit.is_some() {
                *test_limit = self.test_limit;
            }
        }
    }

    fn resolve(&self) -> Result<(FileConfig, Dataset)> {
        let mut file = load_file_config(self.config.as_deref())?;
        self.apply(&mut file.train.data);
        let data = file.train.data.load(self.split)?;
        Ok((file, data))
    }
}

impl TrainArgs {
    fn resolve(&self) -> Result<FileConfig> {
        let mut file = load_file_config(self.data.config.as_deref())?;
        let c = &mut file.train;
        self.data.apply(&mut c.data);
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        set!(hidden, loss, lambda, mu, sigma, epochs, batch_size, lr, momentum, weight_decay, keep_prob, shrinkage, seed);
        if let Some(v) = self.grad_clip {
            c.grad_clip = Some(v);
        }
        if self.no_grad_clip {
            c.grad_clip = None;
        }
        if self.shuffled {
            c.stratified = Some(false);
        }
        if self.stratified {
            c.stratified = Some(true);
        }
        if let Some(p) = &self.fine_tune {
            c.mode = TrainMode::FineTune { checkpoint: p.clone() };
        }
        c.validate()?;
        Ok(file)
    }
}

impl AttackArgs {
    fn resolve(&self, file: &FileConfig) -> Result<(AttackConfig, Vec<f64>)> {
        let a = &file.attack;
        let kind = self.kind.or(a.kind).unwrap_or(AttackKind::Pgd);
        let mut cfg = AttackConfig::new(kind, 0.0);
        if let Some(s) = self.steps.or(a.steps) {
            cfg.steps = s;
        }
        cfg.step_size = self.step_size.or(a.step_size);
        if let Some(t) = self.target.as_ref().or(a.target.as_ref()) {
            cfg.target_rule = parse_target(t)?;
        }
        if let Some(s) = self.surrogate.or(a.surrogate) {
            cfg.surrogate = s;
        }
        cfg.random_start = self.random_start || a.random_start.unwrap_or(false);
        cfg.signed_theta = self.signed_theta || a.signed_theta.unwrap_or(false);
        cfg.seed = self.attack_seed.or(a.seed).unwrap_or(0);
        let grid = self
            .epsilons
            .clone()
            .or_else(|| file.epsilons.clone())
            .unwrap_or_else(|| default_grid(kind));
        cfg.validate()?;
        Ok((cfg, grid))
    }
}

fn default_grid(kind: AttackKind) -> Vec<f64> {
    match kind {
        AttackKind::Pgd => vec![0.0, 0.01, 0.03, 0.06, 0.1],
        AttackKind::Tgsm => vec![0.0, 5e-4, 1e-3, 2e-3],
        AttackKind::Jsma => vec![0.0, 0.01, 0.03, 0.06, 0.1],
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_record(record: &RunRecord, path: Option<&PathBuf>) -> Result<()> {
    if let Some(p) = path {
        record.save(p)?;
        log::info!("run record written to {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { train: args, out, record } => {
            let file = args.resolve()?;
            let (ckpt, rec) = train(&file.train)?;
            ckpt.save(&out)?;
            println!(
                "trained {} for {} epochs: test accuracy {:.2}% ({:.1}s)",
                file.train.loss,
                file.train.epochs,
                rec.clean_accuracy.unwrap_or(f64::NAN),
                rec.timing.train_seconds
            );
            save_record(&rec, record.as_ref())
        }
        Command::Eval { checkpoint, data, record } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (_, ds) = data.resolve()?;
            let ev = evaluate(&ckpt, &ds)?;
            println!("accuracy {:.2}% on {} samples", ev.accuracy, ds.len());
            let mut rec = RunRecord::new(None);
            rec.clean_accuracy = Some(ev.accuracy);
            save_record(&rec, record.as_ref())
        }
        Command::Attack { checkpoint, data, attack, csv, record } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (file, ds) = data.resolve()?;
            let (cfg, grid) = attack.resolve(&file)?;
            let sweep = attack_sweep(&ckpt, &ds, &cfg, &grid)?;
            let text = sweep_csv(&sweep.rows);
            print!("{text}");
            if let Some(p) = csv {
                write(&p, &text)?;
            }
            let mut rec = RunRecord::new(None);
            rec.clean_accuracy = Some(evaluate(&ckpt, &ds)?.accuracy);
            rec.attacks.push(sweep);
            save_record(&rec, record.as_ref())
        }
        Command::SweepMu { train: args, mu_grid, csv, record } => {
            let file = args.resolve()?;
            let grid = mu_grid
                .or(file.mu_grid.clone())
                .unwrap_or_else(|| vec![0.5, 2.0, 20.0, 70.0, 300.0]);
            let rows = sweep_mu(&file.train, &grid)?;
            let text = mu_csv(&rows);
            print!("{text}");
            if let Some(p) = csv {
                write(&p, &text)?;
            }
            let mut rec = RunRecord::new(Some(file.train));
            rec.mu_sweep = rows;
            save_record(&rec, record.as_ref())
        }
        Command::ExportLatent { checkpoint, data, classes, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (_, ds) = data.resolve()?;
            let rows = export_latent(&ckpt, &ds, &classes)?;
            write(&out, &latent_csv(&rows, ckpt.model.latent_dim()))?;
            println!("{} latent rows written to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
