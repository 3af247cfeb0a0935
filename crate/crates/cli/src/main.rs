use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pskd::harness::{
    self, evaluate, lambda_sweep, run_ablation_suite, seeds, AblationRowKind, Checkpoint, ExperimentConfig, RunResult,
    Runner, TeacherKind, TeacherSet, DEFAULT_LAMBDAS,
};
use pskd::oim::LookupTable;
use pskd::rng::checksum;
use pskd::synthscene::{generate_dataset, read_dataset, write_dataset, DatasetSplit};

/// Person-search training with detector and lookup-table distillation on
/// synthetic scenes.
#[derive(Parser)]
#[command(name = "pskd", version)]
struct Cli {
    /// Verify reproducibility and serialization invariants after the
    /// command; exit with status 2 if any fails.
    #[arg(long, global = true)]
    self_check: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Config,
    /// Generate the synthetic dataset described by the configuration.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Output directory for checkpoint, metrics, log and config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the lookup table of a checkpoint to a file.
    ExportLut {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train without distillation over a grid of identity-loss weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated λ_oim values.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS.to_vec())]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train teachers and the distillation ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Directory of previously trained teachers (`<name>.psck`); missing
        /// teachers are trained unless `--no-train-teachers` is given.
        #[arg(long)]
        teachers: Option<PathBuf>,
        #[arg(long)]
        no_train_teachers: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct DataArg {
    /// Dataset file from `gen-data`; generated from the configuration when
    /// absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArg {
    fn load(&self, cfg: &ExperimentConfig) -> Result<DatasetSplit> {
        let Some(p) = &self.data else {
            return Ok(generate_dataset(&cfg.dataset)?);
        };
        let d = read_dataset(p).with_context(|| format!("reading {}", p.display()))?;
        if d.num_labeled != cfg.dataset.num_labeled || d.image_size != cfg.dataset.image_size {
            bail!(
                "{} has {} labeled identities at {} px, configuration expects {} at {} px",
                p.display(),
                d.num_labeled,
                d.image_size,
                cfg.dataset.num_labeled,
                cfg.dataset.image_size
            );
        }
        Ok(d)
    }
}

/// Invariant failures collected by `--self-check`.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
}

impl Checks {
    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            log::info!("self-check ok: {what}");
        } else {
            log::error!("self-check FAILED: {what}");
            self.failures.push(what);
        }
    }

    fn run_invariants(&mut self, name: &str, r: &RunResult) -> Result<()> {
        let a = &r.outcome.audit;
        if a.frozen {
            self.expect(
                a.checksum_start == a.checksum_end && a.labeled_seen == a.skipped_writes,
                format!("{name}: frozen table unchanged and every labeled write skipped"),
            );
        }
        if let Some((before, after)) = &r.outcome.teacher_checksums {
            self.expect(before == after, format!("{name}: detector teacher unchanged"));
        }
        let ck = &r.outcome.checkpoint;
        let bytes = ck.to_bytes();
        self.expect(
            Checkpoint::from_bytes(&bytes)?.to_bytes() == bytes,
            format!("{name}: checkpoint round trip is byte-identical"),
        );
        let lut = ck.lut.to_bytes();
        self.expect(
            LookupTable::from_bytes(&lut)?.to_bytes() == lut,
            format!("{name}: lookup-table round trip is byte-identical"),
        );
        Ok(())
    }

    fn finish(self) -> ExitCode {
        if self.failures.is_empty() {
            eprintln!("self-check passed");
            ExitCode::SUCCESS
        } else {
            eprintln!("self-check failed: {}", self.failures.join("; "));
            ExitCode::from(2)
        }
    }
}

fn load_teachers(dir: &Path, data: &DatasetSplit, cfg: &ExperimentConfig) -> Result<TeacherSet> {
    let mut set = TeacherSet::default();
    for kind in TeacherKind::ALL {
        let p = dir.join(format!("{}.psck", kind.name()));
        if !p.exists() {
            continue;
        }
        let checkpoint = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
        let report = evaluate(&checkpoint.model, data, &cfg.inference, &cfg.eval)?;
        let audit = harness::LutAudit {
            frozen: checkpoint.lut.is_frozen(),
            checksum_start: checksum(&checkpoint.lut.to_bytes()),
            checksum_end: checksum(&checkpoint.lut.to_bytes()),
            labeled_seen: 0,
            skipped_writes: checkpoint.lut.skipped_writes(),
        };
        let outcome = harness::TrainOutcome {
            checkpoint,
            log: Vec::new(),
            audit,
            teacher_checksums: None,
        };
        set.runs.insert(kind, std::sync::Arc::new(RunResult { outcome, report }));
    }
    Ok(set)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(checks) => {
            if cli.self_check {
                checks.finish()
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Checks> {
    let mut checks = Checks::default();
    match &cli.command {
        Command::Config => print!("{}", ExperimentConfig::default().to_toml()),
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let d = generate_dataset(&cfg.dataset)?;
            write_dataset(&d, out)?;
            println!(
                "{} train, {} gallery scenes, {} queries -> {}",
                d.train.len(),
                d.gallery.len(),
                d.queries.len(),
                out.display()
            );
            if cli.self_check {
                checks.expect(read_dataset(out)? == d, "dataset file round trip");
                checks.expect(generate_dataset(&cfg.dataset)? == d, "dataset generation is deterministic");
            }
        }
        Command::Train { common, data, out } => {
            let cfg = common.load()?;
            let d = data.load(&cfg)?;
            let teachers = harness::Teachers::resolve(&cfg)?;
            std::fs::create_dir_all(out)?;
            let r = harness::run(&cfg, &d, &teachers)?;
            harness::write_run(&cfg, &r, out)?;
            print!("{}", r.report.to_csv().split("\n\n").next().unwrap_or_default());
            println!();
            if cli.self_check {
                checks.run_invariants("train", &r)?;
                let again = harness::run(&cfg, &d, &teachers)?;
                checks.expect(again.report.to_csv() == r.report.to_csv(), "repeated run gives identical metrics");
                checks.expect(
                    again.outcome.checkpoint.to_bytes() == r.outcome.checkpoint.to_bytes(),
                    "repeated run gives an identical checkpoint",
                );
            }
        }
        Command::ExportLut { checkpoint, out } => {
            let ck = Checkpoint::load(checkpoint)?;
            harness::export_lut(&ck, out)?;
            println!("{}×{} table -> {}", ck.lut.dim(), ck.lut.num_labeled(), out.display());
            if cli.self_check {
                let bytes = std::fs::read(out)?;
                checks.expect(LookupTable::import(out)?.to_bytes() == bytes, "exported table re-imports identically");
            }
        }
        Command::Sweep {
            common,
            data,
            lambdas,
            seeds: n,
            out,
        } => {
            let cfg = common.load()?;
            let d = data.load(&cfg)?;
            let runner = Runner::new(&d);
            let sweep = lambda_sweep(&runner, &cfg, lambdas, &seeds(&cfg, *n))?;
            std::fs::create_dir_all(out)?;
            sweep.write(out)?;
            print!("{}", sweep.plot_data_csv());
            if cli.self_check {
                for row in &sweep.rows {
                    let mut c = cfg.clone();
                    c.oim.weight = Some(row.lambda);
                    c.seed = row.seed;
                    c.kd_mode = harness::KdMode::None;
                    let r = runner.run(&c, &Default::default())?;
                    checks.run_invariants(&format!("λ={} seed={}", row.lambda, row.seed), &r)?;
                }
            }
        }
        Command::Ablate {
            common,
            data,
            seeds: n,
            teachers,
            no_train_teachers,
            out,
        } => {
            let cfg = common.load()?;
            let d = data.load(&cfg)?;
            let runner = Runner::new(&d);
            let mut set = match teachers {
                Some(dir) => load_teachers(dir, &d, &cfg)?,
                None => TeacherSet::default(),
            };
            if !no_train_teachers {
                let missing: Vec<TeacherKind> =
                    TeacherKind::ALL.into_iter().filter(|k| !set.runs.contains_key(k)).collect();
                let trained = TeacherSet::train(&runner, &cfg, &missing)?;
                set.runs.extend(trained.runs);
            }
            std::fs::create_dir_all(out.join("teachers"))?;
            set.save(&out.join("teachers"))?;
            let table = run_ablation_suite(&runner, &cfg, &set, &AblationRowKind::ALL, &seeds(&cfg, *n))?;
            table.write(out)?;
            print!("{}", table.to_csv());
            if cli.self_check {
                for (k, r) in &set.runs {
                    checks.run_invariants(&format!("teacher {}", k.name()), r)?;
                }
                for row in &table.rows {
                    for (seed, r) in &row.runs {
                        checks.run_invariants(&format!("{} seed={seed}", row.kind.name()), r)?;
                    }
                }
            }
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
        } => {
            let cfg = common.load()?;
            let d = data.load(&cfg)?;
            let ck = Checkpoint::load(checkpoint)?;
            let report = evaluate(&ck.model, &d, &cfg.inference, &cfg.eval)?;
            match out {
                Some(p) => std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", report.to_csv()),
            }
            if cli.self_check {
                let again = evaluate(&ck.model, &d, &cfg.inference, &cfg.eval)?;
                checks.expect(again == report, "evaluation is deterministic");
            }
        }
    }
    Ok(checks)
}
