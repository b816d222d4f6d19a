use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mpq_core::artifacts::{self, Checkpoint};
use mpq_core::config::{ArchMode, RunConfig};
use mpq_core::pipeline::{self, ASSIGNMENT_FILE, FINAL_CHECKPOINT_FILE, REPORT_FILE};
use mpq_core::{data, Assignment, Error};

#[derive(Parser)]
#[command(name = "mpq", version, about = "Mixed-precision bit-width and pruning search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search bit-widths, retrain at the derived widths and evaluate.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Retrain from scratch at the widths of an exported assignment.
    Retrain {
        #[arg(long)]
        assignment: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Widths to evaluate at; derived from the checkpoint when omitted.
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate the synthetic dataset and write it to the cache file.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a trace file and re-emit selected columns.
    ExportTrace {
        #[arg(long)]
        trace: PathBuf,
        /// Keep only rows of this phase (warmup, weight, arch).
        #[arg(long)]
        phase: Option<String>,
        /// Comma-separated column names; all columns when omitted.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Size target in MB of searchable weights.
    #[arg(long, conflicts_with = "target_bits")]
    target_mb: Option<f64>,
    /// Size target in bits of searchable weights.
    #[arg(long)]
    target_bits: Option<f64>,
    /// Weight of the size penalty.
    #[arg(long)]
    lambda: Option<f64>,
    /// Relative half-width of the size band.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Sub-groups per searchable layer.
    #[arg(long)]
    groups: Option<usize>,
    /// Candidate widths, e.g. 0,1,2,3,4.
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<u32>>,
    #[arg(long)]
    mode: Option<ArchMode>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(mb) = self.target_mb {
            cfg.objective.target_bits = None;
            cfg.objective.target_mb = Some(mb);
        }
        if let Some(b) = self.target_bits {
            cfg.objective.target_bits = Some(b);
        }
        if let Some(l) = self.lambda {
            cfg.objective.lambda = l;
        }
        if let Some(e) = self.epsilon {
            cfg.objective.epsilon = e;
        }
        if let Some(g) = self.groups {
            cfg.model.set_groups(g);
        }
        if let Some(b) = &self.bits {
            cfg.search.bits = b.clone();
        }
        if let Some(m) = self.mode {
            cfg.search.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit status 2 for configuration problems, 1 for everything else.
fn usage_error(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Search { run, out_dir } => {
            let cfg = run.resolve()?;
            log::info!("searching with seed {} into {}", cfg.seed, out_dir.display());
            let result = pipeline::run_search(&cfg, Some(&out_dir))
                .with_context(|| format!("search failed; partial artifacts in {}", out_dir.display()))?;
            println!("{}", serde_json::to_string_pretty(&result.report)?);
        }
        Command::Retrain { assignment, run, out_dir } => {
            let cfg = run.resolve()?;
            let assignment = read_assignment(&assignment)?;
            let data = pipeline::load_data(&cfg)?;
            let outcome = pipeline::retrain(&assignment, &cfg, &data)?;
            let model = pipeline::build_model(&cfg, &data, cfg.seed)?;
            let objective = pipeline::resolve_objective(&cfg, &model)?;
            let report = outcome.report(&cfg, &assignment, &objective, model.full_precision_bits());
            std::fs::create_dir_all(&out_dir)?;
            let json = serde_json::to_string_pretty(&report)?;
            std::fs::write(out_dir.join(REPORT_FILE), &json)?;
            std::fs::write(out_dir.join(ASSIGNMENT_FILE), assignment.to_json()?)?;
            let mut net = mpq_core::pipeline::Search::with_data(&cfg, data)?.net;
            net.model = outcome.model;
            Checkpoint::capture(&net, None, outcome.steps as u64).save(&out_dir.join(FINAL_CHECKPOINT_FILE))?;
            println!("{json}");
        }
        Command::Eval { checkpoint, assignment, run } => {
            let cfg = run.resolve()?;
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
            let assignment = assignment.as_deref().map(read_assignment).transpose()?;
            let (acc, used) = pipeline::evaluate_checkpoint(&cfg, &ck, assignment.as_ref())?;
            let out = serde_json::json!({
                "test_accuracy": acc,
                "size_bits": used.total_size_bits,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::GenData { run, out } => {
            let cfg = run.resolve()?;
            let split = data::generate(&cfg.data, cfg.seed)?;
            data::save(&split, &out)?;
            println!(
                "wrote {} ({} train, {} val, {} test)",
                out.display(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::ExportTrace { trace, phase, columns, out } => {
            let rows = artifacts::read_trace(&trace)
                .with_context(|| format!("reading trace {}", trace.display()))?;
            let rows: Vec<_> = rows
                .into_iter()
                .filter(|r| phase.as_deref().is_none_or(|p| r.phase == p))
                .collect();
            match out {
                Some(path) => export_columns(std::fs::File::create(&path)?, &rows, &columns)?,
                None => export_columns(std::io::stdout().lock(), &rows, &columns)?,
            }
        }
    }
    Ok(())
}

fn read_assignment(path: &Path) -> anyhow::Result<Assignment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading assignment {}", path.display()))?;
    Ok(Assignment::from_json(&text)?)
}

fn export_columns(w: impl std::io::Write, rows: &[artifacts::TraceRow], columns: &[String]) -> anyhow::Result<()> {
    let header: Vec<&str> = artifacts::TRACE_HEADER.split(',').collect();
    let picks: Vec<usize> = if columns.is_empty() {
        (0..header.len()).collect()
    } else {
        columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::Config(format!("unknown trace column {c:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let mut buf = Vec::new();
    artifacts::write_trace_to(&mut buf, rows)?;
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(picks.iter().map(|&i| header[i]))?;
    for rec in reader.records() {
        let rec = rec?;
        writer.write_record(picks.iter().map(|&i| &rec[i]))?;
    }
    writer.flush()?;
    Ok(())
}
