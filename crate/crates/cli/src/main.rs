use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frozenformer::accounting::{count_budget, presets};
use frozenformer::data::{Corpus, ParallelSet};
use frozenformer::freezing::FreezeSpec;
use frozenformer::harness::{self, ExperimentSpec, Grid, GridReport, RunMode};
use frozenformer::model::{self, Transformer};
use frozenformer::train::{self, RunRecord, TrainConfig};

#[derive(Parser)]
#[command(
    name = "frozenformer",
    version,
    about = "Transformer component freezing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one row of a grid for one seed and save the model.
    Train {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        row: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replaces the row's freeze spec.
        #[arg(long)]
        freeze: Option<FreezeSpec>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dev perplexity and BLEU of a model saved by `train`.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Parameter counts and the Trainable/All ratio of a preset.
    CountParams {
        #[arg(long, required_unless_present_any = ["list", "grid"])]
        preset: Option<String>,
        #[arg(long, default_value = "none")]
        freeze: FreezeSpec,
        /// Fails unless the ratio is within the tolerance of this value.
        #[arg(long)]
        expect: Option<f64>,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        /// Checks every expected ratio of a grid file instead.
        #[arg(long, conflicts_with = "preset")]
        grid: Option<PathBuf>,
        #[arg(long)]
        list: bool,
    },
    /// Run an experiment grid and write its report.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only run these rows (comma separated ids).
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        /// Skip training and only check parameter ratios.
        #[arg(long)]
        ratios_only: bool,
    },
    /// Print a saved grid report and exit with its status.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8, AnyError> {
    match cli.command {
        Command::Train {
            grid,
            row,
            seed,
            freeze,
            out,
        } => train_row(&grid, &row, seed, freeze, &out),
        Command::Evaluate { run } => evaluate(&run),
        Command::CountParams {
            preset,
            freeze,
            expect,
            tolerance,
            grid,
            list,
        } => {
            if list {
                for p in presets::all() {
                    println!("{:<14} {}", p.name, p.description);
                }
                return Ok(0);
            }
            if let Some(grid) = grid {
                let report = harness::run_grid(&Grid::load(&grid)?, 1, RunMode::RatiosOnly)?;
                print!("{}", report.to_markdown());
                return Ok(report.exit_code() as u8);
            }
            let name = preset.expect("required by clap");
            let p = presets::get(&name).ok_or_else(|| format!("unknown preset {name}"))?;
            let b = count_budget(&p.config, &freeze)?;
            println!("preset     {name}");
            println!("freeze     {freeze}");
            for (g, n) in &b.per_group {
                println!("{:<10} {n}", g.as_str());
            }
            for (s, n) in &b.per_selector {
                println!("frozen {s:<16} {n}");
            }
            println!("total      {}", b.total);
            println!("trainable  {}", b.trainable);
            println!("ratio      {:.4}", b.ratio);
            match expect {
                Some(x) if (b.ratio - x).abs() > tolerance => {
                    println!(
                        "FAIL: expected {x} ± {tolerance}, |Δ| = {:.4}",
                        (b.ratio - x).abs()
                    );
                    Ok(1)
                }
                Some(x) => {
                    println!(
                        "pass: expected {x} ± {tolerance}, |Δ| = {:.4}",
                        (b.ratio - x).abs()
                    );
                    Ok(0)
                }
                None => Ok(0),
            }
        }
        Command::Ablate {
            grid,
            jobs,
            out,
            rows,
            ratios_only,
        } => {
            let mut g = Grid::load(&grid)?;
            if !rows.is_empty() {
                let ids: Vec<&str> = rows.iter().map(String::as_str).collect();
                g = g.select(&ids)?;
            }
            let mode = if ratios_only {
                RunMode::RatiosOnly
            } else {
                RunMode::Full
            };
            let report = harness::run_grid(&g, jobs, mode)?;
            if let Some(dir) = out {
                report.write_to(&dir)?;
            }
            print!("{}", report.to_markdown());
            Ok(report.exit_code() as u8)
        }
        Command::Report { input } => {
            let report = GridReport::read_from(&input)?;
            print!("{}", report.to_markdown());
            Ok(report.exit_code() as u8)
        }
    }
}

fn find_row(grid: &Path, row: &str) -> Result<ExperimentSpec, AnyError> {
    let g = Grid::load(grid)?;
    let spec = g
        .experiments
        .into_iter()
        .find(|e| e.id == row)
        .ok_or_else(|| format!("no row {row} in {}", grid.display()))?;
    Ok(spec)
}

fn train_row(
    grid: &Path,
    row: &str,
    seed: u64,
    freeze: Option<FreezeSpec>,
    out: &Path,
) -> Result<u8, AnyError> {
    let mut spec = find_row(grid, row)?;
    if let Some(f) = freeze {
        spec.freeze = f;
    }
    spec.seeds = vec![seed];
    let corpus = harness::build_corpus(&spec.task)?;
    let cfg = harness::training_config(&spec, &corpus)?;
    let mut m = Transformer::build(cfg, seed)?;
    let tc = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let record = train::train(&mut m, &corpus, &spec.freeze, &tc)?;
    std::fs::create_dir_all(out)?;
    model::save(&m, &out.join("model.ckpt"))?;
    std::fs::write(
        out.join("experiment.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    std::fs::write(out.join("metrics.csv"), record.metrics_csv())?;
    let mut w = csv::Writer::from_path(out.join("run.csv"))?;
    w.write_record(RunRecord::CSV_HEADER)?;
    w.write_record(record.csv_record())?;
    w.flush()?;
    print!("{}", record.metrics_csv());
    println!(
        "ratio {:.4}, best epoch {}, dev ppl {:.4}{}, {:.1}s",
        record.ratio,
        record.epochs_to_converge,
        record.final_ppl,
        record
            .final_bleu
            .map(|b| format!(", dev BLEU {b:.2}"))
            .unwrap_or_default(),
        record.wall_clock_secs
    );
    Ok(0)
}

fn evaluate(run: &Path) -> Result<u8, AnyError> {
    let spec: ExperimentSpec =
        serde_json::from_str(&std::fs::read_to_string(run.join("experiment.json"))?)?;
    let m = model::load(&run.join("model.ckpt"))?;
    let corpus = harness::build_corpus(&spec.task)?;
    let ppl = train::perplexity(&m, corpus.dev(), spec.train.batch_size)?;
    println!("dev ppl {ppl:.6}");
    if let Corpus::Parallel(c) = &corpus {
        let dev: &ParallelSet = &c.dev;
        let bleu = train::dev_bleu(&m, dev, spec.train.batch_size, spec.train.bleu_smoothing)?;
        println!("dev BLEU {bleu:.4}");
    }
    Ok(0)
}
