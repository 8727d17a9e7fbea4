use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{builder::PossibleValuesParser, Parser, Subcommand};

use dino_unet::audit::{crossover_report, formula_breakdown};
use dino_unet::config::{ModelConfig, Projection, Variant};
use dino_unet::gradsuite::{all_cases, run_suite};
use dino_unet::runconfig::RunConfigFile;
use dino_unet::trainer::{
    evaluate, format_loss_log, load_checkpoint, load_dataset, make_synth_dataset, save_checkpoint, save_dataset, train,
    Model,
};
use dino_unet::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "dino-unet", version, about = "Dino U-Net desk-scale toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic segmentation dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Take defaults from the [data] section of this run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.dunt, loss_log.tsv and config.toml.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Seed of the batch order.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; writes a tab-separated metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sliding-window tile size (multiple of 32); full-image pass if absent.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 0.5, requires = "window")]
        overlap: f64,
        #[arg(long, default_value = "metrics.tsv")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, value_parser = PossibleValuesParser::new(all_cases().collect::<Vec<_>>()))]
        module: Option<String>,
        /// First of three consecutive instance seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter breakdown and FAPM-vs-baseline comparison.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from a preset width (desk, S, B, L, 7B) instead of a file.
        #[arg(long, conflicts_with = "config", value_parser = PossibleValuesParser::new(["desk", "S", "B", "L", "7B"]))]
        variant: Option<String>,
        #[arg(long)]
        compare_baseline: bool,
        /// Comma-separated backbone widths for the crossover table.
        #[arg(long, value_delimiter = ',', requires = "compare_baseline")]
        dgrid: Option<Vec<usize>>,
        /// Write the crossover plot description (TOML) here.
        #[arg(long, requires = "compare_baseline")]
        plot: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::NonFiniteGrad(_) => EXIT_NUMERIC,
            Error::Config(_) | Error::LabelRange { .. } => EXIT_USAGE,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, msg: e.to_string() }
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfigFile, Failure> {
    Ok(match path {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Synth { out, n, size, classes, seed, config } => {
            let d = load_run_config(config.as_deref())?.data;
            let (n, size, classes, seed) =
                (n.unwrap_or(d.samples), size.unwrap_or(d.size), classes.unwrap_or(d.classes), seed.unwrap_or(d.seed));
            let samples = make_synth_dataset(n, size, classes, seed)?;
            save_dataset(&out, &samples)?;
            println!("wrote {n} samples ({size}x{size}, {classes} classes) to {}", out.display());
        }
        Cmd::Train { config, data, out, epochs, steps_per_epoch, lr0, batch_size, seed } => {
            let mut cfg = load_run_config(config.as_deref())?;
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.steps_per_epoch = steps_per_epoch.unwrap_or(t.steps_per_epoch);
            t.lr0 = lr0.unwrap_or(t.lr0);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.seed = seed.unwrap_or(t.seed);
            if let Some(d) = data {
                cfg.data.dir = Some(d);
            }
            cfg.validate()?;
            let dir = cfg.data.dir.clone().ok_or_else(|| Failure {
                code: EXIT_USAGE,
                msg: "no dataset: pass --data or set data.dir".into(),
            })?;
            let samples = load_dataset(&dir)?;
            fs::create_dir_all(&out)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let mut model = Model::build(cfg.model.clone())?;
            let mut rows = Vec::new();
            let result = train(&mut model, &samples, &cfg.train, |r| rows.push(*r));
            write(&out.join("loss_log.tsv"), &format_loss_log(&rows))?;
            result?;
            save_checkpoint(&model, &out.join("checkpoint.dunt"))?;
            let last = rows.last().expect("at least one step");
            println!("trained {} steps, final loss {:.6}; outputs in {}", rows.len(), last.total, out.display());
        }
        Cmd::Eval { checkpoint, data, window, overlap, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let samples = load_dataset(&data)?;
            let report = evaluate(&model, &samples, window.map(|w| (w, overlap)))?;
            write(&out, &report.to_tsv())?;
            println!("mean_dice\t{:.6}\nmean_hd95\t{:.6}", report.mean_dice(), report.mean_hd95());
        }
        Cmd::Gradcheck { module, seed } => {
            let results = run_suite(module.as_deref(), &[seed, seed + 1, seed + 2])?;
            println!("case\tseed\tmax_rel_err\tkinks\tcoords\tstatus");
            let mut failed = 0;
            for r in &results {
                let ok = r.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{}\t{}\t{:.3e}\t{}\t{}\t{}",
                    r.name,
                    r.seed,
                    r.report.max_rel_err(),
                    r.report.kinks(),
                    r.report.coords_checked(),
                    if ok { "pass" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Failure { code: EXIT_GRADCHECK, msg: format!("{failed} of {} gradient checks failed", results.len()) });
            }
        }
        Cmd::Params { config, variant, compare_baseline, dgrid, plot } => {
            let model: ModelConfig = match variant {
                Some(v) => ModelConfig::for_variant(Variant::parse(&v).expect("validated by clap")),
                None => load_run_config(config.as_deref())?.model,
            };
            model.validate()?;
            print!("{}", formula_breakdown(&model).to_tsv());
            if compare_baseline {
                let fapm = formula_breakdown(&ModelConfig { projection: Projection::Fapm, ..model.clone() });
                let base = formula_breakdown(&ModelConfig { projection: Projection::Baseline, ..model.clone() });
                println!("fapm_count\t{}\nbaseline_count\t{}", fapm.fapm, base.baseline);
                let grid = dgrid.unwrap_or_else(|| vec![32, 64, 128, 256, 384, 512, 768, 1024, 2048, 4096]);
                if grid.is_empty() {
                    return Err(Failure { code: EXIT_USAGE, msg: "--dgrid must list at least one width".into() });
                }
                let rep = crossover_report(&model.fapm, &grid);
                print!("{}", rep.to_tsv());
                if let Some(p) = plot {
                    write(&p, &rep.plot_spec())?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
