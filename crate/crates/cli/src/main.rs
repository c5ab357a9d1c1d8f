use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motion_diffusion::commands::{
    self, cmd_eval, cmd_generate_corpus, cmd_sample, cmd_sample_parts, cmd_sample_timeline,
    cmd_train, read_json, Metric, PartSpecDoc, RunConfig, SampleOptions, TimelineSpecDoc,
};
use motion_diffusion::Result;

/// Text-conditioned motion diffusion on a synthetic skeleton corpus.
#[derive(Parser)]
#[command(name = "mdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured corpus spec to motion files and a manifest.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/corpus`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoiser; `--checkpoint` resumes from an earlier checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample motions for one prompt.
    Sample {
        #[command(flatten)]
        common: SampleArgs,
        #[arg(long)]
        prompt: String,
    },
    /// Sample with one prompt per body part.
    SampleParts {
        #[command(flatten)]
        common: SampleArgs,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Sample with one prompt per frame interval.
    SampleTimeline {
        #[command(flatten)]
        common: SampleArgs,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Score generated motions against a reference directory.
    Eval {
        gen_dir: PathBuf,
        ref_dir: PathBuf,
        /// Comma-separated subset of fid, diversity, multimodality,
        /// r_precision, oracle_accuracy, oracle_margin.
        #[arg(long, default_value = "")]
        metrics: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frames per motion. For timelines, defaults to the spec's total length.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

const DEFAULT_LENGTH: usize = 48;

impl SampleArgs {
    fn options(&self, default_length: usize) -> SampleOptions {
        SampleOptions {
            length: self.length.unwrap_or(default_length),
            seed: self.seed,
            count: self.count,
            workers: self.workers,
        }
    }
}

fn report_written(out: &Path, n: usize) {
    println!("wrote {n} motion(s) to {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let spec = cfg.corpus_spec()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("corpus"));
            let manifest = cmd_generate_corpus(&spec, &out)?;
            println!(
                "wrote {} samples to {}",
                manifest.entries.len(),
                out.display()
            );
        }
        Command::Train { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = cmd_train(&cfg, checkpoint.as_deref(), &mut |line| println!("{line}"))?;
            println!(
                "iteration {} written to {} (config {})",
                outcome.iteration,
                outcome.checkpoint.display(),
                outcome.config_hash
            );
        }
        Command::Sample { common, prompt } => {
            let model = commands::load_model(&common.checkpoint)?;
            let m = cmd_sample(
                &model,
                &prompt,
                &common.options(DEFAULT_LENGTH),
                &common.out,
            )?;
            report_written(&common.out, m.len());
        }
        Command::SampleParts { common, spec } => {
            let doc: PartSpecDoc = read_json(&spec)?;
            let model = commands::load_model(&common.checkpoint)?;
            let m = cmd_sample_parts(&model, &doc, &common.options(DEFAULT_LENGTH), &common.out)?;
            report_written(&common.out, m.len());
        }
        Command::SampleTimeline { common, spec } => {
            let doc: TimelineSpecDoc = read_json(&spec)?;
            let model = commands::load_model(&common.checkpoint)?;
            let m =
                cmd_sample_timeline(&model, &doc, &common.options(doc.total_length), &common.out)?;
            report_written(&common.out, m.len());
        }
        Command::Eval {
            gen_dir,
            ref_dir,
            metrics,
            seed,
            out,
        } => {
            let metrics = Metric::parse_list(&metrics)?;
            let report = cmd_eval(&gen_dir, &ref_dir, &metrics, seed)?;
            match out {
                Some(path) => {
                    report.save(&path)?;
                    for m in &report.metrics {
                        println!(
                            "{:<18} {:>12.6}  [{:.6}, {:.6}]  n={}",
                            m.metric, m.value, m.ci95_low, m.ci95_high, m.n
                        );
                    }
                }
                None => print!("{}", report.to_json()?),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
