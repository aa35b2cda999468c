use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elastic_core::eval::MetricKind;
use elastic_core::pipeline::{generate_data, PipelineConfig, Run};
use elastic_core::search::SearchOutcome;
use elastic_core::Error;

#[derive(Parser)]
#[command(name = "elastic", version, about = "Calibrate, fine-tune and deploy elastic subnets of a small language model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output root; runs go to `<out>/<config hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, requires = "width_ratio")]
    depth: Option<usize>,
    #[arg(long, requires = "depth")]
    width_ratio: Option<f64>,
}

impl ShapeArgs {
    fn get(&self) -> Option<(usize, f64)> {
        self.depth.zip(self.width_ratio)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a procedural corpus and fact file.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50_000)]
        chars: usize,
        #[arg(long, default_value_t = 64)]
        facts: usize,
    },
    Pretrain(Common),
    CalibrateDepth {
        #[command(flatten)]
        common: Common,
        /// `ppl` or `facts`; defaults to the config.
        #[arg(long)]
        metric: Option<String>,
    },
    CalibrateWidth(Common),
    Finetune(Common),
    /// Write standalone checkpoints; the whole grid without a shape.
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        shape: ShapeArgs,
    },
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<f64>,
    },
    Profile(Common),
    /// Print validation perplexity and fact accuracy of a shape.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        shape: ShapeArgs,
    },
    /// Every stage from pretraining to grid extraction.
    Run(Common),
}

fn open(c: &Common) -> Result<Run, Error> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    cfg.apply_env();
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.output_dir = o.clone();
    }
    let run = Run::open(cfg)?;
    eprintln!("run directory: {}", run.dir.display());
    Ok(run)
}

fn exec(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData { out, seed, chars, facts } => {
            let (c, f) = (out.join("corpus.txt"), out.join("facts.tsv"));
            generate_data(&c, &f, chars, facts, seed)?;
            println!("{}\n{}", c.display(), f.display());
        }
        Cmd::Pretrain(c) => {
            let r = open(&c)?.pretrain()?;
            println!("final training loss {:.4}", r.final_loss);
        }
        Cmd::CalibrateDepth { common, metric } => {
            let metric = metric.as_deref().map(MetricKind::parse).transpose()?;
            let mut run = open(&common)?;
            let t = run.calibrate_depth(metric)?;
            for m in 0..=t.max_remove {
                println!("m={m} keep {} score {:.4}", t.select(m)?, t.metric.raw(t.d[t.n_layers][m].0));
            }
        }
        Cmd::CalibrateWidth(c) => {
            let plan = open(&c)?.calibrate_width()?;
            for (i, r) in plan.ratios.iter().enumerate() {
                println!("ratio {r} realized {:.4}", plan.realized_ratio(i));
            }
        }
        Cmd::Finetune(c) => {
            let r = open(&c)?.finetune()?;
            if let Some(l) = r.last {
                println!("step {} teacher loss {:.4}", r.steps, l.l1);
            }
        }
        Cmd::Extract { common, shape } => {
            for p in open(&common)?.extract(shape.get())? {
                println!("{}", p.display());
            }
        }
        Cmd::Search { common, budget } => {
            let r = open(&common)?.search(budget)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if let SearchOutcome::Infeasible { tightest, cost } = &r.outcome {
                eprintln!("no shape fits the budget; tightest is {} at {cost}", tightest.id());
            }
        }
        Cmd::Profile(c) => {
            let rows = open(&c)?.profile()?;
            print!("{}", elastic_core::search::profile_csv(&rows));
        }
        Cmd::Eval { common, shape } => {
            let e = open(&common)?.eval(shape.get())?;
            println!("{}", serde_json::to_string_pretty(&e)?);
        }
        Cmd::Run(c) => {
            let mut run = open(&c)?;
            run.run_all()?;
            println!("{}", run.dir.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingStage(_) => 3,
        Error::ArtifactMismatch { .. } => 4,
        Error::Io(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
