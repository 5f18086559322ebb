use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kbgn::harness::ablation::parse_ablations;
use kbgn::harness::train::RunFiles;
use kbgn::harness::{
    evaluate_checkpoint, export_trace, run_ablation_suite, train, Checkpoint, Dataset, RunConfig,
};
use kbgn::{Ablation, Error, Kbgn, Result};

#[derive(Parser)]
#[command(name = "kbgn", version, about = "Knowledge-bridge graph network for visual dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML key-value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val datasets and their vocabulary.
    GenData(Common),
    /// Train a model and write its log and checkpoints to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the configured validation set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dump attention traces for a dataset's episodes.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only the first n episodes.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and score ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names, in table order.
        #[arg(long, default_value = "VTA,VETA,VETE,VT2V,TV2T,V-NoRel,V-RRel,T-NoRel,T-RRel,KBGN")]
        ablations: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(a) = &self.ablation {
            cfg = cfg.with_ablation(a.parse::<Ablation>()?);
        }
        Ok(cfg)
    }

    fn overrides_model(&self) -> bool {
        self.config.is_some() || self.seed.is_some() || self.ablation.is_some()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn eval_data(common: &Common, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(p) => Dataset::load(p),
        None => Ok(common.run_config()?.data.load()?.1),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.run_config()?;
            let (tr, va) = cfg.data.load()?;
            create_dir(&c.out)?;
            tr.save(&c.out.join("train.json"), "vocab.txt")?;
            va.save(&c.out.join("val.json"), "vocab.txt")?;
            println!("wrote {} train and {} val episodes to {}", tr.len(), va.len(), c.out.display());
        }
        Command::Train { common: c, resume } => {
            let mut cfg = c.run_config()?;
            let (tr, va) = cfg.data.load()?;
            cfg.resolve(&tr)?;
            create_dir(&c.out)?;
            write(&c.out.join("config.toml"), &cfg.to_toml())?;
            let (model, params) = Kbgn::new(cfg.model.clone())?;
            let ck = if resume {
                Some(Checkpoint::load(&RunFiles::in_dir(&c.out).last)?)
            } else {
                None
            };
            let outcome = train(
                &model,
                params,
                &tr.encode()?,
                &va.encode()?,
                &cfg.train,
                Some(&c.out),
                ck.as_ref(),
            )?;
            match outcome.best_val {
                Some(r) => println!("best val: {r}"),
                None => println!("trained {} steps", outcome.global_step),
            }
        }
        Command::Eval {
            common: c,
            checkpoint,
            data,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = eval_data(&c, data.as_deref())?;
            let expected = if c.overrides_model() {
                let mut cfg = c.run_config()?;
                cfg.resolve(&ds)?;
                cfg.model
            } else {
                ck.model.clone()
            };
            let (report, _) = evaluate_checkpoint(&ck, &expected, &ds.encode()?, Some(&ds.relevance()))?;
            create_dir(&c.out)?;
            write(&c.out.join("report.json"), &to_json(&report))?;
            println!("{report}");
        }
        Command::Trace {
            common: c,
            checkpoint,
            data,
            limit,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, params) = ck.restore_stored()?;
            let ds = eval_data(&c, data.as_deref())?;
            let n = limit.unwrap_or(ds.len()).min(ds.len());
            create_dir(&c.out)?;
            let mut lines = String::new();
            let (mut hits, mut vision) = (0, 0);
            for (k, ep) in ds.episodes.iter().take(n).enumerate() {
                let tr = export_trace(&model, &params, &ep.encode(&ds.vocab)?, format!("{k}"), ep.planted_clue)?;
                if let Some(h) = tr.clue_hit {
                    vision += 1;
                    hits += usize::from(h);
                }
                lines.push_str(&serde_json::to_string(&tr).expect("serializable"));
                lines.push('\n');
            }
            write(&c.out.join("traces.jsonl"), &lines)?;
            println!("wrote {n} traces to {}", c.out.join("traces.jsonl").display());
            if vision > 0 {
                println!("vision-clue hit rate: {hits}/{vision} = {:.3}", hits as f64 / vision as f64);
            }
        }
        Command::Ablate {
            common: c,
            ablations,
            seeds,
        } => {
            let cfg = c.run_config()?;
            let list = parse_ablations(&ablations)?;
            let table = run_ablation_suite(&cfg, &list, &seeds)?;
            create_dir(&c.out)?;
            let md = table.to_markdown();
            write(&c.out.join("ablation.md"), &md)?;
            write(&c.out.join("ablation.json"), &to_json(&table))?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data { .. } | Error::Io { .. } | Error::Vocabulary { .. } => 3,
                _ => 1,
            })
        }
    }
}
