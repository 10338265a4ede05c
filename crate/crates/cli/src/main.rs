use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clr_core::bench::{
    ablation_grid, format_ablation, format_table, load_splits, run_protocol, synthetic_splits,
    train_for_run, training_rng, write_embeddings, write_report, DatasetSource, RunConfig,
};
use clr_core::data::{export_dataset, save_png};
use clr_core::model::ModelState;
use clr_core::replacement::synthesize_training_image;
use clr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "clr", version, about = "Few-shot classification with continual local replacement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file (`#` starts a comment).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config override, repeatable. `--<key>=<value>` works as well.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze a backbone; writes <out_dir>/backbone.{ckpt,meta}.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run the paired-episode protocol and write summary.csv, episodes.csv and table.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem to load (defaults to <out_dir>/backbone).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train the backbone in this run instead of loading a checkpoint.
        #[arg(long)]
        train: bool,
    },
    /// Block-count ablation: one backbone per training cap, CLR per fine-tune cap.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6")]
        train_blocks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6")]
        finetune_blocks: Vec<usize>,
    },
    /// Write the synthetic dataset as <class>/<id>.png plus splits.txt.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write before/after PNGs of the training-stage replacement.
    DumpAug {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

/// Rewrites `--section.key=value` into `--set section.key=value` so config keys can be
/// passed as flags directly.
fn expand_key_flags(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(rest) if rest.split('=').next().is_some_and(|k| k.contains('.')) && rest.contains('=') => {
                out.push("--set".to_string());
                out.push(rest.to_string());
            }
            _ => out.push(a),
        }
    }
    out
}

fn checkpoint_stem(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("backbone")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let splits = load_splits(&cfg)?;
            let (model, report) = train_for_run(&cfg, &splits.train)?;
            create_dir(&cfg.out_dir)?;
            let stem = checkpoint_stem(&cfg);
            model.save(&stem, cfg.finetune.head)?;
            println!(
                "trained {} epochs: loss {:.4} -> {:.4}; checkpoint {}.ckpt",
                report.epoch_losses.len(),
                report.initial_loss,
                report.epoch_losses.last().copied().unwrap_or(f32::NAN),
                stem.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            train,
        } => {
            let cfg = common.load()?;
            let splits = load_splits(&cfg)?;
            let model = if train {
                let (model, report) = train_for_run(&cfg, &splits.train)?;
                log::info!("training loss {:.4} -> {:?}", report.initial_loss, report.epoch_losses.last());
                model
            } else {
                let stem = checkpoint.unwrap_or_else(|| checkpoint_stem(&cfg));
                if !stem.with_extension("ckpt").exists() {
                    return Err(Error::Usage(format!(
                        "no checkpoint at {}.ckpt; run `clr train` first or pass --train",
                        stem.display()
                    )));
                }
                let (model, _) = ModelState::load(&stem)?;
                model
            };
            let output = run_protocol(&model, &splits.test, &cfg)?;
            let paths = write_report(&output, cfg.finetune.head, &cfg.out_dir)?;
            if cfg.embeddings {
                write_embeddings(&model, &splits.test, &cfg.out_dir.join("embeddings.csv"))?;
            }
            print!("{}", format_table(&output.summaries, cfg.finetune.head));
            println!("wrote {}", paths.summary.display());
        }
        Command::Ablate {
            common,
            train_blocks,
            finetune_blocks,
        } => {
            let cfg = common.load()?;
            let splits = load_splits(&cfg)?;
            let m = ablation_grid(&train_blocks, &finetune_blocks, &cfg, &splits)?;
            let text = format_ablation(&m);
            create_dir(&cfg.out_dir)?;
            let path = cfg.out_dir.join("ablation.txt");
            std::fs::write(&path, &text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
            print!("{text}");
        }
        Command::SynthData { common, out } => {
            let cfg = common.load()?;
            let DatasetSource::Synthetic(spec) = &cfg.dataset else {
                return Err(Error::Usage("synth-data needs a synthetic dataset config".into()));
            };
            let splits = synthetic_splits(spec)?;
            let split_file = export_dataset(&[&splits.train, &splits.test], &out)?;
            println!(
                "wrote {} train and {} test images; splits in {}",
                splits.train.len(),
                splits.test.len(),
                split_file.display()
            );
        }
        Command::DumpAug { common, out, count } => {
            let cfg = common.load()?;
            let splits = load_splits(&cfg)?;
            create_dir(&out)?;
            let train = &splits.train;
            let method = cfg.train_method();
            let mut rng = training_rng(cfg.seed);
            for i in 0..count.min(train.len()) {
                let index = i * train.len() / count.max(1);
                let (outcome, kind) = synthesize_training_image(train, index, &method, &mut rng)?;
                let id = train.samples()[index].id;
                save_png(&train.samples()[index].pixels, &out.join(format!("{id:06}_before.png")))?;
                save_png(&outcome.image, &out.join(format!("{id:06}_after.png")))?;
                println!(
                    "{id:06}: donor {} ({kind:?}), {:.1}% replaced",
                    outcome.source_id,
                    100.0 * outcome.masked_fraction()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(expand_key_flags(std::env::args()));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
