use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use longiflow::autodiff::{Checkpoint, CheckpointMeta};
use longiflow::data::{Dataset, Split};
use longiflow::model::Model;
use longiflow::training::{init_pseudo_inputs, train, EpochMetrics, TrainEvent};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ShapeSection};
use crate::error::{CliError, IoContext, Result};
use crate::output::{create_dir, write_snapshot};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    let s = run_experiment(&cfg, args.quiet)?;
    match s.best_epoch {
        Some(e) => println!("best validation loss {:.4} at epoch {e}; outputs in {}", s.best_val, s.out.display()),
        None => println!("no epochs run; outputs in {}", s.out.display()),
    }
    Ok(())
}

/// Trains the model described by `cfg` and writes `init.lfc`, `best.lfc`,
/// `final.lfc`, `metrics.csv` and the resolved config into `output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig, quiet: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let data_dir = Path::new(&cfg.data.dir);
    if !data_dir.join("manifest.json").is_file() {
        return Err(CliError::runtime(format!("dataset {} not found", data_dir.display())));
    }
    let dataset = Dataset::read_dir(data_dir)?;
    let (tr, va) = (dataset.split(Split::Train), dataset.split(Split::Val));
    let resolved = cfg.resolved(ShapeSection::of(&dataset.batch));
    let tc = resolved.train_config()?;
    let out = PathBuf::from(&cfg.output.dir);
    create_dir(&out)?;
    write_snapshot(&out, &resolved.to_toml())?;

    let mut model = Model::new(resolved.model_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    init_pseudo_inputs(&mut model, &tr, cfg.seed)?;

    let metrics_path = out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path).context(|| format!("creating {}", metrics_path.display()))?);
    writeln!(metrics, "{}", EpochMetrics::CSV_HEADER).context(|| "writing metrics".into())?;
    let best_path = out.join("best.lfc");
    // placeholder until the first validated epoch replaces it
    model.params.round_to(tc.precision);
    Checkpoint::capture(&model.params, None, CheckpointMeta::default()).write(&best_path)?;
    let epochs = tc.epochs;
    let result = train(&mut model, &tr, &va, &tc, |event| {
        let TrainEvent::Epoch {
            train,
            val,
            improved,
            checkpoint,
            ..
        } = event;
        writeln!(metrics, "{}\n{}", train.csv_row(), val.csv_row())?;
        metrics.flush()?;
        if improved {
            checkpoint().write(&best_path)?;
        }
        if !quiet {
            eprintln!(
                "epoch {:>3}/{epochs}  train {:.4}  val {:.4}{}",
                train.epoch,
                train.loss,
                val.loss,
                if improved { "  *" } else { "" }
            );
        }
        Ok(())
    });
    drop(metrics);
    let outcome = result.map_err(|e| {
        CliError::runtime(format!(
            "training aborted: {e}; the last good checkpoint is {}",
            best_path.display()
        ))
    })?;
    outcome.initial.write(out.join("init.lfc"))?;
    outcome.last.write(out.join("final.lfc"))?;
    if outcome.best_epoch.is_none() {
        outcome.best.write(&best_path)?;
    }
    Ok(TrainSummary {
        out,
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
    })
}
