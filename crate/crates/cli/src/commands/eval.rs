use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use longiflow::autodiff::Precision;
use longiflow::data::{Dataset, SequenceBatch, Split};
use longiflow::inference::{estimate_nll, NllPolicy};
use longiflow::model::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::InvocationRecord;
use crate::error::{CliError, Result};
use crate::output::{check_shape, create_dir, load_model, mean_std, write_snapshot, write_text};

pub const CSV_HEADER: &str = "seq_id,metric,value,S,policy";

#[derive(Args, Debug)]
pub struct EvalNllArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test or all
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Importance samples per estimate (config `eval.samples` when omitted).
    #[arg(long)]
    pub samples: Option<usize>,
    /// fixed-j or average-j (config `eval.policy` when omitted).
    #[arg(long)]
    pub policy: Option<String>,
    /// Seeded repetitions (config `eval.repetitions` when omitted).
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Model config; defaults to the resolved config next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Per-repetition RNG for sequence `i`; sequences are independent streams so
/// evaluation can run in parallel without changing results.
pub fn eval_rng(seed: u64, rep: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64));
    rng.set_stream(i as u64);
    rng
}

pub fn load_split(dir: &Path, split: &str) -> Result<SequenceBatch> {
    let which = Split::parse(split).map_err(|e| CliError::usage(e.to_string()))?;
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::runtime(format!("dataset {} not found", dir.display())));
    }
    let data = Dataset::read_dir(dir)?.split(which);
    if data.is_empty() {
        return Err(CliError::runtime(format!("split {split:?} is empty")));
    }
    Ok(data)
}

/// `nll[rep][i]` for every sequence of `data`.
pub fn nll_table(
    model: &Model,
    data: &SequenceBatch,
    samples: usize,
    policy: NllPolicy,
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let precision = Precision::global();
    (0..reps)
        .map(|r| {
            (0..data.len())
                .into_par_iter()
                .map(|i| Ok(estimate_nll(model, data, i, samples, policy, &mut eval_rng(seed, r, i), precision)?.nll))
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

pub fn run(args: &EvalNllArgs) -> Result<()> {
    let (cfg, model) = load_model(&args.ckpt, args.config.as_deref())?;
    let samples = args.samples.unwrap_or(cfg.eval.samples);
    let reps = args.reps.unwrap_or(cfg.eval.repetitions);
    let seed = args.seed.unwrap_or(cfg.eval.seed);
    let policy_name = args.policy.clone().unwrap_or_else(|| cfg.eval.policy.clone());
    let policy = NllPolicy::parse(&policy_name).map_err(|e| CliError::usage(e.to_string()))?;
    if samples == 0 {
        return Err(CliError::usage("--samples must be at least 1"));
    }
    if reps == 0 {
        return Err(CliError::usage("--reps must be at least 1"));
    }
    let data = load_split(&args.data, &args.split)?;
    check_shape(&cfg, &data)?;

    let table = nll_table(&model, &data, samples, policy, reps, seed)?;
    let tag = format!("{samples},{}", policy.as_str());
    let mut csv = format!("{CSV_HEADER}\n");
    for i in 0..data.len() {
        let per: Vec<f64> = table.iter().map(|row| row[i]).collect();
        let (m, s) = mean_std(&per);
        writeln!(csv, "{i},nll,{m},{tag}").unwrap();
        writeln!(csv, "{i},nll_std,{s},{tag}").unwrap();
    }
    let rep_means: Vec<f64> = table.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
    for (r, v) in rep_means.iter().enumerate() {
        writeln!(csv, "rep{r},nll_mean,{v},{tag}").unwrap();
    }
    let (mean, std) = mean_std(&rep_means);
    writeln!(csv, "all,nll_mean,{mean},{tag}").unwrap();
    writeln!(csv, "all,nll_std,{std},{tag}").unwrap();

    create_dir(&args.out)?;
    write_text(&args.out.join("nll.csv"), &csv)?;
    let mut record = InvocationRecord::new("eval-nll")
        .arg("checkpoint", args.ckpt.to_string_lossy().into_owned())
        .arg("data", args.data.to_string_lossy().into_owned())
        .arg("split", args.split.clone())
        .arg("samples", samples as i64)
        .arg("policy", policy.as_str())
        .arg("repetitions", reps as i64)
        .arg("seed", seed as i64);
    record.config = Some(cfg);
    write_snapshot(&args.out, &record.to_toml())?;
    println!(
        "per-frame NLL {mean:.4} +- {std:.4} over {reps} repetitions ({} sequences, S = {samples}, {})",
        data.len(),
        policy.as_str()
    );
    Ok(())
}
