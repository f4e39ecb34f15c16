use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use longiflow::autodiff::Precision;
use longiflow::data::{SequenceBatch, Tensor};
use longiflow::inference::{impute, impute_naive, masked_mse, region_mask, MseRegion};
use longiflow::model::Model;
use rayon::prelude::*;

use super::eval::{eval_rng, load_split, CSV_HEADER};
use crate::config::{InvocationRecord, ShapeSection};
use crate::error::{CliError, Result};
use crate::output::{check_shape, create_dir, load_model, mean_std, write_grid_png, write_snapshot, write_text};

/// Sequences shown in `completed.png`.
const PNG_ROWS: usize = 8;

#[derive(Args, Debug)]
pub struct ImputeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Posterior draws per candidate index (config `eval.samples_per_index` when omitted).
    #[arg(long)]
    pub samples_per_index: Option<usize>,
    /// Seeded repetitions; tensors and per-sequence rows come from the first.
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Completion of one sequence by both procedures.
#[derive(Clone, Debug)]
pub struct SeqImputation {
    pub j_opt: usize,
    pub j_naive: usize,
    pub optimal: Vec<Vec<f64>>,
    pub naive: Vec<Vec<f64>>,
    /// `[optimal, naive]` MSE over all pixels of the sequence.
    pub mse_all: [f64; 2],
    /// `[optimal, naive]` MSE over missing pixels; `None` when nothing is missing.
    pub mse_missing: Option<[f64; 2]>,
}

pub fn impute_sequence(model: &Model, data: &SequenceBatch, i: usize, spi: usize, seed: u64, rep: usize) -> Result<SeqImputation> {
    let precision = Precision::global();
    let mut rng = eval_rng(seed, rep, i);
    let opt = impute(model, data, i, spi, &mut rng, precision)?;
    let (j_naive, naive) = impute_naive(model, data, i, &mut rng, precision)?;
    let len = data.lengths[i];
    let target: Vec<f64> = (0..len).flat_map(|l| data.frame_f64(i, l)).collect();
    let flat = |frames: &[Vec<f64>]| frames.concat();
    let (po, pn) = (flat(&opt.completed), flat(&naive));
    let all = region_mask(data, i, MseRegion::All);
    let missing = region_mask(data, i, MseRegion::Missing);
    let mse_all = [masked_mse(&po, &target, &all)?, masked_mse(&pn, &target, &all)?];
    let mse_missing = if missing.iter().any(|&m| m) {
        Some([masked_mse(&po, &target, &missing)?, masked_mse(&pn, &target, &missing)?])
    } else {
        None
    };
    Ok(SeqImputation {
        j_opt: opt.j_opt,
        j_naive,
        optimal: opt.completed,
        naive,
        mse_all,
        mse_missing,
    })
}

fn to_tensor(rows: &[SeqImputation], pick: impl Fn(&SeqImputation) -> &Vec<Vec<f64>>, shape: ShapeSection) -> Vec<f32> {
    let fd = shape.frame_dim();
    let mut out = vec![0.0f32; rows.len() * shape.frames * fd];
    for (k, r) in rows.iter().enumerate() {
        for (l, frame) in pick(r).iter().enumerate() {
            let start = (k * shape.frames + l) * fd;
            for (dst, &v) in out[start..start + fd].iter_mut().zip(frame) {
                *dst = v as f32;
            }
        }
    }
    out
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run(args: &ImputeArgs) -> Result<()> {
    let (cfg, model) = load_model(&args.ckpt, args.config.as_deref())?;
    let spi = args.samples_per_index.unwrap_or(cfg.eval.samples_per_index);
    let seed = args.seed.unwrap_or(cfg.eval.seed);
    if spi == 0 {
        return Err(CliError::usage("--samples-per-index must be at least 1"));
    }
    if args.reps == 0 {
        return Err(CliError::usage("--reps must be at least 1"));
    }
    let data = load_split(&args.data, &args.split)?;
    check_shape(&cfg, &data)?;
    let shape = ShapeSection::of(&data);

    let mut reps = Vec::with_capacity(args.reps);
    for r in 0..args.reps {
        let rows = (0..data.len())
            .into_par_iter()
            .map(|i| impute_sequence(&model, &data, i, spi, seed, r))
            .collect::<Result<Vec<_>>>()?;
        reps.push(rows);
    }

    let mut csv = format!("{CSV_HEADER}\n");
    let methods = [(0, "optimal"), (1, "naive")];
    for (i, row) in reps[0].iter().enumerate() {
        for (m, name) in methods {
            let j = if m == 0 { row.j_opt } else { row.j_naive };
            writeln!(csv, "{i},j,{j},{spi},{name}").unwrap();
            writeln!(csv, "{i},mse_all,{},{spi},{name}", row.mse_all[m]).unwrap();
            writeln!(csv, "{i},mse_missing,{},{spi},{name}", fmt_opt(row.mse_missing.map(|v| v[m]))).unwrap();
        }
    }
    let mut summary = Vec::new();
    for (m, name) in methods {
        let mut all_means = Vec::new();
        let mut miss_means = Vec::new();
        for (r, rows) in reps.iter().enumerate() {
            let a = mean_of(rows.iter().map(|x| x.mse_all[m])).expect("non-empty split");
            let b = mean_of(rows.iter().filter_map(|x| x.mse_missing.map(|v| v[m])));
            writeln!(csv, "rep{r},mse_all,{a},{spi},{name}").unwrap();
            writeln!(csv, "rep{r},mse_missing,{},{spi},{name}", fmt_opt(b)).unwrap();
            all_means.push(a);
            miss_means.extend(b);
        }
        let (am, asd) = mean_std(&all_means);
        writeln!(csv, "all,mse_all_mean,{am},{spi},{name}").unwrap();
        writeln!(csv, "all,mse_all_std,{asd},{spi},{name}").unwrap();
        let miss = (!miss_means.is_empty()).then(|| mean_std(&miss_means));
        writeln!(csv, "all,mse_missing_mean,{},{spi},{name}", fmt_opt(miss.map(|x| x.0))).unwrap();
        writeln!(csv, "all,mse_missing_std,{},{spi},{name}", fmt_opt(miss.map(|x| x.1))).unwrap();
        summary.push((name, am, miss));
    }

    create_dir(&args.out)?;
    write_text(&args.out.join("imputation.csv"), &csv)?;
    let full = vec![data.len(), shape.frames, shape.channels, shape.height, shape.width];
    let completed = to_tensor(&reps[0], |r| &r.optimal, shape);
    let naive = to_tensor(&reps[0], |r| &r.naive, shape);
    Tensor::f32(full.clone(), completed.clone())?.write(args.out.join("completed.lft"))?;
    Tensor::f32(full, naive)?.write(args.out.join("naive.lft"))?;
    let j_opt: Vec<u8> = reps[0].iter().map(|r| r.j_opt.min(255) as u8).collect();
    Tensor::u8(vec![data.len()], j_opt)?.write(args.out.join("j_opt.lft"))?;
    let rows = data.len().min(PNG_ROWS);
    let fd = shape.frames * shape.frame_dim();
    write_grid_png(&args.out.join("completed.png"), &completed[..rows * fd], rows, shape.frames, shape)?;
    let observed: Vec<f32> = data.data[..rows * fd]
        .iter()
        .zip(&data.pixel_mask)
        .enumerate()
        .map(|(idx, (&v, &m))| {
            let (k, l) = (idx / fd, (idx % fd) / shape.frame_dim());
            if m == 1 && data.is_observed(k, l) {
                v
            } else {
                0.0
            }
        })
        .collect();
    write_grid_png(&args.out.join("observed.png"), &observed, rows, shape.frames, shape)?;

    let mut record = InvocationRecord::new("impute")
        .arg("checkpoint", args.ckpt.to_string_lossy().into_owned())
        .arg("data", args.data.to_string_lossy().into_owned())
        .arg("split", args.split.clone())
        .arg("samples_per_index", spi as i64)
        .arg("repetitions", args.reps as i64)
        .arg("seed", seed as i64);
    record.config = Some(cfg);
    write_snapshot(&args.out, &record.to_toml())?;
    for (name, am, miss) in summary {
        match miss {
            Some((m, s)) => println!("{name:<8} MSE all {am:.5}  missing {m:.5} +- {s:.5}"),
            None => println!("{name:<8} MSE all {am:.5}  missing: no missing pixels"),
        }
    }
    Ok(())
}
