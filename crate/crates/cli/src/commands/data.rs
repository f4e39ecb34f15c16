use std::path::PathBuf;

use clap::Args;
use longiflow::data::{Dataset, DatasetManifest, Generator, Splits};

use crate::config::InvocationRecord;
use crate::error::{CliError, Result};
use crate::output::{create_dir, write_snapshot};

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    /// rotating-bar, arm-shape or ambiguous
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// Frames per sequence (T + 1).
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    /// Frame height and width in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub p_missing_obs: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_missing_pix: f64,
    /// Sequence counts `train,val,test`; 4:1:1 when omitted.
    #[arg(long)]
    pub split: Option<String>,
}

pub fn parse_split(s: &str, n: usize) -> Result<Splits> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--split expects three counts train,val,test, got {s:?}")))?;
    let [train, val, test] = parts[..] else {
        return Err(CliError::usage(format!("--split expects three counts train,val,test, got {s:?}")));
    };
    let splits = Splits { train, val, test };
    if splits.total() != n {
        return Err(CliError::usage(format!("--split sums to {}, but --n is {n}", splits.total())));
    }
    Ok(splits)
}

pub fn run(args: &MakeDataArgs) -> Result<()> {
    let gen = Generator::parse(&args.dataset).map_err(|e| CliError::usage(e.to_string()))?;
    let splits = match &args.split {
        Some(s) => parse_split(s, args.n)?,
        None => Splits::default_for(args.n),
    };
    let manifest = DatasetManifest {
        generator: gen.name().to_string(),
        seed: args.seed,
        n: args.n,
        frames: args.seq_len,
        channels: gen.channels(),
        height: args.size,
        width: args.size,
        p_obs: args.p_missing_obs,
        p_pix: args.p_missing_pix,
        splits,
    };
    let dataset = Dataset::from_manifest(manifest)?;
    create_dir(&args.out)?;
    dataset.write_dir(&args.out)?;
    let record = InvocationRecord::new("make-data")
        .arg("dataset", gen.name())
        .arg("n", args.n as i64)
        .arg("seq_len", args.seq_len as i64)
        .arg("size", args.size as i64)
        .arg("seed", args.seed as i64)
        .arg("p_missing_obs", args.p_missing_obs)
        .arg("p_missing_pix", args.p_missing_pix)
        .arg("split", format!("{},{},{}", splits.train, splits.val, splits.test));
    write_snapshot(&args.out, &record.to_toml())?;
    println!(
        "wrote {} {} sequences ({}x{}x{}, {} frames) to {}",
        args.n,
        gen.name(),
        gen.channels(),
        args.size,
        args.size,
        args.seq_len,
        args.out.display()
    );
    Ok(())
}
