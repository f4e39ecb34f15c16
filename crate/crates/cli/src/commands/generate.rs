use std::path::PathBuf;

use clap::Args;
use longiflow::autodiff::Precision;
use longiflow::data::Tensor;
use longiflow::inference::{generate_conditional, generate_unconditional};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::InvocationRecord;
use crate::error::{CliError, Result};
use crate::output::{create_dir, load_model, write_grid_png, write_snapshot};

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Number of sequences.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Last timestep T; sequences hold T + 1 frames.
    #[arg(long = "T", short = 'T')]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// LFT1 tensor holding one frame; switches to conditional generation.
    #[arg(long)]
    pub condition_on: Option<PathBuf>,
    /// Timestep at which the conditioning frame is placed.
    #[arg(long, requires = "condition_on")]
    pub index: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let (cfg, model) = load_model(&args.ckpt, args.config.as_deref())?;
    let shape = cfg.shape.expect("loaded configs carry a shape");
    let chain = model.chain().len();
    let t = args.t.unwrap_or(chain);
    if t > chain {
        return Err(CliError::usage(format!("--T {t} exceeds the chain length {chain}")));
    }
    if args.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let frames = t + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let precision = Precision::global();
    let mut record = InvocationRecord::new("generate")
        .arg("checkpoint", args.ckpt.to_string_lossy().into_owned())
        .arg("n", args.n as i64)
        .arg("T", t as i64)
        .arg("seed", args.seed as i64);
    let out = match &args.condition_on {
        None => generate_unconditional(&model, args.n, frames, &mut rng, precision)?,
        Some(path) => {
            let j = args.index.unwrap_or(0);
            if j > t {
                return Err(CliError::usage(format!("--index {j} is beyond --T {t}")));
            }
            let frame: Vec<f64> = Tensor::read(path)?.into_f32()?.into_iter().map(f64::from).collect();
            if frame.len() != shape.frame_dim() {
                return Err(CliError::runtime(format!(
                    "conditioning frame holds {} values, the model expects {}",
                    frame.len(),
                    shape.frame_dim()
                )));
            }
            record = record
                .arg("condition_on", path.to_string_lossy().into_owned())
                .arg("index", j as i64);
            generate_conditional(&model, &frame, j, args.n, frames, &mut rng, precision)?
        }
    };
    let values: Vec<f32> = out.data().iter().map(|&v| v as f32).collect();
    create_dir(&args.out)?;
    let dims = vec![args.n, frames, shape.channels, shape.height, shape.width];
    Tensor::f32(dims, values.clone())?.write(args.out.join("generated.lft"))?;
    write_grid_png(&args.out.join("generated.png"), &values, args.n, frames, shape)?;
    record.config = Some(cfg);
    write_snapshot(&args.out, &record.to_toml())?;
    println!("wrote {} sequences of {frames} frames to {}", args.n, args.out.display());
    Ok(())
}
