//! Output-directory helpers: snapshots, PNG grids and checkpoint loading.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use longiflow::autodiff::Checkpoint;
use longiflow::data::SequenceBatch;
use longiflow::model::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ShapeSection, RESOLVED_NAME};
use crate::error::{CliError, IoContext, Result};

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).context(|| format!("writing {}", path.display()))
}

pub fn write_snapshot(dir: &Path, toml: &str) -> Result<()> {
    write_text(&dir.join(RESOLVED_NAME), toml)
}

fn quantize(x: f64) -> u8 {
    (255.0 * x.clamp(0.0, 1.0)).round() as u8
}

/// Writes `n` sequences of `frames` channel-major frames as one PNG: a row
/// per sequence and a column per timestep, no padding.
pub fn write_grid_png(path: &Path, values: &[f32], n: usize, frames: usize, shape: ShapeSection) -> Result<()> {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let fd = c * h * w;
    if values.len() != n * frames * fd {
        return Err(CliError::runtime("image grid does not match the tensor size"));
    }
    let (gw, gh) = ((frames * w) as u32, (n * h) as u32);
    let pixel = |k: usize, l: usize, ch: usize, y: usize, x: usize| -> u8 {
        quantize(values[(k * frames + l) * fd + (ch * h + y) * w + x] as f64)
    };
    let cell = |gx: u32, gy: u32| {
        let (gx, gy) = (gx as usize, gy as usize);
        (gy / h, gx / w, gy % h, gx % w)
    };
    let result = match c {
        1 => {
            let img: GrayImage = ImageBuffer::from_fn(gw, gh, |gx, gy| {
                let (k, l, y, x) = cell(gx, gy);
                Luma([pixel(k, l, 0, y, x)])
            });
            img.save(path)
        }
        3 => {
            let img: RgbImage = ImageBuffer::from_fn(gw, gh, |gx, gy| {
                let (k, l, y, x) = cell(gx, gy);
                Rgb([pixel(k, l, 0, y, x), pixel(k, l, 1, y, x), pixel(k, l, 2, y, x)])
            });
            img.save(path)
        }
        other => return Err(CliError::runtime(format!("cannot export {other}-channel frames as PNG"))),
    };
    result.map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

/// Config next to a checkpoint, as written by `train`.
pub fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(RESOLVED_NAME),
    }
}

/// Rebuilds the model described by the resolved config and loads the
/// checkpoint's parameters into it.
pub fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<(ExperimentConfig, Model)> {
    if !ckpt.is_file() {
        return Err(CliError::runtime(format!("checkpoint {} not found", ckpt.display())));
    }
    let cfg_path = config_for_checkpoint(ckpt, config);
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let mut model = Model::new(cfg.model_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let checkpoint = Checkpoint::read(ckpt)?;
    checkpoint.restore_params(&mut model.params)?;
    Ok((cfg, model))
}

pub fn check_shape(cfg: &ExperimentConfig, data: &SequenceBatch) -> Result<()> {
    let want = cfg.shape.expect("loaded configs carry a shape");
    let got = ShapeSection::of(data);
    if (want.channels, want.height, want.width) != (got.channels, got.height, got.width) || got.frames > want.frames {
        return Err(CliError::runtime(format!(
            "dataset frames are {}x{}x{} with {} timesteps, checkpoint expects {}x{}x{} with at most {}",
            got.channels, got.height, got.width, got.frames, want.channels, want.height, want.width, want.frames
        )));
    }
    Ok(())
}

/// Sample mean and (n - 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_clamps_and_rounds() {
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(1.5), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0 / 255.0 * 7.4), 7);
    }

    #[test]
    fn grid_has_one_cell_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ShapeSection {
            channels: 1,
            height: 3,
            width: 2,
            frames: 5,
        };
        let values: Vec<f32> = (0..4 * 5 * 6).map(|v| (v % 7) as f32 / 6.0).collect();
        let path = dir.path().join("g.png");
        write_grid_png(&path, &values, 4, 5, shape).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (10, 12));
        // sequence 2, timestep 3, pixel (y 1, x 0)
        let v = values[(2 * 5 + 3) * 6 + 2];
        assert_eq!(img.get_pixel(3 * 2, 2 * 3 + 1)[0], quantize(v as f64));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
