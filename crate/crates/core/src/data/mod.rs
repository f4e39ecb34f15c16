//! Synthetic longitudinal datasets, missing-data masks and dataset files.
//!
//! Randomness comes from ChaCha8 seeded with the dataset seed. Sequence `i`
//! reads stream `2 * i` for its content and stream `2 * i + 1` for its
//! missing-data masks, so content and masks can be regenerated independently
//! and per sequence.

mod generators;
mod tensor;

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use generators::{
    classify_mode, estimate_rotation, gen_ambiguous, gen_arm_shape, gen_rotating_bar, Generator, TransformMode,
    MODE_THRESHOLD,
};
pub use tensor::{Tensor, TensorData};

/// Random stream for sequence `index`; `purpose` 0 renders content, 1 draws masks.
pub fn sequence_rng(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + purpose);
    rng
}

/// Sequences of equally sized frames with observation and pixel masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// Frames per sequence slot, `T + 1`.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[N, T + 1, C, H, W]`, values in `[0, 1]`.
    pub data: Vec<f32>,
    /// `[N, T + 1]`, 1 = observed.
    pub obs_mask: Vec<u8>,
    /// `[N, T + 1, C, H, W]`, 1 = pixel observed.
    pub pixel_mask: Vec<u8>,
    /// Frames actually present in each sequence, `t_i + 1 <= T + 1`.
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    /// All-zero frames with full masks.
    pub fn empty(n: usize, frames: usize, channels: usize, height: usize, width: usize) -> Self {
        let total = n * frames * channels * height * width;
        SequenceBatch {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; total],
            obs_mask: vec![1; n * frames],
            pixel_mask: vec![1; total],
            lengths: vec![frames; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Scalars per frame, `C * H * W`.
    pub fn frame_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn frame_range(&self, i: usize, l: usize) -> Range<usize> {
        let d = self.frame_dim();
        let start = (i * self.frames + l) * d;
        start..start + d
    }

    pub fn frame(&self, i: usize, l: usize) -> &[f32] {
        &self.data[self.frame_range(i, l)]
    }

    pub fn frame_f64(&self, i: usize, l: usize) -> Vec<f64> {
        self.frame(i, l).iter().map(|&v| v as f64).collect()
    }

    pub fn pixel_mask_frame(&self, i: usize, l: usize) -> &[u8] {
        &self.pixel_mask[self.frame_range(i, l)]
    }

    pub(crate) fn set_frame(&mut self, i: usize, l: usize, values: &[f64]) {
        let r = self.frame_range(i, l);
        for (dst, &v) in self.data[r].iter_mut().zip(values) {
            *dst = v.clamp(0.0, 1.0) as f32;
        }
    }

    pub fn is_observed(&self, i: usize, l: usize) -> bool {
        l < self.lengths[i] && self.obs_mask[i * self.frames + l] == 1
    }

    /// Observed timesteps `O_i` in increasing order.
    pub fn observed_indices(&self, i: usize) -> Vec<usize> {
        (0..self.lengths[i]).filter(|&l| self.is_observed(i, l)).collect()
    }

    /// Whether any frame or pixel is marked missing.
    pub fn has_missing(&self) -> bool {
        self.obs_mask.iter().any(|&m| m == 0) || self.pixel_mask.iter().any(|&m| m == 0)
    }

    /// The sequences in `range`, as an independent batch.
    pub fn subset(&self, range: Range<usize>) -> SequenceBatch {
        let fd = self.frames * self.frame_dim();
        SequenceBatch {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data[range.start * fd..range.end * fd].to_vec(),
            obs_mask: self.obs_mask[range.start * self.frames..range.end * self.frames].to_vec(),
            pixel_mask: self.pixel_mask[range.start * fd..range.end * fd].to_vec(),
            lengths: self.lengths[range].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let total = n * self.frames * self.frame_dim();
        if self.data.len() != total || self.pixel_mask.len() != total || self.obs_mask.len() != n * self.frames {
            return Err(Error::shape("sequence batch", "array sizes disagree with the declared shape"));
        }
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("data values must lie in [0, 1]"));
        }
        if self.obs_mask.iter().chain(&self.pixel_mask).any(|&m| m > 1) {
            return Err(Error::invalid("masks must be binary"));
        }
        for i in 0..n {
            if self.lengths[i] == 0 || self.lengths[i] > self.frames {
                return Err(Error::invalid(format!("sequence {i} has invalid length {}", self.lengths[i])));
            }
            if self.observed_indices(i).is_empty() {
                return Err(Error::NoObservation(i));
            }
        }
        Ok(())
    }
}

/// Mean absolute per-pixel difference between consecutive frames, averaged
/// over every consecutive pair inside each sequence's length.
pub fn mean_frame_change(batch: &SequenceBatch) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0usize);
    for i in 0..batch.len() {
        for l in 1..batch.lengths[i] {
            let (a, b) = (batch.frame(i, l - 1), batch.frame(i, l));
            let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
            acc += diff / a.len() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        acc / pairs as f64
    }
}

/// Marks timesteps unobserved with probability `p_obs` and pixels of observed
/// frames missing with probability `p_pix`. Sequences left without any
/// observed frame are redrawn. Data values are untouched.
pub fn apply_missing(batch: &SequenceBatch, p_obs: f64, p_pix: f64, seed: u64) -> Result<SequenceBatch> {
    for (name, p) in [("p_obs", p_obs), ("p_pix", p_pix)] {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} must lie in [0, 1), got {p}")));
        }
    }
    let mut out = batch.clone();
    let d = batch.frame_dim();
    for i in 0..batch.len() {
        let mut rng = sequence_rng(seed, i, 1);
        let len = batch.lengths[i];
        let obs: Vec<bool> = loop {
            let draw: Vec<bool> = (0..len).map(|_| !rng.random_bool(p_obs)).collect();
            if draw.iter().any(|&o| o) {
                break draw;
            }
        };
        for l in 0..batch.frames {
            let observed = l < len && obs[l];
            out.obs_mask[i * batch.frames + l] = observed as u8;
            let start = (i * batch.frames + l) * d;
            for m in &mut out.pixel_mask[start..start + d] {
                *m = if observed { (!rng.random_bool(p_pix)) as u8 } else { 1 };
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Splits {
    /// 4:1:1 split of `n` sequences, remainder to training.
    pub fn default_for(n: usize) -> Self {
        let val = n / 6;
        let test = n / 6;
        Splits {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator: String,
    pub seed: u64,
    pub n: usize,
    /// Frames per sequence, `T + 1`.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub p_obs: f64,
    pub p_pix: f64,
    pub splits: Splits,
}

impl DatasetManifest {
    /// Regenerates the dataset described by this manifest.
    pub fn generate(&self) -> Result<SequenceBatch> {
        let gen = Generator::parse(&self.generator)?;
        if self.height != self.width || self.channels != gen.channels() {
            return Err(Error::invalid("manifest shape does not match the generator"));
        }
        if self.splits.total() != self.n {
            return Err(Error::invalid(format!(
                "splits sum to {}, dataset has {} sequences",
                self.splits.total(),
                self.n
            )));
        }
        let batch = gen.generate(self.n, self.frames, self.height, self.seed)?;
        if self.p_obs > 0.0 || self.p_pix > 0.0 {
            apply_missing(&batch, self.p_obs, self.p_pix, self.seed)
        } else {
            Ok(batch)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub batch: SequenceBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl Dataset {
    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let batch = manifest.generate()?;
        Ok(Dataset { manifest, batch })
    }

    pub fn split(&self, which: Split) -> SequenceBatch {
        let s = self.manifest.splits;
        let range = match which {
            Split::Train => 0..s.train,
            Split::Val => s.train..s.train + s.val,
            Split::Test => s.train + s.val..s.total(),
            Split::All => 0..self.batch.len(),
        };
        self.batch.subset(range)
    }

    /// Writes `data.lft`, `obs_mask.lft`, `pixel_mask.lft` and
    /// `manifest.json`, plus `lengths.lft` when some sequence is shorter than
    /// the frame count.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let b = &self.batch;
        let full = vec![b.len(), b.frames, b.channels, b.height, b.width];
        Tensor::f32(full.clone(), b.data.clone())?.write(dir.join("data.lft"))?;
        Tensor::u8(vec![b.len(), b.frames], b.obs_mask.clone())?.write(dir.join("obs_mask.lft"))?;
        Tensor::u8(full, b.pixel_mask.clone())?.write(dir.join("pixel_mask.lft"))?;
        let lengths_path = dir.join("lengths.lft");
        if b.lengths.iter().any(|&l| l != b.frames) {
            if b.frames > 255 {
                return Err(Error::invalid("variable lengths are limited to 255 frames"));
            }
            let l: Vec<u8> = b.lengths.iter().map(|&v| v as u8).collect();
            Tensor::u8(vec![b.len()], l)?.write(lengths_path)?;
        } else if lengths_path.exists() {
            std::fs::remove_file(lengths_path)?;
        }
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let data = Tensor::read(dir.join("data.lft"))?;
        let obs = Tensor::read(dir.join("obs_mask.lft"))?;
        let pix = Tensor::read(dir.join("pixel_mask.lft"))?;
        let m = &manifest;
        let full = vec![m.n, m.frames, m.channels, m.height, m.width];
        if data.shape != full || pix.shape != full || obs.shape != vec![m.n, m.frames] {
            return Err(Error::Format("dataset tensors do not match the manifest".into()));
        }
        let lengths_path = dir.join("lengths.lft");
        let lengths = if lengths_path.exists() {
            let t = Tensor::read(lengths_path)?;
            if t.shape != vec![m.n] {
                return Err(Error::Format("lengths.lft does not match the manifest".into()));
            }
            t.into_u8()?.into_iter().map(usize::from).collect()
        } else {
            vec![m.frames; m.n]
        };
        let batch = SequenceBatch {
            frames: m.frames,
            channels: m.channels,
            height: m.height,
            width: m.width,
            data: data.into_f32()?,
            obs_mask: obs.into_u8()?,
            pixel_mask: pix.into_u8()?,
            lengths,
        };
        batch.validate()?;
        Ok(Dataset { manifest, batch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_change_of_a_step_sequence() {
        let mut b = SequenceBatch::empty(1, 3, 1, 1, 2);
        b.data = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        assert!((mean_frame_change(&b) - 0.5).abs() < 1e-12);
        b.lengths = vec![1];
        assert_eq!(mean_frame_change(&b), 0.0);
    }

    #[test]
    fn no_removal_keeps_full_masks() {
        let b = gen_rotating_bar(5, 4, 8, 1).unwrap();
        let m = apply_missing(&b, 0.0, 0.0, 2).unwrap();
        assert!(m.obs_mask.iter().chain(&m.pixel_mask).all(|&v| v == 1));
        assert_eq!(m.data, b.data);
    }

    #[test]
    fn observed_fraction_matches_probability() {
        let b = SequenceBatch::empty(10_000, 10, 1, 1, 1);
        let m = apply_missing(&b, 0.5, 0.0, 3).unwrap();
        let frac = m.obs_mask.iter().map(|&v| v as f64).sum::<f64>() / m.obs_mask.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn unobserved_frames_keep_full_pixel_masks() {
        let b = gen_rotating_bar(50, 8, 8, 1).unwrap();
        let m = apply_missing(&b, 0.5, 0.4, 7).unwrap();
        for i in 0..50 {
            for l in 0..8 {
                if !m.is_observed(i, l) {
                    assert!(m.pixel_mask_frame(i, l).iter().all(|&v| v == 1));
                }
            }
        }
        m.validate().unwrap();
    }

    #[test]
    fn invalid_probabilities() {
        let b = SequenceBatch::empty(1, 2, 1, 1, 1);
        assert!(apply_missing(&b, 1.0, 0.0, 0).is_err());
        assert!(apply_missing(&b, 0.0, 1.5, 0).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let manifest = DatasetManifest {
            generator: "ambiguous".into(),
            seed: 5,
            n: 6,
            frames: 3,
            channels: 3,
            height: 16,
            width: 16,
            p_obs: 0.3,
            p_pix: 0.2,
            splits: Splits::default_for(6),
        };
        let ds = Dataset::from_manifest(manifest).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(Dataset::from_manifest(back.manifest.clone()).unwrap(), ds);
        assert_eq!(ds.split(Split::Train).len(), 4);
        assert_eq!(ds.split(Split::Test).frame(0, 0), ds.batch.frame(5, 0));
    }
}
