//! Procedural image-sequence generators. Every sequence is rendered from its
//! own random stream, so any sequence can be regenerated in isolation.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{sequence_rng, SequenceBatch};
use crate::error::{Error, Result};

/// Sub-samples per pixel axis used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    RotatingBar,
    ArmShape,
    Ambiguous,
}

impl Generator {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "rotating-bar" => Ok(Generator::RotatingBar),
            "arm-shape" => Ok(Generator::ArmShape),
            "ambiguous" => Ok(Generator::Ambiguous),
            other => Err(Error::invalid(format!(
                "unknown generator {other:?} (expected rotating-bar, arm-shape or ambiguous)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Generator::RotatingBar => "rotating-bar",
            Generator::ArmShape => "arm-shape",
            Generator::Ambiguous => "ambiguous",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Generator::Ambiguous => 3,
            _ => 1,
        }
    }

    pub fn generate(self, n: usize, frames: usize, size: usize, seed: u64) -> Result<SequenceBatch> {
        match self {
            Generator::RotatingBar => gen_rotating_bar(n, frames, size, seed),
            Generator::ArmShape => gen_arm_shape(n, frames, size, seed),
            Generator::Ambiguous => gen_ambiguous(n, frames, size, seed, 0.5),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (qx, qy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        qx * qx + qy * qy <= self.radius * self.radius
    }
}

/// Fraction of each pixel covered by the union of `shapes`.
fn coverage(size: usize, shapes: &[Capsule]) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = (x as f64 + (sx as f64 + 0.5) * step, y as f64 + (sy as f64 + 0.5) * step);
                    if shapes.iter().any(|s| s.contains(p)) {
                        hits += 1;
                    }
                }
            }
            out[y * size + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

fn check_size(size: usize, min: usize, what: &str) -> Result<()> {
    if size < min {
        return Err(Error::invalid(format!("{what} needs size >= {min}, got {size}")));
    }
    Ok(())
}

fn check_frames(frames: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::invalid("sequences need at least one frame"));
    }
    Ok(())
}

// ---- rotating bar ---------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct BarParams {
    pub start: f64,
    pub length: f64,
    pub radius: f64,
}

impl BarParams {
    fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        BarParams {
            start: rng.random_range(0.0..TAU),
            length: rng.random_range(0.32..0.45) * s,
            radius: rng.random_range(0.04..0.07) * s,
        }
    }

    /// The bar at absolute angle offset `angle` from its start, a one-sided
    /// hand pivoting about the image centre.
    pub(crate) fn render(&self, size: usize, angle: f64) -> Vec<f64> {
        let c = size as f64 / 2.0;
        let th = self.start + angle;
        let tip = (c + self.length * th.sin(), c - self.length * th.cos());
        coverage(
            size,
            &[Capsule {
                a: (c, c),
                b: tip,
                radius: self.radius,
            }],
        )
    }
}

/// Bars of random length and thickness making one full turn over the
/// sequence: frame `l` is rotated by `l * 360 / frames` degrees.
pub fn gen_rotating_bar(n: usize, frames: usize, size: usize, seed: u64) -> Result<SequenceBatch> {
    check_size(size, 8, "rotating-bar")?;
    check_frames(frames)?;
    let mut batch = SequenceBatch::empty(n, frames, 1, size, size);
    let step = TAU / frames as f64;
    for i in 0..n {
        let mut rng = sequence_rng(seed, i, 0);
        let p = BarParams::sample(&mut rng, size);
        for l in 0..frames {
            batch.set_frame(i, l, &p.render(size, l as f64 * step));
        }
    }
    Ok(batch)
}

// ---- arm shape ------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct ArmParams {
    pub cx: f64,
    pub torso_radius: f64,
    pub arm_length: f64,
    pub arm_radius: f64,
    pub max_angle: f64,
}

impl ArmParams {
    fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        ArmParams {
            cx: s / 2.0 + rng.random_range(-0.05..0.05) * s,
            torso_radius: rng.random_range(0.07..0.1) * s,
            arm_length: rng.random_range(0.26..0.34) * s,
            arm_radius: rng.random_range(0.035..0.05) * s,
            max_angle: rng.random_range(60f64..150.0).to_radians(),
        }
    }

    pub(crate) fn shoulder(&self, size: usize) -> (f64, f64) {
        let s = size as f64;
        (self.cx - self.torso_radius - self.arm_radius, 0.42 * s)
    }

    fn body(&self, size: usize) -> Vec<Capsule> {
        let s = size as f64;
        let head_r = 0.09 * s;
        vec![
            // head
            Capsule {
                a: (self.cx, 0.2 * s),
                b: (self.cx, 0.2 * s),
                radius: head_r,
            },
            // torso
            Capsule {
                a: (self.cx, 0.38 * s),
                b: (self.cx, 0.72 * s),
                radius: self.torso_radius,
            },
            // legs
            Capsule {
                a: (self.cx, 0.72 * s),
                b: (self.cx - 0.12 * s, 0.94 * s),
                radius: self.arm_radius,
            },
            Capsule {
                a: (self.cx, 0.72 * s),
                b: (self.cx + 0.12 * s, 0.94 * s),
                radius: self.arm_radius,
            },
            // right arm, hanging
            Capsule {
                a: (self.cx + self.torso_radius + self.arm_radius, 0.42 * s),
                b: (
                    self.cx + self.torso_radius + self.arm_radius + 0.08 * s,
                    0.42 * s + self.arm_length,
                ),
                radius: self.arm_radius,
            },
        ]
    }

    /// Limb angle 0 points straight down; larger angles raise it sideways.
    pub(crate) fn render(&self, size: usize, angle: f64, with_arm: bool) -> Vec<f64> {
        let mut shapes = self.body(size);
        if with_arm {
            let sh = self.shoulder(size);
            shapes.push(Capsule {
                a: sh,
                b: (sh.0 - self.arm_length * angle.sin(), sh.1 + self.arm_length * angle.cos()),
                radius: self.arm_radius,
            });
        }
        coverage(size, &shapes)
    }
}

/// A figure raising its left arm: the limb angle grows linearly from 0 to a
/// per-sequence maximum; body proportions are jittered per sequence.
pub fn gen_arm_shape(n: usize, frames: usize, size: usize, seed: u64) -> Result<SequenceBatch> {
    check_size(size, 16, "arm-shape")?;
    check_frames(frames)?;
    let mut batch = SequenceBatch::empty(n, frames, 1, size, size);
    for i in 0..n {
        let mut rng = sequence_rng(seed, i, 0);
        let p = ArmParams::sample(&mut rng, size);
        for l in 0..frames {
            let frac = if frames > 1 { l as f64 / (frames - 1) as f64 } else { 0.0 };
            batch.set_frame(i, l, &p.render(size, frac * p.max_angle, true));
        }
    }
    Ok(batch)
}

// ---- ambiguous transforms -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMode {
    Brightness,
    Scale,
}

/// Brightness reached by the brightness mode at the last frame, as the
/// fraction of the remaining headroom `1 - c` added to every channel.
const BRIGHT_GAIN: f64 = 0.9;
const SCALE_GAIN: f64 = 0.9;
/// Final-frame peak intensity separating the two modes: base colours never
/// exceed 0.5 and the brightness mode ends above 0.9.
pub const MODE_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlobParams {
    pub centre: (f64, f64),
    pub radius: f64,
    pub colour: [f64; 3],
}

impl BlobParams {
    fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        BlobParams {
            centre: (
                s / 2.0 + rng.random_range(-0.08..0.08) * s,
                s / 2.0 + rng.random_range(-0.08..0.08) * s,
            ),
            radius: rng.random_range(0.14..0.2) * s,
            colour: [
                rng.random_range(0.2..0.5),
                rng.random_range(0.2..0.5),
                rng.random_range(0.2..0.5),
            ],
        }
    }

    /// Channel-major `[3, size, size]` frame at progress `frac` in `[0, 1]`.
    pub(crate) fn render(&self, size: usize, mode: TransformMode, frac: f64) -> Vec<f64> {
        let (radius, colour) = match mode {
            TransformMode::Brightness => (self.radius, self.colour.map(|c| c + (1.0 - c) * BRIGHT_GAIN * frac)),
            TransformMode::Scale => (self.radius * (1.0 + SCALE_GAIN * frac), self.colour),
        };
        let cov = coverage(
            size,
            &[Capsule {
                a: self.centre,
                b: self.centre,
                radius,
            }],
        );
        colour.iter().flat_map(|&c| cov.iter().map(move |&v| v * c)).collect()
    }
}

/// Coloured disks that either brighten or grow; both modes share the first
/// frame exactly. `p_scale` is the probability of the scale mode.
pub fn gen_ambiguous(n: usize, frames: usize, size: usize, seed: u64, p_scale: f64) -> Result<SequenceBatch> {
    check_size(size, 16, "ambiguous")?;
    check_frames(frames)?;
    if !(0.0..=1.0).contains(&p_scale) {
        return Err(Error::invalid("mode probability must lie in [0, 1]"));
    }
    let mut batch = SequenceBatch::empty(n, frames, 3, size, size);
    for i in 0..n {
        let mut rng = sequence_rng(seed, i, 0);
        let p = BlobParams::sample(&mut rng, size);
        let mode = if rng.random_bool(p_scale) {
            TransformMode::Scale
        } else {
            TransformMode::Brightness
        };
        for l in 0..frames {
            let frac = if frames > 1 { l as f64 / (frames - 1) as f64 } else { 0.0 };
            batch.set_frame(i, l, &p.render(size, mode, frac));
        }
    }
    Ok(batch)
}

/// Mode of an ambiguous-dataset sequence judged from its final frame alone:
/// a brightened disk has a near-white peak, a grown one keeps its dim colour.
pub fn classify_mode(final_frame: &[f64]) -> TransformMode {
    let peak = final_frame.iter().copied().fold(0.0, f64::max);
    if peak > MODE_THRESHOLD {
        TransformMode::Brightness
    } else {
        TransformMode::Scale
    }
}

/// Angle in radians by which `b` is best explained as a rotation of `a`
/// about the image centre, searched on a 1-degree grid.
pub fn estimate_rotation(a: &[f64], b: &[f64], size: usize) -> f64 {
    let c = size as f64 / 2.0;
    let sample = |img: &[f64], x: f64, y: f64| -> f64 {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let get = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= size as f64 || yi >= size as f64 {
                0.0
            } else {
                img[yi as usize * size + xi as usize]
            }
        };
        get(x0, y0) * (1.0 - tx) * (1.0 - ty)
            + get(x0 + 1.0, y0) * tx * (1.0 - ty)
            + get(x0, y0 + 1.0) * (1.0 - tx) * ty
            + get(x0 + 1.0, y0 + 1.0) * tx * ty
    };
    let mut best = (f64::NEG_INFINITY, 0.0);
    for deg in 0..360 {
        let th = (deg as f64).to_radians();
        let (s, co) = th.sin_cos();
        let mut score = 0.0;
        for y in 0..size {
            for x in 0..size {
                // pixel of b pulled back through the rotation
                let (px, py) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                let (qx, qy) = (co * px + s * py + c, -s * px + co * py + c);
                score += b[y * size + x] * sample(a, qx, qy);
            }
        }
        if score > best.0 {
            best = (score, th);
        }
    }
    let th = best.1;
    if th > PI {
        th - TAU
    } else {
        th
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consecutive_bars_rotate_by_45_degrees() {
        let b = gen_rotating_bar(4, 8, 16, 3).unwrap();
        for i in 0..4 {
            for l in 0..7 {
                let a = b.frame_f64(i, l);
                let c = b.frame_f64(i, l + 1);
                let th = estimate_rotation(&a, &c, 16).to_degrees();
                assert!((th - 45.0).abs() <= 2.0, "seq {i} frame {l}: {th}");
            }
        }
    }

    #[test]
    fn full_turn_returns_to_start() {
        let mut rng = sequence_rng(5, 0, 0);
        let p = BarParams::sample(&mut rng, 16);
        let f0 = p.render(16, 0.0);
        let f8 = p.render(16, 8.0 * TAU / 8.0);
        let worst = f0.iter().zip(&f8).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 16.0 + 1e-12, "{worst}");
    }

    #[test]
    fn arm_angle_is_monotone() {
        let size = 16;
        let batch = gen_arm_shape(20, 10, size, 9).unwrap();
        for i in 0..20 {
            let mut rng = sequence_rng(9, i, 0);
            let p = ArmParams::sample(&mut rng, size);
            let body = p.render(size, 0.0, false);
            let sh = p.shoulder(size);
            let mut prev = f64::NEG_INFINITY;
            for l in 0..10 {
                let f = batch.frame_f64(i, l);
                let (mut sx, mut sy, mut w) = (0.0, 0.0, 0.0);
                for y in 0..size {
                    for x in 0..size {
                        let v = f[y * size + x] - body[y * size + x];
                        if v > 0.0 {
                            sx += v * (x as f64 + 0.5 - sh.0);
                            sy += v * (y as f64 + 0.5 - sh.1);
                            w += v;
                        }
                    }
                }
                // 0 = straight down, growing as the arm rises to the left
                let angle = (-sx / w).atan2(sy / w);
                assert!(angle >= prev - 1e-9, "seq {i} frame {l}: {angle} < {prev}");
                prev = angle;
            }
        }
    }

    #[test]
    fn arm_sequences_start_with_lowered_arm() {
        let mut rng = sequence_rng(1, 2, 0);
        let p = ArmParams::sample(&mut rng, 16);
        let b = gen_arm_shape(3, 6, 16, 1).unwrap();
        let f0: Vec<f64> = b.frame_f64(2, 0);
        assert_eq!(f0, p.render(16, 0.0, true));
    }

    #[test]
    fn ambiguous_modes_share_first_frame_and_are_classifiable() {
        let mut rng = sequence_rng(4, 0, 0);
        let p = BlobParams::sample(&mut rng, 16);
        assert_eq!(
            p.render(16, TransformMode::Brightness, 0.0),
            p.render(16, TransformMode::Scale, 0.0)
        );
        let n = 2000;
        let b = gen_ambiguous(n, 8, 16, 4, 0.5).unwrap();
        let mut correct = 0;
        for i in 0..n {
            let mut rng = sequence_rng(4, i, 0);
            let _ = BlobParams::sample(&mut rng, 16);
            let truth = if rng.random_bool(0.5) {
                TransformMode::Scale
            } else {
                TransformMode::Brightness
            };
            if classify_mode(&b.frame_f64(i, 7)) == truth {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 > 0.99);
    }

    #[test]
    fn ambiguous_mode_frequencies() {
        let n = 10_000;
        let b = gen_ambiguous(n, 2, 16, 12, 0.3).unwrap();
        let scale = (0..n)
            .filter(|&i| classify_mode(&b.frame_f64(i, 1)) == TransformMode::Scale)
            .count();
        assert!((scale as f64 / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn size_preconditions() {
        assert!(gen_rotating_bar(1, 8, 7, 0).is_err());
        assert!(gen_arm_shape(1, 8, 15, 0).is_err());
        assert!(gen_ambiguous(1, 8, 12, 0, 0.5).is_err());
        assert!(Generator::parse("spirals").is_err());
    }
}
