use rand::Rng;

use super::VideoClip;
use crate::error::{Error, Result};
use crate::image::Image;

/// Random downscaling applied before cropping.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ScalePolicy {
    #[default]
    Off,
    /// Uniform factor in `[lo, hi]`.
    Continuous { lo: f64, hi: f64 },
    /// Factor chosen uniformly from a list.
    Discrete(Vec<f64>),
}

impl ScalePolicy {
    fn validate(&self) -> Result<()> {
        let ok = |s: f64| s > 0.0 && s <= 1.0;
        match self {
            ScalePolicy::Off => Ok(()),
            ScalePolicy::Continuous { lo, hi } if ok(*lo) && ok(*hi) && lo <= hi => Ok(()),
            ScalePolicy::Discrete(list) if !list.is_empty() && list.iter().all(|&s| ok(s)) => Ok(()),
            other => Err(Error::InvalidArgument(format!(
                "scale factors must lie in (0, 1] with lo <= hi: {other:?}"
            ))),
        }
    }

    pub fn is_off(&self) -> bool {
        matches!(self, ScalePolicy::Off)
    }
}

/// Photometric jitter ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Jitter {
    /// Maximum absolute hue rotation, as a fraction of the hue circle.
    pub hue: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Probability that a clip is jittered at all.
    pub probability: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            hue: 0.05,
            contrast: (0.7, 1.3),
            saturation: (0.7, 1.3),
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    /// Random multiples of 90°.
    pub rotations: bool,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    /// Square crop edge; `None` keeps the full (rescaled) frame.
    pub crop_size: Option<usize>,
    pub photometric: bool,
    pub jitter: Jitter,
    pub random_scale: ScalePolicy,
    /// Rescaled frame sizes are rounded down to a multiple of this.
    pub size_multiple: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentationPolicy {
    /// Everything off, full frames.
    pub fn identity() -> Self {
        Self {
            rotations: false,
            flips: false,
            crop_size: None,
            photometric: false,
            jitter: Jitter::default(),
            random_scale: ScalePolicy::Off,
            size_multiple: 1,
        }
    }

    /// Rotations, flips and random crops of `crop` pixels.
    pub fn geometric(crop: usize) -> Self {
        Self {
            rotations: true,
            flips: true,
            crop_size: Some(crop),
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.random_scale.validate()?;
        let j = &self.jitter;
        if !(0.0..=1.0).contains(&j.probability) {
            return Err(Error::InvalidArgument(format!(
                "jitter probability {} outside [0, 1]",
                j.probability
            )));
        }
        if j.hue < 0.0 || j.hue > 0.5 || j.contrast.0 > j.contrast.1 || j.saturation.0 > j.saturation.1 || j.contrast.0 < 0.0 || j.saturation.0 < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid jitter ranges {j:?}")));
        }
        if self.size_multiple == 0 {
            return Err(Error::InvalidArgument("size multiple must be positive".into()));
        }
        if let Some(c) = self.crop_size {
            if c == 0 || c % self.size_multiple != 0 {
                return Err(Error::InvalidArgument(format!(
                    "crop size {c} is not a positive multiple of {}",
                    self.size_multiple
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricParams {
    pub hue_shift: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// One draw of augmentation parameters, shared by every frame of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Frame size after rescaling.
    pub scaled: (usize, usize),
    /// Crop window `(y0, x0, height, width)` in rescaled coordinates.
    pub crop: (usize, usize, usize, usize),
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    pub photometric: Option<PhotometricParams>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

impl AugmentParams {
    /// Draws parameters for frames of `height × width`.
    pub fn draw<R: Rng + ?Sized>(policy: &AugmentationPolicy, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        policy.validate()?;
        let scale = match &policy.random_scale {
            ScalePolicy::Off => 1.0,
            ScalePolicy::Continuous { lo, hi } => uniform(rng, (*lo, *hi)),
            ScalePolicy::Discrete(list) => list[rng.gen_range(0..list.len())],
        };
        let scaled = if scale == 1.0 {
            (height, width)
        } else {
            let m = policy.size_multiple;
            let fit = |n: usize| ((scale * n as f64).floor() as usize / m) * m;
            (fit(height), fit(width))
        };
        let (ch, cw) = match policy.crop_size {
            Some(c) => (c, c),
            None => scaled,
        };
        if ch == 0 || cw == 0 || ch > scaled.0 || cw > scaled.1 {
            return Err(Error::InvalidArgument(format!(
                "crop {ch}x{cw} does not fit the {}x{} frame (scale {scale:.4})",
                scaled.0, scaled.1
            )));
        }
        let y0 = rng.gen_range(0..=scaled.0 - ch);
        let x0 = rng.gen_range(0..=scaled.1 - cw);
        let quarter_turns = if policy.rotations { rng.gen_range(0..4u8) } else { 0 };
        let (flip_h, flip_v) = if policy.flips {
            (rng.gen_bool(0.5), rng.gen_bool(0.5))
        } else {
            (false, false)
        };
        let photometric = if policy.photometric && rng.gen_bool(policy.jitter.probability) {
            let j = &policy.jitter;
            Some(PhotometricParams {
                hue_shift: uniform(rng, (-j.hue, j.hue)),
                contrast: uniform(rng, j.contrast),
                saturation: uniform(rng, j.saturation),
            })
        } else {
            None
        };
        Ok(Self {
            scale,
            scaled,
            crop: (y0, x0, ch, cw),
            quarter_turns,
            flip_h,
            flip_v,
            photometric,
        })
    }

    /// Applies the geometric transform, then the photometric co-transform
    /// for 3-channel images.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = if self.scaled != (img.height(), img.width()) {
            img.resize_area(self.scaled.0, self.scaled.1)?
        } else {
            img.clone()
        };
        let (y0, x0, h, w) = self.crop;
        if (y0, x0, h, w) != (0, 0, out.height(), out.width()) {
            out = out.crop(y0, x0, h, w)?;
        }
        if self.quarter_turns != 0 {
            out = out.rotate90(self.quarter_turns);
        }
        if self.flip_h {
            out = out.flip_horizontal();
        }
        if self.flip_v {
            out = out.flip_vertical();
        }
        if let (Some(p), 3) = (self.photometric, out.channels()) {
            out = jitter(&out, p);
        }
        Ok(out)
    }
}

/// One draw for the whole clip, applied to every blurry frame and the sharp
/// reference.
pub fn augment<R: Rng + ?Sized>(clip: &VideoClip, policy: &AugmentationPolicy, rng: &mut R) -> Result<VideoClip> {
    let params = AugmentParams::draw(policy, clip.height(), clip.width(), rng)?;
    let blurry = clip
        .blurry_frames()
        .iter()
        .map(|f| params.apply(f))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(
        blurry,
        params.apply(clip.sharp_reference())?,
        clip.sequence_id(),
        clip.center_index(),
    )
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Contrast, saturation, then hue.
fn jitter(img: &Image, p: PhotometricParams) -> Image {
    let n = img.height() * img.width();
    let mut px: Vec<[f32; 3]> = (0..n)
        .map(|i| [img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]])
        .collect();
    let mean = px.iter().map(|q| gray(q[0], q[1], q[2]) as f64).sum::<f64>() / n.max(1) as f64;
    let (c, s) = (p.contrast as f32, p.saturation as f32);
    for q in &mut px {
        for v in q.iter_mut() {
            *v = (c * *v + (1.0 - c) * mean as f32).clamp(0.0, 1.0);
        }
        let g = gray(q[0], q[1], q[2]);
        for v in q.iter_mut() {
            *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
        }
        if p.hue_shift != 0.0 {
            *q = shift_hue(*q, p.hue_shift as f32);
        }
    }
    let mut out = Image::new(3, img.height(), img.width());
    for (i, q) in px.iter().enumerate() {
        for (ch, &v) in q.iter().enumerate() {
            out.plane_mut(ch)[i] = v;
        }
    }
    out
}

fn shift_hue([r, g, b]: [f32; 3], shift: f32) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return [r, g, b];
    }
    let s = delta / max;
    let mut h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    h = (h + shift).rem_euclid(1.0);
    let v = max;
    let sector = h * 6.0;
    let i = sector.floor();
    let f = sector - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn marker_clip(len: usize, h: usize, w: usize) -> VideoClip {
        let frames = (0..len)
            .map(|t| Image::from_fn(3, h, w, |c, y, x| ((y * w + x) * 3 + c + t) as f32 / (h * w * 3 + len) as f32))
            .collect::<Vec<_>>();
        let sharp = frames[len / 2].clone();
        VideoClip::new(frames, sharp, "m", len / 2).unwrap()
    }

    #[test]
    fn identity_policy_leaves_clip_unchanged() {
        let clip = marker_clip(3, 8, 6);
        let out = augment(&clip, &AugmentationPolicy::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn same_draw_for_every_frame() {
        // Frame t differs from frame 0 by a constant t/denominator; after a
        // shared transform that relation must still hold pixelwise.
        let clip = marker_clip(5, 16, 16);
        let mut policy = AugmentationPolicy::geometric(8);
        policy.random_scale = ScalePolicy::Off;
        for seed in 0..20 {
            let out = augment(&clip, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let f0 = &out.blurry_frames()[0];
            for (t, f) in out.blurry_frames().iter().enumerate() {
                let step = t as f32 / (16 * 16 * 3 + 5) as f32;
                for (a, b) in f.data().iter().zip(f0.data()) {
                    assert!((a - b - step).abs() < 1e-6);
                }
            }
            assert_eq!(out.sharp_reference(), out.center_frame());
        }
    }

    #[test]
    fn oversized_crop_rejected() {
        let clip = marker_clip(1, 8, 8);
        let mut policy = AugmentationPolicy::geometric(16);
        assert!(augment(&clip, &policy, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        policy.crop_size = Some(8);
        policy.random_scale = ScalePolicy::Discrete(vec![0.5]);
        assert!(augment(&clip, &policy, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn scaled_size_respects_multiple() {
        let policy = AugmentationPolicy {
            random_scale: ScalePolicy::Continuous { lo: 0.25, hi: 1.0 },
            size_multiple: 8,
            crop_size: Some(16),
            ..AugmentationPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = AugmentParams::draw(&policy, 100, 90, &mut rng).unwrap_or_else(|e| panic!("{e}"));
            assert!(p.scale >= 0.25 && p.scale <= 1.0);
            if p.scale < 1.0 {
                assert_eq!(p.scaled.0 % 8, 0);
                assert!(p.scaled.0 <= (p.scale * 100.0) as usize);
            }
        }
    }

    #[test]
    fn discrete_scales_are_drawn_from_list() {
        let policy = AugmentationPolicy {
            random_scale: ScalePolicy::Discrete(vec![0.25, 1.0 / 3.0, 0.5]),
            ..AugmentationPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..60 {
            let p = AugmentParams::draw(&policy, 96, 96, &mut rng).unwrap();
            seen.insert((p.scale * 1000.0) as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![250, 333, 500]);
    }

    #[test]
    fn invalid_policies() {
        let mut p = AugmentationPolicy::identity();
        p.jitter.probability = 1.5;
        assert!(p.validate().is_err());
        p = AugmentationPolicy::identity();
        p.random_scale = ScalePolicy::Continuous { lo: 0.5, hi: 0.25 };
        assert!(p.validate().is_err());
        p.random_scale = ScalePolicy::Continuous { lo: 0.0, hi: 1.0 };
        assert!(p.validate().is_err());
        p = AugmentationPolicy::geometric(12);
        p.size_multiple = 8;
        assert!(p.validate().is_err());
    }

    #[test]
    fn hue_shift_round_trip_and_gray_fixed_point() {
        let q = [0.8f32, 0.3, 0.1];
        let back = shift_hue(shift_hue(q, 0.2), -0.2);
        for i in 0..3 {
            assert!((back[i] - q[i]).abs() < 1e-5);
        }
        assert_eq!(shift_hue([0.4, 0.4, 0.4], 0.3), [0.4, 0.4, 0.4]);
    }

    #[test]
    fn photometric_fires_with_probability_and_hits_all_frames() {
        let clip = marker_clip(3, 8, 8);
        let policy = AugmentationPolicy {
            photometric: true,
            ..AugmentationPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut fired = 0;
        for _ in 0..200 {
            let out = augment(&clip, &policy, &mut rng).unwrap();
            if out != clip {
                fired += 1;
                assert_eq!(out.sharp_reference(), out.center_frame());
            }
        }
        assert!((70..130).contains(&fired), "{fired}");
    }
}
