//! BT.601 YCbCr conversion and luma-only reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::psnr;
use crate::image::Image;

/// Color space the network operates in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    #[default]
    Rgb,
    /// The model sees and predicts luma only; chroma comes from the blurry
    /// center frame.
    Ycbcr,
}

impl ColorMode {
    pub fn channels_per_frame(self) -> usize {
        match self {
            ColorMode::Rgb => 3,
            ColorMode::Ycbcr => 1,
        }
    }
}

impl std::fmt::Display for ColorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ColorMode::Rgb => "rgb",
            ColorMode::Ycbcr => "ycbcr",
        })
    }
}

/// Quantization range of the YCbCr encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum YcbcrRange {
    /// JPEG-style: Y in `[0, 1]`, chroma centered on 0.5.
    #[default]
    Full,
    /// Y in `[16, 235] / 255`, chroma in `[16, 240] / 255`.
    Studio,
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

impl YcbcrRange {
    /// `(offset, scale)` applied to luma and to the centered chroma.
    fn luma(self) -> (f64, f64) {
        match self {
            YcbcrRange::Full => (0.0, 1.0),
            YcbcrRange::Studio => (16.0 / 255.0, 219.0 / 255.0),
        }
    }

    fn chroma_scale(self) -> f64 {
        match self {
            YcbcrRange::Full => 1.0,
            YcbcrRange::Studio => 224.0 / 255.0,
        }
    }
}

#[inline]
fn encode(r: f64, g: f64, b: f64, range: YcbcrRange) -> (f64, f64, f64) {
    let y = KR * r + KG * g + KB * b;
    let cb = (b - y) / (2.0 * (1.0 - KB));
    let cr = (r - y) / (2.0 * (1.0 - KR));
    let (off, ys) = range.luma();
    let cs = range.chroma_scale();
    (off + ys * y, 0.5 + cs * cb, 0.5 + cs * cr)
}

#[inline]
fn decode(y: f64, cb: f64, cr: f64, range: YcbcrRange) -> (f64, f64, f64) {
    let (off, ys) = range.luma();
    let cs = range.chroma_scale();
    let y = (y - off) / ys;
    let cb = (cb - 0.5) / cs;
    let cr = (cr - 0.5) / cs;
    let r = y + 2.0 * (1.0 - KR) * cr;
    let b = y + 2.0 * (1.0 - KB) * cb;
    let g = (y - KR * r - KB * b) / KG;
    (r, g, b)
}

fn expect_three(img: &Image, what: &str) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "{what} needs 3 channels, got {}",
            img.channels()
        )));
    }
    Ok(())
}

pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    rgb_to_ycbcr_with(img, YcbcrRange::Full)
}

pub fn rgb_to_ycbcr_with(img: &Image, range: YcbcrRange) -> Result<Image> {
    expect_three(img, "RGB to YCbCr")?;
    let (_, h, w) = img.dims();
    let n = h * w;
    let mut out = Image::new(3, h, w);
    let src = img.data();
    let dst = out.data_mut();
    for i in 0..n {
        let (y, cb, cr) = encode(src[i] as f64, src[n + i] as f64, src[2 * n + i] as f64, range);
        dst[i] = y as f32;
        dst[n + i] = cb as f32;
        dst[2 * n + i] = cr as f32;
    }
    Ok(out)
}

/// Inverse of [`rgb_to_ycbcr`], clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    ycbcr_to_rgb_with(img, YcbcrRange::Full)
}

pub fn ycbcr_to_rgb_with(img: &Image, range: YcbcrRange) -> Result<Image> {
    Ok(decode_image(img, range)?.clamp01())
}

fn decode_image(img: &Image, range: YcbcrRange) -> Result<Image> {
    expect_three(img, "YCbCr to RGB")?;
    let (_, h, w) = img.dims();
    let n = h * w;
    let mut out = Image::new(3, h, w);
    let src = img.data();
    let dst = out.data_mut();
    for i in 0..n {
        let (r, g, b) = decode(src[i] as f64, src[n + i] as f64, src[2 * n + i] as f64, range);
        dst[i] = r as f32;
        dst[n + i] = g as f32;
        dst[2 * n + i] = b as f32;
    }
    Ok(out)
}

/// Luma channel of an RGB image.
pub fn luma(img: &Image) -> Result<Image> {
    luma_with(img, YcbcrRange::Full)
}

pub fn luma_with(img: &Image, range: YcbcrRange) -> Result<Image> {
    Ok(rgb_to_ycbcr_with(img, range)?.channel(0))
}

/// Combines a predicted luma channel with the chroma of `blurry_rgb`.
pub fn reconstruct(y_pred: &Image, blurry_rgb: &Image) -> Result<Image> {
    reconstruct_with(y_pred, blurry_rgb, YcbcrRange::Full)
}

/// Not clamped, so that feeding the result back as chroma source is a no-op.
pub fn reconstruct_with(y_pred: &Image, blurry_rgb: &Image, range: YcbcrRange) -> Result<Image> {
    if y_pred.channels() != 1 {
        return Err(Error::Shape(format!(
            "luma prediction must have 1 channel, got {}",
            y_pred.channels()
        )));
    }
    if (y_pred.height(), y_pred.width()) != (blurry_rgb.height(), blurry_rgb.width()) {
        return Err(Error::Shape(format!(
            "luma {}x{} does not match image {}x{}",
            y_pred.height(),
            y_pred.width(),
            blurry_rgb.height(),
            blurry_rgb.width()
        )));
    }
    let ycc = rgb_to_ycbcr_with(blurry_rgb, range)?;
    let (cb, cr) = (ycc.channel(1), ycc.channel(2));
    decode_image(&Image::concat(&[y_pred, &cb, &cr])?, range)
}

/// Mean PSNR of the blurry inputs, and of the luma oracle (ground-truth Y
/// with blurry chroma), over `(blurry, sharp)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBounds {
    pub input_psnr: f64,
    pub y_oracle_psnr: f64,
    pub pairs: usize,
}

pub fn oracle_bounds<I>(pairs: I, range: YcbcrRange) -> Result<OracleBounds>
where
    I: IntoIterator<Item = Result<(Image, Image)>>,
{
    let mut count = 0usize;
    let (mut input_sum, mut oracle_sum) = (0.0, 0.0);
    for pair in pairs {
        let (blurry, sharp) = pair?;
        input_sum += psnr(&blurry, &sharp)?;
        let recon = reconstruct_with(&luma_with(&sharp, range)?, &blurry, range)?.clamp01();
        oracle_sum += psnr(&recon, &sharp)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Dataset("oracle bounds need at least one image pair".into()));
    }
    Ok(OracleBounds {
        input_psnr: input_sum / count as f64,
        y_oracle_psnr: oracle_sum / count as f64,
        pairs: count,
    })
}
