//! Planar floating point images and the resampling-free geometry on them.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `C×H×W` planar image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot form a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image by evaluating `f(channel, y, x)` at every sample.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Single-channel image holding channel `c`.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    /// Stacks images with equal spatial size along the channel axis.
    pub fn concat(parts: &[&Image]) -> Result<Image> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero images".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "cannot stack {}x{} with {h}x{w}",
                    p.height, p.width
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Image {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert!(self.same_dims(other), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// Rotates counter-clockwise by `quarter_turns · 90°`. Exact permutation.
    pub fn rotate90(&self, quarter_turns: u8) -> Image {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Image::from_fn(self.channels, w, h, |c, y, x| self.get(c, x, w - 1 - y)),
            2 => Image::from_fn(self.channels, h, w, |c, y, x| {
                self.get(c, h - 1 - y, w - 1 - x)
            }),
            _ => Image::from_fn(self.channels, w, h, |c, y, x| self.get(c, h - 1 - x, y)),
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        Image::from_fn(self.channels, self.height, w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Image {
        let h = self.height;
        Image::from_fn(self.channels, h, self.width, |c, y, x| self.get(c, h - 1 - y, x))
    }

    /// Antialiased area (box) resampling to `new_h × new_w`.
    ///
    /// Each output pixel is the exact area-weighted mean of the input pixels
    /// its footprint overlaps.
    pub fn resize_area(&self, new_h: usize, new_w: usize) -> Result<Image> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot resize to {new_h}x{new_w}"
            )));
        }
        if (new_h, new_w) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let wy = area_weights(self.height, new_h);
        let wx = area_weights(self.width, new_w);
        let mut tmp = vec![0.0f64; self.height * new_w];
        let mut out = Image::new(self.channels, new_h, new_w);
        for c in 0..self.channels {
            let plane = self.plane(c);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..self.height {
                let row = &plane[y * self.width..(y + 1) * self.width];
                for (ox, taps) in wx.iter().enumerate() {
                    tmp[y * new_w + ox] = taps.iter().map(|&(i, wgt)| row[i] as f64 * wgt).sum();
                }
            }
            let dst = out.plane_mut(c);
            for (oy, taps) in wy.iter().enumerate() {
                for ox in 0..new_w {
                    dst[oy * new_w + ox] = taps
                        .iter()
                        .map(|&(i, wgt)| tmp[i * new_w + ox] * wgt)
                        .sum::<f64>() as f32;
                }
            }
        }
        Ok(out)
    }

    /// Pads to `new_h × new_w` by replicating the last row and column.
    pub fn pad_replicate(&self, new_h: usize, new_w: usize) -> Image {
        Image::from_fn(self.channels, new_h, new_w, |c, y, x| {
            self.get(c, y.min(self.height - 1), x.min(self.width - 1))
        })
    }

    /// Loads an 8-bit (or wider) PNG as RGB in `[0, 1]`.
    pub fn load_rgb(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        Ok(Image::from_fn(3, h, w, |c, y, x| {
            raw[(y * w + x) * 3 + c] as f32 / 255.0
        }))
    }

    /// Writes a 3-channel image as an 8-bit RGB PNG (rounding, clamped).
    pub fn save_rgb(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Shape(format!(
                "PNG export needs 3 channels, got {}",
                self.channels
            )));
        }
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let px = |c| quantize(self.get(c, y as usize, x as usize));
                Rgb([px(0), px(1), px(2)])
            });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rounds every sample to the nearest 8-bit level.
    pub fn quantize8(mut self) -> Image {
        for v in &mut self.data {
            *v = quantize(*v) as f32 / 255.0;
        }
        self
    }

    /// Packs equally sized images into an `N×C×H×W` batch.
    pub fn batch(images: &[Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
        let (c, h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != (c, h, w) {
                return Err(Error::Shape(format!(
                    "cannot batch {:?} with {:?}",
                    img.dims(),
                    (c, h, w)
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec(images.len(), c, h, w, data)
    }

    /// Example `i` of a batch.
    pub fn from_tensor(t: &Tensor<f32>, i: usize) -> Image {
        let (_, c, h, w) = t.dims();
        Image {
            channels: c,
            height: h,
            width: w,
            data: t.example(i).to_vec(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per output index, the `(input index, weight)` taps of a 1-D box filter
/// mapping `n_in` samples to `n_out`.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}
