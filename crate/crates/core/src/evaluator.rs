//! Image quality metrics, test-set evaluation and ablation tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::colorspace::luma;
use crate::datapipe::{sample_clip_at, valid_centers, ClipSource};
use crate::error::{Error, Result};
use crate::flowwarp::{FlowProvider, InputSpec};
use crate::image::Image;
use crate::model::Backbone;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Per-scale exponents of the multi-scale SSIM product, finest first.
pub const MSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Smallest side length that survives four 2× reductions with a full window.
pub const MSSIM_MIN_SIZE: usize = SSIM_WINDOW << (MSSIM_WEIGHTS.len() - 1);

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )))
    }
}

/// Peak signal-to-noise ratio for peak 1.0, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.data().is_empty() {
        return Err(Error::Shape("PSNR of an empty image".into()));
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum();
    let mse = sse / pred.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        let dst = &mut rows[y * ow..(y + 1) * ow];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &kv) in k.iter().enumerate() {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    (out, oh, ow)
}

fn downsample2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) / 4.0);
        }
    }
    (out, oh, ow)
}

/// Mean contrast-structure and luminance terms of single-scale SSIM.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(x, h, w, k);
    let (my, _, _) = filter_valid(y, h, w, k);
    let (exx, _, _) = filter_valid(&xx, h, w, k);
    let (eyy, _, _) = filter_valid(&yy, h, w, k);
    let (exy, _, _) = filter_valid(&xy, h, w, k);
    let n = mx.len() as f64;
    let (mut cs, mut l) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let sxx = exx[i] - a * a;
        let syy = eyy[i] - b * b;
        let sxy = exy[i] - a * b;
        cs += (2.0 * sxy + c2) / (sxx + syy + c2);
        l += (2.0 * a * b + c1) / (a * a + b * b + c1);
    }
    (cs / n, l / n)
}

/// Multi-scale SSIM averaged over channels, for images in `[0, 1]`.
///
/// Five scales joined by 2×2 average pooling, 11-tap Gaussian window with
/// σ = 1.5, luminance compared at the coarsest scale only. Negative
/// per-scale terms are clamped to zero.
pub fn mssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let (c, h, w) = pred.dims();
    if h.min(w) < MSSIM_MIN_SIZE {
        return Err(Error::Shape(format!(
            "MSSIM needs at least {MSSIM_MIN_SIZE}×{MSSIM_MIN_SIZE} pixels, got {h}×{w}"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..c {
        let mut x: Vec<f64> = pred.plane(ch).iter().map(|&v| v as f64).collect();
        let mut y: Vec<f64> = gt.plane(ch).iter().map(|&v| v as f64).collect();
        let (mut sh, mut sw) = (h, w);
        let mut score = 1.0;
        for (scale, &weight) in MSSIM_WEIGHTS.iter().enumerate() {
            let (cs, l) = ssim_terms(&x, &y, sh, sw, &k);
            score *= cs.max(0.0).powf(weight);
            if scale + 1 == MSSIM_WEIGHTS.len() {
                score *= l.max(0.0).powf(weight);
            } else {
                let (nx, nh, nw) = downsample2(&x, sh, sw);
                let (ny, _, _) = downsample2(&y, sh, sw);
                x = nx;
                y = ny;
                sh = nh;
                sw = nw;
            }
        }
        total += score;
    }
    Ok(total / c as f64)
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let k = gaussian_kernel(2 * radius + 1, sigma);
    let (c, h, w) = img.dims();
    let mut centered = Image::new(c, h + 2 * radius, w + 2 * radius);
    for ch in 0..c {
        for y in 0..h + 2 * radius {
            let sy = y.saturating_sub(radius).min(h - 1);
            for x in 0..w + 2 * radius {
                let sx = x.saturating_sub(radius).min(w - 1);
                centered.set(ch, y, x, img.get(ch, sy, sx));
            }
        }
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane: Vec<f64> = centered.plane(ch).iter().map(|&v| v as f64).collect();
        let (f, _, _) = filter_valid(&plane, h + 2 * radius, w + 2 * radius, &k);
        out.extend(f.into_iter().map(|v| v as f32));
    }
    Image::from_vec(c, h, w, out).expect("blur preserves shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence: String,
    pub frames: usize,
    pub psnr: f64,
    /// Absent when frames are smaller than [`MSSIM_MIN_SIZE`].
    pub mssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub psnr: f64,
    pub mssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub fingerprint: String,
    /// Ablation axis values, in declaration order.
    pub axes: Vec<(String, String)>,
    pub per_sequence: Vec<SequenceMetrics>,
    pub aggregate: AggregateMetrics,
    /// Frames without a complete temporal window.
    pub skipped_frames: usize,
    pub psnr_protocol: String,
}

impl MetricReport {
    pub fn labelled(mut self, run_id: impl Into<String>, fingerprint: impl Into<String>, axes: Vec<(String, String)>) -> Self {
        self.run_id = run_id.into();
        self.fingerprint = fingerprint.into();
        self.axes = axes;
        self
    }

    pub fn to_csv(&self) -> String {
        let fmt_ms = |m: Option<f64>| m.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from("sequence,frames,psnr_db,mssim\n");
        for s in &self.per_sequence {
            let _ = writeln!(out, "{},{},{:.4},{}", s.sequence, s.frames, s.psnr, fmt_ms(s.mssim));
        }
        let frames: usize = self.per_sequence.iter().map(|s| s.frames).sum();
        let _ = writeln!(
            out,
            "aggregate,{},{:.4},{}",
            frames,
            self.aggregate.psnr,
            fmt_ms(self.aggregate.mssim)
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn summary_line(&self) -> String {
        match self.aggregate.mssim {
            Some(m) => format!("PSNR {:.2} dB  MSSIM {:.4}", self.aggregate.psnr, m),
            None => format!("PSNR {:.2} dB", self.aggregate.psnr),
        }
    }
}

/// Padding a frame needs to reach a multiple of `m` on each side.
fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Runs `model` on one prepared input, padding to the model's size multiple
/// by edge replication and cropping the prediction back.
pub fn predict_image(model: &Backbone<f32>, input: &Image) -> Result<Image> {
    let (_, h, w) = input.dims();
    let m = model.config().size_multiple();
    let (ph, pw) = (padded_len(h, m), padded_len(w, m));
    let x = if (ph, pw) == (h, w) {
        Image::batch(std::slice::from_ref(input))?
    } else {
        Image::batch(&[input.pad_replicate(ph, pw)])?
    };
    let y = Image::from_tensor(&model.predict(&x)?, 0);
    if (ph, pw) == (h, w) {
        Ok(y)
    } else {
        y.crop(0, 0, h, w)
    }
}

/// Scores `model` on every frame of `source` that has a full temporal
/// window. Per-frame PSNR is averaged per sequence, then sequence means are
/// averaged without weighting.
pub fn evaluate(
    model: &Backbone<f32>,
    spec: &InputSpec,
    source: &dyn ClipSource,
    provider: &dyn FlowProvider,
) -> Result<MetricReport> {
    let cfg = model.config();
    if cfg.in_channels != spec.input_channels() || cfg.out_channels != spec.output_channels() {
        return Err(Error::Config(format!(
            "model maps {} → {} channels but {} assembly of {} {} frames needs {} → {}",
            cfg.in_channels,
            cfg.out_channels,
            spec.assembly,
            spec.seq_len,
            spec.color,
            spec.input_channels(),
            spec.output_channels()
        )));
    }
    let mut per_sequence = Vec::new();
    let mut skipped = 0;
    for (seq, (id, frames)) in source.sequences().into_iter().enumerate() {
        let centers = valid_centers(frames, spec.seq_len);
        skipped += frames - centers.len();
        if centers.is_empty() {
            continue;
        }
        let (mut psnr_sum, mut ms_sum, mut ms_ok) = (0.0, 0.0, true);
        let count = centers.len();
        for center in centers {
            let clip = sample_clip_at(source, seq, center, spec.seq_len)?;
            let out = predict_image(model, &spec.input(&clip, provider)?)?;
            let rgb = spec.to_rgb(&out, &clip)?;
            psnr_sum += psnr(&rgb, clip.sharp_reference())?;
            if ms_ok && rgb.height().min(rgb.width()) >= MSSIM_MIN_SIZE {
                ms_sum += mssim(&rgb, clip.sharp_reference())?;
            } else {
                ms_ok = false;
            }
        }
        per_sequence.push(SequenceMetrics {
            sequence: id,
            frames: count,
            psnr: psnr_sum / count as f64,
            mssim: ms_ok.then(|| ms_sum / count as f64),
        });
    }
    if per_sequence.is_empty() {
        return Err(Error::Dataset(format!(
            "no sequence has a complete window of {} frames",
            spec.seq_len
        )));
    }
    if skipped > 0 {
        log::info!("skipped {skipped} boundary frames without a full temporal window");
    }
    let n = per_sequence.len() as f64;
    let psnr_mean = per_sequence.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mssim_mean = per_sequence
        .iter()
        .map(|s| s.mssim)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    Ok(MetricReport {
        run_id: String::new(),
        fingerprint: String::new(),
        axes: Vec::new(),
        per_sequence,
        aggregate: AggregateMetrics {
            psnr: psnr_mean,
            mssim: mssim_mean,
        },
        skipped_frames: skipped,
        psnr_protocol: "plain PSNR, peak 1.0, no alignment search".into(),
    })
}

/// Signed-gradient histograms of a sharp and a blurry image population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientHistogram {
    pub edges: Vec<f64>,
    pub sharp: Vec<u64>,
    pub blurry: Vec<u64>,
    pub scale: f64,
    pub tail_threshold: f64,
    pub sharp_tail: u64,
    pub blurry_tail: u64,
}

/// Gradients with magnitude above this count towards the tail mass.
pub const GRADIENT_TAIL: f64 = 0.1;

impl GradientHistogram {
    pub fn bins(&self) -> usize {
        self.sharp.len()
    }

    pub fn bin_of(&self, g: f64) -> usize {
        let bins = self.bins();
        let lo = self.edges[0];
        let hi = self.edges[bins];
        (((g - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }

    pub fn sharp_tail_fraction(&self) -> f64 {
        self.sharp_tail as f64 / self.sharp.iter().sum::<u64>() as f64
    }

    pub fn blurry_tail_fraction(&self) -> f64 {
        self.blurry_tail as f64 / self.blurry.iter().sum::<u64>() as f64
    }

    /// Sharp over blurry tail mass; larger means a wider gap.
    pub fn tail_ratio(&self) -> f64 {
        self.sharp_tail_fraction() / self.blurry_tail_fraction()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,sharp,blurry\n");
        for i in 0..self.bins() {
            let _ = writeln!(
                out,
                "{:.6},{:.6},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.sharp[i],
                self.blurry[i]
            );
        }
        out
    }

    /// Log-count plot: sharp in blue, blurry in red.
    pub fn render_plot(&self, height: usize, width: usize) -> Image {
        let mut img = Image::filled(3, height, width, 1.0);
        let margin = 8usize;
        let (ph, pw) = (height.saturating_sub(2 * margin).max(1), width.saturating_sub(2 * margin).max(1));
        let log = |c: u64| ((c + 1) as f64).log10();
        let top = self
            .sharp
            .iter()
            .chain(&self.blurry)
            .map(|&c| log(c))
            .fold(1e-9, f64::max);
        for x in 0..pw {
            img.set(0, margin + ph - 1, margin + x, 0.0);
            img.set(1, margin + ph - 1, margin + x, 0.0);
            img.set(2, margin + ph - 1, margin + x, 0.0);
        }
        let zero_x = margin + ((pw as f64 * 0.5) as usize).min(pw - 1);
        for y in 0..ph {
            for c in 0..3 {
                img.set(c, margin + y, zero_x, 0.6);
            }
        }
        let bins = self.bins();
        for (counts, rgb) in [(&self.sharp, [0.1, 0.2, 0.9]), (&self.blurry, [0.9, 0.1, 0.1])] {
            let mut prev: Option<usize> = None;
            for x in 0..pw {
                let b = (x * bins / pw).min(bins - 1);
                let y = ph - 1 - ((log(counts[b]) / top) * (ph - 1) as f64).round() as usize;
                let (lo, hi) = match prev {
                    Some(p) => (p.min(y), p.max(y)),
                    None => (y, y),
                };
                for yy in lo..=hi {
                    for (c, v) in rgb.iter().enumerate() {
                        img.set(c, margin + yy, margin + x, *v);
                    }
                }
                prev = Some(y);
            }
        }
        img
    }

    pub fn write(&self, csv_path: &Path, plot_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        self.render_plot(360, 640).save_rgb(plot_path)
    }
}

fn gradient_source(img: &Image, scale: f64) -> Result<Image> {
    let img = if scale < 1.0 {
        let h = ((img.height() as f64 * scale).floor() as usize).max(1);
        let w = ((img.width() as f64 * scale).floor() as usize).max(1);
        img.resize_area(h, w)?
    } else {
        img.clone()
    };
    match img.channels() {
        1 => Ok(img),
        3 => luma(&img),
        c => Err(Error::Shape(format!("gradient statistics need 1 or 3 channels, got {c}"))),
    }
}

fn accumulate(images: &[Image], scale: f64, hist: &mut GradientHistogram, sharp: bool) -> Result<()> {
    let mut counts = vec![0u64; hist.bins()];
    let mut tail = 0;
    for img in images {
        let y = gradient_source(img, scale)?;
        let (h, w) = (y.height(), y.width());
        let p = y.plane(0);
        let mut add = |g: f64| {
            counts[hist.bin_of(g)] += 1;
            if g.abs() > hist.tail_threshold {
                tail += 1;
            }
        };
        for r in 0..h {
            for c in 0..w {
                let v = p[r * w + c] as f64;
                if c + 1 < w {
                    add(p[r * w + c + 1] as f64 - v);
                }
                if r + 1 < h {
                    add(p[(r + 1) * w + c] as f64 - v);
                }
            }
        }
    }
    if sharp {
        hist.sharp = counts;
        hist.sharp_tail = tail;
    } else {
        hist.blurry = counts;
        hist.blurry_tail = tail;
    }
    Ok(())
}

/// Histograms horizontal and vertical forward differences of luma over both
/// populations, after area-downscaling every image by `scale`. Bins span
/// `[-1, 1]`, the full range of differences of values in `[0, 1]`.
pub fn gradient_statistics(sharp: &[Image], blurry: &[Image], scale: f64, bins: usize) -> Result<GradientHistogram> {
    if sharp.is_empty() || blurry.is_empty() {
        return Err(Error::InvalidArgument("gradient statistics need two nonempty image sets".into()));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("scale must lie in (0, 1], got {scale}")));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let mut hist = GradientHistogram {
        edges: (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect(),
        sharp: vec![0; bins],
        blurry: vec![0; bins],
        scale,
        tail_threshold: GRADIENT_TAIL,
        sharp_tail: 0,
        blurry_tail: 0,
    };
    accumulate(sharp, scale, &mut hist, true)?;
    accumulate(blurry, scale, &mut hist, false)?;
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run_id: String,
    pub cells: Vec<String>,
    pub psnr: f64,
    pub mssim: Option<f64>,
}

/// Runs as rows, ablation axes plus scores as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axes: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("run,{},psnr_db,mssim\n", self.axes.join(","));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{}",
                r.run_id,
                r.cells.join(","),
                r.psnr,
                r.mssim.map(|m| format!("{m:.6}")).unwrap_or_default()
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| run | {} | PSNR (dB) | MSSIM |\n", self.axes.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.axes.len() + 3));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {:.2} | {} |",
                r.run_id,
                r.cells.join(" | "),
                r.psnr,
                r.mssim.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into())
            );
        }
        out
    }
}

/// Builds the ablation grid. Rows keep the order of `reports`; axis columns
/// appear in first-seen order.
pub fn ablation_report(reports: &[MetricReport]) -> Result<AblationTable> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("ablation report needs at least one run".into()));
    }
    let mut axes: Vec<String> = Vec::new();
    for r in reports {
        if r.run_id.is_empty() {
            return Err(Error::InvalidArgument("report without a run id".into()));
        }
        for (k, _) in &r.axes {
            if !axes.contains(k) {
                axes.push(k.clone());
            }
        }
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(reports.len());
    for r in reports {
        if rows.iter().any(|row| row.run_id == r.run_id) {
            return Err(Error::InvalidArgument(format!("duplicate run id `{}`", r.run_id)));
        }
        let cells = axes
            .iter()
            .map(|a| {
                r.axes
                    .iter()
                    .find(|(k, _)| k == a)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_else(|| "-".into())
            })
            .collect();
        rows.push(AblationRow {
            run_id: r.run_id.clone(),
            cells,
            psnr: r.aggregate.psnr,
            mssim: r.aggregate.mssim,
        });
    }
    Ok(AblationTable { axes, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(c: usize, h: usize, w: usize, phase: f32) -> Image {
        Image::from_fn(c, h, w, |c, y, x| {
            0.5 + 0.3 * ((x as f32 * 0.21 + phase).sin() * (y as f32 * 0.13 + c as f32).cos())
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(3, 8, 8, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(3, 8, 8, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c = Image::filled(3, 8, 8, 0.55);
        let gain = psnr(&a, &c).unwrap() - psnr(&a, &b).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-4);
        assert!(psnr(&a, &Image::filled(3, 8, 4, 0.5)).is_err());
    }

    #[test]
    fn mssim_identity_and_inversion() {
        let a = textured(1, 180, 190, 0.0);
        assert_eq!(mssim(&a, &a).unwrap(), 1.0);
        let inv = Image::from_fn(1, 180, 190, |c, y, x| 1.0 - a.get(c, y, x));
        assert!(mssim(&inv, &a).unwrap() < 0.2);
        assert!(mssim(&textured(1, 175, 190, 0.0), &textured(1, 175, 190, 0.0)).is_err());
    }

    #[test]
    fn mssim_min_size() {
        assert_eq!(MSSIM_MIN_SIZE, 176);
    }

    #[test]
    fn gaussian_kernel_normalized() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn blur_preserves_constants() {
        let a = Image::filled(3, 10, 12, 0.25);
        assert!(gaussian_blur(&a, 1.5).max_abs_diff(&a) < 1e-6);
    }

    #[test]
    fn constant_images_have_zero_gradients() {
        let a = vec![Image::filled(1, 9, 7, 0.3)];
        let h = gradient_statistics(&a, &a, 1.0, 21).unwrap();
        let zero = h.bin_of(0.0);
        assert_eq!(h.sharp[zero], (9 * 6 + 8 * 7) as u64);
        assert_eq!(h.sharp.iter().sum::<u64>(), h.sharp[zero]);
        assert!(gradient_statistics(&[], &a, 1.0, 21).is_err());
        assert!(gradient_statistics(&a, &a, 0.0, 21).is_err());
        assert!(gradient_statistics(&a, &a, 1.0, 0).is_err());
    }

    fn report(id: &str, fan: &str) -> MetricReport {
        MetricReport {
            run_id: id.into(),
            fingerprint: String::new(),
            axes: vec![("head".into(), "linear".into()), ("fan_mode".into(), fan.into())],
            per_sequence: vec![],
            aggregate: AggregateMetrics { psnr: 30.0, mssim: None },
            skipped_frames: 0,
            psnr_protocol: String::new(),
        }
    }

    #[test]
    fn ablation_rows() {
        let t = ablation_report(&[report("a", "fan_in"), report("b", "fan_max")]).unwrap();
        assert_eq!(t.axes, vec!["head", "fan_mode"]);
        assert_eq!(t.rows[0].run_id, "a");
        let diff: Vec<_> = t.rows[0].cells.iter().zip(&t.rows[1].cells).filter(|(x, y)| x != y).collect();
        assert_eq!(diff.len(), 1);
        assert!(t.to_markdown().contains("| a | linear | fan_in | 30.00 | - |"));
        assert!(t.to_csv().starts_with("run,head,fan_mode,psnr_db,mssim\n"));
        assert!(ablation_report(&[]).is_err());
        assert!(ablation_report(&[report("a", "x"), report("a", "y")]).is_err());
    }

    #[test]
    fn report_csv_schema() {
        let mut r = report("a", "fan_in");
        r.per_sequence.push(SequenceMetrics {
            sequence: "s0".into(),
            frames: 3,
            psnr: 31.0,
            mssim: None,
        });
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().last().unwrap().starts_with("aggregate,3,"));
        assert_eq!(MetricReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
