//! Backward warping of neighbor frames and temporal input assembly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::colorspace::{luma, luma_with, reconstruct_with, ColorMode, YcbcrRange};
use crate::datapipe::VideoClip;
use crate::error::{Error, Result};
use crate::image::Image;

/// Magic number opening every Middlebury `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Dense displacement field. `(u, v)` at reference pixel `(x, y)` points to
/// the matching location `(x + u, y + v)` in the neighbor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::Shape(format!(
                "flow components of {} and {} values for a {height}x{width} field",
                u.len(),
                v.len()
            )));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Reads a Middlebury `.flo` file.
    pub fn read_flo(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::FlowFormat {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut word = [0u8; 4];
        let mut next = |r: &mut BufReader<File>| -> Result<[u8; 4]> {
            r.read_exact(&mut word)
                .map_err(|e| bad(format!("truncated file: {e}")))?;
            Ok(word)
        };
        let magic = f32::from_le_bytes(next(&mut r)?);
        if magic != FLO_MAGIC {
            return Err(bad(format!("bad magic {magic}")));
        }
        let width = i32::from_le_bytes(next(&mut r)?);
        let height = i32::from_le_bytes(next(&mut r)?);
        if width <= 0 || height <= 0 || (width as i64) * (height as i64) > (1 << 28) {
            return Err(bad(format!("implausible dimensions {width}x{height}")));
        }
        let (w, h) = (width as usize, height as usize);
        let mut raw = vec![0u8; w * h * 8];
        r.read_exact(&mut raw)
            .map_err(|e| bad(format!("expected {} flow values: {e}", w * h * 2)))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes after flow data".into()));
        }
        let mut u = Vec::with_capacity(w * h);
        let mut v = Vec::with_capacity(w * h);
        for px in raw.chunks_exact(8) {
            u.push(f32::from_le_bytes(px[0..4].try_into().unwrap()));
            v.push(f32::from_le_bytes(px[4..8].try_into().unwrap()));
        }
        Self::new(h, w, u, v)
    }

    pub fn write_flo(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut bytes = Vec::with_capacity(12 + self.u.len() * 8);
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&(self.width as i32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            bytes.extend_from_slice(&u.to_le_bytes());
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Backward-warps `neighbor` onto the reference grid:
/// `out(x, y) = neighbor(x + u, y + v)`, bilinear, border-replicated.
pub fn warp(neighbor: &Image, flow: &FlowField) -> Result<Image> {
    let (c, h, w) = neighbor.dims();
    if (flow.height, flow.width) != (h, w) {
        return Err(Error::Shape(format!(
            "flow {}x{} does not match image {h}x{w}",
            flow.height, flow.width
        )));
    }
    if !flow.is_finite() {
        return Err(Error::InvalidArgument("flow field contains non-finite values".into()));
    }
    let mut out = Image::new(c, h, w);
    let max_x = (w - 1) as f32;
    let max_y = (h - 1) as f32;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f32 + flow.u[i]).clamp(0.0, max_x);
            let sy = (y as f32 + flow.v[i]).clamp(0.0, max_y);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ch in 0..c {
                let p = neighbor.plane(ch);
                let top = if fx == 0.0 {
                    p[y0 * w + x0]
                } else {
                    p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx
                };
                let value = if fy == 0.0 {
                    top
                } else {
                    let bottom = if fx == 0.0 {
                        p[y1 * w + x0]
                    } else {
                        p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx
                    };
                    top * (1.0 - fy) + bottom * fy
                };
                out.plane_mut(ch)[i] = value;
            }
        }
    }
    Ok(out)
}

/// How neighbor frames enter the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// Original frames only.
    None,
    /// Neighbors replaced by their warped versions.
    Rep,
    /// Original frames followed by the warped neighbors.
    #[default]
    Cat,
}

impl AssemblyMode {
    /// Frames in the assembled stack for a window of `seq_len` frames.
    pub fn stacked_frames(self, seq_len: usize) -> usize {
        match self {
            AssemblyMode::None | AssemblyMode::Rep => seq_len,
            AssemblyMode::Cat => 2 * seq_len - 1,
        }
    }

    pub fn input_channels(self, seq_len: usize, color: ColorMode) -> usize {
        self.stacked_frames(seq_len) * color.channels_per_frame()
    }

    pub fn needs_flow(self) -> bool {
        !matches!(self, AssemblyMode::None)
    }
}

impl std::fmt::Display for AssemblyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AssemblyMode::None => "none",
            AssemblyMode::Rep => "rep",
            AssemblyMode::Cat => "cat",
        })
    }
}

/// Identifies the flow from a reference frame into one of its neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowRequest<'a> {
    pub sequence: &'a str,
    pub center: usize,
    pub offset: i64,
    pub height: usize,
    pub width: usize,
}

impl FlowRequest<'_> {
    fn error(&self, reason: impl Into<String>) -> Error {
        Error::Flow {
            sequence: self.sequence.to_string(),
            center: self.center,
            offset: self.offset,
            reason: reason.into(),
        }
    }
}

/// Source of reference→neighbor flow fields.
pub trait FlowProvider: Send + Sync {
    fn flow(&self, request: FlowRequest<'_>) -> Result<FlowField>;
}

/// Provider for `AssemblyMode::None`; every request fails.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFlow;

impl FlowProvider for NoFlow {
    fn flow(&self, request: FlowRequest<'_>) -> Result<FlowField> {
        Err(request.error("no flow provider configured"))
    }
}

/// Reads precomputed fields from `<split>/<sequence>/flow/NNNNN_offset<d>.flo`.
#[derive(Debug, Clone)]
pub struct FileFlowProvider {
    split_dir: PathBuf,
}

pub fn flow_file_name(center: usize, offset: i64) -> String {
    format!("{center:05}_offset{offset}.flo")
}

impl FileFlowProvider {
    pub fn new(split_dir: impl Into<PathBuf>) -> Result<Self> {
        let split_dir = split_dir.into();
        if !split_dir.is_dir() {
            return Err(Error::Dataset(format!(
                "flow root {} is not a directory",
                split_dir.display()
            )));
        }
        Ok(Self { split_dir })
    }

    pub fn path_for(&self, sequence: &str, center: usize, offset: i64) -> PathBuf {
        self.split_dir
            .join(sequence)
            .join("flow")
            .join(flow_file_name(center, offset))
    }
}

pub fn flow_provider_from_files(split_dir: impl Into<PathBuf>) -> Result<FileFlowProvider> {
    FileFlowProvider::new(split_dir)
}

impl FlowProvider for FileFlowProvider {
    fn flow(&self, request: FlowRequest<'_>) -> Result<FlowField> {
        let path = self.path_for(request.sequence, request.center, request.offset);
        if !path.is_file() {
            return Err(request.error(format!("missing {}", path.display())));
        }
        let field = FlowField::read_flo(&path).map_err(|e| request.error(e.to_string()))?;
        if (field.height, field.width) != (request.height, request.width) {
            return Err(request.error(format!(
                "stored field is {}x{}, frames are {}x{}",
                field.height, field.width, request.height, request.width
            )));
        }
        Ok(field)
    }
}

/// Camera position per frame; frame `t` shows the scene shifted so that its
/// pixel `p` displays scene point `p + position[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Trajectory {
    pub positions: Vec<(f32, f32)>,
}

impl Trajectory {
    /// Constant per-frame shift `(dx, dy)` starting at the origin.
    pub fn linear(frames: usize, dx: f32, dy: f32) -> Self {
        Self {
            positions: (0..frames).map(|t| (dx * t as f32, dy * t as f32)).collect(),
        }
    }

    /// Reference→neighbor displacement: `position[center] - position[center + offset]`.
    pub fn relative(&self, center: usize, offset: i64) -> Option<(f32, f32)> {
        let n = usize::try_from(center as i64 + offset).ok()?;
        let (a, b) = (self.positions.get(center)?, self.positions.get(n)?);
        Some((a.0 - b.0, a.1 - b.1))
    }
}

/// Analytic flow for scripted camera translations.
#[derive(Debug, Clone, Default)]
pub struct SyntheticFlowProvider {
    trajectories: HashMap<String, Trajectory>,
}

impl SyntheticFlowProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, sequence: impl Into<String>, trajectory: Trajectory) -> Self {
        self.insert(sequence, trajectory);
        self
    }

    pub fn insert(&mut self, sequence: impl Into<String>, trajectory: Trajectory) {
        self.trajectories.insert(sequence.into(), trajectory);
    }
}

pub fn synthetic_flow_provider(trajectories: HashMap<String, Trajectory>) -> SyntheticFlowProvider {
    SyntheticFlowProvider { trajectories }
}

impl FlowProvider for SyntheticFlowProvider {
    fn flow(&self, request: FlowRequest<'_>) -> Result<FlowField> {
        let traj = self
            .trajectories
            .get(request.sequence)
            .ok_or_else(|| request.error("no trajectory for sequence"))?;
        let (u, v) = traj
            .relative(request.center, request.offset)
            .ok_or_else(|| request.error("trajectory does not cover the window"))?;
        Ok(FlowField::constant(request.height, request.width, u, v))
    }
}

/// Frames of the network input in stacking order, before any color
/// conversion. Neighbors are warped onto the center frame as required by
/// `mode`; the provider is never called for `AssemblyMode::None` or
/// single-frame clips.
pub fn assemble_frames(clip: &VideoClip, mode: AssemblyMode, provider: &dyn FlowProvider) -> Result<Vec<Image>> {
    let frames = clip.blurry_frames();
    let half = (frames.len() / 2) as i64;
    let (h, w) = (clip.height(), clip.width());
    let mut warped = Vec::new();
    if mode.needs_flow() {
        for (i, frame) in frames.iter().enumerate() {
            let offset = i as i64 - half;
            if offset == 0 {
                continue;
            }
            let field = provider.flow(FlowRequest {
                sequence: clip.sequence_id(),
                center: clip.center_index(),
                offset,
                height: h,
                width: w,
            })?;
            warped.push((i, warp(frame, &field)?));
        }
    }
    Ok(match mode {
        AssemblyMode::None => frames.to_vec(),
        AssemblyMode::Rep => {
            let mut out = frames.to_vec();
            for (i, img) in warped {
                out[i] = img;
            }
            out
        }
        AssemblyMode::Cat => {
            let mut out = frames.to_vec();
            out.extend(warped.into_iter().map(|(_, img)| img));
            out
        }
    })
}

/// Converts assembled RGB frames to the model's color mode and stacks them
/// channelwise.
pub fn stack_frames(frames: &[Image], color: ColorMode) -> Result<Image> {
    match color {
        ColorMode::Rgb => Image::concat(&frames.iter().collect::<Vec<_>>()),
        ColorMode::Ycbcr => {
            let lumas = frames.iter().map(luma).collect::<Result<Vec<_>>>()?;
            Image::concat(&lumas.iter().collect::<Vec<_>>())
        }
    }
}

/// Channelwise stack of the clip's frames (RGB) assembled under `mode`.
pub fn assemble_input(clip: &VideoClip, mode: AssemblyMode, provider: &dyn FlowProvider) -> Result<Image> {
    stack_frames(&assemble_frames(clip, mode, provider)?, ColorMode::Rgb)
}

/// How clips become network inputs and targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub seq_len: usize,
    pub assembly: AssemblyMode,
    pub color: ColorMode,
    pub ycbcr_range: YcbcrRange,
}

impl InputSpec {
    pub fn new(seq_len: usize, assembly: AssemblyMode, color: ColorMode) -> Self {
        Self {
            seq_len,
            assembly,
            color,
            ycbcr_range: YcbcrRange::Full,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.assembly.input_channels(self.seq_len, self.color)
    }

    pub fn output_channels(&self) -> usize {
        self.color.channels_per_frame()
    }

    pub fn input(&self, clip: &VideoClip, provider: &dyn FlowProvider) -> Result<Image> {
        if clip.len() != self.seq_len {
            return Err(Error::InvalidArgument(format!(
                "clip has {} frames, expected {}",
                clip.len(),
                self.seq_len
            )));
        }
        self.stack(&assemble_frames(clip, self.assembly, provider)?)
    }

    /// Stacks already assembled RGB frames in the spec's color mode.
    pub fn stack(&self, frames: &[Image]) -> Result<Image> {
        match self.color {
            ColorMode::Rgb => stack_frames(frames, ColorMode::Rgb),
            ColorMode::Ycbcr => {
                let lumas = frames
                    .iter()
                    .map(|f| luma_with(f, self.ycbcr_range))
                    .collect::<Result<Vec<_>>>()?;
                Image::concat(&lumas.iter().collect::<Vec<_>>())
            }
        }
    }

    /// Training target: the sharp reference, or its luma.
    pub fn target(&self, clip: &VideoClip) -> Result<Image> {
        match self.color {
            ColorMode::Rgb => Ok(clip.sharp_reference().clone()),
            ColorMode::Ycbcr => luma_with(clip.sharp_reference(), self.ycbcr_range),
        }
    }

    /// RGB image from a model output for `clip`.
    pub fn to_rgb(&self, output: &Image, clip: &VideoClip) -> Result<Image> {
        match self.color {
            ColorMode::Rgb => Ok(output.clone()),
            ColorMode::Ycbcr => reconstruct_with(output, clip.center_frame(), self.ycbcr_range).map(Image::clamp01),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize) -> Image {
        Image::from_fn(3, h, w, |c, y, x| {
            ((x * 7 + y * 13 + c * 5) % 17) as f32 / 16.0
        })
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = texture(9, 11);
        assert_eq!(warp(&img, &FlowField::zeros(9, 11)).unwrap(), img);
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        let ramp = Image::from_fn(1, 4, 10, |_, _, x| 0.1 * x as f32);
        let out = warp(&ramp, &FlowField::constant(4, 10, 0.5, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..9 {
                assert!((out.get(0, y, x) - 0.1 * (x as f32 + 0.5)).abs() < 1e-6);
            }
            // border replication
            assert!((out.get(0, y, 9) - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_and_finiteness_checked() {
        let img = texture(4, 4);
        assert!(warp(&img, &FlowField::zeros(4, 5)).is_err());
        let mut f = FlowField::zeros(4, 4);
        f.u[3] = f32::NAN;
        assert!(warp(&img, &f).is_err());
    }

    #[test]
    fn flo_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let f = FlowField::new(3, 5, (0..15).map(|i| i as f32 * 0.25).collect(), (0..15).map(|i| -(i as f32)).collect()).unwrap();
        f.write_flo(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 12 + 15 * 8);
        assert_eq!(&bytes[0..4], &FLO_MAGIC.to_le_bytes());
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(FlowField::read_flo(&path).unwrap(), f);

        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(FlowField::read_flo(&path), Err(Error::FlowFormat { .. })));
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        std::fs::write(&path, &bad).unwrap();
        assert!(FlowField::read_flo(&path).is_err());
    }

    #[test]
    fn channel_arithmetic() {
        for l in [1usize, 3, 5, 7] {
            assert_eq!(AssemblyMode::None.input_channels(l, ColorMode::Rgb), 3 * l);
            assert_eq!(AssemblyMode::Rep.input_channels(l, ColorMode::Rgb), 3 * l);
            assert_eq!(AssemblyMode::Cat.input_channels(l, ColorMode::Rgb), 3 * (2 * l - 1));
        }
        assert_eq!(AssemblyMode::Cat.input_channels(5, ColorMode::Rgb), 27);
        assert_eq!(AssemblyMode::Cat.input_channels(7, ColorMode::Rgb), 39);
        assert_eq!(AssemblyMode::Cat.input_channels(5, ColorMode::Ycbcr), 9);
    }

    #[test]
    fn synthetic_provider_sign_convention() {
        let p = SyntheticFlowProvider::new().with("s", Trajectory::linear(10, 1.0, 0.0));
        for d in [-2i64, -1, 1, 2] {
            let f = p
                .flow(FlowRequest { sequence: "s", center: 4, offset: d, height: 2, width: 2 })
                .unwrap();
            assert_eq!(f.u()[0], -(d as f32));
            assert_eq!(f.v()[0], 0.0);
        }
        assert!(p.flow(FlowRequest { sequence: "s", center: 0, offset: -1, height: 2, width: 2 }).is_err());
        assert!(p.flow(FlowRequest { sequence: "t", center: 4, offset: 1, height: 2, width: 2 }).is_err());
    }
}
