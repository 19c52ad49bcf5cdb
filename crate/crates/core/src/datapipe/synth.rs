//! Procedural desk-scale video data.
//!
//! A random scene of flat shapes over a color gradient is viewed by a camera
//! translating along a scripted trajectory. Sharp frames sample the scene at
//! the camera position; blurry frames average samples along the motion during
//! the exposure.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InMemoryDataset;
use crate::error::{Error, Result};
use crate::flowwarp::{flow_file_name, FlowField, SyntheticFlowProvider, Trajectory};
use crate::image::Image;

/// Camera motion script shared by all sequences of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryScript {
    Static,
    /// Fixed integer shift per frame.
    Linear { dx: i32, dy: i32 },
    /// Random nonzero integer velocity per frame, components in
    /// `[-max_speed, max_speed]`. Neighboring frames are blurred along
    /// different directions.
    Random { max_speed: i32 },
}

impl FromStr for TrajectoryScript {
    type Err = Error;

    /// `static`, `linear:DX,DY` or `random:MAX`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized trajectory `{s}` (static | linear:DX,DY | random:MAX)"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "static" if arg.is_empty() => Ok(TrajectoryScript::Static),
            "linear" => {
                let (dx, dy) = arg.split_once(',').ok_or_else(bad)?;
                Ok(TrajectoryScript::Linear {
                    dx: dx.trim().parse().map_err(|_| bad())?,
                    dy: dy.trim().parse().map_err(|_| bad())?,
                })
            }
            "random" => {
                let max_speed: i32 = arg.trim().parse().map_err(|_| bad())?;
                if max_speed < 1 {
                    return Err(bad());
                }
                Ok(TrajectoryScript::Random { max_speed })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for TrajectoryScript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrajectoryScript::Static => write!(f, "static"),
            TrajectoryScript::Linear { dx, dy } => write!(f, "linear:{dx},{dy}"),
            TrajectoryScript::Random { max_speed } => write!(f, "random:{max_speed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub trajectory: TrajectoryScript,
    /// Scene samples averaged per blurry frame.
    pub blur_samples: usize,
    /// Flow files are written for neighbor offsets up to this distance.
    pub flow_radius: usize,
    /// Shapes per scene.
    pub shapes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 4,
            frames: 20,
            height: 192,
            width: 192,
            trajectory: TrajectoryScript::Random { max_speed: 3 },
            blur_samples: 9,
            flow_radius: 3,
            shapes: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r2: f64 },
    Stripes { x0: f64, y0: f64, x1: f64, y1: f64, period: f64, horizontal: bool },
}

#[derive(Debug, Clone)]
struct Scene {
    origin: (f64, f64),
    extent: (f64, f64),
    background: [[f32; 3]; 2],
    shapes: Vec<(Shape, [f32; 3], [f32; 3])>,
}

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

impl Scene {
    fn random<R: Rng>(rng: &mut R, origin: (f64, f64), extent: (f64, f64), count: usize) -> Self {
        let (ox, oy) = origin;
        let (ex, ey) = extent;
        let scale = ex.min(ey);
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let cx = ox + rng.gen_range(0.0..ex);
            let cy = oy + rng.gen_range(0.0..ey);
            let size = rng.gen_range(0.04..0.25) * scale;
            let shape = match rng.gen_range(0..3) {
                0 => {
                    let aspect = rng.gen_range(0.4..2.5);
                    Shape::Rect {
                        x0: cx - size * aspect / 2.0,
                        y0: cy - size / aspect / 2.0,
                        x1: cx + size * aspect / 2.0,
                        y1: cy + size / aspect / 2.0,
                    }
                }
                1 => Shape::Disk { cx, cy, r2: (size / 2.0).powi(2) },
                _ => Shape::Stripes {
                    x0: cx - size,
                    y0: cy - size,
                    x1: cx + size,
                    y1: cy + size,
                    period: rng.gen_range(4.0..12.0),
                    horizontal: rng.gen_bool(0.5),
                },
            };
            shapes.push((shape, color(rng), color(rng)));
        }
        Self {
            origin,
            extent,
            background: [color(rng), color(rng)],
            shapes,
        }
    }

    fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        for (shape, a, b) in self.shapes.iter().rev() {
            match *shape {
                Shape::Rect { x0, y0, x1, y1 } if x >= x0 && x < x1 && y >= y0 && y < y1 => return *a,
                Shape::Disk { cx, cy, r2 } if (x - cx).powi(2) + (y - cy).powi(2) < r2 => return *a,
                Shape::Stripes { x0, y0, x1, y1, period, horizontal } if x >= x0 && x < x1 && y >= y0 && y < y1 => {
                    let t = if horizontal { y - y0 } else { x - x0 };
                    return if (t / period).floor() as i64 % 2 == 0 { *a } else { *b };
                }
                _ => {}
            }
        }
        let t = (((x - self.origin.0) / self.extent.0 + (y - self.origin.1) / self.extent.1) / 2.0).clamp(0.0, 1.0) as f32;
        let [c0, c1] = self.background;
        [
            c0[0] * (1.0 - t) + c1[0] * t,
            c0[1] * (1.0 - t) + c1[1] * t,
            c0[2] * (1.0 - t) + c1[2] * t,
        ]
    }

    /// Mean of the scene over camera positions `positions`.
    fn render(&self, height: usize, width: usize, positions: &[(f64, f64)]) -> Image {
        let mut img = Image::new(3, height, width);
        let inv = 1.0 / positions.len() as f32;
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0.0f32; 3];
                for &(px, py) in positions {
                    let s = self.sample(x as f64 + px, y as f64 + py);
                    acc[0] += s[0];
                    acc[1] += s[1];
                    acc[2] += s[2];
                }
                for (c, a) in acc.iter().enumerate() {
                    img.set(c, y, x, a * inv);
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub id: String,
    pub sharp: Vec<Image>,
    pub blurry: Vec<Image>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub sequences: Vec<SynthSequence>,
}

/// Per-frame camera velocities; frame `t` moves by `v[t]` during its
/// exposure and the next frame starts there.
fn velocities<R: Rng>(script: TrajectoryScript, frames: usize, rng: &mut R) -> Vec<(i32, i32)> {
    match script {
        TrajectoryScript::Static => vec![(0, 0); frames],
        TrajectoryScript::Linear { dx, dy } => vec![(dx, dy); frames],
        TrajectoryScript::Random { max_speed } => (0..frames)
            .map(|_| loop {
                let v = (rng.gen_range(-max_speed..=max_speed), rng.gen_range(-max_speed..=max_speed));
                if v != (0, 0) {
                    break v;
                }
            })
            .collect(),
    }
}

/// Generates the dataset in memory. Frames are quantized to 8 bits so they
/// equal what [`SynthDataset::write`] stores.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    if config.sequences == 0 || config.frames == 0 || config.height == 0 || config.width == 0 || config.blur_samples == 0 {
        return Err(Error::InvalidArgument(format!("degenerate synthetic config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sequences = Vec::with_capacity(config.sequences);
    for s in 0..config.sequences {
        let v = velocities(config.trajectory, config.frames, &mut rng);
        let mut positions = Vec::with_capacity(config.frames);
        let mut c = (0i32, 0i32);
        for &(vx, vy) in &v {
            positions.push(c);
            c = (c.0 + vx, c.1 + vy);
        }
        let trajectory = Trajectory {
            positions: positions.iter().map(|&(x, y)| (x as f32, y as f32)).collect(),
        };
        // scene box covering every viewport plus the exposure sweeps
        let reach = v.iter().map(|&(x, y)| x.abs().max(y.abs())).max().unwrap_or(0) as f64;
        let lo = |f: fn(&(i32, i32)) -> i32| positions.iter().map(f).min().unwrap_or(0) as f64 - reach;
        let hi = |f: fn(&(i32, i32)) -> i32| positions.iter().map(f).max().unwrap_or(0) as f64 + reach;
        let origin = (lo(|p| p.0), lo(|p| p.1));
        let extent = (
            hi(|p| p.0) - origin.0 + config.width as f64,
            hi(|p| p.1) - origin.1 + config.height as f64,
        );
        let scene = Scene::random(&mut rng, origin, extent, config.shapes);
        let n = config.blur_samples;
        let mut sharp = Vec::with_capacity(config.frames);
        let mut blurry = Vec::with_capacity(config.frames);
        for (&(cx, cy), &(vx, vy)) in positions.iter().zip(&v) {
            let (cx, cy) = (cx as f64, cy as f64);
            sharp.push(scene.render(config.height, config.width, &[(cx, cy)]).quantize8());
            let exposure: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let s = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 - 0.5 };
                    (cx + s * vx as f64, cy + s * vy as f64)
                })
                .collect();
            blurry.push(scene.render(config.height, config.width, &exposure).quantize8());
        }
        sequences.push(SynthSequence {
            id: format!("seq{s:03}"),
            sharp,
            blurry,
            trajectory,
        });
    }
    Ok(SynthDataset {
        config: config.clone(),
        sequences,
    })
}

impl SynthDataset {
    pub fn to_memory(&self) -> InMemoryDataset {
        let mut ds = InMemoryDataset::default();
        for s in &self.sequences {
            ds.push(s.id.clone(), s.blurry.clone(), s.sharp.clone())
                .expect("generated sequences have matching frame counts");
        }
        ds
    }

    /// Ground-truth flow for every sequence.
    pub fn flow_provider(&self) -> SyntheticFlowProvider {
        let mut p = SyntheticFlowProvider::new();
        for s in &self.sequences {
            p.insert(s.id.clone(), s.trajectory.clone());
        }
        p
    }

    /// Writes `<split_dir>/<sequence>/{blurry,sharp,flow}/` plus a
    /// `trajectory.json` per sequence.
    pub fn write(&self, split_dir: &Path) -> Result<()> {
        let radius = self.config.flow_radius as i64;
        for s in &self.sequences {
            let dir = split_dir.join(&s.id);
            for sub in ["blurry", "sharp", "flow"] {
                fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
            }
            for (i, (b, sh)) in s.blurry.iter().zip(&s.sharp).enumerate() {
                b.save_rgb(&dir.join("blurry").join(format!("{i:05}.png")))?;
                sh.save_rgb(&dir.join("sharp").join(format!("{i:05}.png")))?;
            }
            let frames = s.sharp.len() as i64;
            for center in 0..frames {
                for offset in -radius..=radius {
                    let n = center + offset;
                    if offset == 0 || n < 0 || n >= frames {
                        continue;
                    }
                    let (u, v) = s
                        .trajectory
                        .relative(center as usize, offset)
                        .expect("trajectory covers every frame");
                    FlowField::constant(self.config.height, self.config.width, u, v)
                        .write_flo(&dir.join("flow").join(flow_file_name(center as usize, offset)))?;
                }
            }
            let path = dir.join("trajectory.json");
            fs::write(&path, serde_json::to_vec_pretty(&s.trajectory)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
