#![allow(dead_code)]

use deblurlab::config::RunConfig;
use deblurlab::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Overfit task: tiny model, 4 clips of 64×64 (one 6-frame synthetic
/// sequence, window of 3), full-frame batches without augmentation, so one
/// epoch is one iteration over all four clips.
pub fn overfit_config(head: &str, fan: &str, assembly: &str, seed: u64, iterations: usize, halvings: &[usize]) -> RunConfig {
    let halvings: Vec<String> = halvings.iter().map(|h| h.to_string()).collect();
    RunConfig::from_toml_str(&format!(
        r#"
seed = {seed}
[model]
base_width = 16
depth = 2
head = "{head}"
fan_mode = "{fan}"
[data]
sequence_length = 3
batch_size = 4
crops_per_example = 1
[data.synthetic]
sequences = 1
frames = 6
height = 64
width = 64
trajectory = {{ random = {{ max_speed = 2 }} }}
blur_samples = 9
flow_radius = 1
shapes = 6
seed = 5
[augmentation]
rotations = false
flips = false
crop_size = 0
[flow]
assembly = "{assembly}"
source = "synthetic"
[schedule]
preset = "custom"
total_epochs = {iterations}
halving_epochs = [{}]
[eval]
every_epochs = 0
[output]
checkpoint_every = 0
"#,
        halvings.join(", ")
    ))
    .expect("overfit config parses")
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    Image::from_fn(c, h, w, |_, _, _| rng.gen::<f32>())
}

/// Smooth textured image with values in `[0, 1]`.
pub fn textured_image(seed: u64, c: usize, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<(f32, f32, f32)> = (0..c * 4)
        .map(|_| (rng.gen_range(0.02..0.3), rng.gen_range(0.02..0.3), rng.gen_range(0.0..6.28)))
        .collect();
    Image::from_fn(c, h, w, |ch, y, x| {
        let mut v = 0.5;
        for k in 0..4 {
            let (a, b, p) = f[ch * 4 + k];
            v += 0.1 * (a * x as f32 + b * y as f32 + p).sin();
        }
        v
    })
}

/// Direct-formula multi-scale SSIM: explicit 2-D Gaussian window summed at
/// every valid position, no separable filtering.
pub fn mssim_reference(a: &Image, b: &Image) -> f64 {
    const W: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let (ch, h0, w0) = a.dims();
    let mut acc = 0.0;
    for c in 0..ch {
        let mut x: Vec<Vec<f64>> = (0..h0).map(|y| (0..w0).map(|k| a.get(c, y, k) as f64).collect()).collect();
        let mut y: Vec<Vec<f64>> = (0..h0).map(|r| (0..w0).map(|k| b.get(c, r, k) as f64).collect()).collect();
        let mut score = 1.0;
        for (s, &ws) in W.iter().enumerate() {
            let (h, w) = (x.len(), x[0].len());
            let (mut cs_sum, mut l_sum, mut n) = (0.0, 0.0, 0.0);
            for r in 0..=h - 11 {
                for q in 0..=w - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            mx += win[i][j] * x[r + i][q + j];
                            my += win[i][j] * y[r + i][q + j];
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let dx = x[r + i][q + j] - mx;
                            let dy = y[r + i][q + j] - my;
                            vx += win[i][j] * dx * dx;
                            vy += win[i][j] * dy * dy;
                            cov += win[i][j] * dx * dy;
                        }
                    }
                    cs_sum += (2.0 * cov + c2) / (vx + vy + c2);
                    l_sum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    n += 1.0;
                }
            }
            score *= (cs_sum / n).max(0.0).powf(ws);
            if s == 4 {
                score *= (l_sum / n).max(0.0).powf(ws);
            } else {
                let half = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    (0..h / 2)
                        .map(|r| {
                            (0..w / 2)
                                .map(|q| (m[2 * r][2 * q] + m[2 * r][2 * q + 1] + m[2 * r + 1][2 * q] + m[2 * r + 1][2 * q + 1]) / 4.0)
                                .collect()
                        })
                        .collect()
                };
                x = half(&x);
                y = half(&y);
            }
        }
        acc += score;
    }
    acc / ch as f64
}

/// 1-based index of the first loss at or below `target`.
pub fn first_reaching(losses: &[f64], target: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= target).map(|i| i + 1)
}

/// Median of five or so counts; a run that never reaches counts as infinite.
pub fn median(mut xs: Vec<Option<usize>>) -> Option<usize> {
    xs.sort_by_key(|x| x.unwrap_or(usize::MAX));
    xs[xs.len() / 2]
}
