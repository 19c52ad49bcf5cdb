//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails. Set `DEBLURLAB_SU_TEST_ROOT` to the test split of the
//! DVD dataset to run the luma-oracle check on real data.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use deblurlab::colorspace::{luma, oracle_bounds, reconstruct, rgb_to_ycbcr, ycbcr_to_rgb, YcbcrRange};
use deblurlab::datapipe::scan_dataset;
use deblurlab::datapipe::synth::{generate, SynthConfig, TrajectoryScript};
use deblurlab::datapipe::{sample_clip_at, valid_centers, ClipSource};
use deblurlab::evaluator::{evaluate, gaussian_blur, gradient_statistics, mssim, psnr, PSNR_CAP};
use deblurlab::flowwarp::{warp, FlowField};
use deblurlab::image::Image;
use deblurlab::model::{activation_histogram, fan_value, msra_init, FanMode, LayerShape};
use deblurlab::trainer::{DataSplit, ScheduleSpec, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn fan_arithmetic() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0;
    for _ in 0..50 {
        let (kh, kw) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let (cin, cout) = (rng.gen_range(1..513), rng.gen_range(1..513));
        let s = LayerShape::new(kh, kw, cin, cout).unwrap();
        let (fi, fo) = (cin * kh * kw, cout * kh * kw);
        if fan_value(s, FanMode::FanIn) != fi || fan_value(s, FanMode::FanOut) != fo || fan_value(s, FanMode::FanMax) != fi.max(fo) {
            bad += 1;
        }
    }
    let s = LayerShape::square(3, 64, 128).unwrap();
    let fixed = [
        (fan_value(s, FanMode::FanIn), 576),
        (fan_value(s, FanMode::FanOut), 1152),
        (fan_value(s, FanMode::FanMax), 1152),
        (fan_value(LayerShape::square(5, 15, 64).unwrap(), FanMode::FanMax), 1600),
    ];
    let fixed_ok = fixed.iter().all(|(a, b)| a == b);
    verdict(bad == 0 && fixed_ok, format!("{bad}/50 random shapes wrong, fixed examples {}", if fixed_ok { "exact" } else { "wrong" }))
}

fn init_statistics() -> Verdict {
    let s = LayerShape::square(3, 64, 128).unwrap();
    let want = (2.0f64 / 1152.0).sqrt();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let w: Vec<f64> = msra_init(s, FanMode::FanMax, &mut ChaCha8Rng::seed_from_u64(seed));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        worst = worst.max((std / want - 1.0).abs());
    }
    verdict(worst <= 0.05, format!("worst relative std deviation {:.4} (limit 0.05)", worst))
}

fn warp_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = common::random_image(&mut rng, 3, 64, 64);
    let identity = warp(&base, &FlowField::zeros(64, 64)).unwrap() == base;
    let mut worst = 0.0f32;
    for dy in -8i32..=8 {
        for dx in -8i32..=8 {
            let neighbor = Image::from_fn(3, 64, 64, |c, y, x| {
                let (sy, sx) = (y as i32 - dy, x as i32 - dx);
                if (0..64).contains(&sy) && (0..64).contains(&sx) {
                    base.get(c, sy as usize, sx as usize)
                } else {
                    0.0
                }
            });
            let out = warp(&neighbor, &FlowField::constant(64, 64, dx as f32, dy as f32)).unwrap();
            for c in 0..3 {
                for y in 8..56 {
                    for x in 8..56 {
                        worst = worst.max((out.get(c, y, x) - base.get(c, y, x)).abs());
                    }
                }
            }
        }
    }
    verdict(identity && worst == 0.0, format!("zero flow bitwise {identity}, interior max error {worst} over |d| <= 8"))
}

fn color_space() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let px = common::random_image(&mut rng, 3, 1, 1000);
    let round = ycbcr_to_rgb(&rgb_to_ycbcr(&px).unwrap()).unwrap().max_abs_diff(&px);

    // Gray images carry no chroma, so true luma plus blurry chroma is exact.
    let gray = |img: &Image| Image::from_fn(3, img.height(), img.width(), |_, y, x| img.get(0, y, x));
    let sharp = gray(&common::textured_image(5, 1, 48, 48));
    let blurry = gaussian_blur(&sharp, 2.0);
    let oracle = psnr(&reconstruct(&luma(&sharp).unwrap(), &blurry).unwrap(), &sharp).unwrap();

    let y = common::random_image(&mut rng, 1, 32, 32);
    let b = common::random_image(&mut rng, 3, 32, 32);
    let once = reconstruct(&y, &b).unwrap();
    let idem = reconstruct(&y, &once).unwrap().max_abs_diff(&once);
    verdict(
        round <= 1e-4 && oracle >= PSNR_CAP && idem <= 1e-4,
        format!("round trip {round:.2e}, chroma-free oracle {oracle:.2} dB, idempotence {idem:.2e}"),
    )
}

fn metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = Image::from_fn(3, 32, 32, |_, _, _| rng.gen_range(0.2..0.8));
    let mut off = gt.clone();
    off.data_mut().iter_mut().for_each(|v| *v += 0.1);
    let p1 = psnr(&off, &gt).unwrap();
    let mut half = gt.clone();
    half.data_mut().iter_mut().for_each(|v| *v += 0.05);
    let gain = psnr(&half, &gt).unwrap() - p1;

    let sizes = [(176, 176), (181, 190), (192, 192), (200, 177)];
    let mut worst: f64 = 0.0;
    for i in 0..8u64 {
        let (h, w) = sizes[i as usize % sizes.len()];
        let a = common::textured_image(10 + i, 3, h, w);
        let b = if i % 2 == 0 {
            gaussian_blur(&a, 0.8 + i as f64 * 0.3)
        } else {
            let mut n = a.clone();
            let mut r = ChaCha8Rng::seed_from_u64(i);
            n.data_mut().iter_mut().for_each(|v| *v = (*v + r.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
            n
        };
        worst = worst.max((mssim(&a, &b).unwrap() - common::mssim_reference(&a, &b)).abs());
    }
    verdict(
        (p1 - 20.0).abs() <= 0.01 && (gain - 6.0206).abs() <= 0.01 && worst <= 1e-4,
        format!("offset 0.1 -> {p1:.4} dB, halving gain {gain:.4} dB, MSSIM max deviation {worst:.2e} on 8 pairs"),
    )
}

fn schedules() -> Verdict {
    let tables: [(&str, ScheduleSpec, usize, &[usize]); 3] = [
        ("short", ScheduleSpec::short(), 116, &[32, 44, 56, 68, 80, 92, 104]),
        ("long", ScheduleSpec::long(), 216, &[108, 126, 144, 162, 180, 198]),
        ("nah", ScheduleSpec::nah(), 608, &[308, 358, 408, 458, 508, 558]),
    ];
    let mut mismatches = Vec::new();
    for (name, spec, total, halvings) in tables {
        let mut wrong = spec.total_epochs != total || spec.lr_at_epoch(total).is_ok();
        for e in 0..total {
            let k = halvings.iter().filter(|&&h| h <= e).count() as i32;
            if spec.lr_at_epoch(e).ok() != Some(0.005 * 0.5f64.powi(k)) {
                wrong = true;
            }
        }
        if wrong {
            mismatches.push(name);
        }
    }
    verdict(mismatches.is_empty(), format!("presets off the table: {mismatches:?}"))
}

fn gradient_check() -> Verdict {
    use deblurlab::model::{Backbone, ModelConfig};
    use deblurlab::tensor::Tensor;
    use deblurlab::trainer::{sse_loss, sse_loss_grad};

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig::tiny(9, 3);
    let mut model: Backbone<f64> = Backbone::new(cfg, 7).unwrap();
    let rand_t = |rng: &mut ChaCha8Rng, c| Tensor::from_vec(2, c, 16, 16, (0..2 * c * 256).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let x = rand_t(&mut rng, 9);
    let y = rand_t(&mut rng, 3);
    model.zero_grads();
    let out = model.forward_train_head(&x).unwrap();
    let (_, d) = sse_loss_grad(&out, &y).unwrap();
    model.backward_head(&d);
    let mut grads = Vec::new();
    model.visit_params(&mut |_, g| grads.push(g.clone()));
    let set = |m: &mut Backbone<f64>, t: usize, i: usize, v: Option<f64>| {
        let (mut k, mut old) = (0, 0.0);
        m.visit_params(&mut |p, _| {
            if k == t {
                old = p[i];
                if let Some(v) = v {
                    p[i] = v;
                }
            }
            k += 1;
        });
        old
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = rng.gen_range(0..grads.len());
        let i = rng.gen_range(0..grads[t].len());
        let w0 = set(&mut model, t, i, None);
        set(&mut model, t, i, Some(w0 + h));
        let up = sse_loss(&model.forward_train_head(&x).unwrap(), &y).unwrap();
        set(&mut model, t, i, Some(w0 - h));
        let down = sse_loss(&model.forward_train_head(&x).unwrap(), &y).unwrap();
        set(&mut model, t, i, Some(w0));
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t][i];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8));
    }
    verdict(worst <= 1e-3, format!("max relative error {worst:.2e} over 20 weights (limit 1e-3)"))
}

fn train_losses(head: &str, fan: &str, assembly: &str, seed: u64, iterations: usize) -> Vec<f64> {
    let c = common::overfit_config(head, fan, assembly, seed, iterations, &[]);
    let split = DataSplit::from_config(&c, "train", None).unwrap();
    let mut t = Trainer::new(c, split, None).unwrap();
    t.run_until(usize::MAX).unwrap();
    t.losses().to_vec()
}

fn overfit() -> Verdict {
    let c = common::overfit_config("linear", "fan_max", "cat", 1, 2000, &[1600, 1900]);
    let run = || {
        let split = DataSplit::from_config(&c, "train", None).unwrap();
        let mut t = Trainer::new(c.clone(), split.clone(), None).unwrap();
        t.run_until(usize::MAX).unwrap();
        (t, split)
    };
    let start = std::time::Instant::now();
    let (first, split) = run();
    let train_secs = start.elapsed().as_secs_f64();
    let (second, _) = run();
    let report = evaluate(first.model(), &c.input_spec(), split.source.as_ref(), split.provider.as_ref()).unwrap();
    let mut a = first.model().clone();
    let mut b = second.model().clone();
    let same = a.export_state() == b.export_state() && first.losses() == second.losses();

    let spec = c.input_spec();
    let source = split.source.as_ref();
    let mut inputs = Vec::new();
    for (seq, (_, frames)) in source.sequences().into_iter().enumerate() {
        for center in valid_centers(frames, spec.seq_len) {
            let clip = sample_clip_at(source, seq, center, spec.seq_len).unwrap();
            inputs.push(Image::batch(&[spec.input(&clip, split.provider.as_ref()).unwrap()]).unwrap());
        }
    }
    let hist = activation_histogram(first.model(), &inputs, 64, 0.05).unwrap();
    let outside = hist.fraction_outside();
    verdict(
        first.state().iteration == 2000 && report.aggregate.psnr >= 35.0 && same && outside < 0.01 && train_secs < 600.0,
        format!(
            "{} clips, {} iterations in {train_secs:.0} s (< 600), train PSNR {:.2} dB (>= 35), rerun bitwise {same}, activations outside [-0.05, 1.05] {:.3}%",
            inputs.len(),
            first.state().iteration,
            report.aggregate.psnr,
            outside * 100.0
        ),
    )
}

const ABLATION_ITERATIONS: usize = 400;

fn directional_ablations() -> Verdict {
    let n = ABLATION_ITERATIONS;
    let (mut a_fast, mut a_ref, mut b_fast, mut b_ref) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut finals = Vec::new();
    for seed in 0..5 {
        let linear = train_losses("linear", "fan_max", "cat", seed, n);
        let sigmoid = train_losses("sigmoid", "fan_out", "cat", seed, n);
        let none = train_losses("linear", "fan_max", "none", seed, n);
        let target = *sigmoid.last().unwrap();
        a_fast.push(common::first_reaching(&linear, target));
        a_ref.push(common::first_reaching(&sigmoid, target));
        let target = *none.last().unwrap();
        b_fast.push(common::first_reaching(&linear, target));
        b_ref.push(common::first_reaching(&none, target));
        finals.push((linear.last().copied().unwrap(), sigmoid.last().copied().unwrap(), none.last().copied().unwrap()));
    }
    let show = |v: Option<usize>| v.map_or("never".to_string(), |i| i.to_string());
    let (am, ar) = (common::median(a_fast.clone()), common::median(a_ref));
    let (bm, br) = (common::median(b_fast.clone()), common::median(b_ref));
    let a_ok = matches!((am, ar), (Some(f), Some(r)) if f < r);
    let b_ok = matches!((bm, br), (Some(f), Some(r)) if f <= r);
    let finals: Vec<String> = finals
        .iter()
        .map(|(l, s, z)| format!("{l:.2}/{s:.2}/{z:.2}"))
        .collect();
    let detail = format!(
        "(a) linear+fan_max median {} vs sigmoid+fan_out {} iterations: {}; (b) cat median {} vs none {}: {}; final losses linear/sigmoid/none per seed [{}] after {n} iterations",
        show(am),
        show(ar),
        if a_ok { "pass" } else { "FAIL" },
        show(bm),
        show(br),
        if b_ok { "pass" } else { "FAIL" },
        finals.join(", ")
    );
    verdict(a_ok && b_ok, detail)
}

fn gradient_tails() -> Verdict {
    let data = generate(&SynthConfig {
        sequences: 3,
        frames: 4,
        height: 128,
        width: 128,
        trajectory: TrajectoryScript::Static,
        ..SynthConfig::default()
    })
    .unwrap();
    let sharp: Vec<Image> = data.sequences.iter().flat_map(|s| s.sharp.clone()).collect();
    let blurred: Vec<Image> = sharp.iter().map(|s| gaussian_blur(s, 2.0)).collect();
    let full = gradient_statistics(&sharp, &blurred, 1.0, 128).unwrap();
    let small = gradient_statistics(&sharp, &blurred, 0.25, 128).unwrap();
    let ok = full.blurry_tail_fraction() < full.sharp_tail_fraction()
        && (small.tail_ratio() - 1.0).abs() < (full.tail_ratio() - 1.0).abs();
    verdict(
        ok,
        format!(
            "tail mass sharp/blurred {:.4}/{:.4} at scale 1 (ratio {:.2}), ratio {:.2} at scale 0.25",
            full.sharp_tail_fraction(),
            full.blurry_tail_fraction(),
            full.tail_ratio(),
            small.tail_ratio()
        ),
    )
}

fn su_oracle() -> Verdict {
    let Some(root) = std::env::var_os("DEBLURLAB_SU_TEST_ROOT").map(PathBuf::from) else {
        return Skip("DEBLURLAB_SU_TEST_ROOT not set".into());
    };
    let index = match scan_dataset(&root) {
        Ok(i) => i,
        Err(e) => return Fail(format!("cannot read {}: {e}", root.display())),
    };
    let bounds = |range| {
        let pairs = index.sequences().into_iter().enumerate().flat_map(|(s, (_, n))| {
            let index = &index;
            (0..n).map(move |f| Ok((index.blurry_frame(s, f)?, index.sharp_frame(s, f)?)))
        });
        oracle_bounds(pairs, range)
    };
    let close = |b: &deblurlab::colorspace::OracleBounds| (b.input_psnr - 27.23).abs() <= 0.05 && (b.y_oracle_psnr - 56.26).abs() <= 0.05;
    let full = match bounds(YcbcrRange::Full) {
        Ok(b) => b,
        Err(e) => return Fail(e.to_string()),
    };
    if close(&full) {
        return Pass(format!("full range: input {:.2} dB, oracle {:.2} dB over {} frames", full.input_psnr, full.y_oracle_psnr, full.pairs));
    }
    match bounds(YcbcrRange::Studio) {
        Ok(s) => verdict(
            close(&s),
            format!(
                "full range missed ({:.2}/{:.2} dB); studio range {:.2}/{:.2} dB over {} frames",
                full.input_psnr, full.y_oracle_psnr, s.input_psnr, s.y_oracle_psnr, s.pairs
            ),
        ),
        Err(e) => Fail(e.to_string()),
    }
}

fn main() {
    type Criterion = (&'static str, u64, fn() -> Verdict);
    let criteria: [Criterion; 11] = [
        ("fan arithmetic", 1, fan_arithmetic),
        ("init statistics", 5, init_statistics),
        ("warp oracle", 5, warp_oracle),
        ("color space", 5, color_space),
        ("metrics", 30, metrics),
        ("schedule tables", 1, schedules),
        ("gradient check", 120, gradient_check),
        ("overfit sanity", 1200, overfit),
        ("directional ablations", 3600, directional_ablations),
        ("gradient tails under rescaling", 60, gradient_tails),
        ("luma oracle on DVD test set", 3600, su_oracle),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let took = start.elapsed();
        let within = took <= Duration::from_secs(*limit);
        let (tag, detail) = match v {
            Pass(d) if within => ("PASS", d),
            Pass(d) => ("FAIL", format!("{d}; over the {limit} s budget")),
            Fail(d) => ("FAIL", d),
            Skip(d) => ("SKIP", d),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {id:>2} {tag} {name} ({:.1} s): {detail}", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
