//! SSE training with Adam on step learning-rate schedules, checkpoints and
//! run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FlowSource, RunConfig, RunRecord};
use crate::datapipe::synth::generate;
use crate::datapipe::{
    augment, batch_iterator, sample_clip_at, scan_dataset, AugmentationPolicy, Batch, ClipSource, VideoClip,
};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::flowwarp::{assemble_frames, FileFlowProvider, FlowProvider, InputSpec, NoFlow};
use crate::image::Image;
use crate::model::{Backbone, ModelConfig, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

pub const BASE_LR: f64 = 0.005;

/// Piecewise-constant learning rate halved at fixed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub total_epochs: usize,
    pub base_lr: f64,
    pub halving_epochs: Vec<usize>,
}

impl ScheduleSpec {
    pub fn new(total_epochs: usize, base_lr: f64, halving_epochs: Vec<usize>) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base learning rate must be positive, got {base_lr}")));
        }
        if halving_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "halving epochs must be strictly increasing: {halving_epochs:?}"
            )));
        }
        if halving_epochs.last().is_some_and(|&e| e >= total_epochs) {
            return Err(Error::Config(format!(
                "halving epochs {halving_epochs:?} must lie below {total_epochs} epochs"
            )));
        }
        Ok(Self {
            total_epochs,
            base_lr,
            halving_epochs,
        })
    }

    /// 116 epochs in the style of the original DBN training.
    pub fn short() -> Self {
        Self {
            total_epochs: 116,
            base_lr: BASE_LR,
            halving_epochs: vec![32, 44, 56, 68, 80, 92, 104],
        }
    }

    pub fn long() -> Self {
        Self {
            total_epochs: 216,
            base_lr: BASE_LR,
            halving_epochs: vec![108, 126, 144, 162, 180, 198],
        }
    }

    /// Three times the long schedule, for the smaller GOPRO training set.
    pub fn nah() -> Self {
        Self {
            total_epochs: 608,
            base_lr: BASE_LR,
            halving_epochs: vec![308, 358, 408, 458, 508, 558],
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} is past the {}-epoch schedule",
                self.total_epochs
            )));
        }
        let k = self.halving_epochs.iter().take_while(|&&e| e <= epoch).count();
        Ok(self.base_lr / (1u64 << k) as f64)
    }
}

fn check_same<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.same_dims(target) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )))
    }
}

/// Squared error summed within each example and averaged over the batch.
pub fn sse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.to_f64() - t.to_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.batch().max(1) as f64)
}

/// [`sse_loss`] and its gradient with respect to `pred`.
pub fn sse_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let loss = sse_loss(pred, target)?;
    let scale = 2.0 / pred.batch().max(1) as f64;
    let mut grad = pred.clone();
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        *g = T::from_f64(scale * (g.to_f64() - t.to_f64()));
    }
    Ok((loss, grad))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter of `model` from its accumulated gradient.
    pub fn step(&mut self, model: &mut Backbone<f32>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params(&mut |p, g| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
            idx += 1;
        });
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: usize,
    pub model: Backbone<f32>,
    pub adam: Adam,
    pub best_val_psnr: Option<f64>,
    pub last_loss: Option<f64>,
}

const CKPT_MAGIC: &[u8; 8] = b"DBLRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: RunConfig,
    model: ModelConfig,
    epoch: usize,
    iteration: usize,
    adam_steps: u64,
    best_val_psnr: Option<f64>,
    last_loss: Option<f64>,
    state_lens: Vec<usize>,
    moment_lens: Vec<usize>,
}

/// A saved [`TrainState`] with the config that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let model_state = self.state.model.export_state();
        let header = CheckpointHeader {
            config: self.config.clone(),
            model: self.state.model.config().clone(),
            epoch: self.state.epoch,
            iteration: self.state.iteration,
            adam_steps: self.state.adam.steps,
            best_val_psnr: self.state.best_val_psnr,
            last_loss: self.state.last_loss,
            state_lens: model_state.iter().map(Vec::len).collect(),
            moment_lens: self.state.adam.m.iter().map(Vec::len).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let tensors = model_state
            .iter()
            .chain(&self.state.adam.m)
            .chain(&self.state.adam.v);
        for t in tensors {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| bad(&format!("corrupt header: {e}")))?;
        let mut floats = body[hlen..].chunks_exact(4);
        if floats.remainder().len() != 0 {
            return Err(bad("payload is not a whole number of floats"));
        }
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let c = floats.next().ok_or_else(|| bad("payload truncated"))?;
                v.push(f32::from_le_bytes(c.try_into().expect("4 bytes")));
            }
            Ok(v)
        };
        let state = header.state_lens.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        let m = header.moment_lens.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        let v = header.moment_lens.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        if floats.next().is_some() {
            return Err(bad("trailing data after payload"));
        }
        let mut model = Backbone::new(header.model.clone(), 0)?;
        model.import_state(&state).map_err(|e| bad(&e.to_string()))?;
        Ok(Self {
            config: header.config,
            state: TrainState {
                epoch: header.epoch,
                iteration: header.iteration,
                model,
                adam: Adam {
                    steps: header.adam_steps,
                    m,
                    v,
                    ..Adam::default()
                },
                best_val_psnr: header.best_val_psnr,
                last_loss: header.last_loss,
            },
        })
    }
}

/// Clip source plus the flow fields that go with it.
#[derive(Clone)]
pub struct DataSplit {
    pub source: Arc<dyn ClipSource>,
    pub provider: Arc<dyn FlowProvider>,
}

impl DataSplit {
    pub fn new(source: Arc<dyn ClipSource>, provider: Arc<dyn FlowProvider>) -> Self {
        Self { source, provider }
    }

    /// Split `split` of the configured dataset, or the generated synthetic
    /// data when `[data.synthetic]` is set.
    pub fn from_config(config: &RunConfig, split: &str, root: Option<&Path>) -> Result<Self> {
        let needs_flow = config.flow.assembly.needs_flow();
        if let Some(synth) = &config.data.synthetic {
            let ds = generate(synth)?;
            let provider: Arc<dyn FlowProvider> = match (needs_flow, config.flow.source) {
                (false, _) => Arc::new(NoFlow),
                (true, FlowSource::Synthetic) => Arc::new(ds.flow_provider()),
                (true, FlowSource::Files) => {
                    return Err(Error::Config(
                        "synthetic data carries its own flow; set flow.source = \"synthetic\"".into(),
                    ))
                }
            };
            return Ok(Self::new(Arc::new(ds.to_memory()), provider));
        }
        let root = config
            .data_root(root)
            .ok_or_else(|| Error::Config("no dataset root configured (data.root)".into()))?;
        let dir = root.join(split);
        let index = scan_dataset(&dir)?;
        let source: Arc<dyn ClipSource> = if config.data.in_memory {
            Arc::new(index.load_into_memory()?)
        } else {
            Arc::new(index)
        };
        let provider: Arc<dyn FlowProvider> = match (needs_flow, config.flow.source) {
            (false, _) => Arc::new(NoFlow),
            (true, FlowSource::Files) => Arc::new(FileFlowProvider::new(&dir)?),
            (true, FlowSource::Synthetic) => {
                return Err(Error::Config("flow.source = \"synthetic\" needs [data.synthetic]".into()))
            }
        };
        Ok(Self::new(source, provider))
    }
}

/// Turns planned batches into input/target tensors.
#[derive(Clone)]
pub struct BatchMaker {
    pub spec: InputSpec,
    pub policy: AugmentationPolicy,
    pub data: DataSplit,
}

impl BatchMaker {
    /// One training example: flow assembly on full frames, then one shared
    /// augmentation draw over every assembled frame and the target.
    pub fn example(&self, clip: &VideoClip, seed: u64) -> Result<(Image, Image)> {
        let frames = assemble_frames(clip, self.spec.assembly, self.data.provider.as_ref())?;
        let assembled = VideoClip::new(frames, clip.sharp_reference().clone(), clip.sequence_id(), clip.center_index())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aug = augment(&assembled, &self.policy, &mut rng)?;
        Ok((self.spec.stack(aug.blurry_frames())?, self.spec.target(&aug)?))
    }

    pub fn make(&self, batch: &Batch) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut xs = Vec::with_capacity(batch.entries.len());
        let mut ys = Vec::with_capacity(batch.entries.len());
        let mut cached: Option<(crate::datapipe::ClipKey, VideoClip)> = None;
        for e in &batch.entries {
            if cached.as_ref().map(|(k, _)| *k) != Some(e.key) {
                let clip = sample_clip_at(self.data.source.as_ref(), e.key.sequence, e.key.center, self.spec.seq_len)?;
                cached = Some((e.key, clip));
            }
            let (_, clip) = cached.as_ref().expect("clip cached above");
            let (x, y) = self.example(clip, e.seed)?;
            xs.push(x);
            ys.push(y);
        }
        Ok((Image::batch(&xs)?, Image::batch(&ys)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_id: String,
    pub epochs_completed: usize,
    pub iterations: usize,
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
    pub best_val_psnr: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

pub struct Trainer {
    config: RunConfig,
    schedule: ScheduleSpec,
    maker: BatchMaker,
    val: Option<DataSplit>,
    state: TrainState,
    losses: Vec<f64>,
    output: Option<PathBuf>,
}

impl Trainer {
    /// Fresh run with weights drawn from `config.seed`.
    pub fn new(config: RunConfig, train: DataSplit, val: Option<DataSplit>) -> Result<Self> {
        config.validate()?;
        let model = Backbone::new(config.model_config()?, config.seed)?;
        let state = TrainState {
            epoch: 0,
            iteration: 0,
            model,
            adam: Adam::default(),
            best_val_psnr: None,
            last_loss: None,
        };
        Self::with_state(config, state, train, val)
    }

    /// Continues from `checkpoint`. A `config` given alongside must describe
    /// the same model.
    pub fn resume(checkpoint: Checkpoint, config: Option<RunConfig>, train: DataSplit, val: Option<DataSplit>) -> Result<Self> {
        let config = match config {
            Some(c) => {
                let wanted = c.model_config()?;
                if &wanted != checkpoint.state.model.config() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint model {:?} does not match configured model {:?}",
                        checkpoint.state.model.config(),
                        wanted
                    )));
                }
                c
            }
            None => checkpoint.config,
        };
        Self::with_state(config, checkpoint.state, train, val)
    }

    fn with_state(mut config: RunConfig, state: TrainState, train: DataSplit, val: Option<DataSplit>) -> Result<Self> {
        config.run = None;
        let schedule = config.schedule_spec()?;
        let maker = BatchMaker {
            spec: config.input_spec(),
            policy: config.augmentation_policy()?,
            data: train,
        };
        Ok(Self {
            config,
            schedule,
            maker,
            val,
            state,
            losses: Vec::new(),
            output: None,
        })
    }

    /// Directory for checkpoints, manifest and loss log.
    pub fn set_output(&mut self, dir: impl Into<PathBuf>) {
        self.output = Some(dir.into());
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &Backbone<f32> {
        &self.state.model
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn schedule(&self) -> &ScheduleSpec {
        &self.schedule
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    fn iteration_budget_left(&self) -> bool {
        self.config
            .schedule
            .max_iterations
            .is_none_or(|m| self.state.iteration < m)
    }

    /// One optimizer step on a prepared batch.
    pub fn step(&mut self, x: &Tensor<f32>, y: &Tensor<f32>, lr: f64) -> Result<f64> {
        let st = &mut self.state;
        st.model.zero_grads();
        let out = st.model.forward_train_head(x)?;
        let (loss, grad) = sse_loss_grad(&out, y)?;
        if !loss.is_finite() {
            log::error!(
                "non-finite loss {loss} at epoch {} iteration {} (lr {lr})",
                st.epoch,
                st.iteration
            );
            return Err(Error::NonFiniteLoss {
                epoch: st.epoch,
                iteration: st.iteration,
                loss,
            });
        }
        st.model.backward_head(&grad);
        st.adam.step(&mut st.model, lr);
        st.iteration += 1;
        st.last_loss = Some(loss);
        self.losses.push(loss);
        Ok(loss)
    }

    /// Trains the next epoch, preparing batches on a helper thread. Stops
    /// early, leaving the epoch incomplete, once the iteration budget is
    /// spent.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.state.epoch;
        let lr = self.schedule.lr_at_epoch(epoch)?;
        let d = &self.config.data;
        let plan = batch_iterator(
            self.maker.data.source.as_ref(),
            d.sequence_length,
            d.batch_size,
            d.crops_per_example,
            self.config.seed,
            epoch,
        )?;
        let (tx, rx) = sync_channel(d.prefetch.max(1));
        let maker = self.maker.clone();
        let (mut sum, mut count) = (0.0, 0usize);
        let mut complete = true;
        std::thread::scope(|scope| -> Result<()> {
            scope.spawn(move || {
                for batch in plan {
                    if tx.send(maker.make(&batch)).is_err() {
                        break;
                    }
                }
            });
            for prepared in rx.iter() {
                if !self.iteration_budget_left() {
                    complete = false;
                    break;
                }
                let (x, y) = prepared?;
                sum += self.step(&x, &y, lr)?;
                count += 1;
            }
            Ok(())
        })?;
        if complete {
            self.state.epoch += 1;
        }
        let mut val_psnr = None;
        let every = self.config.eval.every_epochs;
        if let Some(val) = &self.val {
            if complete && every > 0 && self.state.epoch % every == 0 {
                let report = evaluate(&self.state.model, &self.maker.spec, val.source.as_ref(), val.provider.as_ref())?;
                val_psnr = Some(report.aggregate.psnr);
            }
        }
        let stats = EpochStats {
            epoch,
            lr,
            iterations: count,
            mean_loss: if count > 0 { sum / count as f64 } else { f64::NAN },
            val_psnr,
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} iterations {count} loss {:.5}{}",
            stats.mean_loss,
            val_psnr.map(|p| format!(" val {p:.2} dB")).unwrap_or_default()
        );
        if let Some(p) = val_psnr {
            if self.state.best_val_psnr.is_none_or(|b| p > b) {
                self.state.best_val_psnr = Some(p);
                if let Some(dir) = &self.output {
                    self.checkpoint().save(&dir.join("best.ckpt"))?;
                }
            }
        }
        if complete {
            let every = self.config.output.checkpoint_every;
            if let (Some(dir), true) = (&self.output, every > 0 && self.state.epoch % every == 0) {
                let path = dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", self.state.epoch));
                self.checkpoint().save(&path)?;
            }
        }
        Ok(stats)
    }

    /// Trains until `epoch_limit` epochs are complete (capped by the
    /// schedule) or the iteration budget is spent.
    pub fn run_until(&mut self, epoch_limit: usize) -> Result<()> {
        let limit = epoch_limit.min(self.schedule.total_epochs);
        while self.state.epoch < limit && self.iteration_budget_left() {
            let stats = self.run_epoch()?;
            if stats.iterations == 0 {
                break;
            }
        }
        Ok(())
    }

    /// Trains to the end of the schedule and writes the final checkpoint and
    /// manifest.
    pub fn run(&mut self) -> Result<TrainSummary> {
        self.run_until(self.schedule.total_epochs)?;
        self.finish()
    }

    /// Provenance record for the manifest.
    pub fn record(&self) -> RunRecord {
        let mut hyper = BTreeMap::new();
        hyper.insert("adam_beta1".into(), self.state.adam.beta1);
        hyper.insert("adam_beta2".into(), self.state.adam.beta2);
        hyper.insert("adam_eps".into(), self.state.adam.eps);
        hyper.insert("batchnorm_eps".into(), BN_EPS);
        hyper.insert("batchnorm_momentum".into(), BN_MOMENTUM);
        let mut libs = BTreeMap::new();
        libs.insert("deblurlab".into(), env!("CARGO_PKG_VERSION").into());
        libs.insert("matrixmultiply".into(), "0.3".into());
        libs.insert("rand_chacha".into(), "0.3".into());
        libs.insert("image".into(), "0.25".into());
        RunRecord {
            run_id: self.config.run_id(),
            fingerprint: self.config.fingerprint(),
            epochs_completed: self.state.epoch,
            iterations: self.state.iteration,
            final_loss: self.state.last_loss,
            best_val_psnr: self.state.best_val_psnr,
            axes: self.config.axes().into_iter().collect(),
            hyperparameters: hyper,
            libraries: libs,
            notes: vec![
                "layer table is the parameterized hourglass preset, not a verbatim DBN copy".into(),
                "batch order and augmentation draws are derived from (seed, epoch); resumes are exact at epoch boundaries".into(),
            ],
        }
    }

    /// Manifest: the run config with its provenance record attached.
    pub fn manifest(&self) -> RunConfig {
        let mut m = self.config.clone();
        m.run = Some(self.record());
        m
    }

    fn finish(&mut self) -> Result<TrainSummary> {
        if let Some(dir) = self.output.clone() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            self.checkpoint().save(&dir.join("final.ckpt"))?;
            let manifest = dir.join("manifest.toml");
            fs::write(&manifest, self.manifest().to_toml_string()?).map_err(|e| Error::io(&manifest, e))?;
            let mut csv = String::from("iteration,loss\n");
            let first = self.state.iteration - self.losses.len();
            for (i, l) in self.losses.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", first + i + 1));
            }
            let log = dir.join("losses.csv");
            fs::write(&log, csv).map_err(|e| Error::io(&log, e))?;
        }
        Ok(TrainSummary {
            run_id: self.config.run_id(),
            epochs_completed: self.state.epoch,
            iterations: self.state.iteration,
            losses: self.losses.clone(),
            final_loss: self.state.last_loss,
            best_val_psnr: self.state.best_val_psnr,
            output_dir: self.output.clone(),
        })
    }
}

fn load_splits(config: &RunConfig, root: Option<&Path>) -> Result<(DataSplit, Option<DataSplit>)> {
    let train = DataSplit::from_config(config, &config.data.train_split, root)?;
    let val = match &config.data.val_split {
        Some(split) if config.eval.every_epochs > 0 => Some(DataSplit::from_config(config, split, root)?),
        _ => None,
    };
    Ok((train, val))
}

/// Trains `config` from scratch, writing into `config.output.dir`.
pub fn train(config: &RunConfig, data_root: Option<&Path>) -> Result<TrainSummary> {
    let (train, val) = load_splits(config, data_root)?;
    let mut t = Trainer::new(config.clone(), train, val)?;
    t.set_output(&config.output.dir);
    t.run()
}

/// Continues the run saved in `checkpoint` to the end of its schedule.
pub fn resume(checkpoint: &Path, data_root: Option<&Path>) -> Result<TrainSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = ckpt.config.clone();
    let (train, val) = load_splits(&config, data_root)?;
    let mut t = Trainer::resume(ckpt, None, train, val)?;
    t.set_output(&config.output.dir);
    t.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_presets() {
        let s = ScheduleSpec::short();
        assert_eq!(s.lr_at_epoch(0).unwrap(), 0.005);
        assert_eq!(s.lr_at_epoch(31).unwrap(), 0.005);
        assert_eq!(s.lr_at_epoch(32).unwrap(), 0.0025);
        assert_eq!(s.lr_at_epoch(115).unwrap(), 0.005 / 128.0);
        assert!(s.lr_at_epoch(116).is_err());
        assert_eq!(ScheduleSpec::long().lr_at_epoch(198).unwrap(), 0.005 / 64.0);
        assert_eq!(ScheduleSpec::nah().total_epochs, 608);
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleSpec::new(10, 0.1, vec![3, 3]).is_err());
        assert!(ScheduleSpec::new(10, 0.1, vec![3, 10]).is_err());
        assert!(ScheduleSpec::new(10, 0.0, vec![]).is_err());
        assert!(ScheduleSpec::new(0, 0.1, vec![]).is_err());
        assert!(ScheduleSpec::new(10, 0.1, vec![2, 5]).is_ok());
    }

    #[test]
    fn sse_values() {
        let p = Tensor::<f64>::from_vec(1, 1, 1, 1, vec![1.5]).unwrap();
        let t = Tensor::<f64>::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(sse_loss(&p, &t).unwrap(), 0.25);
        assert_eq!(sse_loss(&t, &t).unwrap(), 0.0);
        let p2 = Tensor::<f64>::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t2 = Tensor::<f64>::zeros(2, 1, 1, 2);
        assert_eq!(sse_loss(&p2, &t2).unwrap(), 15.0);
        let (_, g) = sse_loss_grad(&p2, &t2).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(sse_loss(&p, &p2).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = Backbone::<f32>::new(ModelConfig::tiny(3, 3), 0).unwrap();
        let before = m.export_state();
        m.visit_params(&mut |_, g| g.fill(1.0));
        let mut adam = Adam::default();
        adam.step(&mut m, 0.01);
        let after = m.export_state();
        let d = (before[0][0] - after[0][0]) as f64;
        assert!((d - 0.01).abs() < 1e-6, "{d}");
    }
}
