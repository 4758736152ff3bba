//! The end-to-end odometry network: encoders, fusion, a core LSTM over the
//! fused features and a linear pose head, plus the pose loss and training
//! loop.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compose_trajectory, segment_ranges, wrap_angle, Pose6D, RigidTransform, SequenceDataset};
use crate::encoders::{InertialEncoder, InertialEncoderConfig, VisionEncoder, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionBlock, FusionConfig, FusionKind};
use crate::layers::{BatchNorm, Context, Linear, Lstm, LstmState};
use crate::optim::{Adam, DEFAULT_LEARNING_RATE};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const POSE_WIDTH: usize = 6;
pub const DEFAULT_BETA: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

impl Default for CoreModelConfig {
    fn default() -> Self {
        CoreModelConfig {
            hidden: 1000,
            layers: 2,
            bidirectional: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSettings {
    pub kind: FusionKind,
    pub heads: usize,
    /// Defaults to token width / heads.
    #[serde(default)]
    pub head_dim: Option<usize>,
    #[serde(default = "two")]
    pub tokens: usize,
    #[serde(default)]
    pub bias: bool,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub inertial: InertialEncoderConfig,
    pub fusion: FusionSettings,
    pub core: CoreModelConfig,
}

impl ModelConfig {
    /// Miniature network for 8x16 synthetic images.
    pub fn toy(kind: FusionKind) -> Self {
        ModelConfig {
            vision: VisionEncoderConfig::toy(),
            inertial: InertialEncoderConfig {
                hidden: 8,
                layers: 1,
                bidirectional: true,
            },
            fusion: FusionSettings {
                kind,
                heads: 2,
                head_dim: None,
                tokens: 2,
                bias: false,
            },
            core: CoreModelConfig {
                hidden: 16,
                layers: 1,
                bidirectional: false,
            },
        }
    }

    pub fn full_scale(kind: FusionKind) -> Self {
        let f = FusionConfig::full_scale(kind);
        ModelConfig {
            vision: VisionEncoderConfig::full_scale(),
            inertial: InertialEncoderConfig::default(),
            fusion: FusionSettings {
                kind,
                heads: f.heads,
                head_dim: Some(f.head_dim),
                tokens: f.tokens,
                bias: f.bias,
            },
            core: CoreModelConfig::default(),
        }
    }

    pub fn fusion_config(&self) -> Result<FusionConfig> {
        let s = &self.fusion;
        let d = self.vision.feature_width() + self.inertial.feature_width();
        let tokens = s.tokens.max(1);
        let heads = s.heads.max(1);
        let head_dim = s.head_dim.unwrap_or((d / tokens) / heads);
        let cfg = FusionConfig {
            kind: s.kind,
            visual_width: self.vision.feature_width(),
            inertial_width: self.inertial.feature_width(),
            tokens,
            heads,
            head_dim,
            bias: s.bias,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.fusion_config()?;
        if self.core.hidden == 0 || self.core.layers == 0 {
            return Err(Error::Config("core LSTM needs positive hidden size and layer count".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OdometryModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    vision: VisionEncoder,
    inertial: InertialEncoder,
    fusion: FusionBlock,
    core: Lstm,
    head: Linear,
}

/// Per-segment network output.
#[derive(Clone, Debug)]
pub struct SegmentOutput {
    /// `[L, 6]`
    pub poses: Var,
    /// Forward-direction state after the last step, for threading into the
    /// next chunk of the same sequence.
    pub state: LstmState,
}

impl OdometryModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, "vision", config.vision.clone(), &mut rng)?;
        let inertial = InertialEncoder::new(&mut store, "inertial", config.inertial.clone(), &mut rng)?;
        let fusion = FusionBlock::new(&mut store, "fusion", config.fusion_config()?, &mut rng)?;
        let c = &config.core;
        let core = Lstm::new(&mut store, "core", fusion.output_width(), c.hidden, c.layers, c.bidirectional, &mut rng);
        let head = Linear::new(&mut store, "head", core.output_width(), POSE_WIDTH, true, &mut rng);
        Ok(OdometryModel {
            config,
            store,
            vision,
            inertial,
            fusion,
            core,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn fusion_block(&self) -> &FusionBlock {
        &self.fusion
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(self.config.core.layers, 1, self.config.core.hidden)
    }

    /// Runs the network over window ranges. Encoders and fusion are batched
    /// over every window; the core LSTM runs once per range, starting from
    /// `init[k]` (zeros when absent).
    pub fn forward_segments(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &mut Context,
        dataset: &SequenceDataset,
        ranges: &[Range<usize>],
        init: Option<&[LstmState]>,
    ) -> Result<Vec<SegmentOutput>> {
        if ranges.is_empty() || ranges.iter().any(|r| r.is_empty() || r.end > dataset.len()) {
            return Err(Error::Contract("forward needs non-empty window ranges inside the dataset".into()));
        }
        if init.is_some_and(|s| s.len() != ranges.len()) {
            return Err(Error::Contract("one initial state per range required".into()));
        }
        let windows: Vec<_> = ranges.iter().flat_map(|r| &dataset.windows[r.clone()]).collect();
        let pairs: Vec<_> = windows.iter().map(|w| dataset.image_pair(w)).collect();
        let blocks: Vec<&[_]> = windows.iter().map(|w| w.imu.as_slice()).collect();
        let b_v = self.vision.encode(tape, bound, ctx, &pairs)?;
        let b_i = self.inertial.encode(tape, bound, &blocks)?;
        let fused = self.fusion.forward(tape, bound, b_v, b_i)?;
        let d = self.fusion.output_width();
        let mut out = Vec::with_capacity(ranges.len());
        let mut offset = 0;
        for (k, r) in ranges.iter().enumerate() {
            let len = r.len();
            let y = tape.slice(fused, 0, offset, len)?;
            offset += len;
            let y = tape.reshape(y, &[len, 1, d])?;
            let lstm = self.core.forward(tape, bound, y, init.map(|s| &s[k]))?;
            let seq = tape.reshape(lstm.sequence, &[len, self.core.output_width()])?;
            let poses = self.head.forward(tape, bound, seq)?;
            let state = LstmState {
                h: lstm.final_h.iter().map(|l| tape.value(l[0]).clone()).collect(),
                c: lstm.final_c.iter().map(|l| tape.value(l[0]).clone()).collect(),
            };
            out.push(SegmentOutput { poses, state });
        }
        Ok(out)
    }

    /// Eval-mode predictions for consecutive windows starting from `h0`.
    pub fn forward_sequence(&self, dataset: &SequenceDataset, range: Range<usize>, h0: Option<&LstmState>) -> Result<(Vec<Pose6D>, LstmState)> {
        self.forward_sequence_with(&self.store, dataset, range, h0)
    }

    /// As [`OdometryModel::forward_sequence`] but with parameter values
    /// taken from `store` (same layout as the model's own).
    pub fn forward_sequence_with(
        &self,
        store: &ParamStore,
        dataset: &SequenceDataset,
        range: Range<usize>,
        h0: Option<&LstmState>,
    ) -> Result<(Vec<Pose6D>, LstmState)> {
        let mut tape = Tape::no_grad();
        let bound = store.bind(&mut tape);
        let init = h0.map(|s| vec![s.clone()]);
        let mut out = self.forward_segments(&mut tape, &bound, &mut Context::eval(), dataset, &[range], init.as_deref())?;
        let seg = out.pop().expect("one range");
        let poses = tape.value(seg.poses).data().chunks(POSE_WIDTH).map(Pose6D::from_slice).collect();
        Ok((poses, seg.state))
    }

    /// Predicts every window of `dataset` in chunks of `chunk` windows,
    /// threading the forward hidden state between chunks, and composes the
    /// relative poses from the first ground-truth pose.
    pub fn predict_trajectory(&self, dataset: &SequenceDataset, chunk: Option<usize>) -> Result<PredictedTrajectory> {
        self.predict_trajectory_with(&self.store, dataset, chunk)
    }

    pub fn predict_trajectory_with(&self, store: &ParamStore, dataset: &SequenceDataset, chunk: Option<usize>) -> Result<PredictedTrajectory> {
        let n = dataset.len();
        if n == 0 {
            return Err(Error::Contract("cannot predict on an empty dataset".into()));
        }
        let chunk = chunk.unwrap_or(n).max(1);
        let mut relative = Vec::with_capacity(n);
        let mut state: Option<LstmState> = None;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let (poses, s) = self.forward_sequence_with(store, dataset, start..end, state.as_ref())?;
            relative.extend(poses);
            state = Some(s);
            start = end;
        }
        let absolute = compose_trajectory(&dataset.absolute[0], &relative);
        Ok(PredictedTrajectory { relative, absolute })
    }

    /// Batch loss on the tape for segments `ranges` of `dataset`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &mut Context,
        dataset: &SequenceDataset,
        ranges: &[Range<usize>],
        beta: f64,
    ) -> Result<Var> {
        let outs = self.forward_segments(tape, bound, ctx, dataset, ranges, None)?;
        let mut total: Option<Var> = None;
        for (o, r) in outs.iter().zip(ranges) {
            let targets: Vec<Pose6D> = dataset.windows[r.clone()].iter().map(|w| w.target).collect();
            let l = segment_loss_on_tape(tape, o.poses, &targets, beta)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(tape.scale(total.expect("non-empty"), 1.0 / ranges.len() as f64))
    }

    /// Loss and gradient (flat, trainable layout) for one batch, with
    /// parameter values from `store`.
    pub fn loss_and_grad_with(&self, store: &ParamStore, dataset: &SequenceDataset, ranges: &[Range<usize>], beta: f64) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &bound, &mut Context::eval(), dataset, ranges, beta)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = store.collect_grads(&bound, &mut grads);
        Ok((value, store.flatten_grads(&g)))
    }

    /// Eval-mode loss averaged over `ranges`.
    pub fn evaluate_loss(&self, dataset: &SequenceDataset, ranges: &[Range<usize>], beta: f64) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let bound = self.store.bind(&mut tape);
        let l = self.loss_on_tape(&mut tape, &bound, &mut Context::eval(), dataset, ranges, beta)?;
        Ok(tape.value(l).item())
    }
}

/// Predicted relative motions and the composed absolute path
/// (`relative.len() + 1` poses).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTrajectory {
    pub relative: Vec<Pose6D>,
    pub absolute: Vec<RigidTransform>,
}

/// `sum_t |dz|^2 + beta |wrap(dpsi)|^2` for one segment. The wrap enters as a
/// constant offset, so the gradient is that of the plain difference.
pub fn segment_loss_on_tape(tape: &mut Tape, pred: Var, targets: &[Pose6D], beta: f64) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != [targets.len(), POSE_WIDTH] {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            shape.first().copied().unwrap_or(0),
            targets.len()
        )));
    }
    let target: Vec<f64> = targets.iter().flat_map(|t| t.to_array()).collect();
    let target = tape.constant(Tensor::new(shape.clone(), target)?);
    let diff = tape.sub(pred, target)?;
    let mut offset = vec![0.0; diff_len(&shape)];
    let mut weight = vec![1.0; diff_len(&shape)];
    for (i, d) in tape.value(diff).data().iter().enumerate() {
        if i % POSE_WIDTH >= 3 {
            offset[i] = wrap_angle(*d) - d;
            weight[i] = beta;
        }
    }
    let offset = tape.constant(Tensor::new(shape.clone(), offset)?);
    let weight = tape.constant(Tensor::new(shape, weight)?);
    let diff = tape.add(diff, offset)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weight)?;
    Ok(tape.sum(weighted))
}

fn diff_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_lengths(pred: &[Pose6D], target: &[Pose6D]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Contract(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(())
}

/// Pose loss over a mini-batch of `(prediction, target)` sequences: mean over
/// the batch of the per-sequence sums.
pub fn batch_loss(batch: &[(&[Pose6D], &[Pose6D])], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for (p, t) in batch {
        check_lengths(p, t)?;
        for (a, b) in p.iter().zip(*t) {
            for k in 0..3 {
                total += (a.translation[k] - b.translation[k]).powi(2);
                total += beta * wrap_angle(a.rotation[k] - b.rotation[k]).powi(2);
            }
        }
    }
    Ok(total / batch.len() as f64)
}

/// Loss for a single sequence (batch size one).
pub fn loss(pred: &[Pose6D], target: &[Pose6D], beta: f64) -> Result<f64> {
    batch_loss(&[(pred, target)], beta)
}

/// `d loss / d beta`: the batch-averaged summed squared orientation error.
pub fn loss_beta_derivative(batch: &[(&[Pose6D], &[Pose6D])]) -> Result<f64> {
    batch_loss(batch, 1.0).and_then(|with| Ok(with - batch_loss(batch, 0.0)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub segment_min: usize,
    pub segment_max: usize,
    /// Save a checkpoint every this many epochs (needs `checkpoint_dir`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once an epoch's mean loss falls to or below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: DEFAULT_BETA,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 8,
            epochs: 80,
            seed: 0,
            segment_min: 5,
            segment_max: 7,
            checkpoint_every: None,
            checkpoint_dir: None,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.segment_min < 2 || self.segment_min > self.segment_max {
            return Err(Error::Config("segment bounds must satisfy 2 <= min <= max".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("log serialises") + "\n")
            .collect()
    }
}

/// Segments of every dataset for one epoch, shuffled.
fn epoch_batches(datasets: &[SequenceDataset], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Vec<(usize, Range<usize>)>>> {
    let mut all = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        let seed = cfg.seed ^ ((epoch as u64) << 32) ^ d as u64;
        for r in segment_ranges(ds.len(), cfg.segment_min, cfg.segment_max, seed)? {
            all.push((d, r));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    all.shuffle(&mut rng);
    Ok(all.chunks(cfg.batch_size).map(<[_]>::to_vec).collect())
}

/// Every segment the training loop would see in epoch 0, grouped per
/// dataset. Useful for measuring the loss before and after training.
pub fn training_segments(datasets: &[SequenceDataset], cfg: &TrainConfig) -> Result<Vec<Vec<Range<usize>>>> {
    datasets
        .iter()
        .enumerate()
        .map(|(d, ds)| segment_ranges(ds.len(), cfg.segment_min, cfg.segment_max, cfg.seed ^ d as u64))
        .collect()
}

/// Trains in place with Adam. Deterministic under `cfg.seed`; the log's
/// `wall_time` is the only non-reproducible field.
pub fn train(model: &mut OdometryModel, datasets: &[SequenceDataset], cfg: &TrainConfig, mut log_sink: Option<&mut dyn Write>) -> Result<TrainLog> {
    cfg.validate()?;
    if datasets.iter().all(|d| d.len() < cfg.segment_min) {
        return Err(Error::Contract("no dataset is long enough for a training segment".into()));
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(datasets, cfg, epoch)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let mut ctx = Context::train(cfg.seed ^ ((epoch * 7919 + step) as u64));
            let mut total: Option<Var> = None;
            for (d, r) in batch {
                let l = model.loss_on_tape(&mut tape, &bound, &mut ctx, &datasets[*d], std::slice::from_ref(r), cfg.beta)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            let mut grads = tape.backward(loss)?;
            let g = model.store.collect_grads(&bound, &mut grads);
            adam.step(&mut model.store, &g)?;
            for u in &ctx.stat_updates {
                BatchNorm::apply_update(&mut model.store, u, 0.1);
            }
            sum += value;
            count += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: sum / count.max(1) as f64,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.6}", entry.loss);
        if let Some(w) = log_sink.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry).expect("log serialises")).map_err(|e| Error::io("training log", e))?;
        }
        let done = cfg.target_loss.is_some_and(|t| entry.loss <= t);
        log.epochs.push(entry);
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                save_checkpoint_in(model, dir, epoch)?;
            }
        }
        if done {
            break;
        }
    }
    Ok(log)
}

fn save_checkpoint_in(model: &OdometryModel, dir: &Path, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.store.save_checkpoint(&dir.join(format!("checkpoint_epoch{:04}.json", epoch + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, PathShape, SynthConfig};
    use crate::gradcheck::check_gradients;
    use crate::layers::tests::bind_as;

    fn pose(t: [f64; 3], r: [f64; 3]) -> Pose6D {
        Pose6D {
            translation: t,
            rotation: r,
        }
    }

    fn toy_data(n: usize, seed: u64) -> SequenceDataset {
        synthesize(
            &SynthConfig {
                shape: PathShape::FigureEight,
                num_windows: n,
                ..SynthConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn loss_examples() {
        let a = [pose([0.1, 0.2, 0.3], [0.01, 0.02, 0.03])];
        assert_eq!(loss(&a, &a, 1000.0).unwrap(), 0.0);
        let z = [Pose6D::zero()];
        for beta in [1.0, 1000.0, 3.5] {
            assert_eq!(loss(&[pose([1.0, 0.0, 0.0], [0.0; 3])], &z, beta).unwrap(), 1.0);
        }
        let l = loss(&[pose([0.0; 3], [0.1, 0.0, 0.0])], &z, 1000.0).unwrap();
        assert!((l - 10.0).abs() < 1e-12);
        assert!(matches!(loss(&a, &[], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn orientation_residual_wraps() {
        let p = [pose([0.0; 3], [3.1, 0.0, 0.0])];
        let t = [pose([0.0; 3], [-3.1, 0.0, 0.0])];
        let expected = (2.0 * std::f64::consts::PI - 6.2_f64).powi(2);
        assert!((loss(&p, &t, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn beta_derivative_is_orientation_error() {
        let p = [pose([0.1, 0.0, -0.2], [0.3, -0.1, 0.05]), pose([0.0; 3], [0.2, 0.2, 0.2])];
        let t = [Pose6D::zero(), pose([0.1; 3], [0.0, 0.1, 0.0])];
        let batch = [(&p[..], &t[..])];
        let summed: f64 = p
            .iter()
            .zip(&t)
            .flat_map(|(a, b)| (0..3).map(move |k| (a.rotation[k] - b.rotation[k]).powi(2)))
            .sum();
        let h = 1e-3;
        let fd = (batch_loss(&batch, 5.0 + h).unwrap() - batch_loss(&batch, 5.0 - h).unwrap()) / (2.0 * h);
        assert!((fd - summed).abs() < 1e-9);
        assert!((loss_beta_derivative(&batch).unwrap() - summed).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_pure_loss() {
        let p = [pose([0.1, 0.0, -0.2], [3.0, -0.1, 0.05]), pose([0.0; 3], [0.2, 0.2, 0.2])];
        let t = [pose([0.0; 3], [-3.0, 0.0, 0.0]), pose([0.1; 3], [0.0, 0.1, 0.0])];
        let mut tape = Tape::new();
        let data: Vec<f64> = p.iter().flat_map(|x| x.to_array()).collect();
        let v = tape.variable(Tensor::new(vec![2, 6], data).unwrap());
        let l = segment_loss_on_tape(&mut tape, v, &t, 7.0).unwrap();
        assert!((tape.value(l).item() - loss(&p, &t, 7.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_predict_zero() {
        let mut model = OdometryModel::new(ModelConfig::toy(FusionKind::Mha), 0).unwrap();
        let n = model.store.num_trainable();
        model.store.set_flat_trainable(&vec![0.0; n]).unwrap();
        let ds = toy_data(6, 1);
        let (poses, _) = model.forward_sequence(&ds, 0..6, None).unwrap();
        assert!(poses.iter().all(|p| *p == Pose6D::zero()));
    }

    #[test]
    fn forward_is_deterministic_and_split_equivalent() {
        let model = OdometryModel::new(ModelConfig::toy(FusionKind::Mha), 3).unwrap();
        let ds = toy_data(10, 2);
        let (whole, end_state) = model.forward_sequence(&ds, 0..10, None).unwrap();
        assert_eq!(whole, model.forward_sequence(&ds, 0..10, None).unwrap().0);
        let (a, mid) = model.forward_sequence(&ds, 0..4, None).unwrap();
        let (b, end2) = model.forward_sequence(&ds, 4..10, Some(&mid)).unwrap();
        let split: Vec<_> = a.into_iter().chain(b).collect();
        for (x, y) in whole.iter().zip(&split) {
            for (u, v) in x.to_array().iter().zip(y.to_array()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        for (x, y) in end_state.h.iter().zip(&end2.h) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prediction_is_chunk_invariant_and_composes() {
        let model = OdometryModel::new(ModelConfig::toy(FusionKind::Soft), 4).unwrap();
        let ds = toy_data(12, 3);
        let full = model.predict_trajectory(&ds, None).unwrap();
        for chunk in [1, 5, 12] {
            let part = model.predict_trajectory(&ds, Some(chunk)).unwrap();
            for (x, y) in full.relative.iter().zip(&part.relative) {
                for (u, v) in x.to_array().iter().zip(y.to_array()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
        let folded = compose_trajectory(&ds.absolute[0], &full.relative);
        assert_eq!(folded, full.absolute);
        assert_eq!(full.absolute.len(), ds.len() + 1);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::toy(FusionKind::Mha);
        cfg.vision.channels = vec![2, 2];
        cfg.vision.kernels = vec![3, 3];
        cfg.vision.strides = vec![2, 2];
        cfg.inertial.hidden = 3;
        cfg.core.hidden = 4;
        let model = OdometryModel::new(cfg, 5).unwrap();
        let ds = toy_data(4, 6);
        let inputs: Vec<Tensor> = model.store.entries().iter().map(|e| e.value.clone()).collect();
        let report = check_gradients(
            &inputs,
            |tape, vars| {
                let bound = bind_as(&model.store, vars.to_vec());
                model.loss_on_tape(tape, &bound, &mut Context::eval(), &ds, &[0..2, 1..4], 10.0)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-3, "{report:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = OdometryModel::new(ModelConfig::toy(FusionKind::Concat), 0).unwrap();
        let before = model.store.flat_trainable();
        let ds = toy_data(12, 0);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &[ds], &cfg, None).unwrap();
        assert_eq!(model.store.flat_trainable(), before);
    }

    #[test]
    fn training_is_reproducible_and_checkpoints() {
        let ds = toy_data(14, 0);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 2,
            checkpoint_every: Some(2),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = OdometryModel::new(ModelConfig::toy(FusionKind::Mha), 1).unwrap();
            let mut sink = Vec::new();
            let log = train(&mut model, std::slice::from_ref(&ds), &cfg, Some(&mut sink)).unwrap();
            (log, model.store.flat_trainable(), String::from_utf8(sink).unwrap())
        };
        let (a, pa, text) = run();
        let (b, pb, _) = run();
        let losses = |l: &TrainLog| l.epochs.iter().map(|e| (e.epoch, e.loss.to_bits())).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(pa, pb);
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("wall_time").is_some() && first.get("loss").is_some());
        assert!(dir.path().join("checkpoint_epoch0002.json").is_file());
        assert!(!dir.path().join("checkpoint_epoch0001.json").exists());
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let mut model = OdometryModel::new(ModelConfig::toy(FusionKind::Concat), 0).unwrap();
        let id = model.store.id_of("head.bias").unwrap();
        model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let err = train(&mut model, &[toy_data(8, 0)], &cfg, None).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("epoch 0, step 0")), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = TrainConfig { beta: 0.0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut m = ModelConfig::toy(FusionKind::Mha);
        m.fusion.tokens = 5;
        assert!(matches!(OdometryModel::new(m, 0), Err(Error::Config(_))));
    }
}
