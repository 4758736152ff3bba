//! Vision (stacked-frame CNN) and inertial (bidirectional LSTM) feature
//! extractors.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageFrame, ImuReading};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Context, Conv2d, Lstm};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const IMU_WIDTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    /// Channels of a single frame; the encoder sees two frames stacked.
    pub frame_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
}

impl VisionEncoderConfig {
    /// Four-layer miniature for 8x16 images: 32 output features.
    pub fn toy() -> Self {
        VisionEncoderConfig {
            frame_channels: 3,
            input_height: 8,
            input_width: 16,
            channels: vec![8, 8, 8, 4],
            kernels: vec![3; 4],
            strides: vec![2, 2, 1, 1],
            batch_norm: false,
        }
    }

    /// FlowNetS contracting part (conv1 .. conv6_1) followed by seven
    /// stride-1 reduction convolutions, 17 layers in total. At 184x608 the
    /// output is 16 x 3 x 10 = 480 features.
    pub fn full_scale() -> Self {
        let channels = vec![64, 128, 256, 256, 512, 512, 512, 512, 1024, 1024, 512, 256, 128, 64, 32, 16, 16];
        let mut kernels = vec![7, 5, 5];
        kernels.extend([3; 14]);
        let strides = vec![2, 2, 2, 1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1, 1, 1, 1];
        VisionEncoderConfig {
            frame_channels: 3,
            input_height: 184,
            input_width: 608,
            channels,
            kernels,
            strides,
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::Config("vision encoder needs matching, non-empty channel/kernel/stride lists".into()));
        }
        if self.channels.contains(&0) || self.kernels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("vision encoder widths, kernels and strides must be positive".into()));
        }
        if self.frame_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("vision encoder input size must be positive".into()));
        }
        Ok(())
    }

    /// `[C, H, W]` after the last convolution.
    pub fn output_shape(&self) -> [usize; 3] {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            let p = k / 2;
            h = (h + 2 * p - k) / s + 1;
            w = (w + 2 * p - k) / s + 1;
        }
        [*self.channels.last().unwrap_or(&0), h, w]
    }

    pub fn feature_width(&self) -> usize {
        self.output_shape().iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: VisionEncoderConfig,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm>>,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: VisionEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_c = 2 * config.frame_channels;
        for (i, ((&c, &k), &s)) in config.channels.iter().zip(&config.kernels).zip(&config.strides).enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), in_c, c, k, s, rng));
            norms.push(config.batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn{i}"), c)));
            in_c = c;
        }
        Ok(VisionEncoder { config, convs, norms })
    }

    pub fn feature_width(&self) -> usize {
        self.config.feature_width()
    }

    /// Stacks frame pairs channel-wise into `[B, 2C, H, W]`.
    pub fn stack_pairs(&self, pairs: &[(&ImageFrame, &ImageFrame)]) -> Result<Tensor> {
        let expected = [self.config.frame_channels, self.config.input_height, self.config.input_width];
        let per = expected.iter().product::<usize>();
        let mut data = Vec::with_capacity(pairs.len() * 2 * per);
        for (a, b) in pairs {
            for f in [a, b] {
                if f.shape() != expected {
                    return Err(Error::dim("vision encoder input", &f.shape(), &expected));
                }
                data.extend_from_slice(f.pixels.data());
            }
        }
        Tensor::new(vec![pairs.len(), 2 * expected[0], expected[1], expected[2]], data)
    }

    /// `x: [B, 2C, H, W] -> [B, feature_width]`. ReLU follows every
    /// convolution except the last.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, ctx: &mut Context, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let want = [2 * self.config.frame_channels, self.config.input_height, self.config.input_width];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::dim("vision encoder input", &shape, &want));
        }
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = conv.forward(tape, bound, h)?;
            if let Some(bn) = norm {
                h = bn.forward(tape, bound, ctx, h)?;
            }
            if i != last {
                h = tape.relu(h);
            }
        }
        tape.reshape(h, &[shape[0], self.feature_width()])
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, ctx: &mut Context, pairs: &[(&ImageFrame, &ImageFrame)]) -> Result<Var> {
        let x = tape.constant(self.stack_pairs(pairs)?);
        self.forward(tape, bound, ctx, x)
    }

    pub fn num_params(&self) -> usize {
        let mut in_c = 2 * self.config.frame_channels;
        let mut total = 0;
        for (&c, &k) in self.config.channels.iter().zip(&self.config.kernels) {
            total += c * in_c * k * k + c + if self.config.batch_norm { 2 * c } else { 0 };
            in_c = c;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InertialEncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

impl Default for InertialEncoderConfig {
    fn default() -> Self {
        InertialEncoderConfig {
            hidden: 15,
            layers: 2,
            bidirectional: true,
        }
    }
}

impl InertialEncoderConfig {
    pub fn feature_width(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }
}

#[derive(Clone, Debug)]
pub struct InertialEncoder {
    pub config: InertialEncoderConfig,
    lstm: Lstm,
}

impl InertialEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: InertialEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.hidden == 0 || config.layers == 0 {
            return Err(Error::Config("inertial encoder needs positive hidden size and layer count".into()));
        }
        let lstm = Lstm::new(store, &format!("{name}.lstm"), IMU_WIDTH, config.hidden, config.layers, config.bidirectional, rng);
        Ok(InertialEncoder { config, lstm })
    }

    pub fn feature_width(&self) -> usize {
        self.config.feature_width()
    }

    /// Packs IMU blocks (one per window, equal lengths) as `[T, B, 6]`.
    pub fn stack_blocks(blocks: &[&[ImuReading]]) -> Result<Tensor> {
        let steps = blocks.first().map_or(0, |b| b.len());
        if let Some(b) = blocks.iter().find(|b| b.len() != steps) {
            return Err(Error::dim("imu blocks", &[steps], &[b.len()]));
        }
        let batch = blocks.len();
        let mut data = vec![0.0; steps * batch * IMU_WIDTH];
        for (b, block) in blocks.iter().enumerate() {
            for (t, r) in block.iter().enumerate() {
                data[(t * batch + b) * IMU_WIDTH..][..IMU_WIDTH].copy_from_slice(&r.to_array());
            }
        }
        Tensor::new(vec![steps, batch, IMU_WIDTH], data)
    }

    /// `x: [T, B, 6] -> [B, feature_width]`: the top layer's final forward
    /// hidden state, concatenated with its final backward hidden state.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != IMU_WIDTH {
            return Err(Error::dim("inertial encoder input", &shape, &[0, 0, IMU_WIDTH]));
        }
        let out = self.lstm.forward(tape, bound, x, None)?;
        let top = out.final_h.last().expect("at least one layer");
        if top.len() == 1 {
            Ok(top[0])
        } else {
            tape.concat(top, 1)
        }
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, blocks: &[&[ImuReading]]) -> Result<Var> {
        let x = tape.constant(Self::stack_blocks(blocks)?);
        self.forward(tape, bound, x)
    }

    pub fn num_params(&self) -> usize {
        self.lstm.num_params()
    }
}

/// Loads encoder weights saved under the same parameter names. Only entries
/// starting with `prefix` are touched; the store is unchanged on error.
pub fn load_pretrained(store: &mut ParamStore, path: &Path, prefix: &str) -> Result<()> {
    store.load_checkpoint_prefix(path, prefix)
}
