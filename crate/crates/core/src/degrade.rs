//! Seeded sensor-degradation injectors producing corrupted copies of a
//! dataset.
//!
//! Each injector draws from its own ChaCha stream keyed by `(seed, kind)`,
//! so vision and inertial injectors commute. Corrupted images are written as
//! new frames referenced by the affected window; the frame it replaces is
//! left untouched for neighbouring windows that share it.

use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageFrame, ImuReading, SequenceDataset, PIXEL_OFFSET};
use crate::error::{Error, Result};

/// Occlusion mask edge length at full resolution.
pub const DEFAULT_MASK: usize = 200;
/// Black in normalized pixel units.
pub const DEFAULT_MASK_FILL: f64 = -PIXEL_OFFSET;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    Occlusion {
        mask_height: usize,
        mask_width: usize,
        fill: f64,
    },
    NoiseBlur {
        /// Fraction of pixels replaced by salt or pepper.
        salt_pepper: f64,
        blur_sigma: f64,
    },
    MissingImage,
    ImuNoiseBias {
        accel_std: f64,
        gyro_bias: [f64; 3],
    },
    MissingImu {
        drop: usize,
    },
}

impl Degradation {
    fn stream(&self) -> u64 {
        match self {
            Degradation::Occlusion { .. } => 1,
            Degradation::NoiseBlur { .. } => 2,
            Degradation::MissingImage => 3,
            Degradation::ImuNoiseBias { .. } => 4,
            Degradation::MissingImu { .. } => 5,
        }
    }

    pub fn is_vision(&self) -> bool {
        matches!(
            self,
            Degradation::Occlusion { .. } | Degradation::NoiseBlur { .. } | Degradation::MissingImage
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub kind: Degradation,
    /// Probability that a given window is affected.
    pub rate: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: Degradation, rate: f64, seed: u64) -> Self {
        DegradationSpec { kind, rate, seed }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.kind.stream());
        rng
    }

    /// Checks parameters against a dataset's image shape `[C, H, W]` and IMU
    /// block length.
    pub fn validate(&self, image_shape: [usize; 3], imu_per_frame: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("rate {} outside [0, 1]", self.rate)));
        }
        match &self.kind {
            Degradation::Occlusion {
                mask_height,
                mask_width,
                fill,
            } => {
                if *mask_height > image_shape[1] || *mask_width > image_shape[2] {
                    return Err(Error::Config(format!(
                        "occlusion mask {mask_height}x{mask_width} does not fit a {}x{} image",
                        image_shape[1], image_shape[2]
                    )));
                }
                if !fill.is_finite() {
                    return Err(Error::Config("occlusion fill must be finite".into()));
                }
            }
            Degradation::NoiseBlur {
                salt_pepper,
                blur_sigma,
            } => {
                if !(0.0..=1.0).contains(salt_pepper) || !(*blur_sigma >= 0.0 && blur_sigma.is_finite()) {
                    return Err(Error::Config("salt_pepper must be in [0, 1] and blur_sigma finite and >= 0".into()));
                }
            }
            Degradation::MissingImage => {
                if self.rate >= 1.0 {
                    return Err(Error::Config("missing-image rate must be below 1".into()));
                }
            }
            Degradation::ImuNoiseBias { accel_std, gyro_bias } => {
                if !(*accel_std >= 0.0 && accel_std.is_finite()) || !gyro_bias.iter().all(|b| b.is_finite()) {
                    return Err(Error::Config("accel_std must be finite and >= 0, gyro_bias finite".into()));
                }
            }
            Degradation::MissingImu { drop } => {
                if *drop >= imu_per_frame {
                    return Err(Error::Config(format!(
                        "cannot drop {drop} of {imu_per_frame} IMU readings per window"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Overwrites a `mask_height x mask_width` block at a random position in
/// every channel.
pub fn occlude(frame: &ImageFrame, mask_height: usize, mask_width: usize, fill: f64, rng: &mut impl Rng) -> Result<ImageFrame> {
    let [c, h, w] = frame.shape();
    if mask_height > h || mask_width > w {
        return Err(Error::Config(format!("occlusion mask {mask_height}x{mask_width} does not fit a {h}x{w} image")));
    }
    let top = rng.random_range(0..=h - mask_height);
    let left = rng.random_range(0..=w - mask_width);
    let mut out = frame.clone();
    let data = out.pixels.data_mut();
    for ch in 0..c {
        for r in top..top + mask_height {
            let row = (ch * h + r) * w;
            data[row + left..row + left + mask_width].fill(fill);
        }
    }
    Ok(out)
}

/// Salt-and-pepper replacement of a fraction of pixel locations (all
/// channels set to the extreme), followed by a separable Gaussian blur.
pub fn noise_and_blur(frame: &ImageFrame, salt_pepper: f64, blur_sigma: f64, rng: &mut impl Rng) -> ImageFrame {
    let [c, h, w] = frame.shape();
    let mut out = frame.clone();
    let data = out.pixels.data_mut();
    if salt_pepper > 0.0 {
        for p in 0..h * w {
            if rng.random_bool(salt_pepper) {
                let v = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
                for ch in 0..c {
                    data[ch * h * w + p] = v;
                }
            }
        }
    }
    if blur_sigma > 0.0 {
        let kernel = gaussian_kernel(blur_sigma);
        for ch in 0..c {
            let plane = &mut data[ch * h * w..(ch + 1) * h * w];
            blur_plane(plane, h, w, &kernel);
        }
    }
    out
}

/// Normalised taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Symmetric reflection about the outer pixel edges: `-1 -> 0`, `n -> n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &t)| t * plane[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &t)| t * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
}

/// Adds white noise to the accelerometer and a constant bias to the gyro.
pub fn imu_noise_bias(block: &[ImuReading], accel_std: f64, gyro_bias: [f64; 3], rng: &mut impl Rng) -> Vec<ImuReading> {
    let noise = (accel_std > 0.0).then(|| Normal::new(0.0, accel_std).expect("finite std"));
    block
        .iter()
        .map(|r| {
            let mut r = *r;
            if let Some(n) = &noise {
                r.linear_acceleration.iter_mut().for_each(|a| *a += n.sample(rng));
            }
            for (g, b) in r.angular_velocity.iter_mut().zip(gyro_bias) {
                *g += b;
            }
            r
        })
        .collect()
}

/// Removes `drop` readings and fills each gap by repeating the previous
/// surviving reading. The first reading is never dropped.
pub fn drop_imu(block: &[ImuReading], drop: usize, rng: &mut impl Rng) -> Result<Vec<ImuReading>> {
    if drop >= block.len() {
        return Err(Error::Config(format!("cannot drop {drop} of {} IMU readings", block.len())));
    }
    let mut out = block.to_vec();
    let mut dropped = index::sample(rng, block.len() - 1, drop).into_vec();
    dropped.sort_unstable();
    for i in dropped {
        out[i + 1] = out[i];
    }
    Ok(out)
}

/// Affected windows see their first frame twice.
pub fn drop_images(dataset: &SequenceDataset, rate: f64, rng: &mut impl Rng) -> SequenceDataset {
    let mut out = dataset.clone();
    for w in &mut out.windows {
        if rng.random_bool(rate) {
            w.second = w.first;
        }
    }
    out.compact();
    out
}

fn corrupt_second_frames(
    dataset: &SequenceDataset,
    rate: f64,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&ImageFrame, &mut ChaCha8Rng) -> Result<ImageFrame>,
) -> Result<SequenceDataset> {
    let mut out = dataset.clone();
    for k in 0..out.windows.len() {
        if rng.random_bool(rate) {
            let frame = f(&out.frames[out.windows[k].second], rng)?;
            out.frames.push(frame);
            out.windows[k].second = out.frames.len() - 1;
        }
    }
    out.compact();
    Ok(out)
}

/// Applies one degradation. Targets and the absolute trajectory are never
/// modified.
pub fn apply(dataset: &SequenceDataset, spec: &DegradationSpec) -> Result<SequenceDataset> {
    spec.validate(dataset.image_shape(), dataset.imu_per_frame)?;
    let mut rng = spec.rng();
    let rate = spec.rate;
    match spec.kind {
        Degradation::Occlusion {
            mask_height,
            mask_width,
            fill,
        } => corrupt_second_frames(dataset, rate, &mut rng, |f, rng| occlude(f, mask_height, mask_width, fill, rng)),
        Degradation::NoiseBlur {
            salt_pepper,
            blur_sigma,
        } => corrupt_second_frames(dataset, rate, &mut rng, |f, rng| Ok(noise_and_blur(f, salt_pepper, blur_sigma, rng))),
        Degradation::MissingImage => Ok(drop_images(dataset, rate, &mut rng)),
        Degradation::ImuNoiseBias { accel_std, gyro_bias } => {
            let mut out = dataset.clone();
            for w in &mut out.windows {
                if rng.random_bool(rate) {
                    w.imu = imu_noise_bias(&w.imu, accel_std, gyro_bias, &mut rng);
                }
            }
            Ok(out)
        }
        Degradation::MissingImu { drop } => {
            let mut out = dataset.clone();
            for w in &mut out.windows {
                if rng.random_bool(rate) {
                    w.imu = drop_imu(&w.imu, drop, &mut rng)?;
                }
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Nominal,
    Inertial,
    Vision,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Suite::Nominal),
            "inertial" => Ok(Suite::Inertial),
            "vision" => Ok(Suite::Vision),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown degradation suite {other:?}; expected nominal, inertial, vision or all"
            ))),
        }
    }
}

/// Default per-suite injectors for a dataset with the given image shape.
/// The occlusion mask is capped at half of each image dimension so toy
/// resolutions stay partially visible.
pub fn suite_specs(suite: Suite, image_shape: [usize; 3], seed: u64) -> Vec<DegradationSpec> {
    let [_, h, w] = image_shape;
    let vision = vec![
        DegradationSpec::new(
            Degradation::Occlusion {
                mask_height: DEFAULT_MASK.min(h / 2),
                mask_width: DEFAULT_MASK.min(w / 2),
                fill: DEFAULT_MASK_FILL,
            },
            0.2,
            seed,
        ),
        DegradationSpec::new(
            Degradation::NoiseBlur {
                salt_pepper: 0.05,
                blur_sigma: 1.0,
            },
            0.2,
            seed,
        ),
        DegradationSpec::new(Degradation::MissingImage, 0.1, seed),
    ];
    let inertial = vec![
        DegradationSpec::new(
            Degradation::ImuNoiseBias {
                accel_std: 0.3,
                gyro_bias: [0.01; 3],
            },
            0.3,
            seed,
        ),
        DegradationSpec::new(Degradation::MissingImu { drop: 3 }, 0.2, seed),
    ];
    match suite {
        Suite::Nominal => Vec::new(),
        Suite::Vision => vision,
        Suite::Inertial => inertial,
        Suite::All => vision.into_iter().chain(inertial).collect(),
    }
}

pub fn apply_all(dataset: &SequenceDataset, specs: &[DegradationSpec]) -> Result<SequenceDataset> {
    let mut out = dataset.clone();
    for s in specs {
        out = apply(&out, s)?;
    }
    Ok(out)
}

/// Builds a degraded copy using the suite's default injectors; returns the
/// specs applied alongside it.
pub fn build_degraded_suite(dataset: &SequenceDataset, suite: Suite, seed: u64) -> Result<(SequenceDataset, Vec<DegradationSpec>)> {
    let specs = suite_specs(suite, dataset.image_shape(), seed);
    let out = apply_all(dataset, &specs)?;
    Ok((out, specs))
}
