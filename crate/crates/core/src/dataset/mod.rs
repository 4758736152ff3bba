//! Sequences of synchronised image pairs, IMU blocks and relative-pose
//! targets.

pub mod geometry;
mod io;
mod segment;
mod synth;

use serde::{Deserialize, Serialize};

pub use geometry::{
    absolute_to_relative, compose_trajectory, relative_to_absolute, wrap_angle, Pose6D, RigidTransform,
    EULER_CONVENTION,
};
pub use io::{load_sequence, read_imu_csv, read_poses, write_imu_csv, write_poses, DatasetManifest, DATASET_FORMAT, DATASET_VERSION, IMU_HEADER};
pub use segment::{segment, segment_ranges, Segment};
pub use synth::{synthesize, PathShape, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel values are mapped from `[0, 255]` to `[-0.5, 0.5]`.
pub const PIXEL_OFFSET: f64 = 0.5;
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    pub timestamp: f64,
    /// `[channels, height, width]`, normalised to `[-0.5, 0.5]`.
    pub pixels: Tensor,
}

impl ImageFrame {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.pixels.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuReading {
    pub timestamp: f64,
    /// m/s^2
    pub linear_acceleration: [f64; 3],
    /// rad/s
    pub angular_velocity: [f64; 3],
}

impl ImuReading {
    pub fn to_array(&self) -> [f64; 6] {
        let [ax, ay, az] = self.linear_acceleration;
        let [wx, wy, wz] = self.angular_velocity;
        [ax, ay, az, wx, wy, wz]
    }
}

/// One training item. Frames are referenced by index into the owning
/// dataset's frame list.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub first: usize,
    pub second: usize,
    pub imu: Vec<ImuReading>,
    pub target: Pose6D,
}

/// Named train/test split of sequence identifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// KITTI odometry sequences with ground truth; 03 is left out because
    /// its raw IMU recording is unavailable.
    pub fn kitti_default() -> Self {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Split {
            train: ids(&["00", "01", "02", "05", "08", "09"]),
            test: ids(&["04", "06", "07", "10"]),
        }
    }
}

impl Default for Split {
    fn default() -> Self {
        Self::kitti_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub imu_per_frame: usize,
    /// Used to timestamp frames when the image directory has no `times.txt`.
    pub image_rate_hz: f64,
    pub segment_min: usize,
    pub segment_max: usize,
    pub seed: u64,
    pub split: Split,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_height: 184,
            image_width: 608,
            channels: 3,
            imu_per_frame: 10,
            image_rate_hz: 10.0,
            segment_min: 5,
            segment_max: 7,
            seed: 0,
            split: Split::kitti_default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config("image size must be positive with 1 or 3 channels".into()));
        }
        if self.imu_per_frame == 0 {
            return Err(Error::Config("imu_per_frame must be positive".into()));
        }
        if !(self.image_rate_hz > 0.0) {
            return Err(Error::Config("image_rate_hz must be positive".into()));
        }
        if self.segment_min < 2 || self.segment_min > self.segment_max {
            return Err(Error::Config("segment bounds must satisfy 2 <= min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub frames: Vec<ImageFrame>,
    pub windows: Vec<SampleWindow>,
    /// Ground-truth pose at every window boundary; `windows.len() + 1` long.
    pub absolute: Vec<RigidTransform>,
    pub imu_per_frame: usize,
}

/// Tolerance for the relative-target / absolute-trajectory consistency check.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-9;

impl SequenceDataset {
    /// Builds windows over consecutive frames from absolute ground truth.
    pub fn from_parts(
        frames: Vec<ImageFrame>,
        imu_blocks: Vec<Vec<ImuReading>>,
        absolute: Vec<RigidTransform>,
        imu_per_frame: usize,
    ) -> Result<Self> {
        if frames.len() != absolute.len() || imu_blocks.len() + 1 != frames.len() {
            return Err(Error::Contract(format!(
                "{} frames, {} poses and {} IMU blocks do not line up",
                frames.len(),
                absolute.len(),
                imu_blocks.len()
            )));
        }
        let windows = imu_blocks
            .into_iter()
            .enumerate()
            .map(|(k, imu)| SampleWindow {
                first: k,
                second: k + 1,
                imu,
                target: absolute_to_relative(&absolute[k], &absolute[k + 1]),
            })
            .collect();
        let ds = SequenceDataset {
            frames,
            windows,
            absolute,
            imu_per_frame,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.frames.first().map_or([0, 0, 0], ImageFrame::shape)
    }

    pub fn image_pair(&self, w: &SampleWindow) -> (&ImageFrame, &ImageFrame) {
        (&self.frames[w.first], &self.frames[w.second])
    }

    pub fn targets(&self) -> Vec<Pose6D> {
        self.windows.iter().map(|w| w.target).collect()
    }

    /// Total ground-truth path length in metres.
    pub fn path_length(&self) -> f64 {
        self.absolute
            .windows(2)
            .map(|p| (p[1].translation - p[0].translation).norm())
            .sum()
    }

    /// Checks structural invariants and that folding the relative targets
    /// reproduces the absolute trajectory.
    pub fn validate(&self) -> Result<()> {
        if self.absolute.len() != self.windows.len() + 1 {
            return Err(Error::Contract("absolute trajectory must have one pose per window boundary".into()));
        }
        let shape = self.image_shape();
        for (k, w) in self.windows.iter().enumerate() {
            if w.first >= self.frames.len() || w.second >= self.frames.len() {
                return Err(Error::Contract(format!("window {k} references a missing frame")));
            }
            if w.imu.len() != self.imu_per_frame {
                return Err(Error::Contract(format!(
                    "window {k} has {} IMU readings, expected {}",
                    w.imu.len(),
                    self.imu_per_frame
                )));
            }
            if w.imu.iter().any(|r| !r.to_array().iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite(format!("IMU reading in window {k}")));
            }
        }
        if self.frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::Contract("frames differ in shape".into()));
        }
        let folded = compose_trajectory(&self.absolute[0], &self.targets());
        for (k, (a, b)) in folded.iter().zip(&self.absolute).enumerate() {
            let d = geometry::transform_distance(a, b);
            if d > CONSISTENCY_TOLERANCE * (1.0 + b.translation.norm()) {
                return Err(Error::Contract(format!(
                    "relative targets diverge from the absolute trajectory at frame {k} by {d:.3e}"
                )));
            }
        }
        Ok(())
    }

    /// Drops frames no window references, keeping the order of the rest.
    pub fn compact(&mut self) {
        let mut used = vec![false; self.frames.len()];
        for w in &self.windows {
            used[w.first] = true;
            used[w.second] = true;
        }
        if used.iter().all(|&u| u) {
            return;
        }
        let mut remap = vec![usize::MAX; self.frames.len()];
        let mut kept = Vec::new();
        for (i, f) in std::mem::take(&mut self.frames).into_iter().enumerate() {
            if used[i] {
                remap[i] = kept.len();
                kept.push(f);
            }
        }
        self.frames = kept;
        for w in &mut self.windows {
            w.first = remap[w.first];
            w.second = remap[w.second];
        }
    }

    /// Sub-sequence of windows `range`, sharing no state with `self`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SequenceDataset {
        let mut ds = SequenceDataset {
            frames: self.frames.clone(),
            windows: self.windows[range.clone()].to_vec(),
            absolute: self.absolute[range.start..range.end + 1].to_vec(),
            imu_per_frame: self.imu_per_frame,
        };
        ds.compact();
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_excludes_sequence_03() {
        let s = Split::default();
        assert!(!s.train.iter().chain(&s.test).any(|id| id == "03"));
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.test, vec!["04", "06", "07", "10"]);
    }

    #[test]
    fn slice_keeps_only_referenced_frames() {
        let ds = synthesize(&SynthConfig { num_windows: 10, ..SynthConfig::default() }, 1).unwrap();
        let part = ds.slice(3..6);
        assert_eq!(part.len(), 3);
        assert_eq!(part.frames.len(), 4);
        assert_eq!(part.frames[0], ds.frames[3]);
        part.validate().unwrap();
    }
}
