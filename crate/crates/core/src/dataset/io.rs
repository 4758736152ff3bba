//! Reading KITTI-style sequences and the artifact's own dataset directories.
//!
//! A dataset directory holds:
//!
//! * `manifest.json`: [`DatasetManifest`]
//! * `frames.bin`: every frame's pixels as little-endian `f64`, `[C, H, W]`
//!   row-major, frames back to back
//! * `imu.csv`: `timestamp,ax,ay,az,wx,wy,wz`, `imu_per_frame` rows per window
//!   in window order
//! * `poses.txt`: one `[R | t]` row-major line per window boundary

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::geometry::RigidTransform;
use super::{DatasetConfig, ImageFrame, ImuReading, SampleWindow, SequenceDataset, PIXEL_OFFSET, PIXEL_SCALE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "mivio-dataset";
pub const DATASET_VERSION: u32 = 1;

pub const IMU_HEADER: [&str; 7] = ["timestamp", "ax", "ay", "az", "wx", "wy", "wz"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// Free-form provenance, e.g. `synthetic` or `kitti:00`.
    pub source: String,
    pub image_shape: [usize; 3],
    pub imu_per_frame: usize,
    pub frame_timestamps: Vec<f64>,
    /// `[first, second]` frame indices of each window.
    pub windows: Vec<[usize; 2]>,
    /// Degradation applied to produce this dataset; `null` when nominal.
    pub degradation: Option<serde_json::Value>,
    pub config: serde_json::Value,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { path: None, msg } => Error::format(path.to_path_buf(), msg),
        other => other,
    }
}

/// Parses a KITTI odometry pose file: twelve whitespace-separated floats per
/// line. Rotation blocks that pass the orthogonality check are projected
/// onto the nearest rotation so that relative targets recompose exactly.
pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path.to_path_buf(), format!("line {}: {e}", i + 1)))?;
        let mut t = RigidTransform::from_row_major(&values)
            .map_err(|e| Error::format(path.to_path_buf(), format!("line {}: {e}", i + 1)))?;
        t.rotation = nearest_rotation(&t.rotation);
        out.push(t);
    }
    Ok(out)
}

fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    if (r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12 {
        return *r;
    }
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * vt
}

pub fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuReading>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != IMU_HEADER {
        return Err(Error::format(
            path.to_path_buf(),
            format!("expected header {}, found {}", IMU_HEADER.join(","), header.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let v = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path.to_path_buf(), format!("row {}: {e}", i + 1)))?;
        if v.len() != 7 {
            return Err(Error::format(path.to_path_buf(), format!("row {} has {} fields", i + 1, v.len())));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::format(path.to_path_buf(), format!("row {} has a non-finite value", i + 1)));
        }
        out.push(ImuReading {
            timestamp: v[0],
            linear_acceleration: [v[1], v[2], v[3]],
            angular_velocity: [v[4], v[5], v[6]],
        });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path.to_path_buf(), format!("{other:?}")),
    }
}

pub fn write_imu_csv<'a>(path: &Path, readings: impl IntoIterator<Item = &'a ImuReading>) -> Result<()> {
    let mut text = IMU_HEADER.join(",");
    text.push('\n');
    for r in readings {
        let row: Vec<String> = std::iter::once(r.timestamp)
            .chain(r.to_array())
            .map(|v| v.to_string())
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Picks exactly `n` readings for the interval `[t0, t1)`: the reading nearest
/// to each of `n` evenly spaced target times, never reusing one. With fewer
/// than `n` readings available the last one is repeated.
pub(crate) fn select_readings(all: &[ImuReading], t0: f64, t1: f64, n: usize) -> Option<(Vec<ImuReading>, bool)> {
    let lo = all.partition_point(|r| r.timestamp < t0);
    let hi = all.partition_point(|r| r.timestamp < t1);
    let inside = &all[lo..hi];
    if inside.is_empty() {
        return None;
    }
    if inside.len() <= n {
        let mut v = inside.to_vec();
        let last = *v.last().unwrap();
        let padded = v.len() < n;
        v.resize(n, last);
        return Some((v, padded));
    }
    let dt = (t1 - t0) / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut next = 0;
    for j in 0..n {
        let target = t0 + j as f64 * dt;
        let last_allowed = inside.len() - (n - j);
        let best = (next..=last_allowed)
            .min_by(|&a, &b| {
                let da = (inside[a].timestamp - target).abs();
                let db = (inside[b].timestamp - target).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        out.push(inside[best]);
        next = best + 1;
    }
    Some((out, false))
}

fn numeric_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let stem = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok());
        if let (true, Some(k)) = (is_png, stem) {
            files.push((k, p));
        }
    }
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

fn load_png(path: &Path, cfg: &DatasetConfig) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path.to_path_buf(), other.to_string()),
    })?;
    let (h, w, c) = (cfg.image_height, cfg.image_width, cfg.channels);
    let img = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
    let mut data = vec![0.0; c * h * w];
    if c == 1 {
        let g = img.to_luma8();
        for (i, p) in g.pixels().enumerate() {
            data[i] = p.0[0] as f64 * PIXEL_SCALE - PIXEL_OFFSET;
        }
    } else {
        let rgb = img.to_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            for ch in 0..3 {
                data[ch * h * w + i] = p.0[ch] as f64 * PIXEL_SCALE - PIXEL_OFFSET;
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Frame times from `times.txt` next to or one level above the images;
/// otherwise `k / image_rate_hz`.
fn frame_times(image_dir: &Path, count: usize, cfg: &DatasetConfig) -> Result<Vec<f64>> {
    let candidates = [Some(image_dir.join("times.txt")), image_dir.parent().map(|p| p.join("times.txt"))];
    for path in candidates.into_iter().flatten() {
        if !path.is_file() {
            continue;
        }
        let text = read_text(&path)?;
        let times = text
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path.clone(), e.to_string()))?;
        if times.len() != count {
            return Err(Error::format(path, format!("{} timestamps for {count} images", times.len())));
        }
        return Ok(times);
    }
    Ok((0..count).map(|k| k as f64 / cfg.image_rate_hz).collect())
}

/// Loads one KITTI-style sequence: a directory of numerically named PNGs, an
/// IMU CSV sorted by time and a pose file with one line per image.
pub fn load_sequence(image_dir: &Path, imu_file: &Path, pose_file: &Path, cfg: &DatasetConfig) -> Result<SequenceDataset> {
    cfg.validate()?;
    let pngs = numeric_pngs(image_dir)?;
    if pngs.len() < 2 {
        return Err(Error::format(image_dir.to_path_buf(), "need at least two numbered PNG images"));
    }
    let poses = read_poses(pose_file)?;
    if poses.len() != pngs.len() {
        return Err(Error::format(
            pose_file.to_path_buf(),
            format!("{} poses for {} images", poses.len(), pngs.len()),
        ));
    }
    let imu = read_imu_csv(imu_file)?;
    if let Some(i) = imu.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::format(imu_file.to_path_buf(), format!("timestamps decrease at row {}", i + 2)));
    }
    let times = frame_times(image_dir, pngs.len(), cfg)?;
    let frames = pngs
        .iter()
        .zip(&times)
        .map(|(p, &t)| {
            Ok(ImageFrame {
                timestamp: t,
                pixels: load_png(p, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut blocks = Vec::with_capacity(frames.len() - 1);
    let mut padded = 0;
    for k in 0..frames.len() - 1 {
        let (block, pad) = select_readings(&imu, times[k], times[k + 1], cfg.imu_per_frame).ok_or_else(|| {
            Error::format(
                imu_file.to_path_buf(),
                format!("no IMU readings between frames {k} and {} ({}s..{}s)", k + 1, times[k], times[k + 1]),
            )
        })?;
        padded += pad as usize;
        blocks.push(block);
    }
    if padded > 0 {
        log::warn!("{padded} image intervals had fewer than {} IMU readings; padded by repeating the last", cfg.imu_per_frame);
    }
    SequenceDataset::from_parts(frames, blocks, poses, cfg.imu_per_frame)
}

impl SequenceDataset {
    pub fn manifest(&self, source: &str, degradation: Option<serde_json::Value>, config: serde_json::Value) -> DatasetManifest {
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            source: source.into(),
            image_shape: self.image_shape(),
            imu_per_frame: self.imu_per_frame,
            frame_timestamps: self.frames.iter().map(|f| f.timestamp).collect(),
            windows: self.windows.iter().map(|w| [w.first, w.second]).collect(),
            degradation,
            config,
        }
    }

    /// Writes the dataset directory described in the module docs.
    pub fn save(&self, dir: &Path, manifest: &DatasetManifest) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let mut bytes = Vec::with_capacity(self.frames.iter().map(|f| f.pixels.numel() * 8).sum());
        for f in &self.frames {
            for v in f.pixels.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let fpath = dir.join("frames.bin");
        fs::write(&fpath, bytes).map_err(|e| Error::io(&fpath, e))?;
        write_imu_csv(&dir.join("imu.csv"), self.windows.iter().flat_map(|w| &w.imu))?;
        write_poses(&dir.join("poses.txt"), &self.absolute)
    }

    pub fn load(dir: &Path) -> Result<(SequenceDataset, DatasetManifest)> {
        let mpath = dir.join("manifest.json");
        let manifest: DatasetManifest =
            serde_json::from_str(&read_text(&mpath)?).map_err(|e| Error::format(mpath.clone(), e.to_string()))?;
        if manifest.format != DATASET_FORMAT || manifest.version > DATASET_VERSION {
            return Err(Error::format(
                mpath,
                format!("unsupported dataset format {} v{}", manifest.format, manifest.version),
            ));
        }
        let [c, h, w] = manifest.image_shape;
        let per_frame = c * h * w;
        let fpath = dir.join("frames.bin");
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let n_frames = manifest.frame_timestamps.len();
        if bytes.len() != n_frames * per_frame * 8 {
            return Err(Error::format(
                fpath,
                format!("{} bytes for {n_frames} frames of shape {:?}", bytes.len(), manifest.image_shape),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let frames = manifest
            .frame_timestamps
            .iter()
            .enumerate()
            .map(|(k, &t)| ImageFrame {
                timestamp: t,
                pixels: Tensor::new(vec![c, h, w], values[k * per_frame..(k + 1) * per_frame].to_vec()).unwrap(),
            })
            .collect();
        let ipath = dir.join("imu.csv");
        let imu = read_imu_csv(&ipath)?;
        let n = manifest.imu_per_frame;
        if n == 0 || imu.len() != manifest.windows.len() * n {
            return Err(Error::format(
                ipath,
                format!("{} readings for {} windows of {n}", imu.len(), manifest.windows.len()),
            ));
        }
        let absolute = read_poses(&dir.join("poses.txt")).map_err(|e| with_path(&dir.join("poses.txt"), e))?;
        if absolute.len() != manifest.windows.len() + 1 {
            return Err(Error::format(
                dir.join("poses.txt"),
                format!("{} poses for {} windows", absolute.len(), manifest.windows.len()),
            ));
        }
        let windows = manifest
            .windows
            .iter()
            .enumerate()
            .map(|(k, &[first, second])| SampleWindow {
                first,
                second,
                imu: imu[k * n..(k + 1) * n].to_vec(),
                target: super::absolute_to_relative(&absolute[k], &absolute[k + 1]),
            })
            .collect();
        let ds = SequenceDataset {
            frames,
            windows,
            absolute,
            imu_per_frame: n,
        };
        ds.validate().map_err(|e| match e {
            Error::Contract(msg) => Error::format(dir.to_path_buf(), msg),
            other => other,
        })?;
        Ok((ds, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, SynthConfig};

    fn reading(t: f64) -> ImuReading {
        ImuReading {
            timestamp: t,
            linear_acceleration: [t, 0.0, 9.81],
            angular_velocity: [0.0, 0.0, t],
        }
    }

    #[test]
    fn hundred_hz_imu_gives_ten_per_ten_hz_frame() {
        let all: Vec<_> = (0..100).map(|i| reading(i as f64 * 0.01)).collect();
        let (block, padded) = select_readings(&all, 0.3, 0.4, 10).unwrap();
        assert!(!padded);
        assert_eq!(block.len(), 10);
        assert!(block.iter().all(|r| r.timestamp >= 0.3 - 1e-12 && r.timestamp < 0.4));
    }

    #[test]
    fn oversampled_imu_picks_nearest_without_reuse() {
        let all: Vec<_> = (0..400).map(|i| reading(i as f64 * 0.0025)).collect();
        let (block, _) = select_readings(&all, 0.0, 0.1, 10).unwrap();
        let ts: Vec<f64> = block.iter().map(|r| r.timestamp).collect();
        for (j, t) in ts.iter().enumerate() {
            assert!((t - j as f64 * 0.01).abs() < 1e-12, "{ts:?}");
        }
    }

    #[test]
    fn underrun_pads_with_last_reading() {
        let all = vec![reading(0.01), reading(0.05)];
        let (block, padded) = select_readings(&all, 0.0, 0.1, 4).unwrap();
        assert!(padded);
        assert_eq!(block.iter().map(|r| r.timestamp).collect::<Vec<_>>(), vec![0.01, 0.05, 0.05, 0.05]);
        assert!(select_readings(&all, 0.2, 0.3, 4).is_none());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let ds = synthesize(&SynthConfig { num_windows: 12, gyro_noise_std: 0.01, ..SynthConfig::default() }, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = ds.manifest("synthetic", None, serde_json::json!({}));
        ds.save(dir.path(), &m).unwrap();
        let (back, m2) = SequenceDataset::load(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.frames, ds.frames);
        assert_eq!(back.absolute, ds.absolute);
        for (a, b) in back.windows.iter().zip(&ds.windows) {
            assert_eq!(a.imu, b.imu);
            assert_eq!(a.target, b.target);
        }
    }

    #[test]
    fn non_rigid_pose_line_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.txt");
        fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1 0\n1.1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let err = read_poses(&p).unwrap_err();
        assert!(matches!(err, Error::Format { path: Some(_), .. }), "{err}");
        assert!(err.to_string().contains("line 2"));
    }
}
