//! Trajectory error metrics over fixed-length sub-sequences and summaries of
//! how predictive uncertainty tracks error.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::geometry::rotation_angle;
use crate::dataset::{absolute_to_relative, compose_trajectory, wrap_angle, Pose6D, RigidTransform};
use crate::error::{Error, Result};

/// Sub-sequence lengths in metres.
pub const LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
pub const POSE_COMPONENTS: [&str; 6] = ["tx", "ty", "tz", "yaw", "pitch", "roll"];
pub const DEFAULT_BINS: usize = 5;

/// Absolute poses, one per frame, with optional per-step variance of the
/// relative pose between frame `k` and `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEstimate {
    pub poses: Vec<RigidTransform>,
    pub variance: Option<Vec<[f64; 6]>>,
}

impl TrajectoryEstimate {
    pub fn new(poses: Vec<RigidTransform>) -> Self {
        TrajectoryEstimate { poses, variance: None }
    }

    pub fn from_relative(start: &RigidTransform, rel: &[Pose6D], variance: Option<Vec<[f64; 6]>>) -> Result<Self> {
        let t = TrajectoryEstimate {
            poses: compose_trajectory(start, rel),
            variance,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = &self.variance {
            if v.len() + 1 != self.poses.len() {
                return Err(Error::Contract(format!(
                    "{} variance rows for {} poses; expected one per step",
                    v.len(),
                    self.poses.len()
                )));
            }
            if v.iter().flatten().any(|x| !(*x >= 0.0)) {
                return Err(Error::Contract("variances must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn relative(&self) -> Vec<Pose6D> {
        self.poses.windows(2).map(|w| absolute_to_relative(&w[0], &w[1])).collect()
    }

    /// Cumulative travelled distance at each frame.
    pub fn path_distances(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        for (k, p) in self.poses.iter().enumerate() {
            if k > 0 {
                acc += (p.translation - self.poses[k - 1].translation).norm();
            }
            out.push(acc);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthMetric {
    pub length: f64,
    /// Percent.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub t_rel: f64,
    pub r_rel: f64,
    /// Only lengths with at least one sub-sequence.
    pub per_length: Vec<LengthMetric>,
}

impl MetricReport {
    /// True when the ground truth is shorter than the shortest length.
    pub fn is_empty(&self) -> bool {
        self.per_length.is_empty()
    }
}

/// Translation and rotation error of one sub-sequence `i -> j`, as ratios to
/// its length `len` (metres per metre and radians per metre).
pub(crate) fn segment_error(pred: &[RigidTransform], gt: &[RigidTransform], i: usize, j: usize, len: f64) -> (f64, f64) {
    let gt_rel = gt[i].between(&gt[j]);
    let pred_rel = pred[i].between(&pred[j]);
    let e = gt_rel.inverse().compose(&pred_rel);
    (e.translation.norm() / len, rotation_angle(&e.rotation) / len)
}

/// Every frame is an anchor. For each length the first frame whose path
/// distance from the anchor reaches it closes the sub-sequence; errors are
/// aggregated by RMSE per length and then averaged over lengths.
pub fn evaluate(pred: &TrajectoryEstimate, gt: &TrajectoryEstimate) -> Result<MetricReport> {
    if pred.poses.len() != gt.poses.len() {
        return Err(Error::Contract(format!(
            "prediction has {} poses, ground truth {}",
            pred.poses.len(),
            gt.poses.len()
        )));
    }
    let dist = gt.path_distances();
    let n = dist.len();
    let per_length: Vec<LengthMetric> = LENGTHS
        .par_iter()
        .filter_map(|&len| {
            let (mut st, mut sr, mut count) = (0.0, 0.0, 0usize);
            let mut j = 0;
            for i in 0..n {
                j = j.max(i);
                while j < n && dist[j] - dist[i] < len {
                    j += 1;
                }
                if j == n {
                    break;
                }
                let (t, r) = segment_error(&pred.poses, &gt.poses, i, j, len);
                st += t * t;
                sr += r * r;
                count += 1;
            }
            (count > 0).then(|| LengthMetric {
                length: len,
                t_rel: 100.0 * (st / count as f64).sqrt(),
                r_rel: 100.0 * (sr / count as f64).sqrt().to_degrees(),
                count,
            })
        })
        .collect();
    if per_length.is_empty() {
        return Ok(MetricReport::default());
    }
    let k = per_length.len() as f64;
    Ok(MetricReport {
        t_rel: per_length.iter().map(|m| m.t_rel).sum::<f64>() / k,
        r_rel: per_length.iter().map(|m| m.r_rel).sum::<f64>() / k,
        per_length,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && v[idx[e]] == v[idx[s]] {
            e += 1;
        }
        let avg = (s + e + 1) as f64 / 2.0;
        for &k in &idx[s..e] {
            out[k] = avg;
        }
        s = e;
    }
    out
}

/// Spearman rank correlation. `None` when either input is constant (or
/// shorter than two), where the coefficient is undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    if a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    (da > 0.0 && db > 0.0).then(|| num / (da * db).sqrt())
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBin {
    pub error_lo: f64,
    pub error_hi: f64,
    pub count: usize,
    pub sigma_min: f64,
    pub sigma_q1: f64,
    pub sigma_median: f64,
    pub sigma_q3: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: String,
    pub spearman: f64,
    /// Set when the correlation was undefined and reported as zero.
    pub degenerate: bool,
    pub bins: Vec<BoxBin>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub components: Vec<ComponentSummary>,
}

/// Spearman correlation of `|error|` with `sigma` and box statistics of
/// `sigma` within equal-count error bins.
pub fn correlate(errors: &[f64], sigma: &[f64], bins: usize, component: &str) -> Result<ComponentSummary> {
    if errors.len() != sigma.len() {
        return Err(Error::Contract(format!("{} errors for {} sigmas", errors.len(), sigma.len())));
    }
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let rho = spearman(&abs, sigma);
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let bins = bins.max(1).min(abs.len().max(1));
    let mut out = Vec::new();
    for b in 0..bins {
        let lo = b * order.len() / bins;
        let hi = (b + 1) * order.len() / bins;
        if lo == hi {
            continue;
        }
        let mut s: Vec<f64> = order[lo..hi].iter().map(|&k| sigma[k]).collect();
        s.sort_by(f64::total_cmp);
        out.push(BoxBin {
            error_lo: abs[order[lo]],
            error_hi: abs[order[hi - 1]],
            count: hi - lo,
            sigma_min: s[0],
            sigma_q1: quantile(&s, 0.25),
            sigma_median: quantile(&s, 0.5),
            sigma_q3: quantile(&s, 0.75),
            sigma_max: s[s.len() - 1],
        });
    }
    Ok(ComponentSummary {
        component: component.to_string(),
        spearman: rho.unwrap_or(0.0),
        degenerate: rho.is_none(),
        bins: out,
    })
}

/// Per pose component: relative-pose error against ground truth (angles
/// wrapped) correlated with the predicted standard deviation.
pub fn summarize_uncertainty(pred: &TrajectoryEstimate, gt: &TrajectoryEstimate, bins: usize) -> Result<UncertaintyReport> {
    let var = pred
        .variance
        .as_ref()
        .ok_or_else(|| Error::Contract("uncertainty summary needs predicted variances".into()))?;
    pred.validate()?;
    if pred.poses.len() != gt.poses.len() {
        return Err(Error::Contract(format!(
            "prediction has {} poses, ground truth {}",
            pred.poses.len(),
            gt.poses.len()
        )));
    }
    let (p, g) = (pred.relative(), gt.relative());
    let mut components = Vec::with_capacity(6);
    for (c, name) in POSE_COMPONENTS.iter().enumerate() {
        let err: Vec<f64> = p
            .iter()
            .zip(&g)
            .map(|(a, b)| {
                let d = a.to_array()[c] - b.to_array()[c];
                if c >= 3 {
                    wrap_angle(d)
                } else {
                    d
                }
            })
            .collect();
        let sigma: Vec<f64> = var.iter().map(|v| v[c].sqrt()).collect();
        components.push(correlate(&err, &sigma, bins, name)?);
    }
    Ok(UncertaintyReport { components })
}

pub const METRICS_HEADER: [&str; 4] = ["length", "t_rel", "r_rel", "count"];
pub const TRAJECTORY_HEADER: [&str; 13] = [
    "frame", "pred_x", "pred_y", "pred_z", "gt_x", "gt_y", "gt_z", "sigma_tx", "sigma_ty", "sigma_tz", "sigma_yaw", "sigma_pitch",
    "sigma_roll",
];
pub const BINS_HEADER: [&str; 10] = [
    "component",
    "bin",
    "error_lo",
    "error_hi",
    "count",
    "sigma_min",
    "sigma_q1",
    "sigma_median",
    "sigma_q3",
    "sigma_max",
];

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path.to_path_buf(), format!("{other:?}")),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.to_path_buf(), e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `length,t_rel,r_rel,count`, one row per evaluated length.
pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    write_rows(
        path,
        &METRICS_HEADER,
        report
            .per_length
            .iter()
            .map(|m| vec![m.length.to_string(), m.t_rel.to_string(), m.r_rel.to_string(), m.count.to_string()]),
    )
}

/// Predicted and ground-truth positions per frame with the standard
/// deviation of the step ending at that frame (empty for frame 0 or when no
/// variance is present).
pub fn write_trajectory_csv(path: &Path, pred: &TrajectoryEstimate, gt: &TrajectoryEstimate) -> Result<()> {
    if pred.poses.len() != gt.poses.len() {
        return Err(Error::Contract("trajectory export needs equal lengths".into()));
    }
    let rows = pred.poses.iter().zip(&gt.poses).enumerate().map(|(k, (p, g))| {
        let mut row = vec![k.to_string()];
        row.extend(p.translation.iter().chain(g.translation.iter()).map(f64::to_string));
        match (&pred.variance, k) {
            (Some(v), k) if k > 0 => row.extend(v[k - 1].iter().map(|x| x.sqrt().to_string())),
            _ => row.extend(std::iter::repeat_n(String::new(), 6)),
        }
        row
    });
    write_rows(path, &TRAJECTORY_HEADER, rows)
}

pub fn write_bins_csv(path: &Path, report: &UncertaintyReport) -> Result<()> {
    let rows = report.components.iter().flat_map(|c| {
        c.bins.iter().enumerate().map(move |(i, b)| {
            vec![
                c.component.clone(),
                i.to_string(),
                b.error_lo.to_string(),
                b.error_hi.to_string(),
                b.count.to_string(),
                b.sigma_min.to_string(),
                b.sigma_q1.to_string(),
                b.sigma_median.to_string(),
                b.sigma_q3.to_string(),
                b.sigma_max.to_string(),
            ]
        })
    });
    write_rows(path, &BINS_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::geometry::euler_to_matrix;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct double loop: path length re-summed for every pair, every
    /// closing frame found by scanning from the anchor.
    fn brute_force(pred: &[RigidTransform], gt: &[RigidTransform]) -> (f64, f64) {
        let n = gt.len();
        let (mut ts, mut rs) = (Vec::new(), Vec::new());
        for &len in &LENGTHS {
            let mut errs = Vec::new();
            for i in 0..n {
                for j in i..n {
                    let mut d = 0.0;
                    for k in i + 1..=j {
                        d += (gt[k].translation - gt[k - 1].translation).norm();
                    }
                    if d >= len {
                        let e = gt[i].between(&gt[j]).inverse().compose(&pred[i].between(&pred[j]));
                        errs.push((e.translation.norm() / len, rotation_angle(&e.rotation) / len));
                        break;
                    }
                }
            }
            if !errs.is_empty() {
                let m = errs.len() as f64;
                ts.push(100.0 * (errs.iter().map(|e| e.0 * e.0).sum::<f64>() / m).sqrt());
                rs.push(100.0 * (errs.iter().map(|e| e.1 * e.1).sum::<f64>() / m).sqrt().to_degrees());
            }
        }
        let k = ts.len().max(1) as f64;
        (ts.iter().sum::<f64>() / k, rs.iter().sum::<f64>() / k)
    }

    fn random_walk(n: usize, seed: u64, step: f64) -> Vec<RigidTransform> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rels: Vec<Pose6D> = (0..n - 1)
            .map(|_| Pose6D {
                translation: [rng.random_range(-0.2..0.2), rng.random_range(-0.1..0.1), step * rng.random_range(0.5..1.5)],
                rotation: [rng.random_range(-0.05..0.05), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)],
            })
            .collect();
        compose_trajectory(&RigidTransform::identity(), &rels)
    }

    fn perturb(t: &[RigidTransform], seed: u64) -> Vec<RigidTransform> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rels: Vec<Pose6D> = t.windows(2).map(|w| absolute_to_relative(&w[0], &w[1])).collect();
        for r in &mut rels {
            for k in 0..3 {
                r.translation[k] += rng.random_range(-0.05..0.05);
                r.rotation[k] += rng.random_range(-0.002..0.002);
            }
        }
        compose_trajectory(&t[0], &rels)
    }

    fn line(n: usize, scale: f64) -> Vec<RigidTransform> {
        (0..n)
            .map(|k| RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, scale * k as f64)))
            .collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        for (n, seed) in [(300, 1), (900, 2), (2000, 3)] {
            let gt = random_walk(n, seed, 1.0);
            let pred = perturb(&gt, seed + 10);
            let r = evaluate(&TrajectoryEstimate::new(pred.clone()), &TrajectoryEstimate::new(gt.clone())).unwrap();
            let (t, rr) = brute_force(&pred, &gt);
            assert!(!r.is_empty());
            assert!((r.t_rel - t).abs() < 1e-9, "{} vs {t}", r.t_rel);
            assert!((r.r_rel - rr).abs() < 1e-9, "{} vs {rr}", r.r_rel);
        }
    }

    #[test]
    fn scaled_straight_line_gives_five_percent() {
        let gt = TrajectoryEstimate::new(line(1001, 1.0));
        let pred = TrajectoryEstimate::new(line(1001, 1.05));
        let r = evaluate(&pred, &gt).unwrap();
        assert!((r.t_rel - 5.0).abs() < 0.1, "{}", r.t_rel);
        assert!(r.r_rel.abs() < 1e-9);
        assert_eq!(r.per_length.len(), 8);
        assert_eq!(r.per_length[0].count, 901);
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = TrajectoryEstimate::new(random_walk(500, 4, 1.0));
        let r = evaluate(&gt, &gt).unwrap();
        assert_eq!((r.t_rel, r.r_rel), (0.0, 0.0));
        assert!(r.per_length.iter().all(|m| m.t_rel == 0.0 && m.r_rel == 0.0));
    }

    #[test]
    fn short_and_mismatched_inputs() {
        let gt = TrajectoryEstimate::new(line(50, 1.0));
        let r = evaluate(&gt, &gt).unwrap();
        assert!(r.is_empty());
        assert!(r.t_rel.is_sign_positive() && r.t_rel == 0.0);
        let other = TrajectoryEstimate::new(line(49, 1.0));
        assert!(matches!(evaluate(&other, &gt), Err(Error::Contract(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn invariant_to_global_rigid_transform(seed in 0u64..1000, yaw in -3.0f64..3.0, pitch in -1.0f64..1.0, tx in -50.0f64..50.0) {
            let gt = random_walk(260, seed, 1.0);
            let pred = perturb(&gt, seed + 1);
            let g = RigidTransform::new(euler_to_matrix(yaw, pitch, 0.3), Vector3::new(tx, 2.0, -7.0));
            let moved = |t: &[RigidTransform]| t.iter().map(|p| g.compose(p)).collect::<Vec<_>>();
            let a = evaluate(&TrajectoryEstimate::new(pred.clone()), &TrajectoryEstimate::new(gt.clone())).unwrap();
            let b = evaluate(&TrajectoryEstimate::new(moved(&pred)), &TrajectoryEstimate::new(moved(&gt))).unwrap();
            prop_assert!((a.t_rel - b.t_rel).abs() < 1e-6 * a.t_rel.max(1.0));
            prop_assert!((a.r_rel - b.r_rel).abs() < 1e-6 * a.r_rel.max(1.0));
        }

        #[test]
        fn spearman_is_bounded(v in proptest::collection::vec(-10.0f64..10.0, 3..40)) {
            let w: Vec<f64> = v.iter().map(|x| x.sin()).collect();
            if let Some(r) = spearman(&v, &w) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }
    }

    #[test]
    fn spearman_cases() {
        let e = [0.3, -1.2, 0.05, 2.0, -0.7];
        let abs: Vec<f64> = e.iter().map(|x: &f64| x.abs()).collect();
        let s = correlate(&e, &abs, 2, "tx").unwrap();
        assert!((s.spearman - 1.0).abs() < 1e-12 && !s.degenerate);
        let c = correlate(&e, &[0.4; 5], 2, "tx").unwrap();
        assert_eq!(c.spearman, 0.0);
        assert!(c.degenerate);
        // Ties use average ranks: [1, 2.5, 2.5, 4].
        assert_eq!(ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn noisy_variance_tracks_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = e.iter().map(|x| (x * x + rng.random_range(0.0..0.02)).sqrt()).collect();
        let s = correlate(&e, &sigma, DEFAULT_BINS, "yaw").unwrap();
        assert!(s.spearman > 0.8, "{}", s.spearman);
        assert_eq!(s.bins.len(), DEFAULT_BINS);
        assert_eq!(s.bins.iter().map(|b| b.count).sum::<usize>(), 400);
        assert!(s.bins.windows(2).all(|w| w[0].sigma_median <= w[1].sigma_median));
    }

    #[test]
    fn summary_requires_variances() {
        let gt = TrajectoryEstimate::new(line(10, 1.0));
        assert!(matches!(summarize_uncertainty(&gt, &gt, 3), Err(Error::Contract(_))));
        let mut pred = gt.clone();
        pred.variance = Some(vec![[0.1; 6]; 9]);
        let r = summarize_uncertainty(&pred, &gt, 3).unwrap();
        assert_eq!(r.components.len(), 6);
        pred.variance = Some(vec![[0.1; 6]; 3]);
        assert!(summarize_uncertainty(&pred, &gt, 3).is_err());
    }

    #[test]
    fn exports_round_trip_and_match_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let gt = TrajectoryEstimate::new(random_walk(400, 5, 1.0));
        let mut pred = TrajectoryEstimate::new(perturb(&gt.poses, 6));
        let report = evaluate(&pred, &gt).unwrap();
        let json = dir.path().join("m.json");
        write_json(&json, &report).unwrap();
        let back: MetricReport = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(back, report);

        let cols = |p: &Path| -> Vec<usize> {
            let mut r = csv::Reader::from_path(p).unwrap();
            let mut out = vec![r.headers().unwrap().len()];
            out.extend(r.records().map(|x| x.unwrap().len()));
            out
        };
        let m = dir.path().join("m.csv");
        write_metrics_csv(&m, &report).unwrap();
        let c = cols(&m);
        assert_eq!(c.len(), report.per_length.len() + 1);
        assert!(c.iter().all(|n| *n == METRICS_HEADER.len()));

        pred.variance = Some(vec![[0.01; 6]; 399]);
        let t = dir.path().join("t.csv");
        write_trajectory_csv(&t, &pred, &gt).unwrap();
        let c = cols(&t);
        assert_eq!(c.len(), 401);
        assert!(c.iter().all(|n| *n == TRAJECTORY_HEADER.len()));

        let u = summarize_uncertainty(&pred, &gt, 4).unwrap();
        let b = dir.path().join("b.csv");
        write_bins_csv(&b, &u).unwrap();
        assert!(cols(&b).iter().all(|n| *n == BINS_HEADER.len()));

        let empty = dir.path().join("e.csv");
        write_metrics_csv(&empty, &MetricReport::default()).unwrap();
        assert_eq!(std::fs::read_to_string(&empty).unwrap(), "length,t_rel,r_rel,count\n");
        assert!(write_metrics_csv(&dir.path().join("missing/x.csv"), &report).is_err());
    }
}
