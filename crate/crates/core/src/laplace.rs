//! Post-hoc diagonal Laplace approximation: empirical-Fisher curvature around
//! the trained weights, Gaussian weight sampling and Monte Carlo predictive
//! moments.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Pose6D, SequenceDataset};
use crate::error::{Error, Result};
use crate::model::{OdometryModel, POSE_WIDTH};
use crate::params::ParamStore;

pub const DEFAULT_SAMPLES: usize = 30;
/// Smallest variance used when scoring Gaussian log-likelihoods.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// What the Laplace machinery needs from a model: a flat parameter vector,
/// per-datum loss gradients and a prediction at arbitrary parameters.
pub trait LaplaceModel: Sync {
    type Datum: Sync;
    type Input: Sync + ?Sized;

    fn map_params(&self) -> Vec<f64>;

    fn loss_grad(&self, params: &[f64], datum: &Self::Datum) -> Result<Vec<f64>>;

    /// Outputs as `steps x components`.
    fn predict(&self, params: &[f64], input: &Self::Input) -> Result<Vec<Vec<f64>>>;
}

/// Average of squared per-datum loss gradients at the MAP parameters.
/// Gradients are computed in parallel and summed in data order.
pub fn fit_fisher<M: LaplaceModel>(model: &M, data: &[M::Datum]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Contract("Fisher estimate needs at least one datum".into()));
    }
    let theta = model.map_params();
    let grads: Vec<Result<Vec<f64>>> = data.par_iter().map(|d| model.loss_grad(&theta, d)).collect();
    let mut fisher = vec![0.0; theta.len()];
    for (i, g) in grads.into_iter().enumerate() {
        let g = g?;
        if g.len() != theta.len() {
            return Err(Error::dim("fit_fisher", &[theta.len()], &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("loss gradient for datum {i}")));
        }
        for (f, v) in fisher.iter_mut().zip(g) {
            *f += v * v;
        }
    }
    let n = data.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

/// `N * F + tau`, elementwise.
pub fn regularize(fisher: &[f64], fisher_multiplier: f64, tau: f64) -> Result<Vec<f64>> {
    check_hyper(fisher_multiplier, tau)?;
    Ok(fisher.iter().map(|f| fisher_multiplier * f + tau).collect())
}

fn check_hyper(n: f64, tau: f64) -> Result<()> {
    if !(n > 0.0 && n.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("Fisher multiplier and tau must be positive and finite, got {n} and {tau}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorApprox {
    pub theta_map: Vec<f64>,
    pub fisher_diag: Vec<f64>,
    pub fisher_multiplier: f64,
    pub tau: f64,
    /// Which parameters are sampled; `None` means all. Others stay at MAP.
    pub stochastic: Option<Vec<bool>>,
}

impl PosteriorApprox {
    pub fn new(theta_map: Vec<f64>, fisher_diag: Vec<f64>, fisher_multiplier: f64, tau: f64) -> Result<Self> {
        let p = PosteriorApprox {
            theta_map,
            fisher_diag,
            fisher_multiplier,
            tau,
            stochastic: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn fit<M: LaplaceModel>(model: &M, data: &[M::Datum], fisher_multiplier: Option<f64>, tau: f64) -> Result<Self> {
        let fisher = fit_fisher(model, data)?;
        Self::new(model.map_params(), fisher, fisher_multiplier.unwrap_or(data.len() as f64), tau)
    }

    pub fn with_stochastic(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.theta_map.len() {
            return Err(Error::dim("stochastic mask", &[self.theta_map.len()], &[mask.len()]));
        }
        self.stochastic = Some(mask);
        Ok(self)
    }

    pub fn with_hyper(&self, fisher_multiplier: f64, tau: f64) -> Result<Self> {
        let mut p = self.clone();
        p.fisher_multiplier = fisher_multiplier;
        p.tau = tau;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_hyper(self.fisher_multiplier, self.tau)?;
        if self.theta_map.len() != self.fisher_diag.len() {
            return Err(Error::dim("posterior", &[self.theta_map.len()], &[self.fisher_diag.len()]));
        }
        if self.fisher_diag.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::Contract("Fisher diagonal must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn precision(&self) -> Vec<f64> {
        regularize(&self.fisher_diag, self.fisher_multiplier, self.tau).expect("validated")
    }

    /// Posterior variance per parameter (zero for fixed ones).
    pub fn variance(&self) -> Vec<f64> {
        self.precision()
            .iter()
            .enumerate()
            .map(|(i, p)| if self.is_stochastic(i) { 1.0 / p } else { 0.0 })
            .collect()
    }

    fn is_stochastic(&self, i: usize) -> bool {
        self.stochastic.as_ref().is_none_or(|m| m[i])
    }

    /// `theta_map + eps / sqrt(precision)` with standard normal `eps`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let precision = self.precision();
        self.theta_map
            .iter()
            .zip(&precision)
            .enumerate()
            .map(|(i, (m, p))| {
                let eps: f64 = StandardNormal.sample(rng);
                if self.is_stochastic(i) {
                    m + eps / p.sqrt()
                } else {
                    *m
                }
            })
            .collect()
    }

    /// Draw for sample index `t` under `seed`: its own ChaCha stream, so the
    /// result does not depend on how many other samples are drawn or in
    /// which order.
    pub fn sample_indexed(&self, seed: u64, t: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        self.sample(&mut rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub mean: Vec<Vec<f64>>,
    /// Unbiased sample variance per step and component.
    pub variance: Vec<Vec<f64>>,
    pub samples: usize,
}

impl PredictiveResult {
    pub fn mean_poses(&self) -> Vec<Pose6D> {
        self.mean.iter().map(|m| Pose6D::from_slice(m)).collect()
    }

    pub fn variance_poses(&self) -> Vec<[f64; POSE_WIDTH]> {
        self.variance
            .iter()
            .map(|v| {
                let mut out = [0.0; POSE_WIDTH];
                out.copy_from_slice(&v[..POSE_WIDTH]);
                out
            })
            .collect()
    }

    pub fn mean_variance(&self) -> f64 {
        let n: usize = self.variance.iter().map(Vec::len).sum();
        self.variance.iter().flatten().sum::<f64>() / n.max(1) as f64
    }
}

/// Moments of predictions made with the given parameter samples. Runs the
/// samples in parallel; the reduction is in sample order.
pub fn predict_with_samples<M: LaplaceModel>(model: &M, samples: &[Vec<f64>], input: &M::Input) -> Result<PredictiveResult> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 posterior samples, got {}", samples.len())));
    }
    let outs: Vec<Vec<Vec<f64>>> = samples.par_iter().map(|p| model.predict(p, input)).collect::<Result<_>>()?;
    moments(&outs)
}

fn moments(outs: &[Vec<Vec<f64>>]) -> Result<PredictiveResult> {
    let t = outs.len() as f64;
    let first = &outs[0];
    if outs.iter().any(|o| o.len() != first.len() || o.iter().zip(first).any(|(a, b)| a.len() != b.len())) {
        return Err(Error::Contract("posterior samples produced differently shaped outputs".into()));
    }
    let mut mean: Vec<Vec<f64>> = first.iter().map(|s| vec![0.0; s.len()]).collect();
    for o in outs {
        for (m, s) in mean.iter_mut().zip(o) {
            m.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
    mean.iter_mut().flatten().for_each(|m| *m /= t);
    let mut variance: Vec<Vec<f64>> = first.iter().map(|s| vec![0.0; s.len()]).collect();
    for o in outs {
        for ((v, s), m) in variance.iter_mut().zip(o).zip(&mean) {
            for ((v, x), m) in v.iter_mut().zip(s).zip(m) {
                *v += (x - m).powi(2);
            }
        }
    }
    variance.iter_mut().flatten().for_each(|v| *v /= t - 1.0);
    Ok(PredictiveResult {
        mean,
        variance,
        samples: outs.len(),
    })
}

/// Monte Carlo predictive with `samples` fresh parameter draws, sample `t`
/// seeded by `(seed, t)`. Bit-reproducible regardless of thread count.
pub fn predict_bayesian<M: LaplaceModel>(model: &M, post: &PosteriorApprox, input: &M::Input, samples: usize, seed: u64) -> Result<PredictiveResult> {
    if samples < 2 {
        return Err(Error::Contract(format!("need at least 2 posterior samples, got {samples}")));
    }
    post.validate()?;
    let outs: Vec<Vec<Vec<f64>>> = (0..samples)
        .into_par_iter()
        .map(|t| model.predict(&post.sample_indexed(seed, t), input))
        .collect::<Result<_>>()?;
    moments(&outs)
}

/// Mean Gaussian negative log-likelihood of `targets` under a predictive
/// result, with the variance floored at [`VARIANCE_FLOOR`].
pub fn gaussian_nll(pred: &PredictiveResult, targets: &[Vec<f64>]) -> Result<f64> {
    if targets.len() != pred.mean.len() {
        return Err(Error::Contract(format!("{} targets for {} predicted steps", targets.len(), pred.mean.len())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((m, v), y) in pred.mean.iter().zip(&pred.variance).zip(targets) {
        if y.len() != m.len() {
            return Err(Error::dim("gaussian_nll", &[m.len()], &[y.len()]));
        }
        for ((m, v), y) in m.iter().zip(v).zip(y) {
            let v = v.max(VARIANCE_FLOOR);
            total += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - m).powi(2) / v);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub fisher_multiplier: f64,
    pub tau: f64,
    /// Validation NLL per grid point, in grid order (NaN when scoring failed).
    pub scores: Vec<f64>,
}

/// Picks the grid point with the lowest validation NLL; ties go to the
/// earlier point.
pub fn tune_hyperparams<M: LaplaceModel>(
    model: &M,
    post: &PosteriorApprox,
    validation: &[(&M::Input, Vec<Vec<f64>>)],
    grid: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<TuneResult> {
    if grid.is_empty() || validation.is_empty() {
        return Err(Error::Contract("tuning needs a non-empty grid and validation set".into()));
    }
    for &(n, tau) in grid {
        check_hyper(n, tau)?;
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &(n, tau) in grid {
        let p = post.with_hyper(n, tau)?;
        let mut sum = 0.0;
        for (input, targets) in validation {
            let pred = predict_bayesian(model, &p, *input, samples, seed)?;
            sum += gaussian_nll(&pred, targets)?;
        }
        scores.push(sum / validation.len() as f64);
    }
    let best = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if b <= s => best,
            _ => Some((i, s)),
        })
        .ok_or_else(|| Error::NonFinite("every grid point scored NaN".into()))?;
    Ok(TuneResult {
        fisher_multiplier: grid[best.0].0,
        tau: grid[best.0].1,
        scores,
    })
}

/// Laplace view of an [`OdometryModel`]: data are window ranges of a
/// dataset, inputs whole datasets.
pub struct OdometryLaplace<'a> {
    pub model: &'a OdometryModel,
    pub beta: f64,
    /// Window-chunk size for prediction (whole sequence when `None`).
    pub chunk: Option<usize>,
}

impl OdometryLaplace<'_> {
    fn store_with(&self, params: &[f64]) -> Result<ParamStore> {
        let mut store = self.model.store.clone();
        store.set_flat_trainable(params)?;
        Ok(store)
    }

    /// Mask selecting parameters whose names start with any of `prefixes`.
    pub fn stochastic_mask(&self, prefixes: &[&str]) -> Vec<bool> {
        self.model
            .store
            .flat_owner_names()
            .iter()
            .map(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .collect()
    }
}

impl<'a> LaplaceModel for OdometryLaplace<'a> {
    type Datum = (&'a SequenceDataset, Range<usize>);
    type Input = SequenceDataset;

    fn map_params(&self) -> Vec<f64> {
        self.model.store.flat_trainable()
    }

    fn loss_grad(&self, params: &[f64], datum: &Self::Datum) -> Result<Vec<f64>> {
        let store = self.store_with(params)?;
        let (ds, range) = datum;
        let (_, g) = self.model.loss_and_grad_with(&store, ds, std::slice::from_ref(range), self.beta)?;
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} for the segment starting at window {}",
                range.start
            )));
        }
        Ok(g)
    }

    fn predict(&self, params: &[f64], input: &SequenceDataset) -> Result<Vec<Vec<f64>>> {
        let store = self.store_with(params)?;
        let est = self.model.predict_trajectory_with(&store, input, self.chunk)?;
        Ok(est.relative.iter().map(|p| p.to_array().to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, PathShape, SynthConfig};
    use crate::fusion::FusionKind;
    use crate::model::{training_segments, ModelConfig, TrainConfig};

    /// `y = w x + e`, loss `(y - w x)^2 / (2 sigma^2)`.
    struct Linear {
        w: f64,
        sigma: f64,
    }

    impl LaplaceModel for Linear {
        type Datum = (f64, f64);
        type Input = [f64];

        fn map_params(&self) -> Vec<f64> {
            vec![self.w]
        }

        fn loss_grad(&self, p: &[f64], &(x, y): &(f64, f64)) -> Result<Vec<f64>> {
            Ok(vec![-x * (y - p[0] * x) / self.sigma.powi(2)])
        }

        fn predict(&self, p: &[f64], xs: &[f64]) -> Result<Vec<Vec<f64>>> {
            Ok(xs.iter().map(|x| vec![p[0] * x]).collect())
        }
    }

    /// Each x appears with residuals +sigma and -sigma, so least squares
    /// recovers w exactly and N * F equals sum x^2 / sigma^2.
    fn linear_toy() -> (Linear, Vec<(f64, f64)>, f64) {
        let (w, sigma) = (1.5, 0.3);
        let xs = [0.2, -0.7, 1.1, 0.5, -1.3, 0.9];
        let data: Vec<(f64, f64)> = xs.iter().flat_map(|&x| [(x, w * x + sigma), (x, w * x - sigma)]).collect();
        let sum_x2: f64 = data.iter().map(|(x, _)| x * x).sum();
        (Linear { w, sigma }, data, sum_x2 / (sigma * sigma))
    }

    #[test]
    fn linear_fisher_matches_closed_form() {
        let (model, data, likelihood_precision) = linear_toy();
        let f = fit_fisher(&model, &data).unwrap();
        assert!((f[0] * data.len() as f64 - likelihood_precision).abs() < 1e-9 * likelihood_precision);
        let tau = 2.0;
        let post = PosteriorApprox::fit(&model, &data, None, tau).unwrap();
        let exact = 1.0 / (likelihood_precision + tau);
        assert!((post.variance()[0] - exact).abs() < 0.01 * exact);
    }

    #[test]
    fn linear_predictive_matches_push_through() {
        let (model, data, _) = linear_toy();
        let post = PosteriorApprox::fit(&model, &data, None, 2.0).unwrap();
        let xs = [0.5, -2.0];
        let pred = predict_bayesian(&model, &post, &xs[..], 1000, 11).unwrap();
        for (x, v) in xs.iter().zip(&pred.variance) {
            let analytic = x * x / post.precision()[0];
            assert!((v[0] - analytic).abs() < 0.1 * analytic, "{} vs {analytic}", v[0]);
        }
    }

    #[test]
    fn zero_residual_gives_zero_fisher() {
        let model = Linear { w: 2.0, sigma: 1.0 };
        let data: Vec<_> = [0.3, -1.0, 4.0].iter().map(|&x| (x, 2.0 * x)).collect();
        assert!(fit_fisher(&model, &data).unwrap().iter().all(|f| *f == 0.0));
    }

    #[test]
    fn regularize_examples() {
        let p = regularize(&[0.0, 0.0], 3.0, 4.0).unwrap();
        assert_eq!(p, vec![4.0, 4.0]);
        let post = PosteriorApprox::new(vec![0.0; 2], vec![0.0; 2], 3.0, 4.0).unwrap();
        assert!(post.variance().iter().all(|v| v.sqrt() == 0.5));
        let f = [0.25, 1.75, 0.0];
        let a = regularize(&f, 2.0, 0.5).unwrap();
        let b = regularize(&f, 4.0, 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * (x - 0.5), y - 0.5);
        }
        for (n, tau) in [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0), (1.0, f64::NAN)] {
            assert!(matches!(regularize(&f, n, tau), Err(Error::Config(_))));
        }
    }

    #[test]
    fn sampling_statistics() {
        let post = PosteriorApprox::new(vec![1.0, -2.0], vec![1.0, 9.0], 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<Vec<f64>> = (0..10000).map(|_| post.sample(&mut rng)).collect();
        for (i, v) in post.variance().iter().enumerate() {
            let mean = draws.iter().map(|d| d[i]).sum::<f64>() / 10000.0;
            let var = draws.iter().map(|d| (d[i] - mean).powi(2)).sum::<f64>() / 9999.0;
            assert!((var - v).abs() < 0.05 * v, "{var} vs {v}");
        }
        assert_eq!(post.sample_indexed(3, 7), post.sample_indexed(3, 7));
        let tight = post.with_hyper(1.0, 1e12).unwrap();
        for (s, m) in tight.sample_indexed(0, 0).iter().zip(&tight.theta_map) {
            assert!((s - m).abs() < 1e-5);
        }
    }

    #[test]
    fn fixed_parameters_are_not_sampled() {
        let post = PosteriorApprox::new(vec![1.0, 2.0], vec![0.0; 2], 1.0, 1.0)
            .unwrap()
            .with_stochastic(vec![false, true])
            .unwrap();
        let s = post.sample_indexed(0, 0);
        assert_eq!(s[0], 1.0);
        assert_ne!(s[1], 2.0);
        assert_eq!(post.variance()[0], 0.0);
    }

    #[test]
    fn duplicate_samples_have_zero_variance() {
        let (model, data, _) = linear_toy();
        let post = PosteriorApprox::fit(&model, &data, None, 1.0).unwrap();
        let s = post.sample_indexed(9, 0);
        let pred = predict_with_samples(&model, &[s.clone(), s], &[1.0, 2.0][..]).unwrap();
        assert!(pred.variance.iter().flatten().all(|v| *v == 0.0));
        assert!(predict_with_samples(&model, &[post.theta_map.clone()], &[1.0][..]).is_err());
        assert!(predict_bayesian(&model, &post, &[1.0][..], 1, 0).is_err());
    }

    #[test]
    fn tuning_picks_the_best_grid_point() {
        let (model, data, lp) = linear_toy();
        let tau = 2.0;
        let post = PosteriorApprox::fit(&model, &data, None, tau).unwrap();
        let exact = 1.0 / (lp + tau);
        // Validation errors whose scaled spread equals the analytic variance.
        let xs: Vec<f64> = (1..=20).map(|i| i as f64 / 10.0).collect();
        let targets: Vec<Vec<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| vec![model.w * x + if i % 2 == 0 { 1.0 } else { -1.0 } * x * exact.sqrt()])
            .collect();
        let n = data.len() as f64;
        let grid: Vec<(f64, f64)> = [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|k| (k * n, tau)).collect();
        let r = tune_hyperparams(&model, &post, &[(&xs[..], targets.clone())], &grid, 1000, 1).unwrap();
        assert_eq!(r.fisher_multiplier, n);
        let single = tune_hyperparams(&model, &post, &[(&xs[..], targets.clone())], &grid[3..4], 10, 1).unwrap();
        assert_eq!((single.fisher_multiplier, single.tau), grid[3]);

        // A near-degenerate point with non-zero error is never chosen.
        let grid = [(n, 1e300), (n, tau)];
        let r = tune_hyperparams(&model, &post, &[(&xs[..], targets)], &grid, 30, 1).unwrap();
        assert_eq!(r.tau, tau);
        assert!(r.scores[0] > r.scores[1]);
    }

    fn trained_toy() -> (OdometryModel, SequenceDataset) {
        let ds = synthesize(
            &SynthConfig {
                shape: PathShape::FigureEight,
                num_windows: 12,
                ..SynthConfig::default()
            },
            0,
        )
        .unwrap();
        let model = OdometryModel::new(ModelConfig::toy(FusionKind::Mha), 2).unwrap();
        (model, ds)
    }

    #[test]
    fn odometry_fisher_is_finite_nonnegative_and_order_free() {
        let (model, ds) = trained_toy();
        let lap = OdometryLaplace { model: &model, beta: 10.0, chunk: None };
        let cfg = TrainConfig::default();
        let ranges = training_segments(std::slice::from_ref(&ds), &cfg).unwrap().remove(0);
        let mut data: Vec<_> = ranges.iter().map(|r| (&ds, r.clone())).collect();
        let f = fit_fisher(&lap, &data).unwrap();
        assert!(f.iter().all(|v| *v >= 0.0 && v.is_finite()));
        assert!(f.iter().any(|v| *v > 0.0));
        data.reverse();
        let g = fit_fisher(&lap, &data).unwrap();
        for (a, b) in f.iter().zip(&g) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn odometry_predictive_limits_and_reproducibility() {
        let (model, ds) = trained_toy();
        let lap = OdometryLaplace { model: &model, beta: 10.0, chunk: Some(5) };
        let ranges = [0..6, 6..12];
        let data: Vec<_> = ranges.iter().map(|r| (&ds, r.clone())).collect();
        let post = PosteriorApprox::fit(&lap, &data, None, 1e12).unwrap();
        let map = model.predict_trajectory(&ds, Some(5)).unwrap();
        let pred = predict_bayesian(&lap, &post, &ds, DEFAULT_SAMPLES, 4).unwrap();
        for (m, p) in pred.mean_poses().iter().zip(&map.relative) {
            for (a, b) in m.to_array().iter().zip(p.to_array()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        assert!(pred.variance.iter().flatten().all(|v| *v < 1e-8));
        assert_eq!(pred, predict_bayesian(&lap, &post, &ds, DEFAULT_SAMPLES, 4).unwrap());

        // Larger tau never increases the mean variance.
        let loose = post.with_hyper(post.fisher_multiplier, 1e2).unwrap();
        let tighter = post.with_hyper(post.fisher_multiplier, 1e4).unwrap();
        let a = predict_bayesian(&lap, &loose, &ds, 8, 1).unwrap().mean_variance();
        let b = predict_bayesian(&lap, &tighter, &ds, 8, 1).unwrap().mean_variance();
        assert!(b <= a, "{b} > {a}");
    }

    #[test]
    fn stochastic_mask_selects_by_prefix() {
        let (model, _) = trained_toy();
        let lap = OdometryLaplace { model: &model, beta: 1.0, chunk: None };
        let mask = lap.stochastic_mask(&["fusion.", "head."]);
        let names = model.store.flat_owner_names();
        assert!(mask.iter().any(|m| *m) && mask.iter().any(|m| !*m));
        for (m, n) in mask.iter().zip(names) {
            assert_eq!(*m, n.starts_with("fusion.") || n.starts_with("head."));
        }
    }
}
