//! LDP-SGD for convex empirical risk minimization.
//!
//! Each client clips its gradient to norm `L`, rounds it to a random sign
//! of `L x/|x|` so the expectation is preserved, and reports one uniformly
//! random unit vector `v` oriented by that sign, with the orientation
//! flipped by binary randomized response. The server averages the shuffled
//! reports, rescales by [`debias_constant`], takes a projected step and
//! repeats for `T` epochs.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::accounting::{self, AccountingError, CentralGuarantee, SgdPrivacyQuery};
use crate::shuffler::{ShufflerError, ShufflerInstance};
use crate::RandomStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SgdError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("epsilon = {0} makes the debias constant degenerate")]
    Degenerate(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shuffler(#[from] ShufflerError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
}

pub type Result<T> = std::result::Result<T, SgdError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub d: usize,
    /// Clipping norm `L`.
    pub lipschitz: f64,
    /// Radius `|C|_2` of the l2 ball the iterate is projected onto.
    pub diameter: f64,
    pub epsilon_le: f64,
    pub epochs: u32,
    /// Independent reports per respondent per epoch.
    pub tau: u32,
    pub seed: u64,
    /// Central delta reported by [`SgdConfig::privacy`].
    pub delta: f64,
    /// Fixed step size instead of `|C| / (G sqrt(t))`.
    pub learning_rate: Option<f64>,
    /// Sample this many examples per epoch instead of the full batch.
    /// Privacy is still accounted as full-batch.
    pub batch_size: Option<usize>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SgdError::InvalidConfig(m.into()));
        if self.d == 0 {
            return bad("d must be positive");
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return bad("lipschitz must be positive");
        }
        if !(self.diameter > 0.0 && self.diameter.is_finite()) {
            return bad("diameter must be positive");
        }
        if !(self.epsilon_le >= 0.0) {
            return bad("epsilon_le must be >= 0");
        }
        if self.epochs == 0 || self.tau == 0 {
            return bad("epochs and tau must be at least 1");
        }
        if matches!(self.learning_rate, Some(r) if !(r > 0.0)) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Central guarantee for `n` respondents. Each of the `T * tau` report
    /// rounds is shuffled and amplified separately, then composed.
    pub fn privacy(&self, n: u64) -> Result<CentralGuarantee> {
        Ok(accounting::ldp_sgd_central(&SgdPrivacyQuery {
            epsilon_per_epoch: self.epsilon_le,
            epochs: self.epochs as u64 * self.tau as u64,
            n,
            delta: self.delta,
        })?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub direction: Vec<f64>,
}

impl GradientReport {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.direction.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(ShufflerError::Format(format!(
                "gradient payload of {} bytes is not a multiple of 8",
                bytes.len()
            ))
            .into());
        }
        Ok(Self {
            direction: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: f64,
}

pub trait Loss: Sync {
    fn value(&self, theta: &[f64], ex: &Example) -> f64;
    fn gradient(&self, theta: &[f64], ex: &Example) -> Vec<f64>;
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Logistic loss `ln(1 + exp(-y <theta, x>))` with labels in `{-1, +1}`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Logistic;

impl Loss for Logistic {
    fn value(&self, theta: &[f64], ex: &Example) -> f64 {
        let m = -ex.label * dot(theta, &ex.features);
        m.max(0.0) + (-m.abs()).exp().ln_1p()
    }

    fn gradient(&self, theta: &[f64], ex: &Example) -> Vec<f64> {
        let m = -ex.label * dot(theta, &ex.features);
        let s = 1.0 / (1.0 + (-m).exp());
        ex.features.iter().map(|x| -ex.label * s * x).collect()
    }
}

/// Squared loss `(<theta, x> - y)^2 / 2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LeastSquares;

impl Loss for LeastSquares {
    fn value(&self, theta: &[f64], ex: &Example) -> f64 {
        let r = dot(theta, &ex.features) - ex.label;
        0.5 * r * r
    }

    fn gradient(&self, theta: &[f64], ex: &Example) -> Vec<f64> {
        let r = dot(theta, &ex.features) - ex.label;
        ex.features.iter().map(|x| r * x).collect()
    }
}

pub fn clip_gradient(g: &[f64], lipschitz: f64) -> Vec<f64> {
    let n = norm(g);
    if n <= lipschitz {
        return g.to_vec();
    }
    let s = lipschitz / n;
    g.iter().map(|x| x * s).collect()
}

pub fn project_ball(theta: &[f64], diameter: f64) -> Vec<f64> {
    let n = norm(theta);
    if n <= diameter {
        return theta.to_vec();
    }
    let s = diameter / n;
    theta.iter().map(|x| x * s).collect()
}

/// Uniform point on the unit sphere in `R^d` from normalized Gaussians.
pub fn sample_unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `L sqrt(pi) Gamma((d+1)/2) / Gamma(d/2) * (e^eps + 1)/(e^eps - 1)`:
/// the inverse of `E[<report, clip(g)>] / |clip(g)|^2 * L` so that
/// `debias_constant * E[report] = clip(g)`.
pub fn debias_constant(d: usize, epsilon_le: f64, lipschitz: f64) -> Result<f64> {
    if d == 0 {
        return Err(SgdError::InvalidConfig("d must be positive".into()));
    }
    if !(epsilon_le > 0.0) {
        return Err(SgdError::Degenerate(epsilon_le));
    }
    let d = d as f64;
    let gamma_ratio = (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp();
    Ok(lipschitz * std::f64::consts::PI.sqrt() * gamma_ratio / (epsilon_le / 2.0).tanh())
}

/// One client report for gradient `g`.
pub fn ldp_sgd_client<R: Rng + ?Sized>(g: &[f64], cfg: &SgdConfig, rng: &mut R) -> GradientReport {
    let x = clip_gradient(g, cfg.lipschitz);
    let nx = norm(&x);
    let (axis, keep_prob) = if nx > 0.0 {
        (
            x.iter().map(|xi| xi / nx).collect::<Vec<_>>(),
            (0.5 + nx / (2.0 * cfg.lipschitz)).min(1.0),
        )
    } else {
        (sample_unit_sphere(cfg.d, rng), 0.5)
    };
    let z_sign = if rng.random_bool(keep_prob) { 1.0 } else { -1.0 };
    let v = sample_unit_sphere(cfg.d, rng);
    let mut sign = if z_sign * dot(&axis, &v) >= 0.0 { 1.0 } else { -1.0 };
    if rng.random_bool(1.0 / (1.0 + cfg.epsilon_le.exp())) {
        sign = -sign;
    }
    GradientReport {
        direction: v.into_iter().map(|x| sign * x).collect(),
    }
}

/// `tau` independent client reports of the same gradient.
pub fn report_fragment_batch<R: Rng + ?Sized>(g: &[f64], cfg: &SgdConfig, rng: &mut R) -> Vec<GradientReport> {
    (0..cfg.tau).map(|_| ldp_sgd_client(g, cfg, rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdOutcome {
    pub model: ModelState,
    /// `None` when the configuration is outside the accounting's validity
    /// window (for example a very large per-epoch epsilon).
    pub privacy: Option<CentralGuarantee>,
}

fn step_size(cfg: &SgdConfig, debias: f64, reports: usize, t: u32) -> f64 {
    if let Some(r) = cfg.learning_rate {
        return r;
    }
    let second_moment = cfg.lipschitz.powi(2) + debias.powi(2) / reports as f64;
    cfg.diameter / (second_moment.sqrt() * (t as f64).sqrt())
}

fn epoch_batch(n: usize, cfg: &SgdConfig, rng: &mut RandomStream) -> Vec<usize> {
    match cfg.batch_size {
        Some(b) if b < n => {
            let mut idx = rand::seq::index::sample(rng, n, b).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Run `cfg.epochs` epochs of LDP-SGD from `theta = 0`. Every epoch the
/// clients' reports pass through a shuffler before the server sees them.
pub fn ldp_sgd_server(data: &[Example], loss: &dyn Loss, cfg: &SgdConfig) -> Result<SgdOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SgdError::EmptyDataset);
    }
    if let Some(ex) = data.iter().find(|ex| ex.features.len() != cfg.d) {
        return Err(SgdError::InvalidConfig(format!(
            "example has {} features, config d = {}",
            ex.features.len(),
            cfg.d
        )));
    }
    let debias = debias_constant(cfg.d, cfg.epsilon_le, cfg.lipschitz)?;
    let root = RandomStream::new(cfg.seed, 0);
    let mut theta = vec![0.0; cfg.d];
    for t in 1..=cfg.epochs {
        let epoch = root.derive(t as u64);
        let mut sampler = epoch.derive(u64::MAX);
        let batch = epoch_batch(data.len(), cfg, &mut sampler);
        let reports: Vec<Vec<GradientReport>> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = epoch.derive(i as u64);
                report_fragment_batch(&loss.gradient(&theta, &data[i]), cfg, &mut rng)
            })
            .collect();
        let mut shuffler = ShufflerInstance::new(0, 1);
        for (&i, rs) in batch.iter().zip(&reports) {
            for r in rs {
                shuffler.ingest(0, r.to_bytes(), i as u64)?;
            }
        }
        let released = shuffler.release_shuffled(0, &mut sampler)?;
        let m = released.len();
        let mut g = vec![0.0; cfg.d];
        for payload in released.reports() {
            for (acc, x) in g.iter_mut().zip(GradientReport::from_bytes(payload)?.direction) {
                *acc += x;
            }
        }
        let eta = step_size(cfg, debias, m, t);
        let scale = debias / m as f64;
        let stepped: Vec<f64> = theta.iter().zip(&g).map(|(th, gi)| th - eta * scale * gi).collect();
        theta = project_ball(&stepped, cfg.diameter);
    }
    Ok(SgdOutcome {
        model: ModelState { theta },
        privacy: cfg.privacy(data.len() as u64).ok(),
    })
}

/// Non-private projected gradient descent with the same clipping, step
/// schedule and projection, using exact mean clipped gradients.
pub fn nonprivate_gd(data: &[Example], loss: &dyn Loss, cfg: &SgdConfig) -> Result<ModelState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SgdError::EmptyDataset);
    }
    let mut theta = vec![0.0; cfg.d];
    for t in 1..=cfg.epochs {
        let mut g = vec![0.0; cfg.d];
        for ex in data {
            for (acc, x) in g
                .iter_mut()
                .zip(clip_gradient(&loss.gradient(&theta, ex), cfg.lipschitz))
            {
                *acc += x;
            }
        }
        let eta = cfg
            .learning_rate
            .unwrap_or(cfg.diameter / (cfg.lipschitz * (t as f64).sqrt()));
        let stepped: Vec<f64> = theta
            .iter()
            .zip(&g)
            .map(|(th, gi)| th - eta * gi / data.len() as f64)
            .collect();
        theta = project_ball(&stepped, cfg.diameter);
    }
    Ok(ModelState { theta })
}

pub fn empirical_loss(theta: &[f64], data: &[Example], loss: &dyn Loss) -> f64 {
    data.iter().map(|ex| loss.value(theta, ex)).sum::<f64>() / data.len() as f64
}

/// Fraction of examples with `sign(<theta, x>) = label`.
pub fn accuracy(theta: &[f64], data: &[Example]) -> f64 {
    let correct = data
        .iter()
        .filter(|ex| (dot(theta, &ex.features) >= 0.0) == (ex.label > 0.0))
        .count();
    correct as f64 / data.len() as f64
}

/// Linearly separable points in `R^d`: standard normal features labelled
/// by the sign of `<w, x>` for a random unit `w`, dropping points within
/// `margin` of the boundary.
pub fn separable_dataset<R: Rng + ?Sized>(n: usize, d: usize, margin: f64, rng: &mut R) -> Vec<Example> {
    let w = sample_unit_sphere(d, rng);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let s = dot(&w, &x);
        if s.abs() >= margin {
            out.push(Example {
                features: x,
                label: if s > 0.0 { 1.0 } else { -1.0 },
            });
        }
    }
    out
}
