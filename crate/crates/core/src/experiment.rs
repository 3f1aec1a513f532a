//! End-to-end experiment runner.
//!
//! A run loads one dataset, then resolves and simulates a list of rows. Each
//! row fixes a mechanism, a privacy target (central or local) and an
//! accounting mode. Outputs in the run directory:
//!
//! - `results.csv`: one line per row, preceded by a schema version comment.
//! - `timings.csv`: wall time per row, kept apart so `results.csv` is
//!   byte-identical across runs with the same seed.
//! - `recon_<row>.pgm` and `truth.pgm` for image datasets.
//! - `run-manifest.toml`: the resolved configuration.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{self, AccountingError, AccountingMode, AmplificationQuery, CentralGuarantee, FragmentPlan};
use crate::data::{self, DataError, PowerLawSpec};
use crate::estimation::{self, EstimationError, HistogramEstimate};
use crate::randomizers::{self, RandomizerError};
use crate::shuffler::{self, ShufflerError, ShufflerPool};
use crate::RandomStream;

pub const RESULTS_SCHEMA: &str = "# fragshuffle results v1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("manifest encoding error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Randomizer(#[from] RandomizerError),
    #[error(transparent)]
    Shuffler(#[from] ShufflerError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Trusted curator adding Gaussian noise to the true counts.
    GaussianBaseline,
    AttrFrag,
    AttrAndReportFrag,
    /// Each respondent reports one uniformly sampled attribute.
    SampledAttr,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::GaussianBaseline => "gaussian_baseline",
            Mechanism::AttrFrag => "attr_frag",
            Mechanism::AttrAndReportFrag => "attr_and_report_frag",
            Mechanism::SampledAttr => "sampled_attr",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// Draw each attribute's sum from its exact distribution.
    #[default]
    Aggregate,
    /// Randomize every report and route it through the shuffler pool.
    PerReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Pgm {
        path: PathBuf,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    SyntheticImage {
        width: usize,
        height: usize,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    Powerlaw {
        domain_size: usize,
        total_n: u64,
        #[serde(default)]
        exponent: Option<f64>,
        /// `[[index, mass], ...]`; omitted means the synthetic default.
        #[serde(default)]
        heavy_hitters: Option<Vec<(usize, f64)>>,
    },
    Csv {
        path: PathBuf,
    },
}

fn unit_scale() -> f64 {
    1.0
}

fn default_trials() -> u32 {
    1
}

fn default_topk() -> usize {
    10
}

fn default_mode() -> AccountingMode {
    AccountingMode::BinaryExact
}

/// One experiment row. Exactly one of `epsilon_central` and
/// `epsilon_local` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub mechanism: Mechanism,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_central: Option<f64>,
    /// For report fragmenting this is the backstop budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_local: Option<f64>,
    /// Report fragmenting only; chosen by variance matching when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_fragment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<u32>,
    pub delta: f64,
    #[serde(default = "default_mode")]
    pub accounting: AccountingMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default = "default_topk")]
    pub topk: usize,
    /// Shuffler instances for per-report simulation; 0 gives every report
    /// stream its own instance.
    #[serde(default)]
    pub instances: usize,
    #[serde(default)]
    pub simulation: SimulationMode,
    /// Clamp estimated frequencies to `[0, 1]` before scoring.
    #[serde(default)]
    pub clamp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub rows: Vec<RowSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative dataset paths are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.dataset {
            DatasetSource::Pgm { path, .. } | DatasetSource::Csv { path } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.rows.is_empty() {
            return Err(config_err("at least one [[rows]] entry is required"));
        }
        for (i, row) in self.rows.iter().enumerate() {
            row.validate().map_err(|e| config_err(format!("row {i}: {e}")))?;
        }
        Ok(())
    }
}

impl RowSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match (self.epsilon_central, self.epsilon_local) {
            (Some(_), Some(_)) => return Err("set only one of epsilon_central and epsilon_local".into()),
            (None, None) => return Err("set epsilon_central or epsilon_local".into()),
            _ => {}
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        for e in [self.epsilon_central, self.epsilon_local, self.epsilon_fragment]
            .into_iter()
            .flatten()
        {
            if e.is_nan() || e < 0.0 {
                return Err(format!("epsilons must be >= 0, got {e}"));
            }
        }
        match self.mechanism {
            Mechanism::AttrAndReportFrag if self.tau.unwrap_or(0) == 0 => {
                return Err("attr_and_report_frag needs tau >= 1".into());
            }
            Mechanism::GaussianBaseline if self.epsilon_local.is_some() => {
                return Err("gaussian_baseline takes epsilon_central only".into());
            }
            _ => {}
        }
        if self.tau.is_some() && self.mechanism != Mechanism::AttrAndReportFrag {
            return Err("tau applies to attr_and_report_frag only".into());
        }
        if self.epsilon_fragment.is_some() && self.mechanism != Mechanism::AttrAndReportFrag {
            return Err("epsilon_fragment applies to attr_and_report_frag only".into());
        }
        Ok(())
    }
}

/// A loaded population: `counts[j]` respondents hold value `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub counts: Vec<u64>,
    pub n: u64,
    /// `(width, height, scale)` when the domain is an image grid.
    pub grid: Option<(usize, usize, f64)>,
}

impl Population {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn truth(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.n as f64).collect()
    }

    /// Value held by each respondent, in index order.
    pub fn respondents(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| std::iter::repeat_n(j, c as usize))
    }
}

pub fn load_population(source: &DatasetSource, rng: &mut RandomStream) -> Result<Population> {
    let pop = match source {
        DatasetSource::Pgm { path, scale } => {
            let g = data::load_grid_from_pgm(path, *scale)?;
            Population {
                n: g.total_n,
                grid: Some((g.width, g.height, *scale)),
                counts: g.counts,
            }
        }
        DatasetSource::SyntheticImage { width, height, scale } => {
            let g = data::GridDataset::from_image(&data::synthetic_image(*width, *height), *scale)?;
            Population {
                n: g.total_n,
                grid: Some((g.width, g.height, *scale)),
                counts: g.counts,
            }
        }
        DatasetSource::Powerlaw {
            domain_size,
            total_n,
            exponent,
            heavy_hitters,
        } => {
            let mut spec = PowerLawSpec::synthetic(*domain_size, *total_n);
            if let Some(e) = exponent {
                spec.exponent = *e;
            }
            if let Some(h) = heavy_hitters {
                spec.heavy_hitters = h.clone();
            }
            let counts = data::sample_powerlaw(&spec, rng)?;
            Population {
                n: counts.iter().sum(),
                counts,
                grid: None,
            }
        }
        DatasetSource::Csv { path } => {
            let counts = data::read_counts_csv(path)?;
            Population {
                n: counts.iter().sum(),
                counts,
                grid: None,
            }
        }
    };
    if pop.n == 0 {
        return Err(config_err("dataset has no respondents"));
    }
    Ok(pop)
}

/// Choose the fragment budget whose averaged fragment variance matches the
/// backstop's: `V(eps_f) = tau V(eps_b)` with `V(e) = e^e / (e^e - 1)^2`,
/// i.e. `sinh(eps_f / 2) = sinh(eps_b / 2) / sqrt(tau)`.
pub fn variance_matched_fragment_epsilon(epsilon_backstop: f64, tau: u32) -> f64 {
    let tau = tau.max(1) as f64;
    if epsilon_backstop > 700.0 {
        return epsilon_backstop - tau.ln();
    }
    2.0 * ((epsilon_backstop / 2.0).sinh() / tau.sqrt()).asinh()
}

/// The privacy columns of a row, computed without simulating it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyColumns {
    /// `None` when no central bound applies.
    pub epsilon_c: Option<f64>,
    pub delta: f64,
    pub epsilon_l_inf: f64,
    pub epsilon_l1: f64,
    pub epsilon_b: Option<f64>,
    pub epsilon_f: Option<f64>,
    pub tau: u32,
    /// Gaussian baseline noise, in respondent counts.
    pub sigma: Option<f64>,
}

fn amplified(epsilon_local: f64, n: u64, delta: f64, mode: AccountingMode) -> Option<f64> {
    AmplificationQuery::new(epsilon_local, n, delta)
        .and_then(|q| accounting::amplify(&q, mode))
        .ok()
        .map(|g| g.epsilon)
}

/// Resolve a row's budgets: solve local budgets for central targets and
/// amplify local ones.
pub fn report_privacy(row: &RowSpec, n: u64) -> Result<PrivacyColumns> {
    row.validate().map_err(config_err)?;
    let delta = row.delta;
    let solve = |target: f64| -> Result<f64> {
        let g = CentralGuarantee::new(target, delta)?;
        Ok(accounting::solve_local_for_central(&g, n, row.accounting)?.epsilon)
    };
    let cols = match row.mechanism {
        Mechanism::GaussianBaseline => {
            let eps = row.epsilon_central.expect("validated");
            let sigma = if eps.is_infinite() {
                0.0
            } else {
                accounting::gaussian_sigma(eps, delta, 1.0)?
            };
            PrivacyColumns {
                epsilon_c: Some(eps),
                delta,
                epsilon_l_inf: f64::INFINITY,
                epsilon_l1: f64::INFINITY,
                epsilon_b: None,
                epsilon_f: None,
                tau: 1,
                sigma: Some(sigma),
            }
        }
        Mechanism::AttrFrag | Mechanism::SampledAttr => {
            let eps = match row.epsilon_central {
                Some(t) => solve(t)?,
                None => row.epsilon_local.expect("validated"),
            };
            let epsilon_c = match row.mechanism {
                Mechanism::AttrFrag => amplified(eps, n, delta, row.accounting),
                _ => None,
            };
            PrivacyColumns {
                epsilon_c,
                delta,
                epsilon_l_inf: eps,
                epsilon_l1: eps,
                epsilon_b: None,
                epsilon_f: None,
                tau: 1,
                sigma: None,
            }
        }
        Mechanism::AttrAndReportFrag => {
            let tau = row.tau.expect("validated");
            let eps_b = match row.epsilon_central {
                Some(t) => solve(t)?,
                None => row.epsilon_local.expect("validated"),
            };
            let eps_f = row
                .epsilon_fragment
                .unwrap_or_else(|| variance_matched_fragment_epsilon(eps_b, tau));
            let plan = FragmentPlan::all_exposed(tau, eps_b, eps_f)?;
            let epsilon_c = accounting::report_frag_central_with(&plan, n, delta, row.accounting)
                .ok()
                .map(|g| g.epsilon);
            PrivacyColumns {
                epsilon_c,
                delta,
                epsilon_l_inf: accounting::report_frag_local(&plan)?.epsilon,
                epsilon_l1: accounting::report_frag_local(&plan.with_exposed(1)?)?.epsilon,
                epsilon_b: Some(eps_b),
                epsilon_f: Some(eps_f),
                tau,
                sigma: None,
            }
        }
    };
    Ok(cols)
}

/// Expected messages a respondent sends under sparse (set-bit) encoding.
pub fn messages_per_respondent(mechanism: Mechanism, cols: &PrivacyColumns, k: usize) -> f64 {
    match mechanism {
        Mechanism::GaussianBaseline | Mechanism::SampledAttr => 1.0,
        Mechanism::AttrFrag => randomizers::expected_set_bits(k, cols.epsilon_l_inf),
        Mechanism::AttrAndReportFrag => {
            let p_b = accounting::flip_probability(cols.epsilon_b.unwrap_or(0.0)).unwrap_or(0.5);
            let p_f = accounting::flip_probability(cols.epsilon_f.unwrap_or(0.0)).unwrap_or(0.5);
            let one = (1.0 - p_b) * (1.0 - p_f) + p_b * p_f;
            let zero = p_b * (1.0 - p_f) + (1.0 - p_b) * p_f;
            cols.tau as f64 * (one + (k as f64 - 1.0) * zero)
        }
    }
}

fn instance_count(configured: usize, streams: usize) -> usize {
    if configured == 0 {
        streams
    } else {
        configured
    }
}

// Sum every channel of a pool back into stream order: stream s lives on
// instance s mod K, channel s / K.
fn drain_stream_sums(pool: &mut ShufflerPool, streams: usize) -> Result<Vec<u64>> {
    let k_inst = pool.len();
    let mut sums = vec![0u64; streams];
    for (s, slot) in sums.iter_mut().enumerate() {
        let dest = randomizers::destination_for(s, k_inst);
        let inst = pool.instance_mut(dest.instance)?;
        if inst.buffered(dest.channel)? > 0 {
            *slot = inst.release_summed(dest.channel)?[0];
        }
    }
    Ok(sums)
}

fn per_report_krappor(pop: &Population, epsilon: f64, instances: usize, rng: &mut RandomStream) -> Result<Vec<u64>> {
    let k = pop.k();
    let k_inst = instance_count(instances, k);
    let mut pool = ShufflerPool::new(k_inst, k.div_ceil(k_inst));
    for (id, v) in pop.respondents().enumerate() {
        let x = randomizers::encode_one_hot(v, k)?;
        for r in randomizers::att_frag_krappor(&x, epsilon, k_inst, rng)? {
            pool.route(r.destination, shuffler::encode_bits(&[r.value]), id as u64)?;
        }
    }
    drain_stream_sums(&mut pool, k)
}

fn per_report_fragments(
    pop: &Population,
    plan: &FragmentPlan,
    instances: usize,
    rng: &mut RandomStream,
) -> Result<Vec<Vec<u64>>> {
    let k = pop.k();
    let streams = k * plan.tau as usize;
    let k_inst = instance_count(instances, streams);
    let mut pool = ShufflerPool::new(k_inst, streams.div_ceil(k_inst));
    for (id, v) in pop.respondents().enumerate() {
        let x = randomizers::encode_one_hot(v, k)?;
        for f in randomizers::att_and_report_frag(&x, plan, k_inst, rng)? {
            pool.route(f.inner.destination, shuffler::encode_bits(&[f.inner.value]), id as u64)?;
        }
    }
    let flat = drain_stream_sums(&mut pool, streams)?;
    Ok(flat.chunks(k).map(|c| c.to_vec()).collect())
}

fn sampled_sums(
    pop: &Population,
    epsilon: f64,
    instances: usize,
    rng: &mut RandomStream,
) -> Result<(Vec<u64>, Vec<u64>)> {
    let k = pop.k();
    let k_inst = instance_count(instances, k);
    let mut pool = ShufflerPool::new(k_inst, k.div_ceil(k_inst));
    for (id, v) in pop.respondents().enumerate() {
        let x = randomizers::encode_one_hot(v, k)?;
        let r = randomizers::sampled_attribute(&x, epsilon, k_inst, rng)?;
        pool.route(r.destination, shuffler::encode_bits(&[r.value]), id as u64)?;
    }
    let mut sums = vec![0u64; k];
    let mut reports = vec![0u64; k];
    for j in 0..k {
        let dest = randomizers::destination_for(j, k_inst);
        let inst = pool.instance_mut(dest.instance)?;
        if inst.buffered(dest.channel)? > 0 {
            let batch = inst.release_shuffled(dest.channel, rng)?;
            reports[j] = batch.len() as u64;
            sums[j] = batch.sum_bits()?[0];
        }
    }
    Ok((sums, reports))
}

/// Simulate one trial of a resolved row and return the estimate.
pub fn simulate_row(
    pop: &Population,
    mechanism: Mechanism,
    cols: &PrivacyColumns,
    cfg: &ExperimentConfig,
    rng: &mut RandomStream,
) -> Result<HistogramEstimate> {
    let n = pop.n;
    match mechanism {
        Mechanism::GaussianBaseline => {
            let sigma = cols.sigma.unwrap_or(0.0);
            let h_hat = if sigma == 0.0 {
                pop.truth()
            } else {
                let noise = Normal::new(0.0, sigma).map_err(|e| config_err(e.to_string()))?;
                pop.counts
                    .iter()
                    .map(|&c| (c as f64 + noise.sample(rng)) / n as f64)
                    .collect()
            };
            Ok(HistogramEstimate {
                h_hat,
                n,
                epsilon_used: cols.epsilon_c.unwrap_or(f64::INFINITY),
            })
        }
        Mechanism::AttrFrag => {
            let eps = cols.epsilon_l_inf;
            let sums = match cfg.simulation {
                SimulationMode::Aggregate => randomizers::aggregate_krappor_sums(&pop.counts, eps, rng)?,
                SimulationMode::PerReport => per_report_krappor(pop, eps, cfg.instances, rng)?,
            };
            Ok(estimation::estimate_histogram(&sums, n, eps)?)
        }
        Mechanism::AttrAndReportFrag => {
            let plan = FragmentPlan::all_exposed(
                cols.tau,
                cols.epsilon_b.expect("resolved"),
                cols.epsilon_f.expect("resolved"),
            )?;
            let rows = match cfg.simulation {
                SimulationMode::Aggregate => randomizers::aggregate_fragment_sums(&pop.counts, &plan, rng)?,
                SimulationMode::PerReport => per_report_fragments(pop, &plan, cfg.instances, rng)?,
            };
            Ok(estimation::estimate_from_fragments(&rows, n, &plan)?)
        }
        Mechanism::SampledAttr => {
            let (sums, reports) = sampled_sums(pop, cols.epsilon_l_inf, cfg.instances, rng)?;
            Ok(estimation::estimate_sampled(&sums, &reports, n, cols.epsilon_l_inf)?)
        }
    }
}

/// Mean and sample standard deviation (`None` for a single value).
fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, None);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub row: usize,
    pub mechanism: Mechanism,
    pub accounting: AccountingMode,
    /// `None` when the row ran; otherwise why it could not.
    pub infeasible: Option<String>,
    pub privacy: Option<PrivacyColumns>,
    pub delta: f64,
    pub n: u64,
    pub k: usize,
    pub trials: u32,
    /// RMSE in luminosity units for image datasets, counts otherwise.
    pub rmse: Option<(f64, Option<f64>)>,
    /// l-infinity error in frequency units.
    pub linf: Option<(f64, Option<f64>)>,
    pub topk_recall: Option<(f64, Option<f64>)>,
    pub messages_per_respondent: Option<f64>,
    pub wall_time: f64,
    /// Trial-0 estimate, kept for reconstruction images.
    pub estimate: Option<HistogramEstimate>,
}

const RESULT_HEADER: [&str; 23] = [
    "row",
    "mechanism",
    "accounting",
    "status",
    "epsilon_c",
    "delta",
    "epsilon_l_inf",
    "epsilon_l1",
    "epsilon_b",
    "epsilon_f",
    "tau",
    "sigma",
    "n",
    "k",
    "trials",
    "rmse",
    "rmse_std",
    "linf",
    "linf_std",
    "topk_recall",
    "topk_recall_std",
    "messages_per_respondent",
    "note",
];

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn accounting_name(mode: AccountingMode) -> &'static str {
    match mode {
        AccountingMode::BinaryExact => "binary_exact",
        AccountingMode::BinarySimple => "binary_simple",
        AccountingMode::Generic => "generic",
    }
}

impl ResultRow {
    fn record(&self) -> Vec<String> {
        let p = self.privacy.as_ref();
        let split = |m: Option<(f64, Option<f64>)>| (cell(m.map(|x| x.0)), cell(m.and_then(|x| x.1)));
        let (rmse, rmse_sd) = split(self.rmse);
        let (linf, linf_sd) = split(self.linf);
        let (topk, topk_sd) = split(self.topk_recall);
        vec![
            self.row.to_string(),
            self.mechanism.name().into(),
            accounting_name(self.accounting).into(),
            if self.infeasible.is_some() { "infeasible" } else { "ok" }.into(),
            cell(p.and_then(|p| p.epsilon_c)),
            self.delta.to_string(),
            cell(p.map(|p| p.epsilon_l_inf)),
            cell(p.map(|p| p.epsilon_l1)),
            cell(p.and_then(|p| p.epsilon_b)),
            cell(p.and_then(|p| p.epsilon_f)),
            p.map(|p| p.tau.to_string()).unwrap_or_default(),
            cell(p.and_then(|p| p.sigma)),
            self.n.to_string(),
            self.k.to_string(),
            self.trials.to_string(),
            rmse,
            rmse_sd,
            linf,
            linf_sd,
            topk,
            topk_sd,
            cell(self.messages_per_respondent),
            self.infeasible.clone().unwrap_or_default(),
        ]
    }
}

/// Resolve and simulate one row over all trials.
pub fn run_row(pop: &Population, cfg: &ExperimentConfig, row: usize) -> Result<ResultRow> {
    let spec = &cfg.rows[row];
    let started = Instant::now();
    let mut out = ResultRow {
        row,
        mechanism: spec.mechanism,
        accounting: spec.accounting,
        infeasible: None,
        privacy: None,
        delta: spec.delta,
        n: pop.n,
        k: pop.k(),
        trials: cfg.trials,
        rmse: None,
        linf: None,
        topk_recall: None,
        messages_per_respondent: None,
        wall_time: 0.0,
        estimate: None,
    };
    let cols = match report_privacy(spec, pop.n) {
        Ok(c) => c,
        Err(ExperimentError::Accounting(e)) => {
            out.infeasible = Some(e.to_string());
            out.wall_time = started.elapsed().as_secs_f64();
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    out.privacy = Some(cols);
    out.messages_per_respondent = Some(messages_per_respondent(spec.mechanism, &cols, pop.k()));
    let truth = pop.truth();
    let unit = match pop.grid {
        Some((_, _, scale)) => pop.n as f64 / scale,
        None => pop.n as f64,
    };
    let truth_units: Vec<f64> = truth.iter().map(|t| t * unit).collect();
    let root = RandomStream::new(cfg.seed, 0).derive(1 + row as u64);
    let trials: Vec<(HistogramEstimate, estimation::ErrorReport)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = root.derive(t as u64);
            let mut est = simulate_row(pop, spec.mechanism, &cols, cfg, &mut rng)?;
            if cfg.clamp {
                for h in &mut est.h_hat {
                    *h = h.clamp(0.0, 1.0);
                }
            }
            let mut report = estimation::error_metrics(&est.h_hat, &truth, cfg.topk)?;
            let est_units: Vec<f64> = est.h_hat.iter().map(|h| h * unit).collect();
            report.rmse = estimation::error_metrics(&est_units, &truth_units, cfg.topk)?.rmse;
            Ok((est, report))
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&estimation::ErrorReport) -> f64| mean_std(&trials.iter().map(|(_, r)| f(r)).collect::<Vec<_>>());
    out.rmse = Some(pick(|r| r.rmse));
    out.linf = Some(pick(|r| r.linf));
    out.topk_recall = Some(pick(|r| r.topk_recall));
    out.estimate = trials.into_iter().next().map(|(e, _)| e);
    out.wall_time = started.elapsed().as_secs_f64();
    Ok(out)
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{RESULTS_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

fn write_timings_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "wall_time_s"])?;
    for r in rows {
        w.write_record([r.row.to_string(), r.wall_time.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    threads: usize,
    out_dir: String,
    config: &'a ExperimentConfig,
}

/// Run every row of `cfg`, writing artifacts to `out_dir`. `threads = None`
/// uses rayon's default pool size.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, threads: Option<usize>) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build()?;
    let mut data_rng = RandomStream::new(cfg.seed, 0).derive(0);
    let pop = load_population(&cfg.dataset, &mut data_rng)?;
    let rows: Vec<ResultRow> = pool.install(|| {
        (0..cfg.rows.len())
            .into_par_iter()
            .map(|i| run_row(&pop, cfg, i))
            .collect::<Result<_>>()
    })?;

    write_results_csv(&rows, &out_dir.join("results.csv"))?;
    write_timings_csv(&rows, &out_dir.join("timings.csv"))?;
    if let Some((w, h, scale)) = pop.grid {
        let truth: Vec<f64> = pop.counts.iter().map(|&c| c as f64).collect();
        data::write_pgm(&data::counts_to_image(&truth, w, h, scale)?, &out_dir.join("truth.pgm"))?;
        for r in &rows {
            if let Some(est) = &r.estimate {
                data::write_estimate_to_pgm(
                    &est.h_hat,
                    est.n,
                    w,
                    h,
                    &out_dir.join(format!("recon_{}.pgm", r.row)),
                    scale,
                )?;
            }
        }
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        threads: pool.current_num_threads(),
        out_dir: out_dir.display().to_string(),
        config: cfg,
    };
    fs::write(out_dir.join("run-manifest.toml"), toml::to_string_pretty(&manifest)?)?;
    Ok(rows)
}

/// Sample `trials` independent sums vectors for a k-RAPPOR population.
/// Used to compare the two simulation modes.
pub fn krappor_sums_samples(
    pop: &Population,
    epsilon: f64,
    mode: SimulationMode,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    (0..trials)
        .map(|t| {
            let mut rng = RandomStream::new(seed, t as u64);
            match mode {
                SimulationMode::Aggregate => Ok(randomizers::aggregate_krappor_sums(&pop.counts, epsilon, &mut rng)?),
                SimulationMode::PerReport => per_report_krappor(pop, epsilon, 0, &mut rng),
            }
        })
        .collect()
}
