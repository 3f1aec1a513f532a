//! On-device local randomizers.
//!
//! Respondents hold one value from an enumerated domain of size `k`, encoded
//! one-hot. Each bit is randomized independently with binary randomized
//! response and sent as its own report (attribute fragmenting). With report
//! fragmenting, each bit is first passed through a permanent backstop
//! randomizer and then re-randomized `tau` times; every fragment goes to its
//! own destination.
//!
//! Reports are emitted densely: all `k` attributes produce a report, not
//! only the set bits. [`expected_set_bits`] gives the sparse wire cost.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{flip_probability, FragmentPlan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandomizerError {
    #[error("value {value} is outside the domain [0, {k})")]
    OutOfDomain { value: usize, k: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, RandomizerError>;

/// A respondent's value as a one-hot vector of length `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OneHotRecord {
    index: usize,
    k: usize,
}

impl OneHotRecord {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bit(&self, j: usize) -> bool {
        j == self.index
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.k).map(|j| self.bit(j)).collect()
    }
}

pub fn encode_one_hot(value: usize, k: usize) -> Result<OneHotRecord> {
    if value >= k {
        return Err(RandomizerError::OutOfDomain { value, k });
    }
    Ok(OneHotRecord { index: value, k })
}

/// Recover the encoded value from a one-hot bit vector.
pub fn decode_one_hot(bits: &[bool]) -> Result<usize> {
    let mut set = bits.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j);
    match (set.next(), set.next()) {
        (Some(j), None) => Ok(j),
        _ => Err(RandomizerError::InvalidArgument("bit vector is not one-hot".into())),
    }
}

/// Shuffler instance and channel a report is addressed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Destination {
    pub instance: usize,
    pub channel: usize,
}

/// Route stream `index` over `instances` shufflers: instance `index mod K`,
/// channel `index / K`. With `K` at least the number of streams every
/// stream gets its own instance.
pub fn destination_for(index: usize, instances: usize) -> Destination {
    let instances = instances.max(1);
    Destination {
        instance: index % instances,
        channel: index / instances,
    }
}

/// Stream index of fragment `fragment_index` (1-based) of attribute `j` in a
/// domain of size `k`.
pub fn fragment_stream(fragment_index: u32, attribute: usize, k: usize) -> usize {
    (fragment_index as usize - 1) * k + attribute
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitReport {
    pub attribute: usize,
    pub value: bool,
    pub destination: Destination,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentReport {
    /// 1-based.
    pub fragment_index: u32,
    pub inner: BitReport,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(RandomizerError::InvalidArgument(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    Ok(())
}

fn flip(epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(flip_probability(epsilon).expect("epsilon checked"))
}

/// Binary randomized response: keep `b` with probability `e^eps / (1 + e^eps)`.
pub fn randomize_bit<R: Rng + ?Sized>(b: bool, epsilon: f64, rng: &mut R) -> Result<bool> {
    let p = flip(epsilon)?;
    Ok(b ^ rng.random_bool(p))
}

/// Attribute-fragmented k-RAPPOR: one independently randomized report per
/// attribute, each routed to its own destination.
pub fn att_frag_krappor<R: Rng + ?Sized>(
    x: &OneHotRecord,
    epsilon_local: f64,
    instances: usize,
    rng: &mut R,
) -> Result<Vec<BitReport>> {
    let p = flip(epsilon_local)?;
    Ok((0..x.k)
        .map(|j| BitReport {
            attribute: j,
            value: x.bit(j) ^ rng.random_bool(p),
            destination: destination_for(j, instances),
        })
        .collect())
}

/// The sampled-attribute variant: report one uniformly chosen attribute at
/// the full budget instead of all `k`.
pub fn sampled_attribute<R: Rng + ?Sized>(
    x: &OneHotRecord,
    epsilon_local: f64,
    instances: usize,
    rng: &mut R,
) -> Result<BitReport> {
    let p = flip(epsilon_local)?;
    let j = rng.random_range(0..x.k);
    Ok(BitReport {
        attribute: j,
        value: x.bit(j) ^ rng.random_bool(p),
        destination: destination_for(j, instances),
    })
}

/// Backstop bits drawn once for a respondent and kept for the whole
/// experiment (permanent randomized response). Every fragment is a fresh
/// re-randomization of these bits, never of the raw input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermanentBackstop {
    bits: Vec<bool>,
}

impl PermanentBackstop {
    pub fn draw<R: Rng + ?Sized>(x: &OneHotRecord, epsilon_backstop: f64, rng: &mut R) -> Result<Self> {
        let p = flip(epsilon_backstop)?;
        Ok(Self {
            bits: (0..x.k).map(|j| x.bit(j) ^ rng.random_bool(p)).collect(),
        })
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Emit `tau` fragments of every attribute, fragment-major: all `k`
    /// reports of fragment 1, then fragment 2, and so on.
    pub fn fragments<R: Rng + ?Sized>(
        &self,
        epsilon_fragment: f64,
        tau: u32,
        instances: usize,
        rng: &mut R,
    ) -> Result<Vec<FragmentReport>> {
        if tau == 0 {
            return Err(RandomizerError::InvalidArgument("tau must be at least 1".into()));
        }
        let p = flip(epsilon_fragment)?;
        let k = self.bits.len();
        let mut out = Vec::with_capacity(k * tau as usize);
        for i in 1..=tau {
            for (j, &b) in self.bits.iter().enumerate() {
                out.push(FragmentReport {
                    fragment_index: i,
                    inner: BitReport {
                        attribute: j,
                        value: b ^ rng.random_bool(p),
                        destination: destination_for(fragment_stream(i, j, k), instances),
                    },
                });
            }
        }
        Ok(out)
    }
}

/// Report fragmenting for a single bit: one backstop draw at
/// `epsilon_backstop`, then `tau` independent re-randomizations at
/// `epsilon_fragment`, fragment `i` routed to destination `i - 1`.
pub fn report_frag<R: Rng + ?Sized>(
    x_bit: bool,
    epsilon_backstop: f64,
    epsilon_fragment: f64,
    tau: u32,
    rng: &mut R,
) -> Result<Vec<FragmentReport>> {
    let p_b = flip(epsilon_backstop)?;
    let backstop = PermanentBackstop::from_bits(vec![x_bit ^ rng.random_bool(p_b)]);
    backstop.fragments(epsilon_fragment, tau, tau as usize, rng)
}

/// Attribute and report fragmenting: an independent [`report_frag`] per
/// attribute, `k * tau` reports in total.
pub fn att_and_report_frag<R: Rng + ?Sized>(
    x: &OneHotRecord,
    plan: &FragmentPlan,
    instances: usize,
    rng: &mut R,
) -> Result<Vec<FragmentReport>> {
    let backstop = PermanentBackstop::draw(x, plan.epsilon_backstop, rng)?;
    backstop.fragments(plan.epsilon_fragment, plan.tau, instances, rng)
}

/// Debias one randomized bit: `((e^eps + 1) r - 1) / (e^eps - 1)`.
pub fn debias_bit(r: bool, epsilon: f64) -> f64 {
    let r = if r { 1.0 } else { 0.0 };
    ((epsilon.exp() + 1.0) * r - 1.0) / epsilon.exp_m1()
}

/// Expected number of set bits a respondent sends under sparse encoding:
/// the kept true bit plus the flipped zeros.
pub fn expected_set_bits(k: usize, epsilon: f64) -> f64 {
    let p = 1.0 / (1.0 + epsilon.exp());
    (1.0 - p) + (k as f64 - 1.0) * p
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
}

fn total(counts: &[u64]) -> u64 {
    counts.iter().sum()
}

/// Per-attribute sums of k-RAPPOR reports from a population with
/// `counts[j]` holders of value `j`, drawn directly from their exact
/// distribution `Bin(c_j, 1 - p) + Bin(n - c_j, p)`.
pub fn aggregate_krappor_sums<R: Rng + ?Sized>(counts: &[u64], epsilon: f64, rng: &mut R) -> Result<Vec<u64>> {
    let p = flip(epsilon)?;
    let n = total(counts);
    Ok(counts
        .iter()
        .map(|&c| binomial(c, 1.0 - p, rng) + binomial(n - c, p, rng))
        .collect())
}

/// The `tau x k` fragment sums of attribute and report fragmenting, drawn
/// from their exact distribution: backstop set-bit totals first, then each
/// fragment row conditionally on them.
pub fn aggregate_fragment_sums<R: Rng + ?Sized>(
    counts: &[u64],
    plan: &FragmentPlan,
    rng: &mut R,
) -> Result<Vec<Vec<u64>>> {
    let p_f = flip(plan.epsilon_fragment)?;
    let n = total(counts);
    let backstop = aggregate_krappor_sums(counts, plan.epsilon_backstop, rng)?;
    Ok((0..plan.tau)
        .map(|_| {
            backstop
                .iter()
                .map(|&b| binomial(b, 1.0 - p_f, rng) + binomial(n - b, p_f, rng))
                .collect()
        })
        .collect())
}
