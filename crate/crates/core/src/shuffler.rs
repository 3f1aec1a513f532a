//! Simulated shuffler instances and crowd thresholding.
//!
//! A [`ShufflerInstance`] buffers opaque reports per channel together with
//! the id of the respondent that sent them. Release drops those ids and
//! either permutes the payloads uniformly ([`ShufflerInstance::release_shuffled`])
//! or sums bit-vector payloads ([`ShufflerInstance::release_summed`]).
//!
//! Bit-vector payloads are `u32` little-endian arity followed by the bits
//! packed least-significant first. Batches on the wire are sequences of
//! `u32` little-endian length-prefixed payloads.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::randomizers::Destination;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShufflerError {
    #[error("instance {instance} has no channel {channel}")]
    UnknownChannel { instance: usize, channel: usize },
    #[error("no shuffler instance {0}")]
    UnknownInstance(usize),
    #[error("channel {channel} of instance {instance} is empty")]
    EmptyRelease { instance: usize, channel: usize },
    #[error("malformed payload: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, ShufflerError>;

pub fn encode_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + bits.len().div_ceil(8));
    out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
    for chunk in bits.chunks(8) {
        let byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
        out.push(byte);
    }
    out
}

pub fn decode_bits(payload: &[u8]) -> Result<Vec<bool>> {
    let header: [u8; 4] = payload
        .get(..4)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| ShufflerError::Format("payload shorter than its arity header".into()))?;
    let arity = u32::from_le_bytes(header) as usize;
    let body = &payload[4..];
    if body.len() != arity.div_ceil(8) {
        return Err(ShufflerError::Format(format!(
            "arity {arity} needs {} bytes, found {}",
            arity.div_ceil(8),
            body.len()
        )));
    }
    Ok((0..arity).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn encode_batch(payloads: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in payloads {
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        out.extend_from_slice(p);
    }
    out
}

pub fn decode_batch(mut bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(ShufflerError::Format("truncated length prefix".into()));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let rest = &bytes[4..];
        if rest.len() < len {
            return Err(ShufflerError::Format(format!(
                "payload of {len} bytes truncated to {}",
                rest.len()
            )));
        }
        out.push(rest[..len].to_vec());
        bytes = &rest[len..];
    }
    Ok(out)
}

/// Coordinate-wise sum of bit-vector payloads of one arity.
pub fn sum_bit_payloads<'a, I>(payloads: I) -> Result<Vec<u64>>
where
    I: IntoIterator<Item = &'a Vec<u8>>,
{
    let mut sums: Option<Vec<u64>> = None;
    for p in payloads {
        let bits = decode_bits(p)?;
        let acc = sums.get_or_insert_with(|| vec![0; bits.len()]);
        if acc.len() != bits.len() {
            return Err(ShufflerError::Format(format!(
                "mixed arity: {} and {}",
                acc.len(),
                bits.len()
            )));
        }
        for (s, b) in acc.iter_mut().zip(bits) {
            *s += b as u64;
        }
    }
    sums.ok_or_else(|| ShufflerError::InvalidArgument("no payloads to sum".into()))
}

/// Reports as released: payloads only, with no respondent ids or arrival
/// order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnonymousBatch {
    reports: Vec<Vec<u8>>,
}

impl AnonymousBatch {
    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn reports(&self) -> &[Vec<u8>] {
        &self.reports
    }

    pub fn into_reports(self) -> Vec<Vec<u8>> {
        self.reports
    }

    pub fn sum_bits(&self) -> Result<Vec<u64>> {
        sum_bit_payloads(&self.reports)
    }
}

#[derive(Clone, Debug)]
struct Buffered {
    #[allow(dead_code)]
    respondent: u64,
    payload: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct ShufflerInstance {
    id: usize,
    channels: BTreeMap<usize, Vec<Buffered>>,
}

impl ShufflerInstance {
    /// An instance with channels `0..channels`.
    pub fn new(id: usize, channels: usize) -> Self {
        Self {
            id,
            channels: (0..channels).map(|c| (c, Vec::new())).collect(),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn declare_channel(&mut self, channel: usize) {
        self.channels.entry(channel).or_default();
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.channels.keys().copied()
    }

    pub fn buffered(&self, channel: usize) -> Result<usize> {
        Ok(self.channel(channel)?.len())
    }

    fn channel(&self, channel: usize) -> Result<&Vec<Buffered>> {
        self.channels.get(&channel).ok_or(ShufflerError::UnknownChannel {
            instance: self.id,
            channel,
        })
    }

    fn channel_mut(&mut self, channel: usize) -> Result<&mut Vec<Buffered>> {
        let id = self.id;
        self.channels
            .get_mut(&channel)
            .ok_or(ShufflerError::UnknownChannel { instance: id, channel })
    }

    pub fn ingest(&mut self, channel: usize, payload: Vec<u8>, respondent: u64) -> Result<()> {
        self.channel_mut(channel)?.push(Buffered { respondent, payload });
        Ok(())
    }

    fn take(&mut self, channel: usize) -> Result<Vec<Buffered>> {
        let id = self.id;
        let buf = self.channel_mut(channel)?;
        if buf.is_empty() {
            return Err(ShufflerError::EmptyRelease { instance: id, channel });
        }
        Ok(std::mem::take(buf))
    }

    /// Release the channel's payloads in a uniformly random order and
    /// clear the buffer.
    pub fn release_shuffled<R: Rng + ?Sized>(&mut self, channel: usize, rng: &mut R) -> Result<AnonymousBatch> {
        let mut reports: Vec<Vec<u8>> = self.take(channel)?.into_iter().map(|b| b.payload).collect();
        reports.shuffle(rng);
        Ok(AnonymousBatch { reports })
    }

    /// Release only the coordinate-wise sum of the channel's bit-vector
    /// payloads and clear the buffer. The buffer is kept on a format error.
    pub fn release_summed(&mut self, channel: usize) -> Result<Vec<u64>> {
        let sums = sum_bit_payloads(self.channel(channel)?.iter().map(|b| &b.payload));
        match sums {
            Ok(s) => {
                self.take(channel)?;
                Ok(s)
            }
            Err(ShufflerError::InvalidArgument(_)) => Err(ShufflerError::EmptyRelease {
                instance: self.id,
                channel,
            }),
            Err(e) => Err(e),
        }
    }
}

/// `K` independent shuffler instances addressed by [`Destination`].
#[derive(Clone, Debug)]
pub struct ShufflerPool {
    instances: Vec<ShufflerInstance>,
}

impl ShufflerPool {
    pub fn new(instances: usize, channels_per_instance: usize) -> Self {
        Self {
            instances: (0..instances)
                .map(|i| ShufflerInstance::new(i, channels_per_instance))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance_mut(&mut self, id: usize) -> Result<&mut ShufflerInstance> {
        self.instances.get_mut(id).ok_or(ShufflerError::UnknownInstance(id))
    }

    pub fn route(&mut self, dest: Destination, payload: Vec<u8>, respondent: u64) -> Result<()> {
        self.instance_mut(dest.instance)?
            .ingest(dest.channel, payload, respondent)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrowdPartition {
    pub crowd_id: u64,
    pub reports: Vec<Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrowdConfig {
    pub epsilon_cr: f64,
    pub delta_cr: f64,
}

impl CrowdConfig {
    pub fn new(epsilon_cr: f64, delta_cr: f64) -> Result<Self> {
        if !(epsilon_cr > 0.0 && epsilon_cr.is_finite()) {
            return Err(ShufflerError::InvalidArgument(format!(
                "epsilon_cr must be positive, got {epsilon_cr}"
            )));
        }
        if !(delta_cr > 0.0 && delta_cr < 1.0) {
            return Err(ShufflerError::InvalidArgument(format!(
                "delta_cr must lie in (0, 1), got {delta_cr}"
            )));
        }
        Ok(Self { epsilon_cr, delta_cr })
    }

    pub fn laplace_scale(&self) -> f64 {
        2.0 / self.epsilon_cr
    }

    /// The deterministic downward shift `(2/eps) ln(2/delta)`.
    pub fn shift(&self) -> f64 {
        self.laplace_scale() * (2.0 / self.delta_cr).ln()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeletionOutcome {
    Released(Vec<CrowdPartition>),
    Aborted,
}

/// Laplace(0, scale) by inverse CDF of `u` in `(-1/2, 1/2)`.
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    loop {
        let x = laplace_from_uniform(rng.random::<f64>() - 0.5, scale);
        if x.is_finite() {
            return x;
        }
    }
}

/// Number of reports to delete from a crowd of `n` given the Laplace draw,
/// or `None` when the noisy count exceeds `n` and the batch must abort.
pub fn deletion_count(n: usize, cfg: &CrowdConfig, noise: f64) -> Option<usize> {
    let excess = noise - cfg.shift();
    let n_hat = (n as f64 + excess).max(0.0);
    if n_hat > n as f64 {
        return None;
    }
    if n_hat == 0.0 {
        return Some(n);
    }
    Some(((-excess).ceil() as usize).min(n))
}

/// Remove `d` reports chosen uniformly without replacement; survivors keep
/// their relative order.
pub fn delete_uniformly<R: Rng + ?Sized>(reports: Vec<Vec<u8>>, d: usize, rng: &mut R) -> Vec<Vec<u8>> {
    let n = reports.len();
    let mut drop = vec![false; n];
    for i in index::sample(rng, n, d.min(n)) {
        drop[i] = true;
    }
    reports
        .into_iter()
        .zip(drop)
        .filter_map(|(r, gone)| (!gone).then_some(r))
        .collect()
}

/// Randomized report deletion: per crowd, draw a noisy count
/// `max(n + Lap(2/eps) - (2/eps) ln(2/delta), 0)` and delete that many
/// fewer reports, chosen uniformly. If any noisy count exceeds its crowd,
/// nothing is released.
pub fn randomized_report_deletion<R: Rng + ?Sized>(
    partitions: Vec<CrowdPartition>,
    cfg: &CrowdConfig,
    rng: &mut R,
) -> Result<DeletionOutcome> {
    let mut counts = Vec::with_capacity(partitions.len());
    for part in &partitions {
        if part.reports.is_empty() {
            return Err(ShufflerError::InvalidArgument(format!(
                "crowd {} is empty",
                part.crowd_id
            )));
        }
        match deletion_count(part.reports.len(), cfg, sample_laplace(cfg.laplace_scale(), rng)) {
            Some(d) => counts.push(d),
            None => return Ok(DeletionOutcome::Aborted),
        }
    }
    let released = partitions
        .into_iter()
        .zip(counts)
        .map(|(part, d)| CrowdPartition {
            crowd_id: part.crowd_id,
            reports: delete_uniformly(part.reports, d, rng),
        })
        .collect();
    Ok(DeletionOutcome::Released(released))
}
