//! Datasets: grayscale images read as respondent counts, power-law
//! heavy-hitter populations, and CSV count files.
//!
//! An image with luminosity `l` at a cell stands for `round(scale * l)`
//! respondents holding that cell's index. Only PGM (P5 binary and P2 ASCII,
//! maxval 255) is supported.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("PGM parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDataset {
    pub width: usize,
    pub height: usize,
    /// Respondents per cell, row-major.
    pub counts: Vec<u64>,
    pub total_n: u64,
}

impl GridDataset {
    pub fn new(width: usize, height: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != width * height {
            return Err(DataError::InvalidArgument(format!(
                "{} counts for a {width}x{height} grid",
                counts.len()
            )));
        }
        let total_n = counts.iter().sum();
        Ok(Self {
            width,
            height,
            counts,
            total_n,
        })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn from_image(img: &GrayImage, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DataError::InvalidArgument(format!(
                "scale must be positive, got {scale}"
            )));
        }
        let counts = img
            .pixels
            .iter()
            .map(|&l| (scale * l as f64).round_ties_even() as u64)
            .collect();
        Self::new(img.width, img.height, counts)
    }
}

/// An 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> DataError {
        DataError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| DataError::Parse {
                offset: start,
                message: "number out of range".into(),
            })
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(cur.err("missing P5/P2 magic number")),
    };
    cur.pos = 2;
    let width = cur.number()?;
    let height = cur.number()?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(DataError::Parse {
            offset: maxval_at,
            message: format!("maxval must be 255, got {maxval}"),
        });
    }
    let len = width
        .checked_mul(height)
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let pixels = if binary {
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(cur.err("expected one whitespace byte before the raster"));
        }
        cur.pos += 1;
        let raster = &bytes[cur.pos..];
        if raster.len() < len {
            return Err(DataError::Parse {
                offset: bytes.len(),
                message: format!("raster truncated: {} of {len} bytes", raster.len()),
            });
        }
        raster[..len].to_vec()
    } else {
        let mut px = Vec::with_capacity(len);
        for _ in 0..len {
            let at = cur.pos;
            let v = cur.number()?;
            if v > 255 {
                return Err(DataError::Parse {
                    offset: at,
                    message: format!("sample {v} exceeds maxval"),
                });
            }
            px.push(v as u8);
        }
        px
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    parse_pgm(&fs::read(path)?)
}

/// Binary (P5) encoding with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_pgm(img))?)
}

pub fn load_grid_from_pgm(path: &Path, scale: f64) -> Result<GridDataset> {
    GridDataset::from_image(&read_pgm(path)?, scale)
}

/// Map per-cell respondent counts back to luminosities: divide by `scale`,
/// clamp to `[0, 255]`, round half to even.
pub fn counts_to_image(values: &[f64], width: usize, height: usize, scale: f64) -> Result<GrayImage> {
    if values.len() != width * height {
        return Err(DataError::InvalidArgument(format!(
            "{} values for a {width}x{height} grid",
            values.len()
        )));
    }
    let pixels = values
        .iter()
        .map(|&v| {
            let l = v / scale;
            if l.is_nan() {
                0
            } else {
                l.clamp(0.0, 255.0).round_ties_even() as u8
            }
        })
        .collect();
    Ok(GrayImage { width, height, pixels })
}

pub fn write_grid_to_pgm(grid: &GridDataset, path: &Path, scale: f64) -> Result<()> {
    let values: Vec<f64> = grid.counts.iter().map(|&c| c as f64).collect();
    write_pgm(&counts_to_image(&values, grid.width, grid.height, scale)?, path)
}

/// Write an estimated frequency vector as an image: frequencies are scaled
/// by `n` into counts first.
pub fn write_estimate_to_pgm(
    h_hat: &[f64],
    n: u64,
    width: usize,
    height: usize,
    path: &Path,
    scale: f64,
) -> Result<()> {
    let values: Vec<f64> = h_hat.iter().map(|h| h * n as f64).collect();
    write_pgm(&counts_to_image(&values, width, height, scale)?, path)
}

#[derive(Serialize, Deserialize)]
struct CountRow {
    index: usize,
    count: u64,
}

/// Read `index,count` rows. Missing indices below the largest one count
/// as zero.
pub fn read_counts_csv(path: &Path) -> Result<Vec<u64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut counts = Vec::new();
    for row in reader.deserialize() {
        let row: CountRow = row?;
        if row.index >= counts.len() {
            counts.resize(row.index + 1, 0);
        }
        counts[row.index] += row.count;
    }
    if counts.is_empty() {
        return Err(DataError::InvalidArgument(format!("{} has no rows", path.display())));
    }
    Ok(counts)
}

pub fn write_counts_csv(counts: &[u64], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for (index, &count) in counts.iter().enumerate() {
        writer.serialize(CountRow { index, count })?;
    }
    writer.flush()?;
    Ok(())
}

/// A mixture of point masses on chosen indices and a power-law tail
/// `p(i) ∝ (i + 1)^-exponent` over the remaining indices of a finite
/// domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawSpec {
    pub domain_size: usize,
    pub exponent: f64,
    pub heavy_hitters: Vec<(usize, f64)>,
    pub total_n: u64,
}

impl PowerLawSpec {
    /// Synthetic defaults: 100 heavy hitters spread over the domain with
    /// geometrically decaying masses totalling one half, and a tail of
    /// exponent 1.35.
    pub fn synthetic(domain_size: usize, total_n: u64) -> Self {
        let count = 100.min(domain_size / 2);
        let ratio: f64 = 0.97;
        let norm: f64 = (0..count).map(|i| ratio.powi(i as i32)).sum();
        let stride = (domain_size / count.max(1)).max(1);
        let heavy_hitters = (0..count)
            .map(|i| (i * stride + stride / 2, 0.5 * ratio.powi(i as i32) / norm))
            .collect();
        Self {
            domain_size,
            exponent: 1.35,
            heavy_hitters,
            total_n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidArgument(m));
        if self.domain_size == 0 {
            return bad("domain_size must be positive".into());
        }
        if !(self.exponent > 0.0) {
            return bad(format!("exponent must be positive, got {}", self.exponent));
        }
        let mut seen = vec![false; self.domain_size];
        let mut mass = 0.0;
        for &(i, m) in &self.heavy_hitters {
            if i >= self.domain_size {
                return bad(format!("heavy hitter {i} outside the domain"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return bad(format!("heavy hitter {i} listed twice"));
            }
            if !(m >= 0.0) {
                return bad(format!("heavy hitter {i} has negative mass"));
            }
            mass += m;
        }
        if mass > 1.0 + 1e-12 {
            return bad(format!("heavy-hitter masses sum to {mass} > 1"));
        }
        if mass < 1.0 - 1e-12 && self.heavy_hitters.len() == self.domain_size {
            return bad("no tail indices left for the remaining mass".into());
        }
        Ok(())
    }

    pub fn pmf(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut pmf = vec![0.0; self.domain_size];
        let mut heavy = vec![false; self.domain_size];
        let mut mass = 0.0;
        for &(i, m) in &self.heavy_hitters {
            pmf[i] = m;
            heavy[i] = true;
            mass += m;
        }
        let tail_mass = (1.0 - mass).max(0.0);
        let weight = |i: usize| ((i + 1) as f64).powf(-self.exponent);
        let z: f64 = (0..self.domain_size).filter(|&i| !heavy[i]).map(weight).sum();
        if z > 0.0 {
            for i in (0..self.domain_size).filter(|&i| !heavy[i]) {
                pmf[i] = tail_mass * weight(i) / z;
            }
        }
        Ok(pmf)
    }
}

/// Counts of `total_n` i.i.d. draws from `pmf`, sampled as a multinomial
/// through conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(pmf: &[f64], total_n: u64, rng: &mut R) -> Vec<u64> {
    let mut remaining_n = total_n;
    let mut remaining_mass: f64 = pmf.iter().sum();
    let last = pmf.iter().rposition(|&p| p > 0.0);
    pmf.iter()
        .enumerate()
        .map(|(i, &p)| {
            if remaining_n == 0 || p <= 0.0 {
                return 0;
            }
            let c = if Some(i) == last || p >= remaining_mass {
                remaining_n
            } else {
                Binomial::new(remaining_n, (p / remaining_mass).clamp(0.0, 1.0))
                    .expect("probability in [0, 1]")
                    .sample(rng)
            };
            remaining_n -= c;
            remaining_mass -= p;
            c
        })
        .collect()
}

pub fn sample_powerlaw<R: Rng + ?Sized>(spec: &PowerLawSpec, rng: &mut R) -> Result<Vec<u64>> {
    Ok(sample_multinomial(&spec.pmf()?, spec.total_n, rng))
}

/// A deterministic test image: smooth gradients, a bright disc and a dark
/// bar, covering most of the luminosity range.
pub fn synthetic_image(width: usize, height: usize) -> GrayImage {
    let (w, h) = (width.max(1) as f64, height.max(1) as f64);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / w, y as f64 / h);
            let mut l = 60.0 + 90.0 * u + 40.0 * (6.0 * v).sin();
            let (dx, dy) = (u - 0.65, v - 0.4);
            if dx * dx + dy * dy < 0.04 {
                l = 240.0;
            }
            if (0.15..0.25).contains(&u) && v > 0.2 {
                l = 10.0;
            }
            pixels.push(l.clamp(0.0, 255.0).round() as u8);
        }
    }
    GrayImage { width, height, pixels }
}
