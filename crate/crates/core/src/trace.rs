//! Expert-load traces: the `batch × layer × expert` token-count tensor that
//! every planning step consumes.
//!
//! Two on-disk encodings are supported. The binary `.crft` layout is
//!
//! ```text
//! "CRFT" | version: u32 = 1 | B: u32 | L: u32 | E: u32 | B·L·E × u64 counts
//! ```
//!
//! with all integers little-endian and counts in batch-major, then layer, then
//! expert order. The `.json` layout is an object with `batches`, `layers`,
//! `experts` and a nested `counts[b][l][e]` array.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"CRFT";
pub const TRACE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Offline expert-load distribution, shape `B × L × E`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadTrace {
    batches: usize,
    layers: usize,
    experts: usize,
    counts: Vec<u64>,
}

impl LoadTrace {
    pub fn new(batches: usize, layers: usize, experts: usize, counts: Vec<u64>) -> Result<Self> {
        if batches == 0 || layers == 0 || experts == 0 {
            return Err(Error::invalid(format!(
                "trace dimensions must be positive, got {batches}x{layers}x{experts}"
            )));
        }
        let expected = batches
            .checked_mul(layers)
            .and_then(|v| v.checked_mul(experts))
            .ok_or_else(|| Error::invalid("trace dimensions overflow"))?;
        if counts.len() != expected {
            return Err(Error::DimensionMismatch {
                batches,
                layers,
                experts,
                found: counts.len(),
            });
        }
        Ok(Self {
            batches,
            layers,
            experts,
            counts,
        })
    }

    /// Builds a trace from nested `[batch][layer][expert]` vectors.
    pub fn from_nested(nested: &[Vec<Vec<u64>>]) -> Result<Self> {
        let batches = nested.len();
        let layers = nested.first().map_or(0, Vec::len);
        let experts = nested.first().and_then(|b| b.first()).map_or(0, Vec::len);
        let mut counts = Vec::with_capacity(batches * layers * experts);
        for batch in nested {
            if batch.len() != layers {
                return Err(Error::invalid(
                    "ragged trace: layer count differs between batches",
                ));
            }
            for slice in batch {
                if slice.len() != experts {
                    return Err(Error::invalid(
                        "ragged trace: expert count differs between layers",
                    ));
                }
                counts.extend_from_slice(slice);
            }
        }
        Self::new(batches, layers, experts, counts)
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, batch: usize, layer: usize, expert: usize) -> u64 {
        self.counts[(batch * self.layers + layer) * self.experts + expert]
    }

    /// Per-expert counts of one `(batch, layer)` slice.
    pub fn slice(&self, batch: usize, layer: usize) -> &[u64] {
        let start = (batch * self.layers + layer) * self.experts;
        &self.counts[start..start + self.experts]
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<u64>>> {
        (0..self.batches)
            .map(|b| {
                (0..self.layers)
                    .map(|l| self.slice(b, l).to_vec())
                    .collect()
            })
            .collect()
    }

    /// Sums the batch dimension. Sums are exact up to `u64::MAX`; larger
    /// totals are reported as [`Error::Overflow`].
    pub fn aggregate(&self) -> Result<LayerLoadMatrix> {
        let mut sums = vec![0u64; self.layers * self.experts];
        for b in 0..self.batches {
            for l in 0..self.layers {
                for (e, &c) in self.slice(b, l).iter().enumerate() {
                    let cell = &mut sums[l * self.experts + e];
                    *cell = cell.checked_add(c).ok_or(Error::Overflow {
                        layer: l,
                        expert: e,
                    })?;
                }
            }
        }
        Ok(LayerLoadMatrix {
            layers: self.layers,
            experts: self.experts,
            sums,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.counts.len());
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        for dim in [self.batches, self.layers, self.experts] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::MalformedHeader(format!(
                "header needs {HEADER_LEN} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != TRACE_MAGIC {
            return Err(Error::MalformedHeader(format!(
                "bad magic {:?}",
                &bytes[..4]
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != TRACE_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let (batches, layers, experts) = (word(8) as usize, word(12) as usize, word(16) as usize);
        if batches == 0 || layers == 0 || experts == 0 {
            return Err(Error::MalformedHeader(format!(
                "zero dimension in {batches}x{layers}x{experts}"
            )));
        }
        let n = batches
            .checked_mul(layers)
            .and_then(|v| v.checked_mul(experts))
            .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        let expected = n * 8;
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() != expected {
            return Err(Error::DimensionMismatch {
                batches,
                layers,
                experts,
                found: payload.len() / 8,
            });
        }
        let counts = payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(batches, layers, experts, counts)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TraceJson {
            batches: self.batches,
            layers: self.layers,
            experts: self.experts,
            counts: self.to_nested(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TraceJson = serde_json::from_str(text)?;
        let flat: Vec<u64> = doc.counts.iter().flatten().flatten().copied().collect();
        let shape_ok = doc.counts.len() == doc.batches
            && doc
                .counts
                .iter()
                .all(|b| b.len() == doc.layers && b.iter().all(|s| s.len() == doc.experts));
        if !shape_ok {
            return Err(Error::DimensionMismatch {
                batches: doc.batches,
                layers: doc.layers,
                experts: doc.experts,
                found: flat.len(),
            });
        }
        Self::new(doc.batches, doc.layers, doc.experts, flat)
    }

    /// SHA-256 of the binary encoding, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct TraceJson {
    batches: usize,
    layers: usize,
    experts: usize,
    counts: Vec<Vec<Vec<u64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Binary,
    Json,
}

impl TraceFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("crft") => Ok(TraceFormat::Binary),
            Some("json") => Ok(TraceFormat::Json),
            _ => Err(Error::UnknownFormat(path.to_path_buf())),
        }
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<LoadTrace> {
    let path = path.as_ref();
    match TraceFormat::from_path(path)? {
        TraceFormat::Binary => LoadTrace::from_bytes(&fs::read(path)?),
        TraceFormat::Json => LoadTrace::from_json(&fs::read_to_string(path)?),
    }
}

pub fn save_trace(trace: &LoadTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match TraceFormat::from_path(path)? {
        TraceFormat::Binary => fs::write(path, trace.to_bytes())?,
        TraceFormat::Json => fs::write(path, trace.to_json()?)?,
    }
    Ok(())
}

/// Batch-summed loads, shape `L × E`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLoadMatrix {
    layers: usize,
    experts: usize,
    sums: Vec<u64>,
}

impl LayerLoadMatrix {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn layer(&self, layer: usize) -> &[u64] {
        &self.sums[layer * self.experts..(layer + 1) * self.experts]
    }
}

/// Parameters of the synthetic Zipfian router-load generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfConfig {
    pub layers: usize,
    pub experts: usize,
    pub batches: usize,
    /// Zipf exponent; `0` gives a uniform distribution.
    pub exponent: f64,
    pub tokens_per_batch: u64,
    pub topk: usize,
    pub seed: u64,
}

/// Generates a seeded synthetic trace.
///
/// Each layer gets its own random permutation of expert ranks, fixed across
/// batches, so that hot experts differ between layers. Every `(batch, layer)`
/// slice draws `tokens_per_batch · topk` activations from a multinomial whose
/// rank-`i` probability is proportional to `1 / (i + 1)^s`.
pub fn generate_zipfian(cfg: &ZipfConfig) -> Result<LoadTrace> {
    if cfg.layers == 0 || cfg.experts == 0 || cfg.batches == 0 {
        return Err(Error::invalid(
            "layers, experts and batches must be positive",
        ));
    }
    if cfg.tokens_per_batch == 0 || cfg.topk == 0 {
        return Err(Error::invalid("tokens_per_batch and topk must be positive"));
    }
    if cfg.topk > cfg.experts {
        return Err(Error::invalid(format!(
            "topk {} exceeds expert count {}",
            cfg.topk, cfg.experts
        )));
    }
    if !cfg.exponent.is_finite() || cfg.exponent < 0.0 {
        return Err(Error::invalid(
            "zipf exponent must be finite and non-negative",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = (0..cfg.experts)
        .map(|i| ((i + 1) as f64).powf(-cfg.exponent))
        .collect();

    // rank -> expert id, per layer
    let permutations: Vec<Vec<usize>> = (0..cfg.layers)
        .map(|_| {
            let mut p: Vec<usize> = (0..cfg.experts).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    let activations = cfg
        .tokens_per_batch
        .checked_mul(cfg.topk as u64)
        .ok_or_else(|| Error::invalid("tokens_per_batch * topk overflows"))?;

    let mut counts = vec![0u64; cfg.batches * cfg.layers * cfg.experts];
    let mut ranked = vec![0u64; cfg.experts];
    for b in 0..cfg.batches {
        for (l, perm) in permutations.iter().enumerate() {
            multinomial(&mut rng, activations, &weights, &mut ranked);
            let base = (b * cfg.layers + l) * cfg.experts;
            for (rank, &expert) in perm.iter().enumerate() {
                counts[base + expert] = ranked[rank];
            }
        }
    }
    LoadTrace::new(cfg.batches, cfg.layers, cfg.experts, counts)
}

/// Multinomial draw via sequential conditional binomials.
fn multinomial(rng: &mut ChaCha8Rng, trials: u64, weights: &[f64], out: &mut [u64]) {
    let mut remaining = trials;
    let mut mass: f64 = weights.iter().sum();
    let last = weights.len() - 1;
    for (i, &w) in weights.iter().enumerate() {
        if i == last || remaining == 0 {
            out[i] = remaining;
            remaining = 0;
            continue;
        }
        let p = (w / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, p)
            .expect("probability clamped to [0, 1]")
            .sample(rng);
        out[i] = draw;
        remaining -= draw;
        mass -= w;
        if mass <= 0.0 {
            mass = f64::MIN_POSITIVE;
        }
    }
}
