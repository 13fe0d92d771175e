//! Shared-weight two-tower text encoder.
//!
//! Tokens are hashed (64-bit FNV-1a, modulo `hash_buckets`) into an embedding
//! table, mean-pooled, projected by a square matrix and L2-normalized. Query
//! and product towers are the same function. Products are encoded from their
//! title followed by `[attr:<name>] <value tokens>` for each attribute.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::catalog::Product;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::text::tokens;

pub const CHECKPOINT_FILE: &str = "encoder.ckpt.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hash_buckets: usize,
    pub temperature_init: f64,
    /// Use one temperature for both losses.
    pub tie_temperatures: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hash_buckets: 8192,
            temperature_init: 0.1,
            tie_temperatures: false,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("encoder dim must be at least 2".into()));
        }
        if self.hash_buckets < self.dim {
            return Err(Error::Config("hash_buckets must be at least dim".into()));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return Err(Error::Config("temperature_init must be positive".into()));
        }
        Ok(())
    }
}

/// FNV-1a over the token's UTF-8 bytes. Written byte-wise rather than via
/// `Hash`, which would append a terminator.
pub fn token_hash(token: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    h.finish()
}

pub fn bucket(token: &str, buckets: usize) -> usize {
    (token_hash(token) % buckets as u64) as usize
}

/// Title tokens, then a sentinel and the value tokens of each attribute.
pub fn product_text(product: &Product) -> Vec<String> {
    let mut out = tokens(&product.title);
    for (name, value) in product.attributes.iter() {
        out.push(format!("[attr:{}]", name.to_lowercase()));
        out.extend(tokens(value));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn normalized(mut v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Validation("cannot normalize a zero vector".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    dot(&a.0, &b.0)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameters shared by both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub config: EncoderConfig,
    /// `hash_buckets × dim`, row-major.
    pub table: Vec<f64>,
    /// `dim × dim`, row-major; output = projection · pooled.
    pub projection: Vec<f64>,
    pub log_sigma: f64,
    pub log_tau: f64,
}

impl TowerParams {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = substream(config.seed, Stream::EncoderInit);
        let table = (0..config.hash_buckets * d)
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        let mut projection: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.01..0.01)).collect();
        for i in 0..d {
            projection[i * d + i] += 1.0;
        }
        let log_t = config.temperature_init.ln();
        Ok(Self {
            config: config.clone(),
            table,
            projection,
            log_sigma: log_t,
            log_tau: log_t,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn tau(&self) -> f64 {
        if self.config.tie_temperatures {
            self.sigma()
        } else {
            self.log_tau.exp()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.log_sigma.is_finite()
            && self.log_tau.is_finite()
            && self.table.iter().chain(&self.projection).all(|v| v.is_finite())
    }

    fn row(&self, b: usize) -> &[f64] {
        let d = self.dim();
        &self.table[b * d..(b + 1) * d]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            table: self.table.clone(),
            projection: self.projection.clone(),
            log_sigma: self.log_sigma,
            log_tau: self.log_tau,
        };
        let body = serde_json::to_string(&ckpt)? + "\n";
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&body)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.version
            )));
        }
        ckpt.config.validate()?;
        let d = ckpt.config.dim;
        if ckpt.table.len() != ckpt.config.hash_buckets * d || ckpt.projection.len() != d * d {
            return Err(Error::Validation(format!(
                "{}: parameter shapes disagree with config",
                path.display()
            )));
        }
        let params = Self {
            config: ckpt.config,
            table: ckpt.table,
            projection: ckpt.projection,
            log_sigma: ckpt.log_sigma,
            log_tau: ckpt.log_tau,
        };
        if !params.is_finite() {
            return Err(Error::Validation("non-finite checkpoint parameters".into()));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: EncoderConfig,
    table: Vec<f64>,
    projection: Vec<f64>,
    log_sigma: f64,
    log_tau: f64,
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    buckets: Vec<usize>,
    pooled: Vec<f64>,
    norm: f64,
    pub output: EmbeddingVector,
}

pub fn embed_forward<S: AsRef<str>>(params: &TowerParams, toks: &[S]) -> Result<Forward> {
    if toks.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let d = params.dim();
    let buckets: Vec<usize> = toks
        .iter()
        .map(|t| bucket(t.as_ref(), params.config.hash_buckets))
        .collect();
    let mut pooled = vec![0.0; d];
    for &b in &buckets {
        for (acc, v) in pooled.iter_mut().zip(params.row(b)) {
            *acc += v;
        }
    }
    let n = buckets.len() as f64;
    pooled.iter_mut().for_each(|x| *x /= n);
    let z: Vec<f64> = (0..d)
        .map(|i| dot(&params.projection[i * d..(i + 1) * d], &pooled))
        .collect();
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    let output = EmbeddingVector::normalized(z)?;
    Ok(Forward {
        buckets,
        pooled,
        norm,
        output,
    })
}

pub fn embed<S: AsRef<str>>(params: &TowerParams, toks: &[S]) -> Result<EmbeddingVector> {
    Ok(embed_forward(params, toks)?.output)
}

/// Encoder parameter gradients; table rows are stored sparsely.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncoderGrads {
    pub table_rows: BTreeMap<usize, Vec<f64>>,
    pub projection: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(dim: usize) -> Self {
        Self {
            table_rows: BTreeMap::new(),
            projection: vec![0.0; dim * dim],
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        if self.projection.is_empty() {
            self.projection = vec![0.0; other.projection.len()];
        }
        for (a, b) in self.projection.iter_mut().zip(&other.projection) {
            *a += b;
        }
        for (&r, g) in &other.table_rows {
            let row = self.table_rows.entry(r).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in row.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Backpropagates `upstream` (gradient with respect to the unit output)
/// through normalization, projection, pooling and the table lookup.
pub fn embed_backward(params: &TowerParams, fwd: &Forward, upstream: &[f64]) -> EncoderGrads {
    let d = params.dim();
    let e = fwd.output.as_slice();
    let mut grads = EncoderGrads::zeros(d);
    if upstream.iter().all(|&g| g == 0.0) {
        return grads;
    }
    // d(z/|z|)/dz = (I - e eᵀ)/|z|
    let ge = dot(e, upstream);
    let gz: Vec<f64> = (0..d).map(|i| (upstream[i] - e[i] * ge) / fwd.norm).collect();
    for i in 0..d {
        for j in 0..d {
            grads.projection[i * d + j] = gz[i] * fwd.pooled[j];
        }
    }
    let n = fwd.buckets.len() as f64;
    let gh: Vec<f64> = (0..d)
        .map(|j| (0..d).map(|i| params.projection[i * d + j] * gz[i]).sum::<f64>() / n)
        .collect();
    for &b in &fwd.buckets {
        let row = grads.table_rows.entry(b).or_insert_with(|| vec![0.0; d]);
        for (a, g) in row.iter_mut().zip(&gh) {
            *a += g;
        }
    }
    grads
}
