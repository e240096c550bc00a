//! Measurement harness: approximation error as a function of D, and greedy
//! decoding cost of softmax-with-cache against RFA's constant-size state.
//!
//! Memory is reported as an analytic count of live cache/state scalars, not
//! process RSS.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::{rfa_cross, softmax_attention_seq, AttentionConfig};
use crate::error::{param, Result, RfaError};
use crate::feature_maps::{build_feature_map, FeatureMapKind, FeatureMapSpec, RealizedFeatureMap};
use crate::numerics::{axpy, dot, median, mix_seed, ols_slope, Matrix, RngState};

/// A CSV row type with a fixed header.
pub trait CsvRecord: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    #[serde(rename = "D")]
    pub num_features: usize,
    pub seed: u64,
    pub instance_id: usize,
    pub mse_output: f64,
    pub mse_kernel: f64,
}

impl CsvRecord for SweepRecord {
    const HEADER: &'static [&'static str] = &["D", "seed", "instance_id", "mse_output", "mse_kernel"];
}

/// Shape of the fixed instances used by [`approximation_error_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Keys per instance.
    pub m: usize,
    pub d: usize,
    pub queries: usize,
    pub instances: usize,
    pub instance_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { m: 32, d: 8, queries: 16, instances: 4, instance_seed: 0 }
    }
}

/// Unit-norm queries, keys and values.
#[derive(Debug, Clone)]
pub struct SweepInstance {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

fn unit_rows(rng: &mut RngState, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_rows(&(0..rows).map(|_| rng.unit_vec(cols)).collect::<Vec<_>>())
}

pub fn sweep_instances(config: &SweepConfig) -> Result<Vec<SweepInstance>> {
    if config.m == 0 || config.d == 0 || config.queries == 0 || config.instances == 0 {
        return param("sweep instances need m, d, queries and instances >= 1");
    }
    let mut rng = RngState::new(config.instance_seed, 11);
    (0..config.instances)
        .map(|_| {
            Ok(SweepInstance {
                queries: unit_rows(&mut rng, config.queries, config.d)?,
                keys: unit_rows(&mut rng, config.m, config.d)?,
                values: unit_rows(&mut rng, config.m, config.d)?,
            })
        })
        .collect()
}

/// Mean squared gap between `φ(x)·φ(y)` and the exact kernel over all
/// `(xs[i], ys[j])` pairs.
pub fn kernel_mse(map: &RealizedFeatureMap, xs: &Matrix, ys: &Matrix) -> Result<f64> {
    let phis_y = ys.row_iter().map(|y| map.apply(y)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for x in xs.row_iter() {
        let phi_x = map.apply(x)?;
        for (y, phi_y) in ys.row_iter().zip(&phis_y) {
            let gap = dot(&phi_x, phi_y) - map.exact_kernel(x, y)?;
            total += gap * gap;
        }
    }
    Ok(total / (xs.rows() * ys.rows()) as f64)
}

/// Map seed for cell `(D, seed)` of a sweep.
pub fn sweep_map_seed(base_seed: u64, num_features: usize, seed: u64) -> u64 {
    mix_seed(mix_seed(base_seed, num_features as u64), seed)
}

/// One record per `(D, seed, instance)`; the instances are shared by every cell.
pub fn approximation_error_sweep(ds: &[usize], seeds: u64, base_seed: u64, config: &SweepConfig) -> Result<Vec<SweepRecord>> {
    if ds.is_empty() {
        return param("sweep needs at least one D");
    }
    if ds.windows(2).any(|w| w[0] >= w[1]) || ds[0] == 0 {
        return param("sweep Ds must be positive and strictly ascending");
    }
    let instances = sweep_instances(config)?;
    let attn = AttentionConfig::rfa();
    let mut records = Vec::with_capacity(ds.len() * seeds as usize * instances.len());
    for &num_features in ds {
        for seed in 0..seeds {
            let spec = FeatureMapSpec::gaussian(config.d, num_features, sweep_map_seed(base_seed, num_features, seed));
            let map = build_feature_map(&spec)?;
            for (instance_id, inst) in instances.iter().enumerate() {
                let exact = softmax_attention_seq(&inst.queries, &inst.keys, &inst.values, &attn, false)?;
                let approx = rfa_cross(&inst.queries, &inst.keys, &inst.values, &map, &attn)?.outputs;
                let mse_output = exact
                    .data()
                    .iter()
                    .zip(approx.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / exact.data().len() as f64;
                records.push(SweepRecord {
                    num_features,
                    seed,
                    instance_id,
                    mse_output,
                    mse_kernel: kernel_mse(&map, &inst.queries, &inst.keys)?,
                });
            }
        }
    }
    Ok(records)
}

/// `(D, median mse_output)` in ascending D.
pub fn median_output_mse(records: &[SweepRecord]) -> Vec<(usize, f64)> {
    let mut ds: Vec<usize> = records.iter().map(|r| r.num_features).collect();
    ds.sort_unstable();
    ds.dedup();
    ds.into_iter()
        .map(|d| {
            let vals: Vec<f64> = records.iter().filter(|r| r.num_features == d).map(|r| r.mse_output).collect();
            (d, median(&vals))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeKind {
    Softmax,
    RfaGaussian,
    RfaArccos,
}

impl DecodeKind {
    pub const ALL: [DecodeKind; 3] = [DecodeKind::Softmax, DecodeKind::RfaGaussian, DecodeKind::RfaArccos];

    fn map_kind(self) -> Option<FeatureMapKind> {
        match self {
            DecodeKind::Softmax => None,
            DecodeKind::RfaGaussian => Some(FeatureMapKind::Gaussian),
            DecodeKind::RfaArccos => Some(FeatureMapKind::ArcCos),
        }
    }
}

impl fmt::Display for DecodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeKind::Softmax => "softmax",
            DecodeKind::RfaGaussian => "rfa-gaussian",
            DecodeKind::RfaArccos => "rfa-arccos",
        })
    }
}

impl FromStr for DecodeKind {
    type Err = RfaError;

    fn from_str(s: &str) -> Result<Self> {
        DecodeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .map_or_else(|| param(format!("unknown decode kind '{s}'")), Ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Conditional,
    Unconditional,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Conditional => "conditional",
            DecodeMode::Unconditional => "unconditional",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = RfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(DecodeMode::Conditional),
            "unconditional" => Ok(DecodeMode::Unconditional),
            other => param(format!("unknown decode mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeBenchRecord {
    pub kind: DecodeKind,
    pub mode: DecodeMode,
    pub length: usize,
    pub batch: usize,
    pub median_step_seconds: f64,
    pub total_seconds: f64,
    pub live_elements: usize,
    /// Set when the median step is within 100 ticks of the timer resolution.
    pub low_resolution: bool,
}

impl CsvRecord for DecodeBenchRecord {
    const HEADER: &'static [&'static str] = &[
        "kind",
        "mode",
        "length",
        "batch",
        "median_step_seconds",
        "total_seconds",
        "live_elements",
        "low_resolution",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Model width d.
    pub d: usize,
    /// Random features D (output width 2D for gaussian, D for arccos).
    pub num_features: usize,
    pub vocab: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { d: 64, num_features: 64, vocab: 64, warmup: 3, reps: 5, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_features == 0 || self.vocab == 0 {
            return param("decode config needs d, D and vocab >= 1");
        }
        if self.warmup < 3 || self.reps < 5 {
            return param("decode timing needs >= 3 warmup runs and >= 5 repetitions");
        }
        Ok(())
    }

    /// Width of φ for `kind` (0 for softmax).
    pub fn feature_dim(&self, kind: DecodeKind) -> usize {
        match kind.map_kind() {
            Some(FeatureMapKind::Gaussian) => 2 * self.num_features,
            Some(_) => self.num_features,
            None => 0,
        }
    }
}

/// Live cache/state scalars after `length` steps. Conditional decoding adds
/// the source-side memory of the same size.
pub fn live_elements(kind: DecodeKind, mode: DecodeMode, length: usize, batch: usize, config: &DecodeConfig) -> usize {
    let d = config.d;
    let per_side = match kind {
        DecodeKind::Softmax => batch * length * 2 * d,
        _ => {
            let f = config.feature_dim(kind);
            batch * (f * d + f)
        }
    };
    match mode {
        DecodeMode::Unconditional => per_side,
        DecodeMode::Conditional => 2 * per_side,
    }
}

/// Single-head decoder with a fixed argmax head.
struct Decoder {
    embed: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    head: Matrix,
    map: Option<RealizedFeatureMap>,
    config: AttentionConfig,
}

/// Per-sequence attention memory.
enum Memory {
    Cache { keys: Vec<f64>, values: Vec<f64>, len: usize },
    State { s: Matrix, z: Vec<f64> },
}

struct Scratch {
    phi: Vec<f64>,
    weights: Vec<f64>,
    out: Vec<f64>,
}

impl Decoder {
    fn new(kind: DecodeKind, config: &DecodeConfig) -> Result<Self> {
        let d = config.d;
        let mut rng = RngState::new(config.seed, 21);
        let scale = (1.0 / d as f64).sqrt();
        let mut mat = |rows, cols, s: f64| Matrix::new(rows, cols, rng.normal_vec(rows * cols).into_iter().map(|x| x * s).collect());
        let map = match kind.map_kind() {
            Some(map_kind) => Some(build_feature_map(&FeatureMapSpec::new(
                map_kind,
                d,
                config.num_features,
                mix_seed(config.seed, 22),
            ))?),
            None => None,
        };
        Ok(Self {
            embed: mat(config.vocab, d, 1.0)?,
            wq: mat(d, d, scale)?,
            wk: mat(d, d, scale)?,
            wv: mat(d, d, scale)?,
            head: mat(config.vocab, d, scale)?,
            map,
            config: AttentionConfig::rfa(),
        })
    }

    fn empty_memory(&self, capacity: usize) -> Memory {
        let d = self.embed.cols();
        match &self.map {
            None => Memory::Cache {
                keys: Vec::with_capacity(capacity * d),
                values: Vec::with_capacity(capacity * d),
                len: 0,
            },
            Some(map) => Memory::State {
                s: Matrix::zeros(map.output_dim(), d),
                z: vec![0.0; map.output_dim()],
            },
        }
    }

    fn scratch(&self, capacity: usize) -> Scratch {
        Scratch {
            phi: vec![0.0; self.map.as_ref().map_or(0, |m| m.output_dim())],
            weights: Vec::with_capacity(capacity),
            out: vec![0.0; self.embed.cols()],
        }
    }

    /// Appends one (key, value) pair.
    fn push(&self, mem: &mut Memory, k: &[f64], v: &[f64], scratch: &mut Scratch) -> Result<()> {
        match mem {
            Memory::Cache { keys, values, len } => {
                keys.extend_from_slice(&self.config.softmax_input(k)?);
                values.extend_from_slice(v);
                *len += 1;
            }
            Memory::State { s, z } => {
                let map = self.map.as_ref().expect("state memory implies a map");
                map.apply_into(&self.config.rfa_input(k)?, &mut scratch.phi);
                s.add_outer(1.0, &scratch.phi, v);
                axpy(1.0, &scratch.phi, z);
            }
        }
        Ok(())
    }

    /// Adds the attention readout of `q` over `mem` to `acc`.
    fn attend(&self, mem: &Memory, q: &[f64], scratch: &mut Scratch, acc: &mut [f64]) -> Result<()> {
        let d = q.len();
        match mem {
            Memory::Cache { keys, values, len } => {
                let qn = self.config.softmax_input(q)?;
                scratch.weights.clear();
                scratch.weights.extend(keys.chunks_exact(d).map(|k| dot(&qn, k) / self.config.temperature));
                let max = scratch.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for w in scratch.weights.iter_mut() {
                    *w = (*w - max).exp();
                    total += *w;
                }
                for (w, v) in scratch.weights.iter().zip(values.chunks_exact(d)).take(*len) {
                    axpy(w / total, v, acc);
                }
            }
            Memory::State { s, z } => {
                let map = self.map.as_ref().expect("state memory implies a map");
                map.apply_into(&self.config.rfa_input(q)?, &mut scratch.phi);
                crate::attention::readout(&scratch.phi, s, z, self.config.epsilon, &mut scratch.out);
                axpy(1.0, &scratch.out, acc);
            }
        }
        Ok(())
    }

    fn encode_source(&self, length: usize, offset: usize, scratch: &mut Scratch) -> Result<Memory> {
        let mut mem = self.empty_memory(length);
        let vocab = self.embed.rows();
        for i in 0..length {
            let x = self.embed.row((i * 7 + offset) % vocab);
            self.push(&mut mem, &self.wk.matvec(x), &self.wv.matvec(x), scratch)?;
        }
        Ok(mem)
    }

    /// Greedy decode of `length` tokens for each of `batch` sequences.
    /// Returns total wall time and per-step times.
    fn run(&self, mode: DecodeMode, length: usize, batch: usize) -> Result<(Duration, Vec<Duration>)> {
        let start = Instant::now();
        let mut scratch = self.scratch(length);
        let mut sources = Vec::new();
        if mode == DecodeMode::Conditional {
            for b in 0..batch {
                sources.push(self.encode_source(length, b, &mut scratch)?);
            }
        }
        let mut memories: Vec<Memory> = (0..batch).map(|_| self.empty_memory(length)).collect();
        let mut tokens: Vec<usize> = (0..batch).map(|b| b % self.embed.rows()).collect();
        let mut steps = Vec::with_capacity(length);
        let mut h = vec![0.0; self.embed.cols()];
        for _ in 0..length {
            let step_start = Instant::now();
            for b in 0..batch {
                let x = self.embed.row(tokens[b]);
                let (q, k, v) = (self.wq.matvec(x), self.wk.matvec(x), self.wv.matvec(x));
                self.push(&mut memories[b], &k, &v, &mut scratch)?;
                h.iter_mut().for_each(|e| *e = 0.0);
                self.attend(&memories[b], &q, &mut scratch, &mut h)?;
                if let Some(src) = sources.get(b) {
                    self.attend(src, &q, &mut scratch, &mut h)?;
                }
                let logits = self.head.matvec(&h);
                tokens[b] = (0..logits.len()).max_by(|&i, &j| logits[i].total_cmp(&logits[j])).unwrap_or(0);
            }
            steps.push(step_start.elapsed());
        }
        Ok((start.elapsed(), steps))
    }
}

/// Smallest observable nonzero `Instant` increment.
pub fn timer_resolution() -> Duration {
    (0..16)
        .map(|_| {
            let a = Instant::now();
            loop {
                let b = a.elapsed();
                if b > Duration::ZERO {
                    break b;
                }
            }
        })
        .min()
        .unwrap_or(Duration::from_nanos(1))
}

/// Times greedy decoding at each length: `warmup` discarded runs per length,
/// then `reps` rounds that visit every length once; each record holds the
/// median over its rounds.
pub fn decode_bench(
    kind: DecodeKind,
    mode: DecodeMode,
    lengths: &[usize],
    batch: usize,
    config: &DecodeConfig,
) -> Result<Vec<DecodeBenchRecord>> {
    config.validate()?;
    if lengths.is_empty() || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return param("decode lengths must be positive and strictly ascending");
    }
    if batch == 0 {
        return param("decode batch must be >= 1");
    }
    let decoder = Decoder::new(kind, config)?;
    let resolution = timer_resolution().as_secs_f64();
    for &length in lengths {
        for _ in 0..config.warmup {
            decoder.run(mode, length, batch)?;
        }
    }
    // round-robin over lengths so clock or scheduler drift hits every length alike
    let mut totals = vec![Vec::with_capacity(config.reps); lengths.len()];
    let mut step_medians = vec![Vec::with_capacity(config.reps); lengths.len()];
    for _ in 0..config.reps {
        for (i, &length) in lengths.iter().enumerate() {
            let (total, steps) = decoder.run(mode, length, batch)?;
            totals[i].push(total.as_secs_f64());
            step_medians[i].push(median(&steps.iter().map(Duration::as_secs_f64).collect::<Vec<_>>()));
        }
    }
    let mut records = Vec::with_capacity(lengths.len());
    for (i, &length) in lengths.iter().enumerate() {
        let median_step_seconds = median(&step_medians[i]);
        records.push(DecodeBenchRecord {
            kind,
            mode,
            length,
            batch,
            median_step_seconds,
            total_seconds: median(&totals[i]),
            live_elements: live_elements(kind, mode, length, batch, config),
            low_resolution: median_step_seconds < 100.0 * resolution,
        });
    }
    Ok(records)
}

/// Least-squares slope of `ln total_seconds` against `ln length`.
pub fn log_log_slope(records: &[DecodeBenchRecord]) -> f64 {
    let x: Vec<f64> = records.iter().map(|r| (r.length as f64).ln()).collect();
    let y: Vec<f64> = records.iter().map(|r| r.total_seconds.ln()).collect();
    ols_slope(&x, &y)
}

/// Header plus one row per record.
pub fn emit_csv<R: CsvRecord>(records: &[R], path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    writer.write_record(R::HEADER)?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv<R: CsvRecord>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != R::HEADER {
        return param(format!("unexpected CSV header {header:?}"));
    }
    reader.deserialize().map(|r| r.map_err(RfaError::from)).collect()
}
