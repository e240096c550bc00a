//! Attention kernels: the softmax reference and the random feature family.
//!
//! All RFA variants share one readout. Given the running sums
//! `S = Σ φ(k_i) ⊗ v_i` and `z = Σ φ(k_i)`, the output for a query is
//! `φ(q)ᵀ S / clamp(φ(q)·z)`. The cross form builds the sums once over all
//! keys; the causal form updates them one step at a time, which is what makes
//! decoding linear in sequence length and constant in memory.
//!
//! `clamp` keeps the sign of the partition estimate and lifts its magnitude
//! to at least `epsilon` (0 goes to `+epsilon`). Sinusoidal features can make
//! `φ(q)·z` tiny or negative, so without it the division can blow up.
//!
//! Input preparation: when `normalize_qk` is set, queries and keys are
//! l2-normalized first. RFA then scales them by `1/√temperature` before
//! applying φ, so a Gaussian map with σ = 1 targets the same
//! `exp(q·k / temperature)` weights as softmax at that temperature.

use std::fmt;
use std::str::FromStr;

use crate::error::{param, Result, RfaError};
use crate::feature_maps::RealizedFeatureMap;
use crate::numerics::{axpy, dot, l2_normalize, norm, stable_softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Softmax,
    Rfa,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Softmax => "softmax",
            AttentionKind::Rfa => "rfa",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = RfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttentionKind::Softmax),
            "rfa" => Ok(AttentionKind::Rfa),
            other => param(format!("unknown attention kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// τ for softmax; σ² for RFA.
    pub temperature: f64,
    pub normalize_qk: bool,
    /// Lower bound on `|φ(q)·z|`.
    pub epsilon: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Rfa,
            temperature: 1.0,
            normalize_qk: true,
            epsilon: 1e-6,
        }
    }
}

impl AttentionConfig {
    pub fn softmax() -> Self {
        Self {
            kind: AttentionKind::Softmax,
            ..Self::default()
        }
    }

    pub fn rfa() -> Self {
        Self::default()
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_normalize(mut self, normalize_qk: bool) -> Self {
        self.normalize_qk = normalize_qk;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return param(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return param(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }

    /// Query/key as seen by the softmax logits (normalized if configured).
    pub(crate) fn softmax_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.normalize_qk {
            l2_normalize(x)
        } else {
            Ok(x.to_vec())
        }
    }

    /// Query/key as fed to φ: normalized if configured, then divided by √τ.
    pub(crate) fn rfa_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut u = self.softmax_input(x)?;
        let scale = self.temperature.sqrt().recip();
        u.iter_mut().for_each(|v| *v *= scale);
        Ok(u)
    }
}

/// Sign-preserving clamp of the partition estimate. Returns the clamped
/// value and whether clamping changed it.
#[inline]
pub fn clamp_partition(u: f64, epsilon: f64) -> (f64, bool) {
    if u.abs() >= epsilon {
        (u, false)
    } else if u < 0.0 {
        (-epsilon, true)
    } else {
        (epsilon, true)
    }
}

/// Running sums `(S, z)` of the causal recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    /// `feature_dim × d_v`.
    pub s: Matrix,
    pub z: Vec<f64>,
}

impl AttentionState {
    pub fn zeros(feature_dim: usize, value_dim: usize) -> Self {
        Self {
            s: Matrix::zeros(feature_dim, value_dim),
            z: vec![0.0; feature_dim],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.z.len()
    }

    pub fn value_dim(&self) -> usize {
        self.s.cols()
    }

    /// Number of scalars held: `feature_dim × d_v + feature_dim`.
    pub fn live_elements(&self) -> usize {
        self.s.data().len() + self.z.len()
    }

    fn check(&self, map: &RealizedFeatureMap, value_dim: usize) -> Result<()> {
        if self.s.shape() != (map.output_dim(), value_dim) || self.z.len() != map.output_dim() {
            return param(format!(
                "state shape {:?}/{} does not match feature dim {} and value dim {value_dim}",
                self.s.shape(),
                self.z.len(),
                map.output_dim()
            ));
        }
        Ok(())
    }
}

/// Gate `g_t = sigmoid(w·x_t + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl GateParams {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        Self { w, b }
    }

    /// Constant gate: zero weights, bias `b`.
    pub fn constant(input_dim: usize, b: f64) -> Self {
        Self {
            w: vec![0.0; input_dim],
            b,
        }
    }

    pub fn gate(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.w, x) + self.b)
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Queries, keys, values, and the raw per-step inputs that drive gates.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    pub raw_inputs: Option<Matrix>,
}

impl SequenceBatch {
    pub fn new(queries: Matrix, keys: Matrix, values: Matrix, raw_inputs: Option<Matrix>) -> Result<Self> {
        if keys.rows() != values.rows() {
            return param(format!(
                "{} keys but {} values",
                keys.rows(),
                values.rows()
            ));
        }
        if queries.cols() != keys.cols() {
            return param("queries and keys differ in width");
        }
        if let Some(x) = &raw_inputs {
            if x.rows() != queries.rows() {
                return param("raw_inputs and queries differ in count");
            }
        }
        Ok(Self {
            queries,
            keys,
            values,
            raw_inputs,
        })
    }

    /// Target length N.
    pub fn target_len(&self) -> usize {
        self.queries.rows()
    }

    /// Source length M.
    pub fn source_len(&self) -> usize {
        self.keys.rows()
    }

    /// Rows `start..end` of every field (self-attention batches only).
    pub fn slice(&self, start: usize, end: usize) -> SequenceBatch {
        SequenceBatch {
            queries: self.queries.slice_rows(start, end),
            keys: self.keys.slice_rows(start, end),
            values: self.values.slice_rows(start, end),
            raw_inputs: self.raw_inputs.as_ref().map(|x| x.slice_rows(start, end)),
        }
    }
}

/// Outputs of an RFA kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct RfaOutput {
    /// `N × d_v`.
    pub outputs: Matrix,
    /// Final `(S, z)`; for cross attention the sums over all keys.
    pub state: AttentionState,
    /// Gate values, one per step (gated kernel only).
    pub gates: Vec<f64>,
    /// Set when any denominator fell inside the clamp region.
    pub degenerate_partition: bool,
}

fn check_qkv(queries: &Matrix, keys: &Matrix, values: &Matrix, d: usize) -> Result<()> {
    if keys.rows() != values.rows() {
        return param(format!("{} keys but {} values", keys.rows(), values.rows()));
    }
    if keys.cols() != d || queries.cols() != d {
        return param(format!(
            "query/key width {}/{} does not match map input dim {d}",
            queries.cols(),
            keys.cols()
        ));
    }
    Ok(())
}

/// `out = φ(q)ᵀ S / clamp(φ(q)·z)`. Returns `(φ(q)·z, clamped?)`.
#[inline]
pub(crate) fn readout(phi_q: &[f64], s: &Matrix, z: &[f64], epsilon: f64, out: &mut [f64]) -> (f64, bool) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, row) in phi_q.iter().zip(s.row_iter()) {
        axpy(*p, row, out);
    }
    let den = dot(phi_q, z);
    let (c, clamped) = clamp_partition(den, epsilon);
    out.iter_mut().for_each(|o| *o /= c);
    (den, clamped)
}

/// Softmax attention of one query over `keys`/`values`.
pub fn softmax_attention(q: &[f64], keys: &Matrix, values: &Matrix, config: &AttentionConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if keys.rows() == 0 {
        return param("softmax attention over an empty key set");
    }
    if keys.rows() != values.rows() {
        return param(format!("{} keys but {} values", keys.rows(), values.rows()));
    }
    if keys.cols() != q.len() {
        return param("query and key widths differ");
    }
    let qn = config.softmax_input(q)?;
    let logits = keys
        .row_iter()
        .map(|k| Ok(dot(&qn, &config.softmax_input(k)?)))
        .collect::<Result<Vec<f64>>>()?;
    let weights = stable_softmax(&logits, config.temperature)?;
    Ok(values.vecmat(&weights))
}

/// Softmax attention for every query; with `causal`, query `t` sees keys `0..=t`.
pub fn softmax_attention_seq(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    config: &AttentionConfig,
    causal: bool,
) -> Result<Matrix> {
    if causal && queries.rows() != keys.rows() {
        return param("causal attention needs as many queries as keys");
    }
    let mut out = Matrix::zeros(queries.rows(), values.cols());
    for t in 0..queries.rows() {
        let h = if causal {
            softmax_attention(queries.row(t), &keys.slice_rows(0, t + 1), &values.slice_rows(0, t + 1), config)?
        } else {
            softmax_attention(queries.row(t), keys, values, config)?
        };
        out.row_mut(t).copy_from_slice(&h);
    }
    Ok(out)
}

/// Cross RFA: one pass over the keys builds `(S, z)`, then each query reads out.
pub fn rfa_cross(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    map: &RealizedFeatureMap,
    config: &AttentionConfig,
) -> Result<RfaOutput> {
    config.validate()?;
    if keys.rows() == 0 {
        return param("rfa_cross over an empty key set");
    }
    check_qkv(queries, keys, values, map.input_dim())?;
    let mut state = AttentionState::zeros(map.output_dim(), values.cols());
    let mut phi = vec![0.0; map.output_dim()];
    for (k, v) in keys.row_iter().zip(values.row_iter()) {
        map.apply_into(&config.rfa_input(k)?, &mut phi);
        state.s.add_outer(1.0, &phi, v);
        axpy(1.0, &phi, &mut state.z);
    }
    let mut outputs = Matrix::zeros(queries.rows(), values.cols());
    let mut degenerate = false;
    for t in 0..queries.rows() {
        map.apply_into(&config.rfa_input(queries.row(t))?, &mut phi);
        let (_, clamped) = readout(&phi, &state.s, &state.z, config.epsilon, outputs.row_mut(t));
        degenerate |= clamped;
    }
    Ok(RfaOutput {
        outputs,
        state,
        gates: Vec::new(),
        degenerate_partition: degenerate,
    })
}

/// Causal RFA from `init`: `S_t = S_{t-1} + φ(k_t) ⊗ v_t`, `z_t = z_{t-1} + φ(k_t)`.
pub fn rfa_causal(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    map: &RealizedFeatureMap,
    config: &AttentionConfig,
    init: &AttentionState,
) -> Result<RfaOutput> {
    config.validate()?;
    check_qkv(queries, keys, values, map.input_dim())?;
    if queries.rows() != keys.rows() {
        return param("causal attention needs as many queries as keys");
    }
    init.check(map, values.cols())?;
    let mut state = init.clone();
    let mut outputs = Matrix::zeros(queries.rows(), values.cols());
    let mut phi_q = vec![0.0; map.output_dim()];
    let mut phi_k = vec![0.0; map.output_dim()];
    let mut degenerate = false;
    for t in 0..queries.rows() {
        map.apply_into(&config.rfa_input(queries.row(t))?, &mut phi_q);
        map.apply_into(&config.rfa_input(keys.row(t))?, &mut phi_k);
        state.s.add_outer(1.0, &phi_k, values.row(t));
        axpy(1.0, &phi_k, &mut state.z);
        let (_, clamped) = readout(&phi_q, &state.s, &state.z, config.epsilon, outputs.row_mut(t));
        degenerate |= clamped;
    }
    Ok(RfaOutput {
        outputs,
        state,
        gates: Vec::new(),
        degenerate_partition: degenerate,
    })
}

/// Runs causal RFA over consecutive segments, carrying the final state of
/// each into the next. Outputs are concatenated in order.
pub fn rfa_stateful_carry(
    segments: &[SequenceBatch],
    map: &RealizedFeatureMap,
    config: &AttentionConfig,
) -> Result<RfaOutput> {
    let first = segments
        .first()
        .ok_or_else(|| RfaError::Parameter("stateful carry needs at least one segment".into()))?;
    let value_dim = first.values.cols();
    if segments
        .iter()
        .any(|s| s.values.cols() != value_dim || s.keys.cols() != first.keys.cols())
    {
        return param("segments disagree on key or value width");
    }
    let mut state = AttentionState::zeros(map.output_dim(), value_dim);
    let mut parts = Vec::with_capacity(segments.len());
    let mut degenerate = false;
    for seg in segments {
        let out = rfa_causal(&seg.queries, &seg.keys, &seg.values, map, config, &state)?;
        degenerate |= out.degenerate_partition;
        state = out.state;
        parts.push(out.outputs);
    }
    Ok(RfaOutput {
        outputs: Matrix::vstack(&parts)?,
        state,
        gates: Vec::new(),
        degenerate_partition: degenerate,
    })
}

/// Gated causal RFA: `S_t = g_t S_{t-1} + (1 - g_t) φ(k_t) ⊗ v_t`, and the
/// same decay for `z`, with `g_t = sigmoid(w·x_t + b)`.
///
/// When every gate is ≈ 1 and the state starts at zero, the partition stays
/// inside the clamp region; outputs are then (near) zero and
/// `degenerate_partition` is set instead of returning an error.
pub fn rfa_gated(
    batch: &SequenceBatch,
    gate: &GateParams,
    map: &RealizedFeatureMap,
    config: &AttentionConfig,
    init: &AttentionState,
) -> Result<RfaOutput> {
    config.validate()?;
    let (queries, keys, values) = (&batch.queries, &batch.keys, &batch.values);
    check_qkv(queries, keys, values, map.input_dim())?;
    if queries.rows() != keys.rows() {
        return param("gated attention needs as many queries as keys");
    }
    let raw = batch
        .raw_inputs
        .as_ref()
        .ok_or_else(|| RfaError::Parameter("gated attention needs raw_inputs".into()))?;
    if raw.cols() != gate.w.len() || raw.rows() != queries.rows() {
        return param(format!(
            "raw inputs {:?} do not match gate width {}",
            raw.shape(),
            gate.w.len()
        ));
    }
    init.check(map, values.cols())?;
    let mut state = init.clone();
    let mut outputs = Matrix::zeros(queries.rows(), values.cols());
    let mut gates = Vec::with_capacity(queries.rows());
    let mut phi_q = vec![0.0; map.output_dim()];
    let mut phi_k = vec![0.0; map.output_dim()];
    let mut degenerate = false;
    for t in 0..queries.rows() {
        let g = gate.gate(raw.row(t));
        gates.push(g);
        map.apply_into(&config.rfa_input(queries.row(t))?, &mut phi_q);
        map.apply_into(&config.rfa_input(keys.row(t))?, &mut phi_k);
        state.s.scale_in_place(g);
        state.s.add_outer(1.0 - g, &phi_k, values.row(t));
        for (z, p) in state.z.iter_mut().zip(&phi_k) {
            *z = g * *z + (1.0 - g) * p;
        }
        let (_, clamped) = readout(&phi_q, &state.s, &state.z, config.epsilon, outputs.row_mut(t));
        degenerate |= clamped;
    }
    Ok(RfaOutput {
        outputs,
        state,
        gates,
        degenerate_partition: degenerate,
    })
}

/// Cross RFA without the unit-norm assumption.
///
/// Each key's features are weighted by `C(k) = exp(‖k‖² / 2τ)`; the query's
/// own factor cancels between numerator and denominator. Needs
/// `normalize_qk = false`.
pub fn rfa_unnormalized(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    map: &RealizedFeatureMap,
    config: &AttentionConfig,
) -> Result<Matrix> {
    config.validate()?;
    if config.normalize_qk {
        return param("rfa_unnormalized requires normalize_qk = false");
    }
    if !map.kind().is_random() {
        return Err(RfaError::UnsupportedKind(
            "rfa_unnormalized needs a gaussian or arccos map".into(),
        ));
    }
    if keys.rows() == 0 {
        return param("rfa_unnormalized over an empty key set");
    }
    check_qkv(queries, keys, values, map.input_dim())?;
    let mut state = AttentionState::zeros(map.output_dim(), values.cols());
    let mut phi = vec![0.0; map.output_dim()];
    for (k, v) in keys.row_iter().zip(values.row_iter()) {
        let c = norm_scalar(k, config.temperature)?;
        map.apply_into(&config.rfa_input(k)?, &mut phi);
        state.s.add_outer(c, &phi, v);
        axpy(c, &phi, &mut state.z);
    }
    let mut outputs = Matrix::zeros(queries.rows(), values.cols());
    for t in 0..queries.rows() {
        map.apply_into(&config.rfa_input(queries.row(t))?, &mut phi);
        readout(&phi, &state.s, &state.z, config.epsilon, outputs.row_mut(t));
    }
    Ok(outputs)
}

/// `C(x) = exp(‖x‖² / 2τ)`; a range error when the exponent exceeds 700.
pub fn norm_scalar(x: &[f64], temperature: f64) -> Result<f64> {
    let exponent = norm(x).powi(2) / (2.0 * temperature);
    if exponent > 700.0 {
        return Err(RfaError::Range(format!(
            "exp({exponent}) overflows; key norm too large for this temperature"
        )));
    }
    Ok(exponent.exp())
}

/// Softmax attention over keys and values decayed by gates: item `i` is
/// scaled by `(1 - g_i) Π_{j>i} g_j`. Query/key normalization is disabled
/// since it would undo the decay on the keys.
///
/// This is not an exact counterpart of [`rfa_gated`]: at `t = 1` it returns
/// `(1 - g_1) v_1` where the gated kernel returns `v_1`.
pub fn gated_softmax_oracle(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    gates: &[f64],
    config: &AttentionConfig,
) -> Result<Vec<f64>> {
    if gates.len() != keys.rows() {
        return param(format!("{} gates for {} keys", gates.len(), keys.rows()));
    }
    if let Some(g) = gates.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return param(format!("gate {g} outside [0, 1]"));
    }
    let t = gates.len();
    let mut decay = vec![0.0; t];
    let mut tail = 1.0;
    for i in (0..t).rev() {
        decay[i] = (1.0 - gates[i]) * tail;
        tail *= gates[i];
    }
    let mut k_tilde = keys.clone();
    let mut v_tilde = values.clone();
    for (i, &c) in decay.iter().enumerate() {
        k_tilde.row_mut(i).iter_mut().for_each(|x| *x *= c);
        v_tilde.row_mut(i).iter_mut().for_each(|x| *x *= c);
    }
    let cfg = config.clone().with_normalize(false);
    softmax_attention(q, &k_tilde, &v_tilde, &cfg)
}
