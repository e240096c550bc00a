//! Reverse-mode gradients for the attention kernels, and a central-difference
//! checker.
//!
//! Each kernel has a cached forward ([`forward`]) that saves what the
//! backward needs, and [`backward`] walks it in reverse. The recurrent kernels
//! run a reverse scan over time, carrying the adjoints of `S` and `z`. The
//! partition clamp is treated as piecewise: derivative 1 outside the clamp
//! region and 0 inside it.
//!
//! σ is differentiated through `W = σ ∘ W̃`; `W̃` is constant.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    clamp_partition, readout, AttentionConfig, AttentionState, GateParams, SequenceBatch,
};
use crate::error::{param, Result, RfaError};
use crate::feature_maps::{build_feature_map, FeatureMapSpec, RealizedFeatureMap};
use crate::numerics::{axpy, dot, norm, stable_softmax, Matrix, RngState};

/// Lower bound on `|φ(q)·z|` for a gradient check to be conclusive.
pub const GUARD_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Softmax,
    RfaCross,
    RfaCausal,
    RfaGated,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::Softmax,
        KernelKind::RfaCross,
        KernelKind::RfaCausal,
        KernelKind::RfaGated,
    ];

    fn is_rfa(self) -> bool {
        !matches!(self, KernelKind::Softmax)
    }

    fn is_recurrent(self) -> bool {
        matches!(self, KernelKind::RfaCausal | KernelKind::RfaGated)
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Softmax => "softmax",
            KernelKind::RfaCross => "rfa_cross",
            KernelKind::RfaCausal => "rfa_causal",
            KernelKind::RfaGated => "rfa_gated",
        })
    }
}

impl FromStr for KernelKind {
    type Err = RfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(KernelKind::Softmax),
            "rfa_cross" | "rfa-cross" => Ok(KernelKind::RfaCross),
            "rfa_causal" | "rfa-causal" => Ok(KernelKind::RfaCausal),
            "rfa_gated" | "rfa-gated" => Ok(KernelKind::RfaGated),
            other => param(format!("unknown kernel kind '{other}'")),
        }
    }
}

/// Everything a kernel forward needs.
#[derive(Debug, Clone)]
pub struct KernelInstance {
    pub kind: KernelKind,
    pub batch: SequenceBatch,
    pub config: AttentionConfig,
    /// Required for the RFA kinds.
    pub map: Option<RealizedFeatureMap>,
    /// Required for `RfaGated`.
    pub gate: Option<GateParams>,
    /// Initial state for the recurrent kinds; zeros when absent.
    pub init: Option<AttentionState>,
    /// Causal mask for `Softmax`.
    pub causal: bool,
}

/// Saved forward tensors.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    kind: KernelKind,
    config: AttentionConfig,
    batch: SequenceBatch,
    map: Option<RealizedFeatureMap>,
    gate: Option<GateParams>,
    causal: bool,
    /// Prepared queries/keys (after normalization and, for RFA, 1/√τ scaling).
    q_in: Matrix,
    k_in: Matrix,
    /// Softmax attention weights, one row per query (length = visible keys).
    weights: Vec<Vec<f64>>,
    phi_q: Matrix,
    phi_k: Matrix,
    /// `S` after each step; index 0 is the initial state. Cross attention
    /// stores `[0, S_M]`.
    states: Vec<AttentionState>,
    denominators: Vec<f64>,
    clamped: Vec<bool>,
    gates: Vec<f64>,
    outputs: Matrix,
}

impl ForwardCache {
    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Whether softmax query `t` saw only keys `0..=t`.
    pub fn is_causal(&self) -> bool {
        self.causal
    }

    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }

    pub fn final_state(&self) -> Option<&AttentionState> {
        if self.kind.is_rfa() {
            self.states.last()
        } else {
            None
        }
    }

    /// Raw partition estimates `φ(q_t)·z_t` (empty for softmax).
    pub fn denominators(&self) -> &[f64] {
        &self.denominators
    }

    pub fn gates(&self) -> &[f64] {
        &self.gates
    }

    /// Smallest `|φ(q_t)·z_t|` across steps; `None` for softmax.
    pub fn min_abs_partition(&self) -> Option<f64> {
        self.denominators.iter().map(|d| d.abs()).reduce(f64::min)
    }

    /// Recomputes the outputs from the saved tensors alone.
    pub fn replay(&self) -> Matrix {
        let dv = self.batch.values.cols();
        let mut out = Matrix::zeros(self.outputs.rows(), dv);
        match self.kind {
            KernelKind::Softmax => {
                for (t, w) in self.weights.iter().enumerate() {
                    let visible = self.batch.values.slice_rows(0, w.len());
                    out.row_mut(t).copy_from_slice(&visible.vecmat(w));
                }
            }
            KernelKind::RfaCross => {
                let st = &self.states[1];
                for t in 0..out.rows() {
                    readout(self.phi_q.row(t), &st.s, &st.z, self.config.epsilon, out.row_mut(t));
                }
            }
            KernelKind::RfaCausal | KernelKind::RfaGated => {
                for t in 0..out.rows() {
                    let st = &self.states[t + 1];
                    readout(self.phi_q.row(t), &st.s, &st.z, self.config.epsilon, out.row_mut(t));
                }
            }
        }
        out
    }
}

/// Gradients of a scalar loss with respect to every kernel input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    pub raw_inputs: Option<Matrix>,
    pub gate_w: Option<Vec<f64>>,
    pub gate_b: Option<f64>,
    pub sigma: Option<Vec<f64>>,
    /// Adjoint of the initial `(S, z)` for the recurrent kinds.
    pub init_state: Option<AttentionState>,
}

impl GradBundle {
    pub fn is_finite(&self) -> bool {
        let opt_vec = |v: &Option<Vec<f64>>| v.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()));
        self.queries.is_finite()
            && self.keys.is_finite()
            && self.values.is_finite()
            && self.raw_inputs.as_ref().is_none_or(Matrix::is_finite)
            && opt_vec(&self.gate_w)
            && self.gate_b.is_none_or(f64::is_finite)
            && opt_vec(&self.sigma)
    }
}

fn prepare_rows(x: &Matrix, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&f(x.row(r))?);
    }
    Ok(out)
}

/// Runs the kernel and records the cache.
pub fn forward(inst: &KernelInstance) -> Result<ForwardCache> {
    let cfg = &inst.config;
    cfg.validate()?;
    let b = &inst.batch;
    let (n, m, dv) = (b.queries.rows(), b.keys.rows(), b.values.cols());
    if m == 0 || b.keys.rows() != b.values.rows() || b.queries.cols() != b.keys.cols() {
        return param("kernel instance has inconsistent or empty query/key/value shapes");
    }
    let needs_square = inst.kind.is_recurrent() || (inst.kind == KernelKind::Softmax && inst.causal);
    if needs_square && n != m {
        return param("causal kernels need as many queries as keys");
    }
    let mut cache = ForwardCache {
        kind: inst.kind,
        config: cfg.clone(),
        batch: b.clone(),
        map: inst.map.clone(),
        gate: inst.gate.clone(),
        causal: inst.causal,
        q_in: Matrix::zeros(0, 0),
        k_in: Matrix::zeros(0, 0),
        weights: Vec::new(),
        phi_q: Matrix::zeros(0, 0),
        phi_k: Matrix::zeros(0, 0),
        states: Vec::new(),
        denominators: Vec::new(),
        clamped: Vec::new(),
        gates: Vec::new(),
        outputs: Matrix::zeros(n, dv),
    };

    if inst.kind == KernelKind::Softmax {
        cache.q_in = prepare_rows(&b.queries, |x| cfg.softmax_input(x))?;
        cache.k_in = prepare_rows(&b.keys, |x| cfg.softmax_input(x))?;
        for t in 0..n {
            let visible = if inst.causal { t + 1 } else { m };
            let q = cache.q_in.row(t);
            let logits: Vec<f64> = (0..visible).map(|i| dot(q, cache.k_in.row(i))).collect();
            let w = stable_softmax(&logits, cfg.temperature)?;
            let h = b.values.slice_rows(0, visible).vecmat(&w);
            cache.outputs.row_mut(t).copy_from_slice(&h);
            cache.weights.push(w);
        }
        return Ok(cache);
    }

    let map = inst
        .map
        .as_ref()
        .ok_or_else(|| RfaError::Parameter(format!("{} needs a feature map", inst.kind)))?;
    if map.input_dim() != b.keys.cols() {
        return param("feature map input dim does not match key width");
    }
    let f = map.output_dim();
    cache.q_in = prepare_rows(&b.queries, |x| cfg.rfa_input(x))?;
    cache.k_in = prepare_rows(&b.keys, |x| cfg.rfa_input(x))?;
    cache.phi_q = Matrix::zeros(n, f);
    cache.phi_k = Matrix::zeros(m, f);
    for t in 0..n {
        map.apply_into(cache.q_in.row(t), cache.phi_q.row_mut(t));
    }
    for i in 0..m {
        map.apply_into(cache.k_in.row(i), cache.phi_k.row_mut(i));
    }
    let init = match &inst.init {
        Some(s) => {
            if s.s.shape() != (f, dv) || s.z.len() != f {
                return param("initial state shape does not match the feature map");
            }
            s.clone()
        }
        None => AttentionState::zeros(f, dv),
    };
    let eps = cfg.epsilon;

    match inst.kind {
        KernelKind::RfaCross => {
            let mut st = AttentionState::zeros(f, dv);
            for i in 0..m {
                st.s.add_outer(1.0, cache.phi_k.row(i), b.values.row(i));
                axpy(1.0, cache.phi_k.row(i), &mut st.z);
            }
            for t in 0..n {
                let (den, cl) = readout(cache.phi_q.row(t), &st.s, &st.z, eps, cache.outputs.row_mut(t));
                cache.denominators.push(den);
                cache.clamped.push(cl);
            }
            cache.states = vec![AttentionState::zeros(f, dv), st];
        }
        KernelKind::RfaCausal => {
            let mut st = init;
            cache.states.push(st.clone());
            for t in 0..n {
                st.s.add_outer(1.0, cache.phi_k.row(t), b.values.row(t));
                axpy(1.0, cache.phi_k.row(t), &mut st.z);
                let (den, cl) = readout(cache.phi_q.row(t), &st.s, &st.z, eps, cache.outputs.row_mut(t));
                cache.denominators.push(den);
                cache.clamped.push(cl);
                cache.states.push(st.clone());
            }
        }
        KernelKind::RfaGated => {
            let gate = inst
                .gate
                .as_ref()
                .ok_or_else(|| RfaError::Parameter("rfa_gated needs gate parameters".into()))?;
            let raw = b
                .raw_inputs
                .as_ref()
                .ok_or_else(|| RfaError::Parameter("rfa_gated needs raw_inputs".into()))?;
            if raw.cols() != gate.w.len() || raw.rows() != n {
                return param("raw inputs do not match the gate");
            }
            let mut st = init;
            cache.states.push(st.clone());
            for t in 0..n {
                let g = gate.gate(raw.row(t));
                cache.gates.push(g);
                st.s.scale_in_place(g);
                st.s.add_outer(1.0 - g, cache.phi_k.row(t), b.values.row(t));
                for (z, p) in st.z.iter_mut().zip(cache.phi_k.row(t)) {
                    *z = g * *z + (1.0 - g) * p;
                }
                let (den, cl) = readout(cache.phi_q.row(t), &st.s, &st.z, eps, cache.outputs.row_mut(t));
                cache.denominators.push(den);
                cache.clamped.push(cl);
                cache.states.push(st.clone());
            }
        }
        KernelKind::Softmax => unreachable!(),
    }
    Ok(cache)
}

/// Backward through `x ↦ prepared(x)`: optional l2 normalization, then a
/// constant scale.
fn prep_backward(raw: &[f64], grad_prepared: &[f64], scale: f64, normalize: bool, out: &mut [f64]) {
    if normalize {
        let n = norm(raw);
        let dot_yg: f64 = raw.iter().zip(grad_prepared).map(|(x, g)| x / n * g).sum();
        for ((o, x), g) in out.iter_mut().zip(raw).zip(grad_prepared) {
            *o += scale * (g - x / n * dot_yg) / n;
        }
    } else {
        axpy(scale, grad_prepared, out);
    }
}

/// Reverse pass for `cache` under output adjoint `upstream`.
pub fn backward(kind: KernelKind, cache: &ForwardCache, upstream: &Matrix) -> Result<GradBundle> {
    backward_with_state(kind, cache, upstream, None)
}

/// As [`backward`], with an extra adjoint on the final `(S, z)` for chaining
/// segments of a stateful run.
pub fn backward_with_state(
    kind: KernelKind,
    cache: &ForwardCache,
    upstream: &Matrix,
    final_state_grad: Option<&AttentionState>,
) -> Result<GradBundle> {
    if kind != cache.kind {
        return param(format!("backward for {kind} given a {} cache", cache.kind));
    }
    if upstream.shape() != cache.outputs.shape() {
        return param("upstream gradient shape does not match the outputs");
    }
    if final_state_grad.is_some() && !kind.is_recurrent() {
        return param("a final-state adjoint only applies to recurrent kernels");
    }
    let b = &cache.batch;
    let cfg = &cache.config;
    let (n, m, d, dv) = (b.queries.rows(), b.keys.rows(), b.keys.cols(), b.values.cols());
    let mut gq_in = Matrix::zeros(n, d);
    let mut gk_in = Matrix::zeros(m, d);
    let mut gv = Matrix::zeros(m, dv);
    let mut grads = GradBundle {
        queries: Matrix::zeros(n, d),
        keys: Matrix::zeros(m, d),
        values: Matrix::zeros(m, dv),
        raw_inputs: None,
        gate_w: None,
        gate_b: None,
        sigma: None,
        init_state: None,
    };

    if kind == KernelKind::Softmax {
        let inv_tau = 1.0 / cfg.temperature;
        for (t, w) in cache.weights.iter().enumerate() {
            let gh = upstream.row(t);
            let dp: Vec<f64> = (0..w.len()).map(|i| dot(gh, b.values.row(i))).collect();
            let mean: f64 = w.iter().zip(&dp).map(|(p, g)| p * g).sum();
            let q = cache.q_in.row(t).to_vec();
            for i in 0..w.len() {
                let dl = w[i] * (dp[i] - mean) * inv_tau;
                axpy(dl, cache.k_in.row(i), gq_in.row_mut(t));
                axpy(dl, &q, gk_in.row_mut(i));
                axpy(w[i], gh, gv.row_mut(i));
            }
        }
        for t in 0..n {
            prep_backward(b.queries.row(t), gq_in.row(t), 1.0, cfg.normalize_qk, grads.queries.row_mut(t));
        }
        for i in 0..m {
            prep_backward(b.keys.row(i), gk_in.row(i), 1.0, cfg.normalize_qk, grads.keys.row_mut(i));
        }
        grads.values = gv;
        return Ok(grads);
    }

    let map = cache.map.as_ref().expect("rfa cache carries its map");
    let f = map.output_dim();
    let mut gphi_q = Matrix::zeros(n, f);
    let mut gphi_k = Matrix::zeros(m, f);
    // adjoints of the running S and z
    let mut gs = Matrix::zeros(f, dv);
    let mut gz = vec![0.0; f];
    if let Some(fs) = final_state_grad {
        if fs.s.shape() != (f, dv) || fs.z.len() != f {
            return param("final-state adjoint has the wrong shape");
        }
        gs = fs.s.clone();
        gz = fs.z.clone();
    }

    // d h_t / d(num, den): h = num / c, so ∂h/∂num = 1/c and ∂h/∂c = -h/c
    let step_adjoint = |t: usize| -> (Vec<f64>, f64) {
        let gh = upstream.row(t);
        let (c, _) = clamp_partition(cache.denominators[t], cfg.epsilon);
        let g_num: Vec<f64> = gh.iter().map(|g| g / c).collect();
        let g_den = if cache.clamped[t] {
            0.0
        } else {
            -dot(gh, cache.outputs.row(t)) / c
        };
        (g_num, g_den)
    };

    match kind {
        KernelKind::RfaCross => {
            let st = &cache.states[1];
            for t in 0..n {
                let (g_num, g_den) = step_adjoint(t);
                let mut gpq = st.s.matvec(&g_num);
                axpy(g_den, &st.z, &mut gpq);
                gphi_q.row_mut(t).copy_from_slice(&gpq);
                gs.add_outer(1.0, cache.phi_q.row(t), &g_num);
                axpy(g_den, cache.phi_q.row(t), &mut gz);
            }
            for i in 0..m {
                let mut gpk = gs.matvec(b.values.row(i));
                axpy(1.0, &gz, &mut gpk);
                gphi_k.row_mut(i).copy_from_slice(&gpk);
                gv.row_mut(i).copy_from_slice(&gs.vecmat(cache.phi_k.row(i)));
            }
        }
        KernelKind::RfaCausal => {
            for t in (0..n).rev() {
                let st = &cache.states[t + 1];
                let (g_num, g_den) = step_adjoint(t);
                let mut gpq = st.s.matvec(&g_num);
                axpy(g_den, &st.z, &mut gpq);
                gphi_q.row_mut(t).copy_from_slice(&gpq);
                gs.add_outer(1.0, cache.phi_q.row(t), &g_num);
                axpy(g_den, cache.phi_q.row(t), &mut gz);
                let mut gpk = gs.matvec(b.values.row(t));
                axpy(1.0, &gz, &mut gpk);
                gphi_k.row_mut(t).copy_from_slice(&gpk);
                gv.row_mut(t).copy_from_slice(&gs.vecmat(cache.phi_k.row(t)));
            }
            grads.init_state = Some(AttentionState { s: gs.clone(), z: gz.clone() });
        }
        KernelKind::RfaGated => {
            let gate = cache.gate.as_ref().expect("gated cache carries its gate");
            let raw = b.raw_inputs.as_ref().expect("gated cache carries raw inputs");
            let mut g_raw = Matrix::zeros(n, raw.cols());
            let mut g_w = vec![0.0; gate.w.len()];
            let mut g_b = 0.0;
            for t in (0..n).rev() {
                let st = &cache.states[t + 1];
                let prev = &cache.states[t];
                let g = cache.gates[t];
                let (g_num, g_den) = step_adjoint(t);
                let mut gpq = st.s.matvec(&g_num);
                axpy(g_den, &st.z, &mut gpq);
                gphi_q.row_mut(t).copy_from_slice(&gpq);
                gs.add_outer(1.0, cache.phi_q.row(t), &g_num);
                axpy(g_den, cache.phi_q.row(t), &mut gz);

                let phi_k = cache.phi_k.row(t);
                let v = b.values.row(t);
                // ∂S_t/∂g = S_{t-1} - φ(k_t) ⊗ v_t, likewise for z
                let gs_v = gs.matvec(v);
                let mut dg = dot(gs.data(), prev.s.data()) - dot(phi_k, &gs_v);
                dg += dot(&gz, &prev.z) - dot(&gz, phi_k);

                let mut gpk = gs_v;
                axpy(1.0, &gz, &mut gpk);
                gpk.iter_mut().for_each(|x| *x *= 1.0 - g);
                gphi_k.row_mut(t).copy_from_slice(&gpk);
                let mut gvt = gs.vecmat(phi_k);
                gvt.iter_mut().for_each(|x| *x *= 1.0 - g);
                gv.row_mut(t).copy_from_slice(&gvt);

                gs.scale_in_place(g);
                gz.iter_mut().for_each(|x| *x *= g);

                let da = dg * g * (1.0 - g);
                axpy(da, raw.row(t), &mut g_w);
                g_b += da;
                axpy(da, &gate.w, g_raw.row_mut(t));
            }
            grads.raw_inputs = Some(g_raw);
            grads.gate_w = Some(g_w);
            grads.gate_b = Some(g_b);
            grads.init_state = Some(AttentionState { s: gs.clone(), z: gz.clone() });
        }
        KernelKind::Softmax => unreachable!(),
    }

    let mut g_sigma = vec![0.0; d];
    let scale = cfg.temperature.sqrt().recip();
    let mut g_in = vec![0.0; d];
    for t in 0..n {
        g_in.iter_mut().for_each(|x| *x = 0.0);
        map.backward_into(cache.q_in.row(t), gphi_q.row(t), &mut g_in, &mut g_sigma);
        prep_backward(b.queries.row(t), &g_in, scale, cfg.normalize_qk, grads.queries.row_mut(t));
    }
    for i in 0..m {
        g_in.iter_mut().for_each(|x| *x = 0.0);
        map.backward_into(cache.k_in.row(i), gphi_k.row(i), &mut g_in, &mut g_sigma);
        prep_backward(b.keys.row(i), &g_in, scale, cfg.normalize_qk, grads.keys.row_mut(i));
    }
    grads.values = gv;
    grads.sigma = Some(g_sigma);
    Ok(grads)
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + h;
            let plus = f(&p);
            p[i] = params[i] - h;
            let minus = f(&p);
            p[i] = params[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The instance touches the clamp region; no verdict.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub kind: KernelKind,
    /// `(parameter group, max relative error)`.
    pub groups: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

/// Parameter groups the checker perturbs for `kind`.
pub fn parameter_groups(kind: KernelKind) -> &'static [&'static str] {
    match kind {
        KernelKind::Softmax => &["queries", "keys", "values"],
        KernelKind::RfaCross | KernelKind::RfaCausal => &["queries", "keys", "values", "sigma"],
        KernelKind::RfaGated => &["queries", "keys", "values", "raw_inputs", "gate_w", "gate_b", "sigma"],
    }
}

impl KernelInstance {
    /// Flattened values of a parameter group (empty when absent).
    pub fn group_values(&self, group: &str) -> Vec<f64> {
        match group {
            "queries" => self.batch.queries.data().to_vec(),
            "keys" => self.batch.keys.data().to_vec(),
            "values" => self.batch.values.data().to_vec(),
            "raw_inputs" => self.batch.raw_inputs.as_ref().map_or(Vec::new(), |m| m.data().to_vec()),
            "gate_w" => self.gate.as_ref().map_or(Vec::new(), |g| g.w.clone()),
            "gate_b" => self.gate.as_ref().map_or(Vec::new(), |g| vec![g.b]),
            "sigma" => self.map.as_ref().map_or(Vec::new(), |m| m.sigma().to_vec()),
            _ => Vec::new(),
        }
    }

    /// Copy with a parameter group replaced by `values`.
    pub fn with_group(&self, group: &str, values: &[f64]) -> Result<KernelInstance> {
        let mut inst = self.clone();
        let put = |m: &mut Matrix| m.data_mut().copy_from_slice(values);
        match group {
            "queries" => put(&mut inst.batch.queries),
            "keys" => put(&mut inst.batch.keys),
            "values" => put(&mut inst.batch.values),
            "raw_inputs" => put(inst.batch.raw_inputs.as_mut().expect("raw inputs")),
            "gate_w" => inst.gate.as_mut().expect("gate").w.copy_from_slice(values),
            "gate_b" => inst.gate.as_mut().expect("gate").b = values[0],
            "sigma" => {
                let map = inst.map.as_ref().expect("map").with_sigma(values)?;
                inst.map = Some(map);
            }
            other => return param(format!("unknown parameter group '{other}'")),
        }
        Ok(inst)
    }

    /// `‖outputs‖² / 2`.
    pub fn loss(&self) -> Result<f64> {
        let out = forward(self)?;
        Ok(0.5 * dot(out.outputs.data(), out.outputs.data()))
    }
}

impl GradBundle {
    /// Flattened gradient of a parameter group (empty when absent).
    pub fn group(&self, group: &str) -> Vec<f64> {
        bundle_group(self, group)
    }
}

fn bundle_group(grads: &GradBundle, group: &str) -> Vec<f64> {
    match group {
        "queries" => grads.queries.data().to_vec(),
        "keys" => grads.keys.data().to_vec(),
        "values" => grads.values.data().to_vec(),
        "raw_inputs" => grads.raw_inputs.as_ref().map_or(Vec::new(), |m| m.data().to_vec()),
        "gate_w" => grads.gate_w.clone().unwrap_or_default(),
        "gate_b" => grads.gate_b.map_or(Vec::new(), |b| vec![b]),
        "sigma" => grads.sigma.clone().unwrap_or_default(),
        _ => Vec::new(),
    }
}

/// Compares [`backward`] against central differences on `‖outputs‖² / 2`.
pub fn grad_check(inst: &KernelInstance, h: f64, tol: f64) -> Result<GradReport> {
    if !(h > 0.0) {
        return param("finite-difference step must be positive");
    }
    let cache = forward(inst)?;
    let mut report = GradReport {
        kind: inst.kind,
        groups: Vec::new(),
        max_rel_error: 0.0,
        tolerance: tol,
        status: CheckStatus::Inconclusive,
    };
    if cache.min_abs_partition().is_some_and(|p| p < GUARD_THRESHOLD) {
        return Ok(report);
    }
    let upstream = cache.outputs.clone();
    let grads = backward(inst.kind, &cache, &upstream)?;
    for &group in parameter_groups(inst.kind) {
        let p0 = inst.group_values(group);
        let numeric = finite_diff_grad(
            |p| inst.with_group(group, p).and_then(|i| i.loss()).unwrap_or(f64::NAN),
            &p0,
            h,
        );
        let analytic = bundle_group(&grads, group);
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        report.max_rel_error = report.max_rel_error.max(err);
        report.groups.push((group.to_string(), err));
    }
    report.status = if report.max_rel_error <= tol {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(report)
}

/// Random instance of `kind` with `n` steps, width `d`, `num_features` random
/// features, and value width `dv`. The σ vector is drawn from `[0.7, 1.3]`.
/// Recurrent kinds get a nonzero initial state.
pub fn random_instance(kind: KernelKind, seed: u64, n: usize, d: usize, num_features: usize, dv: usize) -> Result<KernelInstance> {
    let mut rng = RngState::new(seed, 17);
    let mat = |rows: usize, cols: usize, rng: &mut RngState| Matrix::new(rows, cols, rng.normal_vec(rows * cols));
    let queries = mat(n, d, &mut rng)?;
    let keys = mat(n, d, &mut rng)?;
    let values = mat(n, dv, &mut rng)?;
    let raw_dim = 3;
    let raw = mat(n, raw_dim, &mut rng)?;
    let gate = GateParams::new(rng.normal_vec(raw_dim).iter().map(|x| 0.5 * x).collect(), rng.uniform(-1.0, 1.0));
    let sigma: Vec<f64> = (0..d).map(|_| rng.uniform(0.7, 1.3)).collect();
    let map = build_feature_map(&FeatureMapSpec::gaussian(d, num_features, seed ^ 0x5eed).with_sigma(sigma))?;
    let gated = kind == KernelKind::RfaGated;
    // Recurrent kinds start from a state carried over from a short random
    // prefix. From a zero state h_1 = v_1 for any q_1, and that structurally
    // zero gradient cannot be resolved by central differences at this floor.
    let init = if kind.is_recurrent() {
        let mut st = AttentionState::zeros(map.output_dim(), dv);
        let mut phi = vec![0.0; map.output_dim()];
        let cfg = AttentionConfig::rfa();
        for _ in 0..3 {
            map.apply_into(&cfg.rfa_input(&rng.normal_vec(d))?, &mut phi);
            st.s.add_outer(1.0, &phi, &rng.normal_vec(dv));
            axpy(1.0, &phi, &mut st.z);
        }
        Some(st)
    } else {
        None
    };
    Ok(KernelInstance {
        kind,
        batch: SequenceBatch::new(queries, keys, values, gated.then_some(raw))?,
        config: if kind.is_rfa() { AttentionConfig::rfa() } else { AttentionConfig::softmax() },
        map: kind.is_rfa().then_some(map),
        gate: gated.then_some(gate),
        init,
        causal: false,
    })
}
