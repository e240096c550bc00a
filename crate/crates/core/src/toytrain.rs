//! Toy training: one attention head learning a lag-Δ copy task.
//!
//! The model embeds tokens (plus a learned position embedding), projects them
//! to queries/keys/values, runs one causal attention kernel, and maps the
//! result to vocabulary logits. Training is plain SGD on cross-entropy using
//! the hand-written backward passes from [`crate::gradients`].
//!
//! RFA models draw their feature map from a pool, `step mod P` during
//! training and index 0 at evaluation. σ is trained; the draws `W̃` are not.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttentionConfig, AttentionState, GateParams, SequenceBatch};
use crate::error::{param, Result, RfaError};
use crate::feature_maps::{build_pool, FeatureMapKind, FeatureMapPool, FeatureMapSpec, RealizedFeatureMap};
use crate::gradients::{backward, forward, KernelInstance, KernelKind};
use crate::numerics::{axpy, mix_seed, Matrix, RngState};

/// Label value for positions excluded from the loss.
pub const IGNORE: i64 = -1;

/// Lag-Δ copy task: the label at step `t` is the token at `t - Δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub lag: usize,
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return param("toy task needs a vocabulary of at least 2");
        }
        if self.lag == 0 || self.lag >= self.seq_len {
            return param(format!(
                "lag must satisfy 1 <= lag < seq_len (lag {}, seq_len {})",
                self.lag, self.seq_len
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: Vec<i64>,
}

/// Labels for `tokens` under lag `lag`.
pub fn recency_labels(tokens: &[usize], lag: usize) -> Vec<i64> {
    (0..tokens.len())
        .map(|t| if t >= lag { tokens[t - lag] as i64 } else { IGNORE })
        .collect()
}

/// `count` sequences of uniform tokens from the seeded stream.
pub fn gen_recency_task(task: &ToyTask, seed: u64, count: usize) -> Result<Vec<Example>> {
    task.validate()?;
    let mut rng = RngState::new(seed, 3);
    Ok((0..count)
        .map(|_| {
            let tokens: Vec<usize> = (0..task.seq_len).map(|_| rng.below(task.vocab)).collect();
            let labels = recency_labels(&tokens, task.lag);
            Example { tokens, labels }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    Softmax,
    Rfa,
    RfaGated,
}

impl ToyKind {
    pub const ALL: [ToyKind; 3] = [ToyKind::Softmax, ToyKind::Rfa, ToyKind::RfaGated];

    fn kernel(self) -> KernelKind {
        match self {
            ToyKind::Softmax => KernelKind::Softmax,
            ToyKind::Rfa => KernelKind::RfaCausal,
            ToyKind::RfaGated => KernelKind::RfaGated,
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyKind::Softmax => "softmax",
            ToyKind::Rfa => "rfa",
            ToyKind::RfaGated => "rfa-gated",
        })
    }
}

impl FromStr for ToyKind {
    type Err = RfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ToyKind::Softmax),
            "rfa" => Ok(ToyKind::Rfa),
            "rfa-gated" | "rfa_gated" => Ok(ToyKind::RfaGated),
            other => param(format!("unknown toy attention kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kind: ToyKind,
    /// Number of pre-drawn feature maps cycled through during training.
    pub pool_size: usize,
    /// Model width d.
    pub d: usize,
    /// Random features D per map.
    pub num_features: usize,
    /// Softmax temperature τ (RFA uses its learned σ instead).
    pub softmax_temperature: f64,
    /// Denominator guard for the RFA kernels. With D = 32 the partition
    /// estimate is noisy enough that the kernel default lets single outputs
    /// reach ~1e6 and derail SGD.
    pub rfa_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            kind: ToyKind::RfaGated,
            pool_size: 50,
            d: 16,
            num_features: 32,
            softmax_temperature: 0.25,
            rfa_epsilon: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return param("learning rate must be positive");
        }
        if self.batch_size == 0 || self.pool_size == 0 || self.d == 0 || self.num_features == 0 {
            return param("batch size, pool size, d and D must all be >= 1");
        }
        if !(self.softmax_temperature > 0.0) {
            return param("softmax temperature must be positive");
        }
        if !(self.rfa_epsilon > 0.0) {
            return param("rfa epsilon must be positive");
        }
        Ok(())
    }
}

/// Single-head, single-layer attention classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub kind: ToyKind,
    /// `V × d`
    pub embed: Matrix,
    /// `L × d`
    pub pos: Matrix,
    /// `d × d` each; `q = wq · x`
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `V × d`
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub gate: GateParams,
    /// Trainable per-dimension scale of the feature maps.
    pub sigma: Vec<f64>,
    pub map_spec: FeatureMapSpec,
    pub softmax_temperature: f64,
    pub rfa_epsilon: f64,
    pool: FeatureMapPool,
}

/// Gradient buffers shaped like [`ToyModel`]'s parameters.
#[derive(Debug, Clone)]
struct ToyGrads {
    embed: Matrix,
    pos: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    bo: Vec<f64>,
    gate_w: Vec<f64>,
    gate_b: f64,
    sigma: Vec<f64>,
}

fn init_matrix(rng: &mut RngState, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    Matrix::new(rows, cols, rng.normal_vec(rows * cols).into_iter().map(|x| x * scale).collect())
}

impl ToyModel {
    pub fn new(seed: u64, task: &ToyTask, config: &TrainConfig) -> Result<Self> {
        task.validate()?;
        config.validate()?;
        let d = config.d;
        let mut rng = RngState::new(seed, 5);
        let proj = (1.0 / d as f64).sqrt();
        let map_spec = FeatureMapSpec::new(FeatureMapKind::Gaussian, d, config.num_features, mix_seed(seed, 99));
        Ok(Self {
            kind: config.kind,
            embed: init_matrix(&mut rng, task.vocab, d, 1.0)?,
            pos: init_matrix(&mut rng, task.seq_len, d, 1.0)?,
            wq: init_matrix(&mut rng, d, d, proj)?,
            wk: init_matrix(&mut rng, d, d, proj)?,
            wv: init_matrix(&mut rng, d, d, proj)?,
            wo: init_matrix(&mut rng, task.vocab, d, proj)?,
            bo: vec![0.0; task.vocab],
            gate: GateParams::new(vec![0.0; d], 0.0),
            sigma: vec![1.0; d],
            pool: build_pool(&map_spec, config.pool_size)?,
            map_spec,
            softmax_temperature: config.softmax_temperature,
            rfa_epsilon: config.rfa_epsilon,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn width(&self) -> usize {
        self.embed.cols()
    }

    pub fn parameter_count(&self) -> usize {
        let mats = [&self.embed, &self.pos, &self.wq, &self.wk, &self.wv, &self.wo];
        mats.iter().map(|m| m.data().len()).sum::<usize>()
            + self.bo.len()
            + self.gate.w.len()
            + 1
            + self.sigma.len()
    }

    pub fn is_finite(&self) -> bool {
        let mats = [&self.embed, &self.pos, &self.wq, &self.wk, &self.wv, &self.wo];
        mats.iter().all(|m| m.is_finite())
            && self.bo.iter().chain(&self.gate.w).chain(&self.sigma).all(|x| x.is_finite())
            && self.gate.b.is_finite()
    }

    /// Pool member `index` with the current σ.
    fn map(&self, index: usize) -> Result<RealizedFeatureMap> {
        self.pool.for_step(index).with_sigma(&self.sigma)
    }

    fn instance(&self, tokens: &[usize], map: &RealizedFeatureMap) -> Result<(Matrix, KernelInstance)> {
        let d = self.width();
        let l = tokens.len();
        if l > self.pos.rows() {
            return param(format!("sequence of length {l} exceeds the model's {}", self.pos.rows()));
        }
        let mut x = Matrix::zeros(l, d);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab() {
                return param(format!("token {tok} outside vocabulary"));
            }
            let row = x.row_mut(t);
            row.copy_from_slice(self.embed.row(tok));
            axpy(1.0, self.pos.row(t), row);
        }
        let project = |w: &Matrix| -> Matrix {
            let mut out = Matrix::zeros(l, d);
            for t in 0..l {
                out.row_mut(t).copy_from_slice(&w.matvec(x.row(t)));
            }
            out
        };
        let gated = self.kind == ToyKind::RfaGated;
        let batch = SequenceBatch::new(project(&self.wq), project(&self.wk), project(&self.wv), gated.then(|| x.clone()))?;
        let (config, map, init) = match self.kind {
            ToyKind::Softmax => (AttentionConfig::softmax().with_temperature(self.softmax_temperature), None, None),
            _ => (
                AttentionConfig { epsilon: self.rfa_epsilon, ..AttentionConfig::rfa() },
                Some(map.clone()),
                Some(AttentionState::zeros(map.output_dim(), d)),
            ),
        };
        let inst = KernelInstance {
            kind: self.kind.kernel(),
            batch,
            config,
            map,
            gate: gated.then(|| self.gate.clone()),
            init,
            causal: true,
        };
        Ok((x, inst))
    }

    fn logits_from(&self, h: &Matrix) -> Matrix {
        let mut logits = Matrix::zeros(h.rows(), self.vocab());
        for t in 0..h.rows() {
            let mut row = self.wo.matvec(h.row(t));
            axpy(1.0, &self.bo, &mut row);
            logits.row_mut(t).copy_from_slice(&row);
        }
        logits
    }

    /// Per-position logits (`L × V`) using pool member `map_index`.
    pub fn logits(&self, tokens: &[usize], map_index: usize) -> Result<Matrix> {
        let map = self.map(map_index)?;
        let (_, inst) = self.instance(tokens, &map)?;
        Ok(self.logits_from(forward(&inst)?.outputs()))
    }

    fn zero_grads(&self) -> ToyGrads {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ToyGrads {
            embed: z(&self.embed),
            pos: z(&self.pos),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            bo: vec![0.0; self.bo.len()],
            gate_w: vec![0.0; self.gate.w.len()],
            gate_b: 0.0,
            sigma: vec![0.0; self.sigma.len()],
        }
    }

    /// Mean cross-entropy and accuracy over supervised positions; gradients
    /// are accumulated into `grads` when given.
    fn loss_and_grads(&self, batch: &[Example], map: &RealizedFeatureMap, mut grads: Option<&mut ToyGrads>) -> Result<(f64, f64)> {
        let supervised: usize = batch.iter().map(|e| e.labels.iter().filter(|&&l| l != IGNORE).count()).sum();
        if supervised == 0 {
            return param("batch has no supervised positions");
        }
        let norm = 1.0 / supervised as f64;
        let mut total = 0.0;
        let mut correct = 0usize;
        for ex in batch {
            let (x, inst) = self.instance(&ex.tokens, map)?;
            let cache = forward(&inst)?;
            let h = cache.outputs();
            let logits = self.logits_from(h);
            let mut g_logits = Matrix::zeros(logits.rows(), logits.cols());
            for (t, &label) in ex.labels.iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                let label = label as usize;
                let row = logits.row(t);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                correct += usize::from(argmax == label);
                let g = g_logits.row_mut(t);
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = norm * ((row[j] - lse).exp() - if j == label { 1.0 } else { 0.0 });
                }
            }
            let Some(grads) = grads.as_deref_mut() else { continue };

            let d = self.width();
            let mut g_h = Matrix::zeros(h.rows(), d);
            for t in 0..h.rows() {
                let gl = g_logits.row(t);
                grads.wo.add_outer(1.0, gl, h.row(t));
                axpy(1.0, gl, &mut grads.bo);
                g_h.row_mut(t).copy_from_slice(&self.wo.vecmat(gl));
            }
            let kg = backward(inst.kind, &cache, &g_h)?;
            let mut g_x = kg.raw_inputs.clone().unwrap_or_else(|| Matrix::zeros(x.rows(), d));
            for (w, gw, gproj) in [
                (&self.wq, &mut grads.wq, &kg.queries),
                (&self.wk, &mut grads.wk, &kg.keys),
                (&self.wv, &mut grads.wv, &kg.values),
            ] {
                for t in 0..x.rows() {
                    gw.add_outer(1.0, gproj.row(t), x.row(t));
                    axpy(1.0, &w.vecmat(gproj.row(t)), g_x.row_mut(t));
                }
            }
            for (t, &tok) in ex.tokens.iter().enumerate() {
                axpy(1.0, g_x.row(t), grads.embed.row_mut(tok));
                axpy(1.0, g_x.row(t), grads.pos.row_mut(t));
            }
            if let Some(gw) = &kg.gate_w {
                axpy(1.0, gw, &mut grads.gate_w);
            }
            grads.gate_b += kg.gate_b.unwrap_or(0.0);
            if let Some(gs) = &kg.sigma {
                axpy(1.0, gs, &mut grads.sigma);
            }
        }
        Ok((total * norm, correct as f64 * norm))
    }

    fn sgd_step(&mut self, g: &ToyGrads, lr: f64) {
        let upd = |p: &mut Matrix, gm: &Matrix| axpy(-lr, gm.data(), p.data_mut());
        upd(&mut self.embed, &g.embed);
        upd(&mut self.pos, &g.pos);
        upd(&mut self.wq, &g.wq);
        upd(&mut self.wk, &g.wk);
        upd(&mut self.wv, &g.wv);
        upd(&mut self.wo, &g.wo);
        axpy(-lr, &g.bo, &mut self.bo);
        if self.kind == ToyKind::RfaGated {
            axpy(-lr, &g.gate_w, &mut self.gate.w);
            self.gate.b -= lr * g.gate_b;
        }
        if self.kind != ToyKind::Softmax {
            axpy(-lr, &g.sigma, &mut self.sigma);
            // σ must stay positive for the map to be valid
            self.sigma.iter_mut().for_each(|s| *s = s.max(1e-3));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains a fresh model initialized from `init_seed`. Batches for step `s`
/// come from sub-seed `(config.seed, s)`.
pub fn train_toy(init_seed: u64, task: &ToyTask, config: &TrainConfig) -> Result<(ToyModel, Vec<CurvePoint>)> {
    let mut model = ToyModel::new(init_seed, task, config)?;
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = gen_recency_task(task, mix_seed(config.seed, step as u64), config.batch_size)?;
        let map = model.map(step)?;
        let mut grads = model.zero_grads();
        let (loss, accuracy) = model.loss_and_grads(&batch, &map, Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(RfaError::Divergence { step, loss });
        }
        model.sgd_step(&grads, config.learning_rate);
        if !model.is_finite() {
            return Err(RfaError::Divergence { step, loss: f64::NAN });
        }
        curve.push(CurvePoint { step, loss, accuracy });
    }
    Ok((model, curve))
}

/// Cross-entropy and accuracy on `batch`, using pool member 0.
pub fn eval_toy(model: &ToyModel, batch: &[Example]) -> Result<(f64, f64)> {
    let map = model.map(0)?;
    model.loss_and_grads(batch, &map, None)
}

/// Writes `step,loss,accuracy` rows.
pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss,accuracy")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.step, p.loss, p.accuracy)?;
    }
    out.flush()?;
    Ok(())
}

/// Largest elementwise gap between two logit matrices over rows `0..=upto`.
pub fn logits_max_abs_diff(a: &Matrix, b: &Matrix, upto: usize) -> f64 {
    (0..=upto)
        .map(|t| {
            a.row(t)
                .iter()
                .zip(b.row(t))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task() -> ToyTask {
        ToyTask { vocab: 8, seq_len: 16, lag: 1 }
    }

    #[test]
    fn labels_follow_lag() {
        assert_eq!(recency_labels(&[3, 7, 2], 1), vec![IGNORE, 3, 7]);
        let task = ToyTask { vocab: 5, seq_len: 6, lag: 5 };
        for ex in gen_recency_task(&task, 1, 10).unwrap() {
            assert_eq!(ex.labels.iter().filter(|&&l| l != IGNORE).count(), 1);
            assert_eq!(ex.labels[5], ex.tokens[0] as i64);
        }
    }

    #[test]
    fn task_generation_is_deterministic() {
        let task = small_task();
        assert_eq!(gen_recency_task(&task, 4, 6).unwrap(), gen_recency_task(&task, 4, 6).unwrap());
        assert_ne!(gen_recency_task(&task, 4, 6).unwrap(), gen_recency_task(&task, 5, 6).unwrap());
    }

    #[test]
    fn task_validation() {
        assert!(ToyTask { vocab: 8, seq_len: 16, lag: 0 }.validate().is_err());
        assert!(ToyTask { vocab: 1, seq_len: 16, lag: 1 }.validate().is_err());
        assert!(ToyTask { vocab: 8, seq_len: 4, lag: 4 }.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let task = small_task();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (model, curve) = train_toy(3, &task, &cfg).unwrap();
        assert!(curve.is_empty());
        assert_eq!(model, ToyModel::new(3, &task, &cfg).unwrap());
    }

    #[test]
    fn zeroed_head_gives_uniform_prediction() {
        let task = small_task();
        for kind in ToyKind::ALL {
            let cfg = TrainConfig { kind, ..TrainConfig::default() };
            let mut model = ToyModel::new(1, &task, &cfg).unwrap();
            model.wo = Matrix::zeros(task.vocab, cfg.d);
            let batch = gen_recency_task(&task, 2, 4).unwrap();
            let (ce, _) = eval_toy(&model, &batch).unwrap();
            assert!((ce - (task.vocab as f64).ln()).abs() < 1e-12, "{kind}: {ce}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let task = small_task();
        let cfg = TrainConfig { steps: 5, ..TrainConfig::default() };
        let (_, a) = train_toy(7, &task, &cfg).unwrap();
        let (_, b) = train_toy(7, &task, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let task = ToyTask { vocab: 4, seq_len: 5, lag: 1 };
        for kind in ToyKind::ALL {
            let cfg = TrainConfig { kind, d: 4, num_features: 8, ..TrainConfig::default() };
            let mut model = ToyModel::new(2, &task, &cfg).unwrap();
            model.gate = GateParams::new(vec![0.3, -0.2, 0.1, 0.4], 0.2);
            let batch = gen_recency_task(&task, 9, 2).unwrap();
            let map = model.map(0).unwrap();
            let mut grads = model.zero_grads();
            model.loss_and_grads(&batch, &map, Some(&mut grads)).unwrap();
            let h = 1e-6;
            let loss_at = |m: &ToyModel| m.loss_and_grads(&batch, &m.map(0).unwrap(), None).unwrap().0;
            let checks: Vec<(&str, Box<dyn Fn(&mut ToyModel) -> &mut f64>, f64)> = vec![
                ("wq", Box::new(|m| &mut m.wq.data_mut()[5]), grads.wq.data()[5]),
                ("wk", Box::new(|m| &mut m.wk.data_mut()[2]), grads.wk.data()[2]),
                ("wv", Box::new(|m| &mut m.wv.data_mut()[7]), grads.wv.data()[7]),
                ("embed", Box::new(|m| &mut m.embed.data_mut()[3]), grads.embed.data()[3]),
                ("pos", Box::new(|m| &mut m.pos.data_mut()[6]), grads.pos.data()[6]),
                ("wo", Box::new(|m| &mut m.wo.data_mut()[1]), grads.wo.data()[1]),
                ("sigma", Box::new(|m| &mut m.sigma[1]), grads.sigma[1]),
                ("gate_b", Box::new(|m| &mut m.gate.b), grads.gate_b),
            ];
            for (name, access, analytic) in checks {
                let mut plus = model.clone();
                *access(&mut plus) += h;
                let mut minus = model.clone();
                *access(&mut minus) -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                assert!((numeric - analytic).abs() < 1e-6 * (1.0 + analytic.abs()), "{kind} {name}: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn no_look_ahead() {
        let task = small_task();
        for kind in ToyKind::ALL {
            let cfg = TrainConfig { kind, ..TrainConfig::default() };
            let model = ToyModel::new(4, &task, &cfg).unwrap();
            let tokens = gen_recency_task(&task, 8, 1).unwrap().remove(0).tokens;
            let base = model.logits(&tokens, 0).unwrap();
            let mut rng = RngState::new(1, 1);
            for t in [0usize, 5, 14] {
                let mut permuted = tokens.clone();
                rng.shuffle(&mut permuted[t + 1..]);
                let other = model.logits(&permuted, 0).unwrap();
                assert!(logits_max_abs_diff(&base, &other, t) <= 1e-10);
            }
        }
    }

    #[test]
    fn curve_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = [CurvePoint { step: 0, loss: 2.0, accuracy: 0.25 }];
        write_curve_csv(&curve, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,loss,accuracy\n0,2,0.25\n");
    }
}
