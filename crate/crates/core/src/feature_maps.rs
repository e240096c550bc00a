//! Random feature maps φ and their closed-form variance.
//!
//! A map is described by a [`FeatureMapSpec`] and realized into a
//! [`RealizedFeatureMap`] holding the projection `W = σ ∘ W̃`, where `W̃` is a
//! `D × d` matrix of standard normal draws fixed by the seed and `σ` is a
//! per-dimension positive scale. Only `σ` is ever differentiated; `W̃` is a
//! constant.
//!
//! Three kinds are supported:
//!
//! - `Gaussian`: `√(1/D) [sin(w₁·x) … sin(w_D·x), cos(w₁·x) … cos(w_D·x)]`,
//!   all sines first. `φ(x)·φ(y)` is an unbiased estimate of
//!   `exp(-‖σ ∘ (x - y)‖² / 2)`; with `σ = 1` that is the unit-bandwidth
//!   Gaussian kernel.
//! - `ArcCos`: `√(1/D) [ReLU(w₁·x) … ReLU(w_D·x)]`, estimating the order-1
//!   arc-cosine kernel.
//! - `Elu`: the deterministic `elu(x) + 1` applied elementwise to the raw
//!   input; `W` is empty and `D` is ignored.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{param, Result, RfaError};
use crate::numerics::{dot, mix_seed, norm, seeded_normal_matrix, Matrix, RngState};

/// Pool size used when none is given.
pub const DEFAULT_POOL_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMapKind {
    Gaussian,
    ArcCos,
    Elu,
}

impl FeatureMapKind {
    pub fn is_random(self) -> bool {
        !matches!(self, FeatureMapKind::Elu)
    }
}

impl fmt::Display for FeatureMapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMapKind::Gaussian => "gaussian",
            FeatureMapKind::ArcCos => "arccos",
            FeatureMapKind::Elu => "elu",
        })
    }
}

impl FromStr for FeatureMapKind {
    type Err = RfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(FeatureMapKind::Gaussian),
            "arccos" => Ok(FeatureMapKind::ArcCos),
            "elu" => Ok(FeatureMapKind::Elu),
            other => param(format!("unknown feature map kind '{other}'")),
        }
    }
}

/// Shape, scale, and seed of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSpec {
    pub kind: FeatureMapKind,
    /// Input dimension.
    pub d: usize,
    /// Number of random projections. Unused by `Elu`.
    pub num_features: usize,
    /// Per-dimension scale; a single entry is broadcast to all `d` dimensions.
    pub sigma: Vec<f64>,
    pub seed: u64,
}

impl FeatureMapSpec {
    pub fn new(kind: FeatureMapKind, d: usize, num_features: usize, seed: u64) -> Self {
        Self {
            kind,
            d,
            num_features,
            sigma: vec![1.0],
            seed,
        }
    }

    pub fn gaussian(d: usize, num_features: usize, seed: u64) -> Self {
        Self::new(FeatureMapKind::Gaussian, d, num_features, seed)
    }

    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Self {
        self.sigma = sigma;
        self
    }

    /// Length of φ(x): `2D`, `D`, or `d` depending on the kind.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            FeatureMapKind::Gaussian => 2 * self.num_features,
            FeatureMapKind::ArcCos => self.num_features,
            FeatureMapKind::Elu => self.d,
        }
    }

    /// Checks the invariants and returns `sigma` broadcast to length `d`.
    fn resolved_sigma(&self) -> Result<Vec<f64>> {
        if self.d == 0 {
            return param("feature map input dimension d must be >= 1");
        }
        if self.kind.is_random() && self.num_features == 0 {
            return param("feature map needs D >= 1 random features");
        }
        let sigma = match self.sigma.len() {
            1 => vec![self.sigma[0]; self.d],
            n if n == self.d => self.sigma.clone(),
            n => return param(format!("sigma has length {n}, expected 1 or d = {}", self.d)),
        };
        if let Some(bad) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return param(format!("sigma entries must be positive and finite, got {bad}"));
        }
        Ok(sigma)
    }
}

/// A feature map with its random projection drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedFeatureMap {
    spec: FeatureMapSpec,
    /// Standard normal draws `W̃`, `D × d` (0 × d for elu).
    raw: Matrix,
    /// `W = σ ∘ W̃`, row by row.
    w: Matrix,
}

/// Realizes `spec`: draws `W̃` from `RngState::new(spec.seed, 0)` and scales
/// each row elementwise by `σ`.
pub fn build_feature_map(spec: &FeatureMapSpec) -> Result<RealizedFeatureMap> {
    let sigma = spec.resolved_sigma()?;
    let raw = if spec.kind.is_random() {
        seeded_normal_matrix(&mut RngState::new(spec.seed, 0), spec.num_features, spec.d)?
    } else {
        Matrix::zeros(0, spec.d)
    };
    let mut resolved = spec.clone();
    resolved.sigma = sigma;
    Ok(RealizedFeatureMap::from_raw(resolved, raw))
}

impl RealizedFeatureMap {
    fn from_raw(spec: FeatureMapSpec, raw: Matrix) -> Self {
        let mut w = raw.clone();
        for r in 0..w.rows() {
            for (x, s) in w.row_mut(r).iter_mut().zip(&spec.sigma) {
                *x *= s;
            }
        }
        Self { spec, raw, w }
    }

    /// Same draws `W̃`, new scale `σ`.
    pub fn with_sigma(&self, sigma: &[f64]) -> Result<Self> {
        let spec = self.spec.clone().with_sigma(sigma.to_vec());
        let sigma = spec.resolved_sigma()?;
        let mut resolved = spec;
        resolved.sigma = sigma;
        Ok(Self::from_raw(resolved, self.raw.clone()))
    }

    pub fn spec(&self) -> &FeatureMapSpec {
        &self.spec
    }

    pub fn kind(&self) -> FeatureMapKind {
        self.spec.kind
    }

    pub fn input_dim(&self) -> usize {
        self.spec.d
    }

    pub fn num_features(&self) -> usize {
        self.spec.num_features
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Per-dimension scale, always of length `d`.
    pub fn sigma(&self) -> &[f64] {
        &self.spec.sigma
    }

    pub fn raw_projection(&self) -> &Matrix {
        &self.raw
    }

    pub fn projection(&self) -> &Matrix {
        &self.w
    }

    /// φ(x), checking the input length.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.d {
            return param(format!(
                "feature map expects input of length {}, got {}",
                self.spec.d,
                x.len()
            ));
        }
        let mut out = vec![0.0; self.output_dim()];
        self.apply_into(x, &mut out);
        Ok(out)
    }

    /// φ(x) into a caller-provided buffer of length `output_dim()`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.output_dim());
        match self.spec.kind {
            FeatureMapKind::Gaussian => {
                let n = self.spec.num_features;
                let scale = (1.0 / n as f64).sqrt();
                let (sines, cosines) = out.split_at_mut(n);
                for (i, row) in self.w.row_iter().enumerate() {
                    let (s, c) = dot(row, x).sin_cos();
                    sines[i] = scale * s;
                    cosines[i] = scale * c;
                }
            }
            FeatureMapKind::ArcCos => {
                let scale = (1.0 / self.spec.num_features as f64).sqrt();
                for (o, row) in out.iter_mut().zip(self.w.row_iter()) {
                    *o = scale * dot(row, x).max(0.0);
                }
            }
            FeatureMapKind::Elu => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = elu(xi) + 1.0;
                }
            }
        }
    }

    /// Reverse-mode step through φ at `x`.
    ///
    /// Adds `∂L/∂x` into `grad_x` and `∂L/∂σ` into `grad_sigma` (length `d`)
    /// given `grad_phi = ∂L/∂φ(x)`. ReLU and elu use the right derivative at 0.
    pub fn backward_into(
        &self,
        x: &[f64],
        grad_phi: &[f64],
        grad_x: &mut [f64],
        grad_sigma: &mut [f64],
    ) {
        match self.spec.kind {
            FeatureMapKind::Gaussian => {
                let n = self.spec.num_features;
                let scale = (1.0 / n as f64).sqrt();
                for i in 0..n {
                    let row = self.w.row(i);
                    let (s, c) = dot(row, x).sin_cos();
                    let ga = scale * (grad_phi[i] * c - grad_phi[n + i] * s);
                    self.project_back(i, x, ga, grad_x, grad_sigma);
                }
            }
            FeatureMapKind::ArcCos => {
                let scale = (1.0 / self.spec.num_features as f64).sqrt();
                for i in 0..self.spec.num_features {
                    if dot(self.w.row(i), x) > 0.0 {
                        self.project_back(i, x, scale * grad_phi[i], grad_x, grad_sigma);
                    }
                }
            }
            FeatureMapKind::Elu => {
                for ((gx, &xi), g) in grad_x.iter_mut().zip(x).zip(grad_phi) {
                    *gx += g * if xi > 0.0 { 1.0 } else { xi.exp() };
                }
            }
        }
    }

    // a_i = Σ_j σ_j w̃_ij x_j, so ∂a_i/∂x_j = w_ij and ∂a_i/∂σ_j = w̃_ij x_j.
    fn project_back(&self, i: usize, x: &[f64], ga: f64, grad_x: &mut [f64], grad_sigma: &mut [f64]) {
        let w = self.w.row(i);
        let raw = self.raw.row(i);
        for j in 0..x.len() {
            grad_x[j] += ga * w[j];
            grad_sigma[j] += ga * raw[j] * x[j];
        }
    }

    /// The kernel value `φ(x)·φ(y)` estimates. `Elu` has none.
    pub fn exact_kernel(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self.spec.kind {
            FeatureMapKind::Gaussian => {
                let sq: f64 = x
                    .iter()
                    .zip(y)
                    .zip(&self.spec.sigma)
                    .map(|((a, b), s)| (s * (a - b)).powi(2))
                    .sum();
                Ok((-sq / 2.0).exp())
            }
            FeatureMapKind::ArcCos => {
                let sx: Vec<f64> = x.iter().zip(&self.spec.sigma).map(|(a, s)| a * s).collect();
                let sy: Vec<f64> = y.iter().zip(&self.spec.sigma).map(|(a, s)| a * s).collect();
                Ok(arccos_kernel(&sx, &sy))
            }
            FeatureMapKind::Elu => Err(RfaError::UnsupportedKind(
                "elu is deterministic and estimates no kernel".into(),
            )),
        }
    }
}

/// `φ(x)·φ(y)` for a random feature map.
pub fn kernel_estimate(map: &RealizedFeatureMap, x: &[f64], y: &[f64]) -> Result<f64> {
    if !map.kind().is_random() {
        return Err(RfaError::UnsupportedKind(
            "kernel_estimate needs a gaussian or arccos map".into(),
        ));
    }
    if y.len() != x.len() {
        return param("kernel_estimate inputs differ in length");
    }
    Ok(dot(&map.apply(x)?, &map.apply(y)?))
}

/// Variance of the Gaussian estimator with `D` features at scaled distance
/// `z`: `(1 / 2D) (1 - e^{-z²})²`.
pub fn rff_variance(z: f64, num_features: usize) -> Result<f64> {
    if !(z >= 0.0) {
        return param(format!("z must be nonnegative, got {z}"));
    }
    if num_features == 0 {
        return param("rff_variance needs D >= 1");
    }
    let gap = 1.0 - (-z * z).exp();
    Ok(gap * gap / (2.0 * num_features as f64))
}

/// Order-1 arc-cosine kernel `E[ReLU(w·x) ReLU(w·y)]` for `w ~ N(0, I)`:
/// `‖x‖‖y‖ (sin θ + (π - θ) cos θ) / 2π`.
pub fn arccos_kernel(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    let cos = (dot(x, y) / (nx * ny)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    nx * ny * (theta.sin() + (PI - theta) * cos) / (2.0 * PI)
}

/// `e^x - 1` for `x < 0`, `x` otherwise.
pub fn elu(x: f64) -> f64 {
    if x < 0.0 {
        x.exp_m1()
    } else {
        x
    }
}

/// `P` maps sharing one spec, each drawn from its own sub-seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapPool {
    maps: Vec<RealizedFeatureMap>,
}

/// Seed of pool member `index`.
pub fn pool_sub_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64)
}

pub fn build_pool(spec: &FeatureMapSpec, size: usize) -> Result<FeatureMapPool> {
    if size == 0 {
        return param("feature map pool size must be >= 1");
    }
    let maps = (0..size)
        .map(|i| {
            let mut member = spec.clone();
            member.seed = pool_sub_seed(spec.seed, i);
            build_feature_map(&member)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMapPool { maps })
}

impl FeatureMapPool {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, index: usize) -> &RealizedFeatureMap {
        &self.maps[index]
    }

    /// Map used at training step `step` (`step mod P`).
    pub fn for_step(&self, step: usize) -> &RealizedFeatureMap {
        &self.maps[step % self.maps.len()]
    }

    pub fn maps(&self) -> &[RealizedFeatureMap] {
        &self.maps
    }

    /// Replaces σ on every member, keeping their draws.
    pub fn with_sigma(&self, sigma: &[f64]) -> Result<Self> {
        let maps = self
            .maps
            .iter()
            .map(|m| m.with_sigma(sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { maps })
    }
}
