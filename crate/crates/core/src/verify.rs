//! Property suites shared by the CLI and the test targets. Each check
//! returns a [`CheckOutcome`] rather than panicking so that `verify-all`
//! can report every failure.

use std::time::Instant;

use crate::attention::{rfa_causal, rfa_cross, rfa_stateful_carry, rfa_unnormalized, AttentionConfig, AttentionState, SequenceBatch};
use crate::bench::{approximation_error_sweep, decode_bench, log_log_slope, median_output_mse, DecodeConfig, DecodeKind, DecodeMode, SweepConfig};
use crate::error::Result;
use crate::feature_maps::{build_feature_map, rff_variance, FeatureMapSpec, RealizedFeatureMap};
use crate::gradients::{grad_check, random_instance, CheckStatus, KernelKind};
use crate::numerics::{axpy, dot, mean_var, mix_seed, norm, Matrix, RngState};
use crate::toytrain::{eval_toy, gen_recency_task, train_toy, ToyKind, ToyTask, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    /// `PASS name (1.2s): detail`
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// One-line machine-readable summary of a run.
pub fn summary_line(outcomes: &[CheckOutcome]) -> String {
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    format!(
        "SUMMARY passed={} failed={} failing={}",
        outcomes.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { "-".to_string() } else { failed.join(",") }
    )
}

/// Pair of points at distance exactly `z`, the first of unit norm.
fn pair_at_distance(rng: &mut RngState, d: usize, z: f64) -> (Vec<f64>, Vec<f64>) {
    let x = rng.unit_vec(d);
    let dir = rng.unit_vec(d);
    let mut y = x.clone();
    axpy(z, &dir, &mut y);
    (x, y)
}

/// Mean of `φ(x)·φ(y)` over `maps` fresh Gaussian maps (σ = 1) lies within
/// `num_se` standard errors of `exp(-‖x - y‖² / 2)` for every pair.
pub fn check_unbiasedness(seed: u64, d: usize, num_features: usize, pairs: usize, maps: usize, num_se: f64) -> CheckOutcome {
    timed("kernel_unbiasedness", || {
        let mut rng = RngState::new(seed, 31);
        let mut worst: f64 = 0.0;
        for p in 0..pairs {
            let x = rng.unit_vec(d);
            let y = rng.unit_vec(d);
            let target = (-0.5 * x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp();
            let samples = (0..maps)
                .map(|m| {
                    let spec = FeatureMapSpec::gaussian(d, num_features, mix_seed(mix_seed(seed, p as u64), m as u64));
                    let map = build_feature_map(&spec)?;
                    Ok(dot(&map.apply(&x)?, &map.apply(&y)?))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, var) = mean_var(&samples);
            let se = (var / maps as f64).sqrt();
            worst = worst.max((mean - target).abs() / se);
        }
        Ok((worst <= num_se, format!("worst |mean - k| = {worst:.2} SE over {pairs} pairs x {maps} maps (limit {num_se})")))
    })
}

/// Empirical variance of the estimator against `(1/2D)(1 - e^{-z²})²`.
pub fn check_variance_law(seed: u64, d: usize, ds: &[usize], zs: &[f64], maps: usize, rel_tol: f64) -> CheckOutcome {
    timed("variance_law", || {
        let mut rng = RngState::new(seed, 32);
        let mut worst: f64 = 0.0;
        for &num_features in ds {
            for &z in zs {
                let (x, y) = pair_at_distance(&mut rng, d, z);
                let samples = (0..maps)
                    .map(|m| {
                        let spec = FeatureMapSpec::gaussian(d, num_features, mix_seed(mix_seed(seed ^ 0xa5, num_features as u64), m as u64 ^ z.to_bits()));
                        let map = build_feature_map(&spec)?;
                        Ok(dot(&map.apply(&x)?, &map.apply(&y)?))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let (_, var) = mean_var(&samples);
                let expected = rff_variance(z, num_features)?;
                worst = worst.max((var - expected).abs() / expected);
            }
        }
        Ok((worst <= rel_tol, format!("worst relative variance gap {worst:.4} (limit {rel_tol})")))
    })
}

fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::new(rows, cols, rng.normal_vec(rows * cols))
}

/// Explicit per-key weights: `h_t = Σ_{i≤t} (φ(q_t)·φ(k_i)) v_i / Σ_{i≤t} φ(q_t)·φ(k_i)`.
fn prefix_oracle(q: &Matrix, k: &Matrix, v: &Matrix, map: &RealizedFeatureMap, cfg: &AttentionConfig) -> Result<Matrix> {
    let phi_k = k.row_iter().map(|r| map.apply(&cfg.rfa_input(r)?)).collect::<Result<Vec<_>>>()?;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for t in 0..q.rows() {
        let phi_q = map.apply(&cfg.rfa_input(q.row(t))?)?;
        let weights: Vec<f64> = phi_k[..=t].iter().map(|pk| dot(&phi_q, pk)).collect();
        let total: f64 = weights.iter().sum();
        let row = out.row_mut(t);
        for (w, vi) in weights.iter().zip(v.row_iter()) {
            axpy(w / total, vi, row);
        }
    }
    Ok(out)
}

/// Causal recurrence against the explicit prefix form, and the last causal
/// state against the one-pass cross state.
pub fn check_exact_recurrence(seed: u64, d: usize, num_features: usize, lengths: &[usize], seeds: u64, tol: f64) -> CheckOutcome {
    timed("exact_recurrence", || {
        let cfg = AttentionConfig::rfa();
        let mut worst: f64 = 0.0;
        for &n in lengths {
            for s in 0..seeds {
                let sub = mix_seed(seed, s);
                let mut rng = RngState::new(sub, 33);
                let (q, k, v) = (random_matrix(&mut rng, n, d)?, random_matrix(&mut rng, n, d)?, random_matrix(&mut rng, n, d)?);
                let map = build_feature_map(&FeatureMapSpec::gaussian(d, num_features, sub))?;
                let causal = rfa_causal(&q, &k, &v, &map, &cfg, &AttentionState::zeros(map.output_dim(), d))?;
                if causal.degenerate_partition {
                    continue;
                }
                worst = worst.max(causal.outputs.max_abs_diff(&prefix_oracle(&q, &k, &v, &map, &cfg)?));
                let cross = rfa_cross(&q, &k, &v, &map, &cfg)?;
                worst = worst.max(cross.state.s.max_abs_diff(&causal.state.s));
                worst = worst.max(crate::numerics::max_abs_diff(&cross.state.z, &causal.state.z));
            }
        }
        Ok((worst <= tol, format!("max abs diff {worst:.3e} over lengths {lengths:?} x {seeds} seeds (limit {tol:e})")))
    })
}

/// Segmented decoding with carried state against one unsegmented pass.
pub fn check_stateful_carry(seed: u64, d: usize, num_features: usize, length: usize, tol: f64) -> CheckOutcome {
    timed("stateful_carry", || {
        let cfg = AttentionConfig::rfa();
        let mut rng = RngState::new(seed, 34);
        let (q, k, v) = (random_matrix(&mut rng, length, d)?, random_matrix(&mut rng, length, d)?, random_matrix(&mut rng, length, d)?);
        let map = build_feature_map(&FeatureMapSpec::gaussian(d, num_features, seed))?;
        let whole = rfa_causal(&q, &k, &v, &map, &cfg, &AttentionState::zeros(map.output_dim(), d))?;
        let batch = SequenceBatch::new(q, k, v, None)?;
        let mut worst: f64 = 0.0;
        for trial in 0..5 {
            let mut cuts = vec![0, length];
            for _ in 0..trial + 1 {
                cuts.push(rng.below(length + 1));
            }
            cuts.sort_unstable();
            cuts.dedup();
            let segments: Vec<SequenceBatch> = cuts.windows(2).map(|w| batch.slice(w[0], w[1])).collect();
            let carried = rfa_stateful_carry(&segments, &map, &cfg)?;
            worst = worst.max(carried.outputs.max_abs_diff(&whole.outputs));
        }
        Ok((worst <= tol, format!("max abs diff {worst:.3e} over 5 segmentations (limit {tol:e})")))
    })
}

/// Key-norm-weighted path: equals the normalized path on unit-norm inputs
/// and a brute-force weighted sum on mixed norms.
pub fn check_unnormalized(seed: u64, d: usize, num_features: usize, length: usize, tol_unit: f64, tol_mixed: f64) -> CheckOutcome {
    timed("unnormalized_consistency", || {
        let cfg = AttentionConfig::rfa().with_normalize(false);
        let mut rng = RngState::new(seed, 35);
        let map = build_feature_map(&FeatureMapSpec::gaussian(d, num_features, seed))?;
        let unit = |rng: &mut RngState| Matrix::from_rows(&(0..length).map(|_| rng.unit_vec(d)).collect::<Vec<_>>());
        let (q, k) = (unit(&mut rng)?, unit(&mut rng)?);
        let v = random_matrix(&mut rng, length, d)?;
        let unit_gap = rfa_unnormalized(&q, &k, &v, &map, &cfg)?.max_abs_diff(&rfa_cross(&q, &k, &v, &map, &cfg)?.outputs);

        let mut k_mixed = k.clone();
        for i in 0..length {
            let scale = rng.uniform(0.3, 2.0);
            k_mixed.row_mut(i).iter_mut().for_each(|x| *x *= scale);
        }
        let got = rfa_unnormalized(&q, &k_mixed, &v, &map, &cfg)?;
        let mut oracle = Matrix::zeros(length, d);
        for t in 0..length {
            let phi_q = map.apply(q.row(t))?;
            let mut total = 0.0;
            let row = oracle.row_mut(t);
            for (ki, vi) in k_mixed.row_iter().zip(v.row_iter()) {
                let w = (norm(ki).powi(2) / 2.0).exp() * dot(&phi_q, &map.apply(ki)?);
                total += w;
                axpy(w, vi, row);
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let mixed_gap = got.max_abs_diff(&oracle);
        Ok((
            unit_gap <= tol_unit && mixed_gap <= tol_mixed,
            format!("unit-norm gap {unit_gap:.3e} (limit {tol_unit:e}), mixed-norm gap {mixed_gap:.3e} (limit {tol_mixed:e})"),
        ))
    })
}

/// Analytic against central-difference gradients for `instances` random
/// instances of every kernel. Instances landing in the clamp region are
/// replaced by the next seed.
pub fn check_gradients(seed: u64, instances: usize, tol: f64) -> CheckOutcome {
    timed("gradient_correctness", || {
        let mut worst: f64 = 0.0;
        let mut failures = Vec::new();
        let mut skipped = 0;
        for kind in KernelKind::ALL {
            let mut done = 0;
            let mut s = 0u64;
            while done < instances {
                if skipped > 10 * instances {
                    return Ok((false, format!("too many inconclusive instances ({skipped})")));
                }
                let inst = random_instance(kind, mix_seed(seed, s), 6, 4, 8, 3)?;
                s += 1;
                let report = grad_check(&inst, 1e-5, tol)?;
                match report.status {
                    CheckStatus::Inconclusive => skipped += 1,
                    CheckStatus::Pass | CheckStatus::Fail => {
                        worst = worst.max(report.max_rel_error);
                        if report.status == CheckStatus::Fail {
                            failures.push(format!("{kind}#{}", s - 1));
                        }
                        done += 1;
                    }
                }
            }
        }
        Ok((
            failures.is_empty(),
            format!(
                "max relative error {worst:.3e} (limit {tol:e}) over {instances} instances x 4 kernels, {skipped} inconclusive replaced{}",
                if failures.is_empty() { String::new() } else { format!(", failing {}", failures.join(" ")) }
            ),
        ))
    })
}

/// Median output MSE strictly decreasing in D.
pub fn check_convergence_in_d(seed: u64, ds: &[usize], seeds: u64) -> CheckOutcome {
    timed("convergence_in_d", || {
        let records = approximation_error_sweep(ds, seeds, seed, &SweepConfig { instance_seed: seed, ..SweepConfig::default() })?;
        let medians = median_output_mse(&records);
        let decreasing = medians.windows(2).all(|w| w[1].1 < w[0].1);
        let shown: Vec<String> = medians.iter().map(|(d, m)| format!("{d}:{m:.3e}")).collect();
        Ok((decreasing, format!("median mse_output {}", shown.join(" "))))
    })
}

/// Decode-time slopes, step-time flatness and live-memory counts.
pub fn check_scaling(seed: u64, lengths: &[usize], config: &DecodeConfig) -> CheckOutcome {
    timed("scaling_trends", || {
        let config = DecodeConfig { seed, ..config.clone() };
        let mut ok = true;
        let mut parts = Vec::new();
        for mode in [DecodeMode::Unconditional, DecodeMode::Conditional] {
            let softmax = decode_bench(DecodeKind::Softmax, mode, lengths, 1, &config)?;
            let s_slope = log_log_slope(&softmax);
            let s_steps = softmax[softmax.len() - 1].median_step_seconds / softmax[0].median_step_seconds;
            ok &= (1.6..=2.2).contains(&s_slope) && s_steps >= 3.0;
            parts.push(format!("{mode} softmax slope {s_slope:.2} step x{s_steps:.2}"));
            for kind in [DecodeKind::RfaGaussian, DecodeKind::RfaArccos] {
                let recs = decode_bench(kind, mode, lengths, 1, &config)?;
                let slope = log_log_slope(&recs);
                let steps = recs[recs.len() - 1].median_step_seconds / recs[0].median_step_seconds;
                let constant = recs.iter().all(|r| r.live_elements == recs[0].live_elements);
                ok &= (0.8..=1.2).contains(&slope) && steps <= 1.5 && s_slope - slope >= 0.5 && constant;
                parts.push(format!("{kind} slope {slope:.2} step x{steps:.2}"));
            }
        }
        let n = *lengths.last().unwrap_or(&0);
        let soft = crate::bench::live_elements(DecodeKind::Softmax, DecodeMode::Unconditional, n, 1, &config);
        let rfa = crate::bench::live_elements(DecodeKind::RfaGaussian, DecodeMode::Unconditional, n, 1, &config);
        let ratio = rfa as f64 / soft as f64;
        ok &= ratio < 0.1;
        parts.push(format!("memory {rfa}/{soft} = {:.1}%", 100.0 * ratio));
        Ok((ok, parts.join("; ")))
    })
}

/// Per-seed final losses of the toy task for one kind.
pub fn toy_final_losses(kind: ToyKind, seeds: u64, task: &ToyTask, config: &TrainConfig) -> Result<Vec<f64>> {
    (0..seeds)
        .map(|seed| {
            let cfg = TrainConfig { kind, seed, ..config.clone() };
            let (model, _) = train_toy(seed, task, &cfg)?;
            let held = gen_recency_task(task, mix_seed(seed, 1 << 40), 256)?;
            Ok(eval_toy(&model, &held)?.0)
        })
        .collect()
}

/// All three kinds reach half of chance in at least `seeds - 1` seeds, and
/// gated RFA is no worse than ungated in at least `seeds - 1` seeds.
pub fn check_toy(seeds: u64, config: &TrainConfig) -> CheckOutcome {
    timed("toy_trainability", || {
        let task = ToyTask { vocab: 8, seq_len: 16, lag: 1 };
        let threshold = 0.5 * (task.vocab as f64).ln();
        let need = seeds.saturating_sub(1) as usize;
        let mut ok = true;
        let mut parts = Vec::new();
        let mut losses = Vec::new();
        for kind in ToyKind::ALL {
            let l = toy_final_losses(kind, seeds, &task, config)?;
            let good = l.iter().filter(|&&x| x <= threshold).count();
            ok &= good >= need;
            parts.push(format!(
                "{kind} {good}/{seeds} below {threshold:.3} [{}]",
                l.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
            ));
            losses.push(l);
        }
        let wins = losses[2].iter().zip(&losses[1]).filter(|(g, u)| g <= u).count();
        ok &= wins >= need;
        parts.push(format!("gated <= ungated in {wins}/{seeds}"));
        Ok((ok, parts.join("; ")))
    })
}

/// Every suite with its default sizes.
pub fn verify_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = kernel_suite(seed);
    out.extend(recurrence_suite(seed, 8, 64, &[1, 16, 64, 256]));
    out.push(check_gradients(seed, 20, 1e-5));
    out.push(check_convergence_in_d(seed, &[16, 32, 64, 128, 256], 20));
    out.push(check_scaling(seed, &[256, 512, 1024, 2048], &DecodeConfig { reps: 9, ..DecodeConfig::default() }));
    out.push(check_toy(5, &TrainConfig::default()));
    out
}

pub fn kernel_suite(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_unbiasedness(seed, 8, 4, 64, 100_000, 4.0),
        check_variance_law(seed, 8, &[1, 4, 16], &[0.5, 1.0, 2.0], 100_000, 0.1),
    ]
}

pub fn recurrence_suite(seed: u64, d: usize, num_features: usize, lengths: &[usize]) -> Vec<CheckOutcome> {
    let longest = lengths.iter().copied().max().unwrap_or(64).max(2);
    vec![
        check_exact_recurrence(seed, d, num_features, lengths, 20, 1e-10),
        check_stateful_carry(seed, d, num_features, longest, 1e-12),
        check_unnormalized(seed, d, num_features, longest.min(64), 1e-12, 1e-10),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_lists_failures() {
        let mk = |name, passed| CheckOutcome { name, passed, detail: String::new(), seconds: 0.0 };
        assert_eq!(summary_line(&[mk("a", true), mk("b", true)]), "SUMMARY passed=2 failed=0 failing=-");
        assert_eq!(summary_line(&[mk("a", false), mk("b", true), mk("c", false)]), "SUMMARY passed=1 failed=2 failing=a,c");
        assert!(mk("x", false).line().starts_with("FAIL x"));
    }

    #[test]
    fn errors_become_failures() {
        let out = check_exact_recurrence(0, 0, 4, &[3], 1, 1e-10);
        assert!(!out.passed);
        assert!(out.detail.starts_with("error"));
    }

    #[test]
    fn small_suites_pass() {
        assert!(check_unbiasedness(1, 4, 2, 4, 5000, 4.0).passed);
        for o in recurrence_suite(2, 4, 16, &[1, 9, 20]) {
            assert!(o.passed, "{}", o.line());
        }
        assert!(check_gradients(3, 2, 1e-5).passed);
    }

    #[test]
    fn pair_distance_is_exact() {
        let mut rng = RngState::new(0, 0);
        for z in [0.5, 1.0, 2.0] {
            let (x, y) = pair_at_distance(&mut rng, 8, z);
            let gap: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            assert!((norm(&gap) - z).abs() < 1e-12);
        }
    }
}
