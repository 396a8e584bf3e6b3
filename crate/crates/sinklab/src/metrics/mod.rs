//! Scalar diagnostics: sink rate, rank/representational collapse distances,
//! token-norm histograms.

use crate::numerics::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bad metric input: {0}")]
    MetricInput(String),
    #[error("window {window} exceeds sequence length {t}")]
    Window { window: usize, t: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Default sink threshold ε.
pub const SINK_EPSILON: f64 = 0.3;
/// Default query window for the sink metric.
pub const SINK_WINDOW: usize = 64;

/// Per-head sink scores with their thresholded summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkReport {
    /// per_head_score[l][h] = mean attention to position 0 over the window.
    pub per_head_score: Vec<Vec<f64>>,
    /// Fraction of heads whose score exceeds ε.
    pub sink_rate: f64,
    pub epsilon: f64,
    pub window: usize,
}

impl SinkReport {
    /// One `layer,head,score` row per head, then `summary,...` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,score\n");
        for (l, heads) in self.per_head_score.iter().enumerate() {
            for (h, score) in heads.iter().enumerate() {
                out.push_str(&format!("{l},{h},{score}\n"));
            }
        }
        out.push_str(&format!("summary,epsilon,{}\n", self.epsilon));
        out.push_str(&format!("summary,window,{}\n", self.window));
        out.push_str(&format!("summary,sink_rate,{}\n", self.sink_rate));
        out
    }
}

/// Collapse diagnostics for one layer's token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub layer: usize,
    /// μ(V) = ‖V − (1/n)𝟙𝟙ᵀV‖_F, the rank-collapse distance.
    pub mu: f64,
    /// ‖v_n − v_{n−1}‖₂, the representational-collapse distance.
    pub rep_distance: f64,
    /// Per-token ℓ² norms.
    pub norms: Vec<f64>,
}

fn check_row_stochastic<S: Scalar>(attention: &Tensor<S>, rows_to_check: usize) -> Result<()> {
    let t = attention.shape()[1];
    for i in 0..rows_to_check {
        let sum: f64 = (0..t).map(|j| attention.get2(i, j).to_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::MetricInput(format!(
                "attention row {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Mean attention paid to position 0: (1/T) Σ_j α[j][0].
///
/// The paper's subscript is ambiguous; this follows the prose reading
/// ("heads attend to the sink on average"), i.e. the column-0 average over
/// query rows.
pub fn head_sink_score<S: Scalar>(attention: &Tensor<S>) -> Result<f64> {
    let (t, cols) = attention
        .as_matrix("head_sink_score")
        .map_err(|e| MetricsError::MetricInput(e.to_string()))?;
    if t == 0 || cols != t {
        return Err(MetricsError::MetricInput(format!(
            "attention must be square and nonempty, got {t}x{cols}"
        )));
    }
    check_row_stochastic(attention, t)?;
    windowed_score(attention, t)
}

/// The same score restricted to the first `window` query rows, without
/// renormalizing the rows.
fn windowed_score<S: Scalar>(attention: &Tensor<S>, window: usize) -> Result<f64> {
    let sum: f64 = (0..window).map(|j| attention.get2(j, 0).to_f64()).sum();
    Ok(sum / window as f64)
}

fn check_sink_args(epsilon: f64, window: usize) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(MetricsError::MetricInput(format!(
            "epsilon must lie in (0,1), got {epsilon}"
        )));
    }
    if window == 0 {
        return Err(MetricsError::MetricInput("window must be ≥ 1".into()));
    }
    Ok(())
}

/// Sink rate over a full model's attention maps, `attention[l][h]` being
/// the [T, T] map of head h in layer l.
pub fn sink_rate<S: Scalar>(
    attention: &[Vec<Tensor<S>>],
    epsilon: f64,
    window: usize,
) -> Result<SinkReport> {
    sink_rate_multi(std::slice::from_ref(&attention), epsilon, window)
}

/// Multi-prompt sink rate: per-head scores are averaged over prompts first
/// and thresholded once, matching a single reported percentage over a
/// prompt set. `prompts[p][l][h]` is one attention map.
pub fn sink_rate_multi<S: Scalar, A: AsRef<[Vec<Tensor<S>>]>>(
    prompts: &[A],
    epsilon: f64,
    window: usize,
) -> Result<SinkReport> {
    check_sink_args(epsilon, window)?;
    if prompts.is_empty() {
        return Err(MetricsError::MetricInput("no prompts given".into()));
    }
    let first = prompts[0].as_ref();
    let n_layers = first.len();
    let n_heads = first.first().map_or(0, Vec::len);
    if n_layers == 0 || n_heads == 0 {
        return Err(MetricsError::MetricInput(
            "attention tensor has no heads".into(),
        ));
    }
    let mut per_head_score = vec![vec![0.0f64; n_heads]; n_layers];
    for prompt in prompts {
        let layers = prompt.as_ref();
        if layers.len() != n_layers || layers.iter().any(|hs| hs.len() != n_heads) {
            return Err(MetricsError::MetricInput(
                "prompts disagree on layer/head counts".into(),
            ));
        }
        for (l, heads) in layers.iter().enumerate() {
            for (h, alpha) in heads.iter().enumerate() {
                let t = alpha.shape()[0];
                if window > t {
                    return Err(MetricsError::Window { window, t });
                }
                check_row_stochastic(alpha, window)?;
                per_head_score[l][h] += windowed_score(alpha, window)?;
            }
        }
    }
    let n_prompts = prompts.len() as f64;
    for heads in per_head_score.iter_mut() {
        for s in heads.iter_mut() {
            *s /= n_prompts;
        }
    }
    let sunk = per_head_score
        .iter()
        .flatten()
        .filter(|&&s| s > epsilon)
        .count();
    Ok(SinkReport {
        sink_rate: sunk as f64 / (n_layers * n_heads) as f64,
        per_head_score,
        epsilon,
        window,
    })
}

/// Eq. 1: ‖V − (1/n)𝟙𝟙ᵀV‖_F, distance to the rank-one all-rows-equal
/// matrix.
pub fn rank_collapse_distance<S: Scalar>(v: &Tensor<S>) -> f64 {
    let (n, d) = v.as_matrix("rank_collapse_distance").expect("matrix input");
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for b in 0..d {
            mean[b] += v.get2(i, b).to_f64();
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut sum_sq = 0.0;
    for i in 0..n {
        for b in 0..d {
            let diff = v.get2(i, b).to_f64() - mean[b];
            sum_sq += diff * diff;
        }
    }
    sum_sq.sqrt()
}

/// Eq. 2: ‖v_n − v_{n−1}‖₂ over the last two rows.
pub fn rep_collapse_distance<S: Scalar>(v: &Tensor<S>) -> Result<f64> {
    let (n, d) = v
        .as_matrix("rep_collapse_distance")
        .map_err(|e| MetricsError::MetricInput(e.to_string()))?;
    if n < 2 {
        return Err(MetricsError::MetricInput(format!(
            "representational collapse needs ≥ 2 rows, got {n}"
        )));
    }
    let sum_sq: f64 = (0..d)
        .map(|b| {
            let diff = v.get2(n - 1, b).to_f64() - v.get2(n - 2, b).to_f64();
            diff * diff
        })
        .sum();
    Ok(sum_sq.sqrt())
}

/// Per-row ℓ² norms.
pub fn token_norms<S: Scalar>(v: &Tensor<S>) -> Vec<f64> {
    let (n, d) = v.as_matrix("token_norms").expect("matrix input");
    (0..n)
        .map(|i| {
            (0..d)
                .map(|b| {
                    let x = v.get2(i, b).to_f64();
                    x * x
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Equal-width histogram over [min, max] of the per-row norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// bins+1 edges; edges[0] = min, edges[bins] = max.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn token_norm_histogram<S: Scalar>(v: &Tensor<S>, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(MetricsError::MetricInput("bins must be ≥ 1".into()));
    }
    let norms = token_norms(v);
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let edges = (0..=bins)
        .map(|i| lo + span * i as f64 / bins as f64)
        .collect();
    let mut counts = vec![0usize; bins];
    for &x in &norms {
        let idx = if span == 0.0 {
            0
        } else {
            (((x - lo) / span * bins as f64) as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// All collapse diagnostics for one layer's hidden-state matrix.
pub fn collapse_report<S: Scalar>(layer: usize, v: &Tensor<S>) -> Result<CollapseReport> {
    Ok(CollapseReport {
        layer,
        mu: rank_collapse_distance(v),
        rep_distance: rep_collapse_distance(v)?,
        norms: token_norms(v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xorshift(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.max(1);
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    /// Row-stochastic causal map with α[i][0] = p and the rest of each row
    /// uniform.
    fn sunk_alpha(t: usize, p: f64) -> Tensor<f64> {
        let mut a = Tensor::zeros(&[t, t]);
        for i in 0..t {
            if i == 0 {
                a.set2(0, 0, 1.0);
            } else {
                a.set2(i, 0, p);
                for j in 1..=i {
                    a.set2(i, j, (1.0 - p) / i as f64);
                }
            }
        }
        a
    }

    fn uniform_alpha(t: usize) -> Tensor<f64> {
        let mut a = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in 0..=i {
                a.set2(i, j, 1.0 / (i + 1) as f64);
            }
        }
        a
    }

    #[test]
    fn full_sink_column_scores_one() {
        let a = sunk_alpha(5, 1.0);
        assert_eq!(
            head_sink_score(&a).unwrap(),
            1.0,
            "all mass on column 0 must score exactly 1"
        );
    }

    #[test]
    fn single_token_scores_one() {
        let a = Tensor::from_vec(&[1, 1], vec![1.0f64]).unwrap();
        assert_eq!(head_sink_score(&a).unwrap(), 1.0);
    }

    #[test]
    fn uniform_causal_attention_scores_the_harmonic_mean() {
        let t = 64;
        let a = uniform_alpha(t);
        // Direct harmonic summation oracle.
        let harmonic: f64 = (1..=t).map(|j| 1.0 / j as f64).sum();
        let expect = harmonic / t as f64;
        let got = head_sink_score(&a).unwrap();
        assert!(
            (got - expect).abs() < 1e-12,
            "uniform causal score {got} vs H_64/64 = {expect}"
        );
        assert!(
            (got - 0.0741).abs() < 5e-5,
            "H_64/64 should be ≈ 0.0741, got {got}"
        );
    }

    #[test]
    fn non_stochastic_rows_are_rejected() {
        let mut a = uniform_alpha(4);
        a.set2(2, 1, 0.9);
        match head_sink_score(&a) {
            Err(MetricsError::MetricInput(msg)) => {
                assert!(msg.contains("row 2"), "error should say which row: {msg}")
            }
            other => panic!("expected MetricInput error, got {other:?}"),
        }
    }

    #[test]
    fn sink_score_ignores_query_row_order() {
        let mut rng = xorshift(31);
        let t = 8;
        // Random row-stochastic causal matrix.
        let mut a = Tensor::<f64>::zeros(&[t, t]);
        for i in 0..t {
            let mut row: Vec<f64> = (0..=i).map(|_| rng().abs() + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= sum;
            }
            for (j, x) in row.iter().enumerate() {
                a.set2(i, j, *x);
            }
        }
        let base = head_sink_score(&a).unwrap();
        // Swap query rows 3 and 6 (the mask structure no longer matters to
        // the score; only the column-0 average does).
        let mut swapped = a.clone();
        for j in 0..t {
            let (x, y) = (a.get2(3, j), a.get2(6, j));
            swapped.set2(3, j, y);
            swapped.set2(6, j, x);
        }
        let permuted = head_sink_score(&swapped).unwrap();
        assert!(
            (base - permuted).abs() < 1e-12,
            "score must not depend on query-row order: {base} vs {permuted}"
        );
    }

    #[test]
    fn sink_rate_is_one_when_all_heads_sink() {
        let attention = vec![
            vec![sunk_alpha(64, 0.9), sunk_alpha(64, 0.95)],
            vec![sunk_alpha(64, 0.99), sunk_alpha(64, 0.31)],
        ];
        let report = sink_rate(&attention, 0.3, 64).unwrap();
        assert_eq!(report.sink_rate, 1.0);
        assert_eq!(report.per_head_score.len(), 2);
        assert_eq!(report.per_head_score[0].len(), 2);
    }

    #[test]
    fn sink_rate_is_zero_for_uniform_heads_at_default_epsilon() {
        let attention = vec![vec![uniform_alpha(64), uniform_alpha(64)]];
        let report = sink_rate(&attention, SINK_EPSILON, SINK_WINDOW).unwrap();
        assert_eq!(
            report.sink_rate, 0.0,
            "H_64/64 ≈ 0.074 is far below ε = 0.3"
        );
    }

    #[test]
    fn sink_rate_is_monotone_nonincreasing_in_epsilon() {
        let attention = vec![
            vec![sunk_alpha(32, 0.5), sunk_alpha(32, 0.2)],
            vec![sunk_alpha(32, 0.05), uniform_alpha(32)],
        ];
        let mut last = f64::INFINITY;
        for eps in [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
            let r = sink_rate(&attention, eps, 32).unwrap().sink_rate;
            assert!(
                r <= last,
                "sink rate must not increase with ε: {r} after {last} at ε={eps}"
            );
            last = r;
        }
    }

    #[test]
    fn sink_rate_window_must_fit() {
        let attention = vec![vec![uniform_alpha(16)]];
        match sink_rate(&attention, 0.3, 64) {
            Err(MetricsError::Window { window: 64, t: 16 }) => {}
            other => panic!("expected WindowError, got {other:?}"),
        }
        assert!(
            sink_rate(&attention, 1.5, 16).is_err(),
            "epsilon outside (0,1) must be rejected"
        );
    }

    #[test]
    fn window_truncation_does_not_renormalize() {
        // Head with all mass at column 0 only in late rows: the windowed
        // score must only see the early rows.
        let t = 8;
        let mut a = uniform_alpha(t);
        for i in 4..t {
            for j in 0..t {
                a.set2(i, j, 0.0);
            }
            a.set2(i, 0, 1.0);
        }
        let windowed = sink_rate(&[vec![a.clone()]].to_vec(), 0.3, 4).unwrap();
        let expect: f64 = (1..=4).map(|j| 1.0 / j as f64).sum::<f64>() / 4.0;
        assert!(
            (windowed.per_head_score[0][0] - expect).abs() < 1e-12,
            "window-4 score {} should equal H_4/4 = {expect}",
            windowed.per_head_score[0][0]
        );
    }

    #[test]
    fn multi_prompt_averages_scores_before_thresholding() {
        // One prompt fully sunk (score 1.0), two prompts uniform
        // (score ≈ 0.105 at T=32): the average 0.4 clears ε = 0.3 even
        // though 2 of 3 prompts are below it.
        let sunk = vec![vec![sunk_alpha(32, 1.0)]];
        let uniform = vec![vec![uniform_alpha(32)]];
        let report = sink_rate_multi(&[&sunk, &uniform, &uniform], 0.3, 32).unwrap();
        let h32: f64 = (1..=32).map(|j| 1.0 / j as f64).sum::<f64>() / 32.0;
        let expect = (1.0 + 2.0 * h32) / 3.0;
        assert!(
            (report.per_head_score[0][0] - expect).abs() < 1e-12,
            "averaged score {} vs hand value {expect}",
            report.per_head_score[0][0]
        );
        assert_eq!(report.sink_rate, 1.0, "0.4 > 0.3 so the head counts");
        // Thresholding each prompt separately would give 1/3 — make sure
        // that is NOT what happens.
        assert_ne!(report.sink_rate, 1.0 / 3.0);
    }

    #[test]
    fn rank_collapse_zero_for_identical_rows() {
        let v = Tensor::from_vec(&[3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        assert_eq!(rank_collapse_distance(&v), 0.0);
    }

    #[test]
    fn rank_collapse_of_centered_pair_is_sqrt_two() {
        let v = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(
            (rank_collapse_distance(&v) - 2f64.sqrt()).abs() < 1e-15,
            "zero-mean ±e1 rows must give √2"
        );
    }

    #[test]
    fn rank_collapse_matches_brute_force() {
        let mut rng = xorshift(32);
        let v: Tensor<f64> = Tensor::from_fn(&[3, 2], |_| rng());
        // Brute force: subtract the column means elementwise, then the
        // Frobenius norm by definition.
        let mut brute = 0.0;
        for b in 0..2 {
            let mean = (v.get2(0, b) + v.get2(1, b) + v.get2(2, b)) / 3.0;
            for i in 0..3 {
                brute += (v.get2(i, b) - mean).powi(2);
            }
        }
        let brute = brute.sqrt();
        assert!(
            (rank_collapse_distance(&v) - brute).abs() < 1e-14,
            "μ disagreed with the brute-force evaluation"
        );
    }

    #[test]
    fn rank_collapse_is_translation_invariant() {
        let mut rng = xorshift(33);
        let v: Tensor<f64> = Tensor::from_fn(&[5, 3], |_| rng());
        let shift = [10.0, -3.5, 0.25];
        let shifted = Tensor::from_fn(&[5, 3], |idx| v.data()[idx] + shift[idx % 3]);
        assert!(
            (rank_collapse_distance(&v) - rank_collapse_distance(&shifted)).abs() < 1e-9,
            "adding the same vector to every row must not change μ"
        );
    }

    #[test]
    fn rep_collapse_basics() {
        let equal = Tensor::from_vec(&[3, 2], vec![5.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(rep_collapse_distance(&equal).unwrap(), 0.0);
        let ortho = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((rep_collapse_distance(&ortho).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let single = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert!(rep_collapse_distance(&single).is_err(), "n=1 must error");
    }

    #[test]
    fn rep_collapse_matches_direct_subtraction() {
        let mut rng = xorshift(34);
        let v: Tensor<f64> = Tensor::from_fn(&[4, 3], |_| rng());
        let direct = ((v.get2(3, 0) - v.get2(2, 0)).powi(2)
            + (v.get2(3, 1) - v.get2(2, 1)).powi(2)
            + (v.get2(3, 2) - v.get2(2, 2)).powi(2))
        .sqrt();
        assert!((rep_collapse_distance(&v).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn proposition_inequality_holds_on_random_draws() {
        // Small smoke version of the 10k-draw acceptance check:
        // rep ≤ 2μ + 1e-12 for every matrix.
        let mut rng = xorshift(35);
        for trial in 0..200 {
            let n = 2 + (trial % 7);
            let d = 1 + (trial % 5);
            let v: Tensor<f64> = Tensor::from_fn(&[n, d], |_| 3.0 * rng());
            let mu = rank_collapse_distance(&v);
            let rep = rep_collapse_distance(&v).unwrap();
            assert!(
                rep <= 2.0 * mu + 1e-12,
                "trial {trial}: rep {rep} > 2μ {mu}"
            );
        }
    }

    #[test]
    fn histogram_identical_rows_occupy_one_bin() {
        let v = Tensor::from_vec(&[3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let h = token_norm_histogram(&v, 4).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
        assert_eq!(
            h.counts.iter().filter(|&&c| c > 0).count(),
            1,
            "identical norms must land in exactly one bin"
        );
    }

    #[test]
    fn histogram_splits_norms_one_and_three() {
        let v = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let h = token_norm_histogram(&v, 2).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.edges.first().copied(), Some(1.0));
        assert_eq!(h.edges.last().copied(), Some(3.0));
    }

    #[test]
    fn histogram_counts_are_conserved() {
        let mut rng = xorshift(36);
        let v: Tensor<f64> = Tensor::from_fn(&[17, 3], |_| rng());
        let h = token_norm_histogram(&v, 5).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 17);
        assert_eq!(h.edges.len(), 6);
    }

    #[test]
    fn collapse_report_satisfies_its_own_invariant() {
        let mut rng = xorshift(37);
        let v: Tensor<f64> = Tensor::from_fn(&[6, 4], |_| rng());
        let report = collapse_report(2, &v).unwrap();
        assert!(report.mu >= 0.0);
        assert!(report.rep_distance <= 2.0 * report.mu + 1e-12);
        assert_eq!(report.norms.len(), 6);
        assert_eq!(report.layer, 2);
    }

    #[test]
    fn sink_report_csv_has_head_rows_and_summary() {
        // At T=32 the uniform head scores H_32/32 ≈ 0.127 < ε, while the
        // sunk head clears it, so the rate is exactly one half.
        let attention = vec![vec![sunk_alpha(32, 0.9), uniform_alpha(32)]];
        let report = sink_rate(&attention, 0.3, 32).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,head,score");
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[2].starts_with("0,1,"));
        assert!(lines.iter().any(|l| l.starts_with("summary,epsilon,0.3")));
        assert!(lines.iter().any(|l| l.starts_with("summary,sink_rate,0.5")));
    }
}
