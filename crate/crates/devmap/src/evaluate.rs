//! Performance measures computed against generating truth, plus the small
//! statistical helpers the study harness and acceptance checks lean on
//! (Monte Carlo aggregation, paired comparisons, KS distances).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::LongDataset;
use crate::error::{Error, Result};
use crate::model::{DeviationReport, RegionSummary, SubjectSummary, LN_2PI};
use crate::simulate::SimTruth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    /// Mean of predicted minus true normative mean over observations.
    pub mean_bias: f64,
    pub mse: f64,
    /// (1/nR) sum of squared deviation-map errors.
    pub map_mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub z_mean: f64,
    /// Unbiased sample variance.
    pub z_var: f64,
    /// Empirical P(|Z| > 1.96).
    pub tail_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    /// Undefined when nothing is flagged.
    pub ppv: Option<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Sample standard deviation of the residuals.
    pub residual_sd: f64,
    /// Mean standardized log-loss: mean negative predictive log density
    /// minus the same under the trivial marginal normal model.
    pub msll: f64,
}

/// Full per-(scenario, model, replicate) evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: AccuracyMetrics,
    pub calibration: CalibrationMetrics,
    /// Absent when the replicate has no abnormal subjects.
    pub detection: Option<DetectionMetrics>,
    pub fit: FitMetrics,
    pub regions: Vec<RegionSummary>,
    pub subjects: Vec<SubjectSummary>,
}

/// Scalar metric names in report order, used for aggregated tables.
pub const METRIC_NAMES: [&str; 13] = [
    "mean_bias",
    "mse",
    "map_mse",
    "z_mean",
    "z_var",
    "tail_prob",
    "sensitivity",
    "specificity",
    "ppv",
    "auc",
    "mae",
    "rmse",
    "residual_sd",
];

impl MetricReport {
    /// Values aligned with `METRIC_NAMES`; detection entries are None when
    /// unavailable.
    pub fn scalar_values(&self) -> Vec<Option<f64>> {
        let d = self.detection;
        vec![
            Some(self.accuracy.mean_bias),
            Some(self.accuracy.mse),
            Some(self.accuracy.map_mse),
            Some(self.calibration.z_mean),
            Some(self.calibration.z_var),
            Some(self.calibration.tail_prob),
            d.map(|d| d.sensitivity),
            d.map(|d| d.specificity),
            d.and_then(|d| d.ppv),
            d.map(|d| d.auc),
            Some(self.fit.mae),
            Some(self.fit.rmse),
            Some(self.fit.residual_sd),
        ]
    }
}

/// Normative-mean accuracy and deviation-map recovery against truth. The
/// report must carry deviation maps and be aligned with the dataset the
/// truth was generated for.
pub fn accuracy_metrics(
    data: &LongDataset,
    truth: &SimTruth,
    report: &DeviationReport,
) -> Result<AccuracyMetrics> {
    let n_obs = data.n_observations();
    if report.rows.len() != n_obs || truth.mu.len() != n_obs {
        return Err(Error::Alignment(format!(
            "expected {n_obs} scored observations, got {} rows and {} truth means",
            report.rows.len(),
            truth.mu.len()
        )));
    }
    let mut bias = 0.0;
    let mut mse = 0.0;
    for (row, &mu_true) in report.rows.iter().zip(&truth.mu) {
        let e = row.mu_hat - mu_true;
        bias += e;
        mse += e * e;
    }
    bias /= n_obs as f64;
    mse /= n_obs as f64;

    let maps = report
        .deviation_maps
        .as_ref()
        .ok_or_else(|| Error::Alignment("report carries no deviation maps".into()))?;
    let (n, r) = (truth.deviations.nrows(), truth.deviations.ncols());
    if maps.mean.nrows() != n || maps.mean.ncols() != r {
        return Err(Error::Alignment(format!(
            "deviation maps are {}x{}, truth is {n}x{r}",
            maps.mean.nrows(),
            maps.mean.ncols()
        )));
    }
    let map_mse = (&maps.mean - &truth.deviations).norm_squared() / (n * r) as f64;
    Ok(AccuracyMetrics {
        mean_bias: bias,
        mse,
        map_mse,
    })
}

pub fn calibration_metrics(zs: &[f64]) -> Result<CalibrationMetrics> {
    if zs.len() < 2 {
        return Err(Error::TooFewScores {
            needed: 2,
            got: zs.len(),
        });
    }
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n - 1.0);
    let tail = zs.iter().filter(|z| z.abs() > 1.96).count() as f64 / n;
    Ok(CalibrationMetrics {
        z_mean: mean,
        z_var: var,
        tail_prob: tail,
    })
}

/// Region-level confusion at |score| > threshold plus the rank-statistic
/// AUC over |score| with midranks for ties.
pub fn detection_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<DetectionMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let flag = s.abs() > threshold;
        match (flag, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    let sensitivity = tp as f64 / (tp + fnn) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    let ppv = if tp + fp > 0 {
        Some(tp as f64 / (tp + fp) as f64)
    } else {
        None
    };

    // Midrank AUC on absolute scores.
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs()));
    let mut ranks = vec![0.0f64; n];
    let mut k = 0;
    while k < n {
        let mut j = k;
        while j + 1 < n && scores[order[j + 1]].abs() == scores[order[k]].abs() {
            j += 1;
        }
        let midrank = (k + j) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=j] {
            ranks[idx] = midrank;
        }
        k = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let auc =
        (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
    Ok(DetectionMetrics {
        sensitivity,
        specificity,
        ppv,
        auc,
    })
}

/// Predictive-fit summaries from scored rows: residual location/scale plus
/// the standardized log-loss against the trivial marginal model.
pub fn fit_metrics(report: &DeviationReport) -> Result<FitMetrics> {
    let n = report.rows.len();
    if n < 2 {
        return Err(Error::TooFewScores { needed: 2, got: n });
    }
    let nf = n as f64;
    let mut mae = 0.0;
    let mut sse = 0.0;
    let mut resid_sum = 0.0;
    let mut y_sum = 0.0;
    for row in &report.rows {
        let e = row.y - row.mu_hat;
        mae += e.abs();
        sse += e * e;
        resid_sum += e;
        y_sum += row.y;
    }
    mae /= nf;
    let rmse = (sse / nf).sqrt();
    let resid_mean = resid_sum / nf;
    let residual_sd = (report
        .rows
        .iter()
        .map(|r| {
            let e = r.y - r.mu_hat - resid_mean;
            e * e
        })
        .sum::<f64>()
        / (nf - 1.0))
        .sqrt();

    let y_mean = y_sum / nf;
    let y_var = report
        .rows
        .iter()
        .map(|r| (r.y - y_mean) * (r.y - y_mean))
        .sum::<f64>()
        / (nf - 1.0);
    let neg_log = |y: f64, mu: f64, v: f64| 0.5 * (LN_2PI + v.ln() + (y - mu) * (y - mu) / v);
    let mut model_loss = 0.0;
    let mut trivial_loss = 0.0;
    for row in &report.rows {
        model_loss += neg_log(row.y, row.mu_hat, row.v_hat);
        trivial_loss += neg_log(row.y, y_mean, y_var);
    }
    Ok(FitMetrics {
        mae,
        rmse,
        residual_sd,
        msll: (model_loss - trivial_loss) / nf,
    })
}

/// Monte Carlo mean and standard error. Accumulation runs in sorted order
/// so the result is bit-stable under replicate reordering.
pub fn monte_carlo_summary(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::TooFewScores {
            needed: 2,
            got: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// One-sided paired t statistic for mean(a - b) > 0; returns (t, df).
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<(f64, usize)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::TooFewScores {
            needed: 2,
            got: a.len(),
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        // Degenerate but directionally unambiguous.
        let t = if mean > 0.0 {
            f64::INFINITY
        } else if mean < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        return Ok((t, d.len() - 1));
    }
    Ok((mean / (var / n).sqrt(), d.len() - 1))
}

/// Upper one-sided Student-t critical value.
pub fn t_critical(df: usize, alpha: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("valid t distribution")
        .inverse_cdf(1.0 - alpha)
}

/// Kolmogorov-Smirnov statistic against the standard normal.
pub fn ks_statistic_standard_normal(zs: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut sorted = zs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, z) in sorted.iter().enumerate() {
        let f = normal.cdf(*z);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Asymptotic KS critical value sqrt(-ln(alpha/2)/2) / sqrt(n).
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::score_oracle;
    use crate::simulate::{generate, Scenario, ScenarioConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn oracle_report_has_zero_bias_and_zero_map_error() {
        let config = ScenarioConfig {
            scenario: Scenario::Moderate,
            n_subjects: 20,
            n_regions: 6,
            seed: 3,
            abnormal_fraction: 0.0,
            ..ScenarioConfig::default()
        };
        let (data, truth, _) = generate(&config).unwrap();
        let report = score_oracle(&data, &truth, config.sigma_true).unwrap();
        let acc = accuracy_metrics(&data, &truth, &report).unwrap();
        assert_eq!(acc.mean_bias, 0.0);
        assert_eq!(acc.mse, 0.0);
        assert_eq!(acc.map_mse, 0.0);
    }

    #[test]
    fn zero_map_estimate_scores_the_mean_square_of_truth() {
        let config = ScenarioConfig {
            scenario: Scenario::Moderate,
            n_subjects: 12,
            n_regions: 5,
            seed: 4,
            abnormal_fraction: 0.0,
            ..ScenarioConfig::default()
        };
        let (data, truth, _) = generate(&config).unwrap();
        let mut report = score_oracle(&data, &truth, config.sigma_true).unwrap();
        let maps = report.deviation_maps.as_mut().unwrap();
        maps.mean.fill(0.0);
        let acc = accuracy_metrics(&data, &truth, &report).unwrap();
        let expect = truth.deviations.norm_squared() / (12.0 * 5.0);
        assert!((acc.map_mse - expect).abs() < 1e-12);
    }

    #[test]
    fn calibration_handles_degenerate_and_gaussian_scores() {
        let zeros = vec![0.0; 10];
        let c = calibration_metrics(&zeros).unwrap();
        assert_eq!((c.z_mean, c.z_var, c.tail_prob), (0.0, 0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zs: Vec<f64> = (0..1_000_000)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let c = calibration_metrics(&zs).unwrap();
        assert!(c.z_mean.abs() < 0.004);
        assert!((c.z_var - 1.0).abs() < 0.005);
        assert!((c.tail_prob - 0.05).abs() < 0.001);

        assert!(matches!(
            calibration_metrics(&[1.0]),
            Err(Error::TooFewScores { .. })
        ));
    }

    #[test]
    fn detection_covers_separation_noise_and_extreme_thresholds() {
        let labels = [true, true, false, false, false];
        let perfect = [5.0, -4.0, 0.5, -0.2, 0.1];
        let d = detection_metrics(&perfect, &labels, 1.96).unwrap();
        assert_eq!(d.auc, 1.0);
        assert_eq!(d.sensitivity, 1.0);
        assert_eq!(d.specificity, 1.0);
        assert_eq!(d.ppv, Some(1.0));

        // Threshold beyond every score: nothing flagged.
        let d = detection_metrics(&perfect, &labels, f64::INFINITY).unwrap();
        assert_eq!(d.sensitivity, 0.0);
        assert_eq!(d.specificity, 1.0);
        assert_eq!(d.ppv, None);

        // Scores independent of labels hover near 1/2.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let d = detection_metrics(&scores, &labels, 1.96).unwrap();
        assert!((d.auc - 0.5).abs() < 0.02, "auc {}", d.auc);

        // All-tied scores give exactly 1/2 through midranks.
        let d = detection_metrics(&[1.0; 6], &[true, false, true, false, false, false], 0.5)
            .unwrap();
        assert_eq!(d.auc, 0.5);

        assert!(matches!(
            detection_metrics(&[1.0, 2.0], &[true, true], 1.0),
            Err(Error::DegenerateLabels)
        ));
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms() {
        let scores = [3.0, 1.0, 0.5, 2.0, 0.1, 1.5];
        let labels = [true, false, false, true, false, true];
        let base = detection_metrics(&scores, &labels, 1.0).unwrap().auc;
        let squashed: Vec<f64> = scores.iter().map(|s| (s / 10.0).tanh()).collect();
        let same = detection_metrics(&squashed, &labels, 1.0).unwrap().auc;
        assert_eq!(base, same);
    }

    #[test]
    fn monte_carlo_summary_matches_the_small_sample_formulas() {
        let (mean, se) = monte_carlo_summary(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!((mean, se), (3.0, 0.0));
        let (mean, se) = monte_carlo_summary(&[1.0, 2.0]).unwrap();
        assert!((mean - 1.5).abs() < 1e-15);
        assert!((se - 0.5).abs() < 1e-15);

        // Sampling-theory check: SE estimates sigma/sqrt(n).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..200)
            .map(|_| 2.0 + 0.7 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (_, se) = monte_carlo_summary(&vals).unwrap();
        let expect = 0.7 / (200.0f64).sqrt();
        assert!((se - expect).abs() / expect < 0.15, "se {se} vs {expect}");

        // Bit-stable under reordering.
        let mut shuffled = vals.clone();
        shuffled.reverse();
        shuffled.swap(3, 77);
        assert_eq!(
            monte_carlo_summary(&vals).unwrap(),
            monte_carlo_summary(&shuffled).unwrap()
        );
    }

    #[test]
    fn paired_t_matches_a_hand_computation() {
        // d = a - b = [1, 2, 3]: mean 2, sd 1, se 1/sqrt(3), t = 2*sqrt(3).
        let (t, df) = paired_t(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(df, 2);
        assert!((t - 2.0 * 3.0f64.sqrt()).abs() < 1e-12);
        // The 1% one-sided critical value for 49 degrees of freedom.
        let c = t_critical(49, 0.01);
        assert!((c - 2.405).abs() < 0.005, "critical {c}");
    }

    #[test]
    fn ks_distinguishes_standard_normal_from_shifted_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zs: Vec<f64> = (0..10_000)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = ks_statistic_standard_normal(&zs);
        let crit = ks_critical_value(zs.len(), 0.01);
        assert!((crit - 1.6276 / 100.0).abs() < 1e-4);
        assert!(d < crit, "ks {d} vs critical {crit}");

        let shifted: Vec<f64> = zs.iter().map(|z| z + 0.1).collect();
        assert!(ks_statistic_standard_normal(&shifted) > crit);
    }

    #[test]
    fn msll_is_negative_for_informative_predictions() {
        let config = ScenarioConfig {
            scenario: Scenario::Moderate,
            n_subjects: 40,
            n_regions: 6,
            seed: 6,
            ..ScenarioConfig::default()
        };
        let (data, truth, _) = generate(&config).unwrap();
        let report = score_oracle(&data, &truth, config.sigma_true).unwrap();
        let fit = fit_metrics(&report).unwrap();
        assert!(fit.msll < -0.1, "msll {}", fit.msll);
        assert!(fit.mae > 0.0 && fit.rmse > fit.mae * 0.8);
        // Oracle residuals are pure noise at the generating scale.
        assert!((fit.residual_sd - 0.5).abs() < 0.03);
    }
}
