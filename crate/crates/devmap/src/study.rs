//! Replicated simulation study. Each replicate generates a dataset, fits
//! the spatial model on the reference subgroup (see
//! `StudyConfig::fit_reference_only`) and the benchmark models on the full
//! cohort, scores every subject, and records a `MetricReport` per model.
//! Replicates are independent, seeded from the master seed by index, and
//! can be cached to disk so an interrupted study resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_cross_sectional, fit_longitudinal};
use crate::data::LongDataset;
use crate::error::{Error, Result};
use crate::evaluate::{
    accuracy_metrics, calibration_metrics, detection_metrics, fit_metrics, monte_carlo_summary,
    MetricReport, METRIC_NAMES,
};
use crate::inference::{derive_seed, run_sampler, PriorConfig, SamplerConfig};
use crate::model::DeviationReport;
use crate::scoring::{score_cross_sectional, score_longitudinal, score_spatial, ScoreMode};
use crate::simulate::{generate, AbnormalPattern, Scenario, ScenarioConfig, SimTruth};

pub const MODEL_SPATIAL: &str = "spatial";
pub const MODEL_LONGITUDINAL: &str = "longitudinal";
pub const MODEL_CROSS_SECTIONAL: &str = "cross_sectional";
pub const MODEL_NAMES: [&str; 3] = [MODEL_SPATIAL, MODEL_LONGITUDINAL, MODEL_CROSS_SECTIONAL];

/// Study-level settings: the scenario and cohort shape, the replication
/// budget, and the sampler budget spent on each replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub n_regions: usize,
    pub n_replicates: usize,
    pub seed: u64,
    pub pattern: AbnormalPattern,
    pub abnormal_fraction: f64,
    /// Overrides the scenario's generating spatial dependence when set.
    pub rho_true: Option<f64>,
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    /// Region flagging threshold on the aggregated detection score.
    pub threshold: f64,
    /// Restrict the spatial model's training data to the reference
    /// subgroup, scoring abnormal subjects as held out. On by default:
    /// fitting a normative model on contaminated data leaks a fraction
    /// abnormal_fraction of the planted shift into the coefficients, which
    /// biases every reference score. The benchmark models always see the
    /// full cohort, as region-wise pipelines that ignore subgroup labels
    /// do.
    pub fit_reference_only: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            scenario: Scenario::Moderate,
            n_subjects: 120,
            n_regions: 20,
            n_replicates: 50,
            seed: 0,
            pattern: AbnormalPattern::Severe,
            abnormal_fraction: 0.2,
            rho_true: None,
            n_chains: 2,
            n_warmup: 500,
            n_samples: 500,
            threshold: 1.96,
            fit_reference_only: true,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replicates == 0 {
            return Err(Error::InvalidConfig("n_replicates must be positive".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.n_chains == 0 || self.n_samples == 0 {
            return Err(Error::InvalidConfig(
                "sampler needs at least one chain and one retained draw".into(),
            ));
        }
        self.scenario_config(0).validate()
    }

    /// Generating configuration for one replicate.
    pub fn scenario_config(&self, replicate: usize) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            n_subjects: self.n_subjects,
            n_regions: self.n_regions,
            seed: derive_seed(self.seed, replicate as u64),
            pattern: self.pattern,
            abnormal_fraction: self.abnormal_fraction,
            rho_true: self.rho_true,
            ..ScenarioConfig::default()
        }
    }

    fn sampler_config(&self, replicate_seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_chains: self.n_chains,
            n_warmup: self.n_warmup,
            n_samples: self.n_samples,
            seed: derive_seed(replicate_seed, 0x5ad),
            ..SamplerConfig::default()
        }
    }
}

/// Everything recorded for one replicate: per-model evaluation, the
/// aggregated region detection scores, and the spatial fit's parameter
/// summaries used by recovery checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub rho_true: f64,
    /// Posterior means (sigma, sigma_b, tau_u, rho) from the spatial fit.
    pub scale_means: (f64, f64, f64, f64),
    pub rho_ci90: (f64, f64),
    pub abnormal_regions: Vec<usize>,
    pub reports: BTreeMap<String, MetricReport>,
    pub region_scores: BTreeMap<String, Vec<f64>>,
}

/// Detection score per region: the mean over abnormal subjects of each
/// subject's visit-averaged z, scaled by sqrt(#abnormal) so the score for
/// an unaffected region stays near a unit normal. Empty when no subject is
/// labeled abnormal.
pub fn region_detection_scores(
    data: &LongDataset,
    report: &DeviationReport,
    abnormal: &[bool],
) -> Vec<f64> {
    let n = data.n_subjects();
    let n_regions = data.n_regions();
    let flagged: Vec<usize> = (0..n.min(abnormal.len())).filter(|&i| abnormal[i]).collect();
    if flagged.is_empty() {
        return Vec::new();
    }
    let mut z_sum = vec![0.0f64; n * n_regions];
    let mut z_cnt = vec![0usize; n * n_regions];
    for (obs, row) in data.observations().iter().zip(&report.rows) {
        z_sum[obs.subject * n_regions + obs.region] += row.z;
        z_cnt[obs.subject * n_regions + obs.region] += 1;
    }
    let root = (flagged.len() as f64).sqrt();
    (0..n_regions)
        .map(|r| {
            let mut acc = 0.0;
            let mut m = 0usize;
            for &i in &flagged {
                let k = i * n_regions + r;
                if z_cnt[k] > 0 {
                    acc += z_sum[k] / z_cnt[k] as f64;
                    m += 1;
                }
            }
            if m == 0 {
                0.0
            } else {
                root * acc / m as f64
            }
        })
        .collect()
}

/// Builds the per-model evaluation from a conditional report (accuracy and
/// predictive fit) and a marginal report (reference calibration and region
/// detection).
fn evaluate_model(
    data: &LongDataset,
    truth: &SimTruth,
    conditional: &DeviationReport,
    marginal: &DeviationReport,
    threshold: f64,
) -> Result<(MetricReport, Vec<f64>)> {
    let accuracy = accuracy_metrics(data, truth, conditional)?;
    let reference_z: Vec<f64> = marginal
        .rows
        .iter()
        .zip(data.observations())
        .filter(|(_, obs)| !truth.abnormal[obs.subject])
        .map(|(row, _)| row.z)
        .collect();
    let calibration = calibration_metrics(&reference_z)?;
    let fit = fit_metrics(conditional)?;
    let scores = region_detection_scores(data, marginal, &truth.abnormal);
    let detection = if scores.is_empty() || truth.abnormal_regions.is_empty() {
        None
    } else {
        let labels: Vec<bool> = (0..data.n_regions())
            .map(|r| truth.abnormal_regions.contains(&r))
            .collect();
        match detection_metrics(&scores, &labels, threshold) {
            Ok(d) => Some(d),
            Err(Error::DegenerateLabels) => None,
            Err(e) => return Err(e),
        }
    };
    let report = MetricReport {
        accuracy,
        calibration,
        detection,
        fit,
        regions: conditional.regions.clone(),
        subjects: conditional.subjects.clone(),
    };
    Ok((report, scores))
}

/// Runs one replicate end to end. Deterministic in (config, replicate).
pub fn run_replicate(config: &StudyConfig, replicate: usize) -> Result<ReplicateOutcome> {
    let sim = config.scenario_config(replicate);
    sim.validate()?;
    let (data, truth, graph) = generate(&sim)?;
    let any_abnormal = truth.abnormal.iter().any(|&a| a);
    let spatial_fit_data = if config.fit_reference_only && any_abnormal {
        data.restrict_to_reference()?
    } else {
        data.clone()
    };

    let draws = run_sampler(
        &spatial_fit_data,
        &graph,
        &PriorConfig::default(),
        &config.sampler_config(sim.seed),
    )?;
    let cs_fit = fit_cross_sectional(&data)?;
    let long_fit = fit_longitudinal(&data)?;

    let spatial_cond = score_spatial(&data, &graph, &draws, ScoreMode::Conditional)?;
    let spatial_marg = score_spatial(&data, &graph, &draws, ScoreMode::Marginal)?;
    let long_cond = score_longitudinal(&data, &long_fit, ScoreMode::Conditional)?;
    let long_marg = score_longitudinal(&data, &long_fit, ScoreMode::Marginal)?;
    let cs_report = score_cross_sectional(&data, &cs_fit, ScoreMode::Marginal)?;

    let mut reports = BTreeMap::new();
    let mut region_scores = BTreeMap::new();
    let triples: [(&str, &DeviationReport, &DeviationReport); 3] = [
        (MODEL_SPATIAL, &spatial_cond, &spatial_marg),
        (MODEL_LONGITUDINAL, &long_cond, &long_marg),
        (MODEL_CROSS_SECTIONAL, &cs_report, &cs_report),
    ];
    for (name, cond, marg) in triples {
        let (report, scores) = evaluate_model(&data, &truth, cond, marg, config.threshold)?;
        reports.insert(name.to_string(), report);
        if !scores.is_empty() {
            region_scores.insert(name.to_string(), scores);
        }
    }

    Ok(ReplicateOutcome {
        replicate,
        scenario: config.scenario,
        seed: sim.seed,
        rho_true: truth.rho,
        scale_means: draws.posterior_mean_scales(),
        rho_ci90: draws.rho_credible_interval(0.90),
        abnormal_regions: truth.abnormal_regions.clone(),
        reports,
        region_scores,
    })
}

pub fn replicate_file_name(replicate: usize) -> String {
    format!("replicate_{replicate:04}.json")
}

fn load_replicate(path: &Path) -> Result<ReplicateOutcome> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn save_replicate(path: &Path, outcome: &ReplicateOutcome) -> Result<()> {
    let text = serde_json::to_string_pretty(outcome)
        .map_err(|e| Error::Parse(format!("serializing replicate: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Runs the whole study, replicates in parallel over the ambient rayon
/// pool. With an output directory, each finished replicate is written as
/// JSON; files whose (seed, scenario) still match the config are loaded
/// instead of recomputed, so a restarted study resumes.
pub fn run_study(config: &StudyConfig, out_dir: Option<&Path>) -> Result<Vec<ReplicateOutcome>> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let results: Vec<Result<ReplicateOutcome>> = (0..config.n_replicates)
        .into_par_iter()
        .map(|rep| {
            if let Some(dir) = out_dir {
                let path = dir.join(replicate_file_name(rep));
                if path.exists() {
                    if let Ok(loaded) = load_replicate(&path) {
                        if loaded.seed == derive_seed(config.seed, rep as u64)
                            && loaded.scenario == config.scenario
                            && loaded.replicate == rep
                        {
                            return Ok(loaded);
                        }
                    }
                    // Stale or corrupt cache entry: recompute below.
                }
                let outcome = run_replicate(config, rep)?;
                save_replicate(&path, &outcome)?;
                Ok(outcome)
            } else {
                run_replicate(config, rep)
            }
        })
        .collect();
    results.into_iter().collect()
}

/// One aggregated cell of the study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Monte Carlo mean and standard error for every (model, metric) cell with
/// at least two finite replicate values.
pub fn summarize(outcomes: &[ReplicateOutcome]) -> Result<Vec<SummaryRow>> {
    if outcomes.len() < 2 {
        return Err(Error::TooFewScores {
            needed: 2,
            got: outcomes.len(),
        });
    }
    let mut rows = Vec::new();
    for model in MODEL_NAMES {
        for (k, metric) in METRIC_NAMES.iter().enumerate() {
            let values: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| o.reports.get(model).and_then(|r| r.scalar_values()[k]))
                .filter(|v| v.is_finite())
                .collect();
            if values.len() >= 2 {
                let (mean, se) = monte_carlo_summary(&values)?;
                rows.push(SummaryRow {
                    model: model.to_string(),
                    metric: (*metric).to_string(),
                    mean,
                    se,
                    n: values.len(),
                });
            }
        }
    }
    Ok(rows)
}

/// Per-replicate values of one metric for one model, in replicate order.
/// Replicates where the metric is unavailable are skipped.
pub fn metric_series(outcomes: &[ReplicateOutcome], model: &str, metric: &str) -> Vec<f64> {
    let Some(k) = METRIC_NAMES.iter().position(|m| *m == metric) else {
        return Vec::new();
    };
    let mut indexed: Vec<(usize, f64)> = outcomes
        .iter()
        .filter_map(|o| {
            o.reports
                .get(model)
                .and_then(|r| r.scalar_values()[k])
                .map(|v| (o.replicate, v))
        })
        .collect();
    indexed.sort_by_key(|(rep, _)| *rep);
    indexed.into_iter().map(|(_, v)| v).collect()
}

pub fn write_summary_csv<W: io::Write>(
    writer: W,
    scenario: Scenario,
    rows: &[SummaryRow],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "model", "metric", "mean", "se", "n"])?;
    for row in rows {
        w.write_record([
            scenario.as_str(),
            &row.model,
            &row.metric,
            &format!("{:.17e}", row.mean),
            &format!("{:.17e}", row.se),
            &row.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> StudyConfig {
        StudyConfig {
            scenario: Scenario::Moderate,
            n_subjects: 24,
            n_regions: 8,
            n_replicates: 2,
            seed: 90,
            n_chains: 2,
            n_warmup: 150,
            n_samples: 150,
            ..StudyConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let mut c = small_config();
        c.n_replicates = 0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = small_config();
        c.threshold = 0.0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = small_config();
        c.abnormal_fraction = 1.5;
        assert!(c.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn detection_scores_stay_empty_without_abnormal_subjects() {
        let config = StudyConfig {
            abnormal_fraction: 0.0,
            n_replicates: 1,
            n_chains: 1,
            n_warmup: 60,
            n_samples: 60,
            n_subjects: 10,
            n_regions: 5,
            ..small_config()
        };
        let outcome = run_replicate(&config, 0).unwrap();
        assert!(outcome.region_scores.is_empty());
        for model in MODEL_NAMES {
            assert!(outcome.reports[model].detection.is_none());
        }
    }

    #[test]
    fn replicates_are_deterministic_and_fill_every_model_cell() {
        let config = small_config();
        let a = run_replicate(&config, 1).unwrap();
        let b = run_replicate(&config, 1).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for model in MODEL_NAMES {
            let report = &a.reports[model];
            assert!(report.accuracy.map_mse.is_finite());
            assert!(report.detection.is_some());
            assert_eq!(a.region_scores[model].len(), config.n_regions);
        }
        // Different replicate index, different data and seed.
        let c = run_replicate(&config, 0).unwrap();
        assert_ne!(c.seed, a.seed);
        assert_ne!(
            c.reports[MODEL_SPATIAL].accuracy.mse,
            a.reports[MODEL_SPATIAL].accuracy.mse
        );
    }

    #[test]
    fn study_resumes_from_cached_replicates_and_replaces_corrupt_ones() {
        let dir = tempdir_path("study_resume");
        let config = small_config();
        let first = run_study(&config, Some(&dir)).unwrap();
        assert_eq!(first.len(), 2);
        let summary = summarize(&first).unwrap();
        assert!(summary.len() >= MODEL_NAMES.len() * 10);
        assert!(summary
            .iter()
            .all(|r| r.n == 2 && r.se.is_finite() && r.mean.is_finite()));

        // Corrupt one cache file; the study must recompute it and agree.
        fs::write(dir.join(replicate_file_name(0)), "not json").unwrap();
        let second = run_study(&config, Some(&dir)).unwrap();
        assert_eq!(
            serde_json::to_string(&first).unwrap(),
            serde_json::to_string(&second).unwrap()
        );

        // The series helper keeps replicate order.
        let series = metric_series(&second, MODEL_SPATIAL, "map_mse");
        assert_eq!(series.len(), 2);
        assert_eq!(series[0], second[0].reports[MODEL_SPATIAL].accuracy.map_mse);

        let mut buf = Vec::new();
        write_summary_csv(&mut buf, config.scenario, &summary).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario,model,metric,mean,se,n"));
        assert!(text.contains("spatial,map_mse"));
        fs::remove_dir_all(&dir).ok();
    }

    fn tempdir_path(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("devmap_{tag}_{}", std::process::id()));
        fs::remove_dir_all(&dir).ok();
        dir
    }
}
