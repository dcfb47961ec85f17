//! Turns fitted models into standardized deviation reports.
//!
//! Two score modes are exposed. Conditional scoring standardizes against the
//! subject's own posterior-predictive distribution, averaging the per-draw
//! conditional moments by the law of total variance; it answers "is this
//! observation surprising given everything we inferred about this subject".
//! Marginal scoring standardizes against the fitted normative reference
//! distribution: posterior-mean coefficients and scales with the latent
//! terms integrated out under their priors. It is the calibration view, the
//! distribution a new observation is compared with before anything is known
//! about its subject.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::baselines::{CrossSectionalFit, LongitudinalFit, VARIANCE_FLOOR};
use crate::data::LongDataset;
use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::inference::PosteriorDraws;
use crate::model::{joint_latent_posterior, DeviationMaps, DeviationReport, ScoreRow};
use crate::simulate::SimTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Conditional,
    Marginal,
}

impl ScoreMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreMode::Conditional => "conditional",
            ScoreMode::Marginal => "marginal",
        }
    }

    pub fn parse(name: &str) -> Result<ScoreMode> {
        match name {
            "conditional" => Ok(ScoreMode::Conditional),
            "marginal" => Ok(ScoreMode::Marginal),
            other => Err(Error::InvalidConfig(format!(
                "unknown score mode '{other}' (conditional or marginal)"
            ))),
        }
    }
}

fn check_alignment(data: &LongDataset, draws: &PosteriorDraws) -> Result<()> {
    if data.region_labels() != draws.region_labels.as_slice() {
        return Err(Error::Alignment(
            "dataset regions do not match the fitted regions".into(),
        ));
    }
    if data.covariate_names() != draws.covariate_names.as_slice() {
        return Err(Error::Alignment(format!(
            "dataset covariates {:?} do not match the fitted covariates {:?}",
            data.covariate_names(),
            draws.covariate_names
        )));
    }
    Ok(())
}

/// Empirical-Bayes latent posterior for a subject absent from the fit,
/// using plug-in posterior-mean parameters. Returns the (R+1)-dimensional
/// (intercept, deviations) posterior; the zero-tau fit degenerates to an
/// intercept-only posterior with a zero deviation block.
fn cold_start_posterior(
    data: &LongDataset,
    subject: usize,
    graph: &RegionGraph,
    coefficients: &DMatrix<f64>,
    sigma: f64,
    sigma_b: f64,
    tau_u: f64,
    rho: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n_regions = data.n_regions();
    if tau_u > VARIANCE_FLOOR.sqrt() {
        let post = joint_latent_posterior(
            data,
            subject,
            graph,
            coefficients,
            sigma,
            sigma_b,
            tau_u,
            rho,
        )?;
        return Ok((post.mean, post.cov));
    }
    // Degenerate spatial field: only the random intercept survives.
    let obs = data.subject_observations(subject);
    let mut sum = 0.0;
    for o in obs {
        sum += o.y - data.design_row(o).dot(&coefficients.column(o.region));
    }
    let v = 1.0 / (1.0 / (sigma_b * sigma_b) + obs.len() as f64 / (sigma * sigma));
    let m = v * sum / (sigma * sigma);
    let mut mean = DVector::zeros(n_regions + 1);
    mean[0] = m;
    let mut cov = DMatrix::zeros(n_regions + 1, n_regions + 1);
    cov[(0, 0)] = v;
    Ok((mean, cov))
}

/// Scores a dataset against a spatial fit. Subjects present in the fit are
/// scored from their retained draws; unseen subjects fall back to plug-in
/// posterior-mean parameters, conditioning on their own history in
/// conditional mode and integrating the latent terms out in marginal mode.
pub fn score_spatial(
    data: &LongDataset,
    graph: &RegionGraph,
    draws: &PosteriorDraws,
    mode: ScoreMode,
) -> Result<DeviationReport> {
    check_alignment(data, draws)?;
    if graph.labels() != draws.region_labels.as_slice() {
        return Err(Error::Alignment(
            "graph regions do not match the fitted regions".into(),
        ));
    }
    let n_obs = data.n_observations();
    let n_regions = data.n_regions();
    let total: usize = draws.chains.iter().map(|c| c.sigma.len()).sum();
    if total == 0 {
        return Err(Error::InvalidConfig("fit contains no retained draws".into()));
    }
    let fitted: HashMap<&str, usize> = draws
        .subject_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let fit_index: Vec<Option<usize>> = data
        .subject_ids()
        .iter()
        .map(|s| fitted.get(s.as_str()).copied())
        .collect();

    // Accumulators over draws (conditional mode only; marginal mode uses
    // the plug-in reference distribution below).
    let mut sum_mu = vec![0.0f64; n_obs];
    let mut sum_mu2 = vec![0.0f64; n_obs];
    let mut sum_cond_var = 0.0f64; // sigma^2, shared by all observations
    // Deviation-map accumulators for fitted subjects.
    let n_sub = data.n_subjects();
    let mut sum_u = DMatrix::<f64>::zeros(n_sub, n_regions);
    let mut sum_u2 = DMatrix::<f64>::zeros(n_sub, n_regions);

    for chain in &draws.chains {
        for d in 0..chain.sigma.len() {
            if mode == ScoreMode::Conditional {
                sum_cond_var += chain.sigma[d] * chain.sigma[d];
                let bmat = &chain.coefficients[d];
                for (k, obs) in data.observations().iter().enumerate() {
                    let Some(fi) = fit_index[obs.subject] else { continue };
                    let mu = data.design_row(obs).dot(&bmat.column(obs.region))
                        + chain.intercepts[d][fi]
                        + chain.deviations[d][(fi, obs.region)];
                    sum_mu[k] += mu;
                    sum_mu2[k] += mu * mu;
                }
            }
            for (s, fi) in fit_index.iter().enumerate() {
                let Some(fi) = fi else { continue };
                for r in 0..n_regions {
                    let u = chain.deviations[d][(*fi, r)];
                    sum_u[(s, r)] += u;
                    sum_u2[(s, r)] += u * u;
                }
            }
        }
    }

    let mean_b = draws.posterior_mean_coefficients();
    let (s_mean, sb_mean, t_mean, rho_mean) = draws.posterior_mean_scales();

    let td = total as f64;
    let mut mu_hat = vec![0.0f64; n_obs];
    let mut v_hat = vec![0.0f64; n_obs];
    match mode {
        ScoreMode::Conditional => {
            for k in 0..n_obs {
                let m = sum_mu[k] / td;
                mu_hat[k] = m;
                let var_mu = (sum_mu2[k] / td - m * m).max(0.0);
                v_hat[k] = var_mu + sum_cond_var / td;
            }
        }
        ScoreMode::Marginal => {
            // The fitted reference distribution: posterior-mean coefficients
            // and scales, latent terms integrated out under their priors.
            let spatial_var: DVector<f64> = if t_mean > 0.0 {
                let qinv = graph
                    .build_precision(rho_mean)?
                    .try_inverse()
                    .ok_or(Error::SingularPrecision)?;
                qinv.diagonal() * (t_mean * t_mean)
            } else {
                DVector::zeros(n_regions)
            };
            for (k, obs) in data.observations().iter().enumerate() {
                mu_hat[k] = data.design_row(obs).dot(&mean_b.column(obs.region));
                v_hat[k] =
                    s_mean * s_mean + sb_mean * sb_mean + spatial_var[obs.region];
            }
        }
    }

    // Deviation maps: draw moments for fitted subjects, cold-start moments
    // for the rest.
    let mut map_mean = DMatrix::zeros(n_sub, n_regions);
    let mut map_sd = DMatrix::zeros(n_sub, n_regions);
    for s in 0..n_sub {
        match fit_index[s] {
            Some(_) => {
                for r in 0..n_regions {
                    let m = sum_u[(s, r)] / td;
                    map_mean[(s, r)] = m;
                    map_sd[(s, r)] = (sum_u2[(s, r)] / td - m * m).max(0.0).sqrt();
                }
            }
            None => {
                let (mean, cov) = cold_start_posterior(
                    data, s, graph, &mean_b, s_mean, sb_mean, t_mean, rho_mean,
                )?;
                for r in 0..n_regions {
                    map_mean[(s, r)] = mean[r + 1];
                    map_sd[(s, r)] = cov[(r + 1, r + 1)].max(0.0).sqrt();
                }
                // New subjects also need predictive moments.
                for (k, obs) in data.observations().iter().enumerate() {
                    if obs.subject != s {
                        continue;
                    }
                    let fe = data.design_row(obs).dot(&mean_b.column(obs.region));
                    match mode {
                        ScoreMode::Conditional => {
                            let r = obs.region;
                            mu_hat[k] = fe + mean[0] + mean[r + 1];
                            v_hat[k] = s_mean * s_mean
                                + cov[(0, 0)]
                                + cov[(r + 1, r + 1)]
                                + 2.0 * cov[(0, r + 1)];
                        }
                        ScoreMode::Marginal => {
                            // Marginal moments already accumulated above:
                            // the draw loop and variance terms cover every
                            // observation, new subjects included.
                        }
                    }
                }
            }
        }
    }

    build_report(data, &mu_hat, &v_hat, Some((map_mean, Some(map_sd))))
}

/// Scores against the independent per-region least-squares fit. Both modes
/// coincide: the model has no latent subject terms.
pub fn score_cross_sectional(
    data: &LongDataset,
    fit: &CrossSectionalFit,
    _mode: ScoreMode,
) -> Result<DeviationReport> {
    if fit.coefficients.ncols() != data.n_regions() {
        return Err(Error::Alignment(
            "fit and dataset disagree on the number of regions".into(),
        ));
    }
    if fit.coefficients.nrows() != data.n_covariates() {
        return Err(Error::Alignment(
            "fit and dataset disagree on the design dimension".into(),
        ));
    }
    let n_obs = data.n_observations();
    let mut mu_hat = Vec::with_capacity(n_obs);
    let v = fit.sigma2.max(VARIANCE_FLOOR);
    for obs in data.observations() {
        mu_hat.push(data.design_row(obs).dot(&fit.coefficients.column(obs.region)));
    }
    let v_hat = vec![v; n_obs];
    let maps = crate::baselines::cross_sectional_deviation_map(data, fit);
    build_report(data, &mu_hat, &v_hat, Some((maps, None)))
}

/// Scores against the random-intercept fit. Conditional mode shrinks each
/// subject's intercept toward zero given their own residuals (so the fit's
/// own dataset reproduces the stored BLUPs, and unseen subjects work the
/// same way); marginal mode integrates the intercept out.
pub fn score_longitudinal(
    data: &LongDataset,
    fit: &LongitudinalFit,
    mode: ScoreMode,
) -> Result<DeviationReport> {
    if fit.coefficients.ncols() != data.n_regions() {
        return Err(Error::Alignment(
            "fit and dataset disagree on the number of regions".into(),
        ));
    }
    if fit.coefficients.nrows() != data.n_covariates() {
        return Err(Error::Alignment(
            "fit and dataset disagree on the design dimension".into(),
        ));
    }
    let n = data.n_subjects();
    let n_regions = data.n_regions();
    let sigma2 = fit.sigma2.max(VARIANCE_FLOOR);
    let sigma_b2 = fit.sigma_b2.max(0.0);

    // Per-subject BLUP from the scored data under the fitted parameters.
    let mut blup = vec![0.0f64; n];
    let mut blup_var = vec![0.0f64; n];
    for s in 0..n {
        let obs = data.subject_observations(s);
        let mut sum = 0.0;
        for o in obs {
            sum += o.y - data.design_row(o).dot(&fit.coefficients.column(o.region));
        }
        if sigma_b2 <= VARIANCE_FLOOR {
            blup[s] = 0.0;
            blup_var[s] = 0.0;
        } else {
            let v = 1.0 / (1.0 / sigma_b2 + obs.len() as f64 / sigma2);
            blup[s] = v * sum / sigma2;
            blup_var[s] = v;
        }
    }

    let mut mu_hat = Vec::with_capacity(data.n_observations());
    let mut v_hat = Vec::with_capacity(data.n_observations());
    for obs in data.observations() {
        let fe = data.design_row(obs).dot(&fit.coefficients.column(obs.region));
        match mode {
            ScoreMode::Conditional => {
                mu_hat.push(fe + blup[obs.subject]);
                v_hat.push(sigma2 + blup_var[obs.subject]);
            }
            ScoreMode::Marginal => {
                mu_hat.push(fe);
                v_hat.push(sigma2 + sigma_b2);
            }
        }
    }

    // Residual-profile deviation map with the intercept removed.
    let mut sums = DMatrix::<f64>::zeros(n, n_regions);
    let mut counts = DMatrix::<f64>::zeros(n, n_regions);
    for obs in data.observations() {
        let fe = data.design_row(obs).dot(&fit.coefficients.column(obs.region));
        sums[(obs.subject, obs.region)] += obs.y - fe - blup[obs.subject];
        counts[(obs.subject, obs.region)] += 1.0;
    }
    let maps = DMatrix::from_fn(n, n_regions, |i, r| {
        if counts[(i, r)] > 0.0 {
            sums[(i, r)] / counts[(i, r)]
        } else {
            0.0
        }
    });
    build_report(data, &mu_hat, &v_hat, Some((maps, None)))
}

/// Scores with the generating parameters, the standardization oracle: every
/// score is an exact standard normal draw, including the planted shift for
/// abnormal subjects.
pub fn score_oracle(
    data: &LongDataset,
    truth: &SimTruth,
    sigma_true: f64,
) -> Result<DeviationReport> {
    if truth.mu.len() != data.n_observations() {
        return Err(Error::Alignment(
            "truth is not aligned with the dataset".into(),
        ));
    }
    if !sigma_true.is_finite() || sigma_true <= 0.0 {
        return Err(Error::InvalidConfig("sigma_true must be positive".into()));
    }
    let mut mu_hat = Vec::with_capacity(data.n_observations());
    for (k, obs) in data.observations().iter().enumerate() {
        let shift = if truth.abnormal[obs.subject] {
            truth.delta[obs.region]
        } else {
            0.0
        };
        mu_hat.push(truth.mu[k] + shift);
    }
    let v_hat = vec![sigma_true * sigma_true; data.n_observations()];
    build_report(data, &mu_hat, &v_hat, Some((truth.deviations.clone(), None)))
}

fn build_report(
    data: &LongDataset,
    mu_hat: &[f64],
    v_hat: &[f64],
    maps: Option<(DMatrix<f64>, Option<DMatrix<f64>>)>,
) -> Result<DeviationReport> {
    let ys: Vec<f64> = data.observations().iter().map(|o| o.y).collect();
    let zs = crate::model::z_scores(&ys, mu_hat, v_hat)?;
    let rows: Vec<ScoreRow> = data
        .observations()
        .iter()
        .enumerate()
        .map(|(k, obs)| ScoreRow {
            subject: data.subject_id(obs.subject).to_string(),
            visit: obs.visit,
            region: data.region_labels()[obs.region].clone(),
            y: obs.y,
            mu_hat: mu_hat[k],
            v_hat: v_hat[k],
            z: zs[k],
        })
        .collect();
    let deviation_maps = maps.map(|(mean, sd)| DeviationMaps {
        subject_ids: data.subject_ids().to_vec(),
        region_labels: data.region_labels().to_vec(),
        mean,
        sd,
    });
    DeviationReport::from_rows(rows, None, data.region_labels(), deviation_maps)
}
