//! Benchmark estimators fitted on the same data as the spatial model.
//!
//! Two reference models:
//!
//! * cross-sectional: per-region least squares treating every observation
//!   as independent, `Y_itr = X_it' beta_r + eps`;
//! * longitudinal non-spatial: adds a subject random intercept,
//!   `Y_itr = X_it' beta_r + b_i + eps`, `b_i ~ N(0, sigma_b^2)`, fitted by
//!   EM on the Gaussian marginal likelihood with BLUP intercepts.
//!
//! Both are point estimators by design: the comparison metrics downstream
//! are point-estimate-based, and plug-in predictive variances keep the
//! benchmarks fast.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::LongDataset;
use crate::error::{Error, Result};
use crate::model::LN_2PI;

/// Guards pooled variances in degenerate noiseless fits.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub const DEFAULT_EM_MAX_ITER: usize = 500;
pub const DEFAULT_EM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionalFit {
    /// p x R least-squares coefficients.
    pub coefficients: DMatrix<f64>,
    /// Pooled residual variance, SSE / (N - pR), floored.
    pub sigma2: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalFit {
    pub coefficients: DMatrix<f64>,
    pub sigma2: f64,
    pub sigma_b2: f64,
    /// BLUP intercepts at the converged parameters.
    pub intercepts: DVector<f64>,
    /// Posterior variance of each intercept given the converged parameters.
    pub intercept_vars: DVector<f64>,
    pub log_likelihood: f64,
    /// Marginal log-likelihood after each EM iteration; nondecreasing.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
}

/// Per-region least squares on responses `ys`; shared by the cross-sectional
/// fit and the EM M-step.
fn per_region_least_squares(data: &LongDataset, ys: &[f64]) -> Result<DMatrix<f64>> {
    let (p, r) = (data.n_covariates(), data.n_regions());
    let mut grams: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, p); r];
    let mut rhs: Vec<DVector<f64>> = vec![DVector::zeros(p); r];
    let mut counts = vec![0usize; r];
    for (k, obs) in data.observations().iter().enumerate() {
        let x = data.design_row(obs);
        grams[obs.region].syger(1.0, x, x, 1.0);
        rhs[obs.region].axpy(ys[k], x, 1.0);
        counts[obs.region] += 1;
    }
    let mut coefficients = DMatrix::zeros(p, r);
    for j in 0..r {
        if counts[j] < p {
            return Err(Error::RankDeficientDesign {
                region: data.region_labels()[j].clone(),
            });
        }
        let chol = Cholesky::new(grams[j].clone()).ok_or_else(|| Error::RankDeficientDesign {
            region: data.region_labels()[j].clone(),
        })?;
        coefficients.set_column(j, &chol.solve(&rhs[j]));
    }
    Ok(coefficients)
}

/// Independent cross-sectional normative model: per-region least squares
/// with a single pooled residual variance.
pub fn fit_cross_sectional(data: &LongDataset) -> Result<CrossSectionalFit> {
    let ys: Vec<f64> = data.observations().iter().map(|o| o.y).collect();
    let coefficients = per_region_least_squares(data, &ys)?;
    let n = data.n_observations();
    let mut sse = 0.0;
    for obs in data.observations() {
        let resid = obs.y - data.design_row(obs).dot(&coefficients.column(obs.region));
        sse += resid * resid;
    }
    let dof = n as isize - (data.n_covariates() * data.n_regions()) as isize;
    let denom = if dof >= 1 { dof as f64 } else { n as f64 };
    let sigma2 = (sse / denom).max(VARIANCE_FLOOR);
    let log_likelihood = conditional_log_likelihood(data, &coefficients, None, sigma2.sqrt())?;
    Ok(CrossSectionalFit {
        coefficients,
        sigma2,
        log_likelihood,
    })
}

/// Log-likelihood of independent normal errors around `X'beta_r` plus an
/// optional per-subject intercept. With `intercepts = None` this is the
/// cross-sectional model's likelihood; with BLUPs it is the longitudinal
/// model's likelihood conditional on the intercepts.
pub fn conditional_log_likelihood(
    data: &LongDataset,
    coefficients: &DMatrix<f64>,
    intercepts: Option<&DVector<f64>>,
    sigma: f64,
) -> Result<f64> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidScale {
            name: "sigma",
            value: sigma,
        });
    }
    if let Some(b) = intercepts {
        if b.len() != data.n_subjects() {
            return Err(Error::DimensionMismatch(format!(
                "{} intercepts for {} subjects",
                b.len(),
                data.n_subjects()
            )));
        }
    }
    let inv2 = 0.5 / (sigma * sigma);
    let mut ll = 0.0;
    for obs in data.observations() {
        let mut mu = data.design_row(obs).dot(&coefficients.column(obs.region));
        if let Some(b) = intercepts {
            mu += b[obs.subject];
        }
        ll -= inv2 * (obs.y - mu) * (obs.y - mu);
    }
    ll -= data.n_observations() as f64 * (sigma.ln() + 0.5 * LN_2PI);
    Ok(ll)
}

/// Marginal log-likelihood of the random-intercept model with b integrated
/// out. Each subject contributes an exchangeable Gaussian block
/// `sigma^2 I + sigma_b^2 11'`, handled in closed form (rank-one update):
///
/// ```text
/// log det = n_i log sigma^2 + log(1 + n_i sigma_b^2 / sigma^2)
/// r' Sigma^{-1} r = (r'r - sigma_b^2 (1'r)^2 / (sigma^2 + n_i sigma_b^2)) / sigma^2
/// ```
pub fn marginal_log_likelihood(
    data: &LongDataset,
    coefficients: &DMatrix<f64>,
    sigma2: f64,
    sigma_b2: f64,
) -> Result<f64> {
    if !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(Error::InvalidScale {
            name: "sigma",
            value: sigma2,
        });
    }
    if !sigma_b2.is_finite() || sigma_b2 < 0.0 {
        return Err(Error::InvalidScale {
            name: "sigma_b",
            value: sigma_b2,
        });
    }
    let mut ll = 0.0;
    for i in 0..data.n_subjects() {
        let obs = data.subject_observations(i);
        let n_i = obs.len() as f64;
        let mut rr = 0.0;
        let mut rsum = 0.0;
        for o in obs {
            let r = o.y - data.design_row(o).dot(&coefficients.column(o.region));
            rr += r * r;
            rsum += r;
        }
        let quad = (rr - sigma_b2 * rsum * rsum / (sigma2 + n_i * sigma_b2)) / sigma2;
        let logdet = n_i * sigma2.ln() + (1.0 + n_i * sigma_b2 / sigma2).ln();
        ll -= 0.5 * (quad + logdet + n_i * LN_2PI);
    }
    Ok(ll)
}

/// BLUP intercepts and their posterior variances at fixed parameters:
/// `var_i = 1 / (1/sigma_b^2 + n_i/sigma^2)`, `b_i = var_i * sum(r_i)/sigma^2`.
fn blup_intercepts(
    data: &LongDataset,
    coefficients: &DMatrix<f64>,
    sigma2: f64,
    sigma_b2: f64,
) -> (DVector<f64>, DVector<f64>) {
    let n = data.n_subjects();
    let mut means = DVector::zeros(n);
    let mut vars = DVector::zeros(n);
    for i in 0..n {
        let obs = data.subject_observations(i);
        let mut rsum = 0.0;
        for o in obs {
            rsum += o.y - data.design_row(o).dot(&coefficients.column(o.region));
        }
        if sigma_b2 <= VARIANCE_FLOOR {
            // Degenerate prior pins the intercepts at zero.
            means[i] = 0.0;
            vars[i] = sigma_b2.max(0.0);
            continue;
        }
        let v = 1.0 / (1.0 / sigma_b2 + obs.len() as f64 / sigma2);
        vars[i] = v;
        means[i] = v * rsum / sigma2;
    }
    (means, vars)
}

pub fn fit_longitudinal(data: &LongDataset) -> Result<LongitudinalFit> {
    fit_longitudinal_with(data, DEFAULT_EM_MAX_ITER, DEFAULT_EM_TOL)
}

/// EM fit of the random-intercept model. E-step computes each intercept's
/// Gaussian posterior; the M-step is exact (per-region least squares on
/// intercept-corrected responses, then moment updates for both variances),
/// so the marginal log-likelihood is nondecreasing.
pub fn fit_longitudinal_with(
    data: &LongDataset,
    max_iter: usize,
    tol: f64,
) -> Result<LongitudinalFit> {
    if data.n_subjects() < 2 {
        return Err(Error::InvalidConfig(
            "the longitudinal model needs at least 2 subjects".into(),
        ));
    }
    if !(0..data.n_subjects()).any(|i| data.n_visits(i) >= 2) {
        return Err(Error::InvalidConfig(
            "the longitudinal model needs at least one subject with 2 or more visits".into(),
        ));
    }

    // Start from the cross-sectional fit with a modest intercept variance.
    let cs = fit_cross_sectional(data)?;
    let mut coefficients = cs.coefficients;
    let mut sigma2 = (cs.sigma2 * 0.5).max(VARIANCE_FLOOR);
    let mut sigma_b2 = (cs.sigma2 * 0.5).max(VARIANCE_FLOOR);

    let n_obs = data.n_observations();
    let n_sub = data.n_subjects();
    let mut trace = Vec::new();
    let mut last_ll = f64::NEG_INFINITY;
    let mut converged_at = None;

    for iter in 0..max_iter {
        // E-step.
        let (b_mean, b_var) = blup_intercepts(data, &coefficients, sigma2, sigma_b2);

        // M-step: coefficients on intercept-corrected responses.
        let ys: Vec<f64> = data
            .observations()
            .iter()
            .map(|o| o.y - b_mean[o.subject])
            .collect();
        coefficients = per_region_least_squares(data, &ys)?;

        let mut sse = 0.0;
        for (k, obs) in data.observations().iter().enumerate() {
            let resid = ys[k] - data.design_row(obs).dot(&coefficients.column(obs.region));
            sse += resid * resid + b_var[obs.subject];
        }
        sigma2 = (sse / n_obs as f64).max(VARIANCE_FLOOR);
        sigma_b2 = ((b_mean.norm_squared() + b_var.sum()) / n_sub as f64).max(VARIANCE_FLOOR);

        let ll = marginal_log_likelihood(data, &coefficients, sigma2, sigma_b2)?;
        trace.push(ll);
        if (ll - last_ll).abs() <= tol * (1.0 + ll.abs()) {
            converged_at = Some(iter + 1);
            break;
        }
        last_ll = ll;
    }

    let iterations = match converged_at {
        Some(k) => k,
        None => return Err(Error::NonConvergence { iterations: max_iter }),
    };
    let (intercepts, intercept_vars) = blup_intercepts(data, &coefficients, sigma2, sigma_b2);
    let log_likelihood = *trace.last().unwrap();
    Ok(LongitudinalFit {
        coefficients,
        sigma2,
        sigma_b2,
        intercepts,
        intercept_vars,
        log_likelihood,
        log_likelihood_trace: trace,
        iterations,
    })
}

/// Residual deviation-map convention for the cross-sectional model:
/// `u_hat_ir = mean_t (y_itr - x_it' beta_r)`, zero where unobserved.
pub fn cross_sectional_deviation_map(data: &LongDataset, fit: &CrossSectionalFit) -> DMatrix<f64> {
    residual_mean_map(data, &fit.coefficients, None)
}

/// Residual deviation-map convention for the longitudinal model:
/// `u_hat_ir = mean_t (y_itr - x_it' beta_r - b_i)`.
pub fn longitudinal_deviation_map(data: &LongDataset, fit: &LongitudinalFit) -> DMatrix<f64> {
    residual_mean_map(data, &fit.coefficients, Some(&fit.intercepts))
}

fn residual_mean_map(
    data: &LongDataset,
    coefficients: &DMatrix<f64>,
    intercepts: Option<&DVector<f64>>,
) -> DMatrix<f64> {
    let (n, r) = (data.n_subjects(), data.n_regions());
    let mut sums = DMatrix::zeros(n, r);
    let mut counts = DMatrix::<f64>::zeros(n, r);
    for obs in data.observations() {
        let mut resid = obs.y - data.design_row(obs).dot(&coefficients.column(obs.region));
        if let Some(b) = intercepts {
            resid -= b[obs.subject];
        }
        sums[(obs.subject, obs.region)] += resid;
        counts[(obs.subject, obs.region)] += 1.0;
    }
    for i in 0..n {
        for j in 0..r {
            if counts[(i, j)] > 0.0 {
                sums[(i, j)] /= counts[(i, j)];
            }
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservationRecord;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rec(subject: &str, visit: usize, region: &str, y: f64, covs: &[f64]) -> ObservationRecord {
        ObservationRecord {
            subject: subject.into(),
            visit,
            region: region.into(),
            y,
            covariates: covs.to_vec(),
            abnormal: false,
        }
    }

    fn random_dataset(
        seed: u64,
        n_subjects: usize,
        n_regions: usize,
        n_visits: usize,
        sigma_b: f64,
        sigma: f64,
    ) -> LongDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for i in 0..n_subjects {
            let b = sigma_b * rng.sample::<f64, _>(StandardNormal);
            for t in 1..=n_visits {
                let age = 60.0 + 5.0 * t as f64 + rng.gen::<f64>();
                for j in 0..n_regions {
                    let mu = 0.5 - 0.2 * j as f64 - 0.02 * age;
                    let y = mu + b + sigma * rng.sample::<f64, _>(StandardNormal);
                    records.push(rec(&format!("s{i}"), t, &format!("r{j}"), y, &[age]));
                }
            }
        }
        LongDataset::from_records(&records, &["age".into()], None).unwrap()
    }

    #[test]
    fn intercept_only_design_recovers_region_means() {
        let records = vec![
            rec("a", 1, "r0", 1.0, &[]),
            rec("a", 1, "r1", 5.0, &[]),
            rec("b", 1, "r0", 3.0, &[]),
            rec("b", 1, "r1", 7.0, &[]),
        ];
        let data = LongDataset::from_records(&records, &[], None).unwrap();
        let fit = fit_cross_sectional(&data).unwrap();
        assert_abs_diff_eq!(fit.coefficients[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coefficients[(0, 1)], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_linear_data_hits_the_variance_floor() {
        let mut records = Vec::new();
        for (s, ages) in [("a", [61.0, 63.0]), ("b", [70.0, 72.0])] {
            for (t, age) in ages.iter().enumerate() {
                records.push(rec(s, t + 1, "r0", 2.0 - 0.1 * age, &[*age]));
            }
        }
        let data = LongDataset::from_records(&records, &["age".into()], None).unwrap();
        let fit = fit_cross_sectional(&data).unwrap();
        assert_abs_diff_eq!(fit.coefficients[(0, 0)], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.coefficients[(1, 0)], -0.1, epsilon = 1e-10);
        assert_eq!(fit.sigma2, VARIANCE_FLOOR);
    }

    #[test]
    fn least_squares_matches_normal_equations_oracle() {
        let data = random_dataset(11, 6, 3, 2, 0.0, 0.4);
        let fit = fit_cross_sectional(&data).unwrap();
        // Rebuild the normal equations per region with explicit inversion.
        for j in 0..data.n_regions() {
            let rows: Vec<_> = data
                .observations()
                .iter()
                .filter(|o| o.region == j)
                .collect();
            let p = data.n_covariates();
            let mut xtx = DMatrix::zeros(p, p);
            let mut xty = DVector::zeros(p);
            for o in &rows {
                let x = data.design_row(o);
                xtx += x * x.transpose();
                xty += x * o.y;
            }
            let beta = xtx.try_inverse().unwrap() * xty;
            for k in 0..p {
                assert_abs_diff_eq!(fit.coefficients[(k, j)], beta[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn collinear_covariates_are_reported_per_region() {
        // Covariate duplicates the intercept.
        let records = vec![
            rec("a", 1, "r0", 1.0, &[1.0]),
            rec("a", 2, "r0", 2.0, &[1.0]),
            rec("b", 1, "r0", 3.0, &[1.0]),
        ];
        let data = LongDataset::from_records(&records, &["one".into()], None).unwrap();
        match fit_cross_sectional(&data) {
            Err(Error::RankDeficientDesign { region }) => assert_eq!(region, "r0"),
            other => panic!("expected RankDeficientDesign, got {other:?}"),
        }
    }

    #[test]
    fn em_loglik_is_nondecreasing_and_converges() {
        let data = random_dataset(5, 25, 4, 3, 0.8, 0.5);
        let fit = fit_longitudinal(&data).unwrap();
        assert!(fit.iterations <= DEFAULT_EM_MAX_ITER);
        for w in fit.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "loglik decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_recovers_generating_variances_roughly() {
        let data = random_dataset(17, 150, 4, 4, 0.8, 0.5);
        let fit = fit_longitudinal(&data).unwrap();
        assert!((fit.sigma2.sqrt() - 0.5).abs() < 0.05, "sigma {}", fit.sigma2.sqrt());
        assert!(
            (fit.sigma_b2.sqrt() - 0.8).abs() < 0.12,
            "sigma_b {}",
            fit.sigma_b2.sqrt()
        );
    }

    #[test]
    fn zero_subject_effect_shrinks_toward_cross_sectional() {
        let data = random_dataset(23, 60, 3, 3, 0.0, 0.5);
        let long = fit_longitudinal(&data).unwrap();
        let cs = fit_cross_sectional(&data).unwrap();
        assert!(long.sigma_b2.sqrt() < 0.1, "sigma_b {}", long.sigma_b2.sqrt());
        for j in 0..data.n_regions() {
            for k in 0..data.n_covariates() {
                assert_abs_diff_eq!(
                    long.coefficients[(k, j)],
                    cs.coefficients[(k, j)],
                    epsilon = 0.05
                );
            }
        }
    }

    #[test]
    fn blups_match_the_closed_form_shrinkage_estimator() {
        let data = random_dataset(31, 12, 3, 3, 1.0, 0.4);
        let fit = fit_longitudinal(&data).unwrap();
        for i in 0..data.n_subjects() {
            let obs = data.subject_observations(i);
            let n_i = obs.len() as f64;
            let mean_resid: f64 = obs
                .iter()
                .map(|o| o.y - data.design_row(o).dot(&fit.coefficients.column(o.region)))
                .sum::<f64>()
                / n_i;
            let shrink = n_i * fit.sigma_b2 / (n_i * fit.sigma_b2 + fit.sigma2);
            assert_abs_diff_eq!(fit.intercepts[i], shrink * mean_resid, epsilon = 1e-10);
        }
    }

    #[test]
    fn marginal_loglik_matches_dense_gaussian_oracle() {
        let data = random_dataset(43, 5, 3, 2, 0.7, 0.5);
        let fit = fit_cross_sectional(&data).unwrap();
        let (s2, sb2) = (0.31, 0.44);
        let fast = marginal_log_likelihood(&data, &fit.coefficients, s2, sb2).unwrap();
        // Dense per-subject covariance, generic Cholesky path.
        let mut slow = 0.0;
        for i in 0..data.n_subjects() {
            let obs = data.subject_observations(i);
            let n_i = obs.len();
            let mut cov = DMatrix::from_element(n_i, n_i, sb2);
            for k in 0..n_i {
                cov[(k, k)] += s2;
            }
            let resid = DVector::from_iterator(
                n_i,
                obs.iter()
                    .map(|o| o.y - data.design_row(o).dot(&fit.coefficients.column(o.region))),
            );
            let chol = Cholesky::new(cov).unwrap();
            let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let quad = resid.dot(&chol.solve(&resid));
            slow -= 0.5 * (quad + logdet + n_i as f64 * LN_2PI);
        }
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-10);
    }

    #[test]
    fn baselines_are_invariant_to_region_relabeling() {
        let data = random_dataset(3, 10, 3, 3, 0.6, 0.5);
        let cs = fit_cross_sectional(&data).unwrap();
        let long = fit_longitudinal(&data).unwrap();

        // Rebuild the dataset with regions listed in reverse order.
        let reversed: Vec<String> = data.region_labels().iter().rev().cloned().collect();
        let records: Vec<ObservationRecord> = data
            .observations()
            .iter()
            .map(|o| ObservationRecord {
                subject: data.subject_id(o.subject).to_string(),
                visit: o.visit,
                region: data.region_labels()[o.region].clone(),
                y: o.y,
                covariates: data.design_row(o).iter().skip(1).cloned().collect(),
                abnormal: false,
            })
            .collect();
        let data_rev =
            LongDataset::from_records(&records, &["age".into()], Some(&reversed)).unwrap();
        let cs_rev = fit_cross_sectional(&data_rev).unwrap();
        let long_rev = fit_longitudinal(&data_rev).unwrap();

        assert_abs_diff_eq!(cs.sigma2, cs_rev.sigma2, epsilon = 1e-12);
        assert_abs_diff_eq!(long.sigma_b2, long_rev.sigma_b2, epsilon = 1e-8);
        let r = data.n_regions();
        for j in 0..r {
            let j_rev = r - 1 - j;
            for k in 0..data.n_covariates() {
                assert_abs_diff_eq!(
                    cs.coefficients[(k, j)],
                    cs_rev.coefficients[(k, j_rev)],
                    epsilon = 1e-10
                );
                assert_abs_diff_eq!(
                    long.coefficients[(k, j)],
                    long_rev.coefficients[(k, j_rev)],
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn deviation_maps_average_residuals_per_cell() {
        let records = vec![
            rec("a", 1, "r0", 2.0, &[]),
            rec("a", 2, "r0", 4.0, &[]),
            rec("a", 1, "r1", 1.0, &[]),
            rec("b", 1, "r0", 0.0, &[]),
            rec("b", 1, "r1", -1.0, &[]),
            rec("b", 2, "r1", 5.0, &[]),
        ];
        let data = LongDataset::from_records(&records, &[], None).unwrap();
        let fit = fit_cross_sectional(&data).unwrap();
        let map = cross_sectional_deviation_map(&data, &fit);
        // Region means: r0 -> 2.0, r1 -> 5/3.
        assert_abs_diff_eq!(map[(0, 0)], 3.0 - 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(map[(0, 1)], 1.0 - 5.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(map[(1, 0)], 0.0 - 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(map[(1, 1)], 2.0 - 5.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn single_visit_cohort_is_rejected_by_the_longitudinal_fit() {
        let records = vec![
            rec("a", 1, "r0", 1.0, &[]),
            rec("b", 1, "r0", 2.0, &[]),
        ];
        let data = LongDataset::from_records(&records, &[], None).unwrap();
        assert!(matches!(
            fit_longitudinal(&data),
            Err(Error::InvalidConfig(_))
        ));
    }
}
