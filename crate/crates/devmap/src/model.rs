//! Model state and the exact Gaussian identities of the normative model.
//!
//! The observation model for subject i, visit t, region r is
//!
//! ```text
//! Y_itr = X_it' beta_r + b_i + u_ir + eps_itr
//! b_i   ~ N(0, sigma_b^2)
//! u_i   ~ N(0, tau_u^2 Q(rho)^{-1})
//! eps   ~ N(0, sigma^2), all mutually independent.
//! ```
//!
//! Given (B, b_i, sigma, tau_u, rho), the deviation field of a subject has a
//! closed-form Gaussian posterior. With per-region observation counts c_ir
//! and residual sums s_ir over the subject's observed entries,
//!
//! ```text
//! S_i = (tau_u^{-2} Q(rho) + sigma^{-2} diag(c_i))^{-1}
//! m_i = S_i (sigma^{-2} s_i)
//! ```
//!
//! which reduces to the balanced form `(tau_u^{-2}Q + T_i sigma^{-2} I)^{-1}`
//! when every visit observes every region. All solves go through Cholesky
//! factorizations of the posterior precision.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LongDataset;
use crate::error::{Error, Result};
use crate::graph::RegionGraph;

/// |z| threshold used for tail probabilities and extreme-score proportions.
pub const EXTREME_Z: f64 = 1.96;

/// Full parameter state: fixed effects `coefficients` (p x R), per-subject
/// `intercepts` (n), per-subject deviation fields `deviations` (n x R), and
/// the four scale / dependence parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub coefficients: DMatrix<f64>,
    pub intercepts: DVector<f64>,
    pub deviations: DMatrix<f64>,
    pub sigma: f64,
    pub sigma_b: f64,
    pub tau_u: f64,
    pub rho: f64,
}

impl ModelState {
    pub fn validate(&self, data: &LongDataset, graph: &RegionGraph) -> Result<()> {
        let (p, r, n) = (data.n_covariates(), data.n_regions(), data.n_subjects());
        if graph.n_regions() != r {
            return Err(Error::DimensionMismatch(format!(
                "graph has {} regions, data has {r}",
                graph.n_regions()
            )));
        }
        if self.coefficients.nrows() != p || self.coefficients.ncols() != r {
            return Err(Error::DimensionMismatch(format!(
                "coefficients are {}x{}, expected {p}x{r}",
                self.coefficients.nrows(),
                self.coefficients.ncols()
            )));
        }
        if self.intercepts.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} intercepts for {n} subjects",
                self.intercepts.len()
            )));
        }
        if self.deviations.nrows() != n || self.deviations.ncols() != r {
            return Err(Error::DimensionMismatch(format!(
                "deviations are {}x{}, expected {n}x{r}",
                self.deviations.nrows(),
                self.deviations.ncols()
            )));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("sigma_b", self.sigma_b),
            ("tau_u", self.tau_u),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidScale { name, value: v });
            }
        }
        if !graph.contains_rho(self.rho) {
            let (lo, hi) = graph.rho_interval();
            return Err(Error::RhoOutOfRange {
                rho: self.rho,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// Conditional mean `X_it' beta_r + b_i + u_ir` for one observation.
    pub fn conditional_mean(&self, data: &LongDataset, obs: &crate::data::Observation) -> f64 {
        let x = data.design_row(obs);
        x.dot(&self.coefficients.column(obs.region))
            + self.intercepts[obs.subject]
            + self.deviations[(obs.subject, obs.region)]
    }
}

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Log-likelihood of the observations conditional on (B, b, u): a sum of
/// independent normal densities with variance sigma^2.
pub fn log_likelihood(data: &LongDataset, state: &ModelState) -> Result<f64> {
    if !state.sigma.is_finite() || state.sigma <= 0.0 {
        return Err(Error::InvalidScale {
            name: "sigma",
            value: state.sigma,
        });
    }
    let inv2 = 0.5 / (state.sigma * state.sigma);
    let mut ll = 0.0;
    for obs in data.observations() {
        let resid = obs.y - state.conditional_mean(data, obs);
        ll -= inv2 * resid * resid;
    }
    ll -= data.n_observations() as f64 * (state.sigma.ln() + 0.5 * LN_2PI);
    Ok(ll)
}

/// Marginal covariance of two observations with (b, u) integrated out:
///
/// ```text
/// Cov(Y_itr, Y_jsl) = I(i=j) sigma_b^2
///                   + I(i=j) tau_u^2 [Q^{-1}]_{rl}
///                   + I(i=j, t=s, r=l) sigma^2
/// ```
pub fn marginal_covariance(
    data: &LongDataset,
    graph: &RegionGraph,
    state: &ModelState,
    obs_a: usize,
    obs_b: usize,
) -> Result<f64> {
    let n = data.n_observations();
    if obs_a >= n || obs_b >= n {
        return Err(Error::DimensionMismatch(format!(
            "observation index out of range ({obs_a}, {obs_b}) for {n} observations"
        )));
    }
    let a = &data.observations()[obs_a];
    let b = &data.observations()[obs_b];
    if a.subject != b.subject {
        return Ok(0.0);
    }
    let chol = graph.precision_cholesky(state.rho)?;
    let mut e = DVector::zeros(graph.n_regions());
    e[b.region] = 1.0;
    let qinv_col = chol.solve(&e);
    let mut cov = state.sigma_b * state.sigma_b + state.tau_u * state.tau_u * qinv_col[a.region];
    if a.visit == b.visit && a.region == b.region {
        cov += state.sigma * state.sigma;
    }
    Ok(cov)
}

/// Gaussian posterior for a subject-level latent block.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Per-region residual counts and sums for one subject given fixed effects
/// and an intercept value: `s_r = sum_t (y_itr - x_it'beta_r - b_i)`.
pub(crate) fn residual_sums(
    data: &LongDataset,
    subject: usize,
    coefficients: &DMatrix<f64>,
    intercept: f64,
) -> (Vec<usize>, DVector<f64>) {
    let r = data.n_regions();
    let mut counts = vec![0usize; r];
    let mut sums = DVector::zeros(r);
    for obs in data.subject_observations(subject) {
        let x = data.design_row(obs);
        let fitted = x.dot(&coefficients.column(obs.region)) + intercept;
        counts[obs.region] += 1;
        sums[obs.region] += obs.y - fitted;
    }
    (counts, sums)
}

/// Exact posterior of one subject's deviation field given (B, b_i, sigma,
/// tau_u, rho). Handles ragged visits: regions never observed for the
/// subject fall back to the prior through zero counts. A subject with no
/// observations at all gets the pure prior `N(0, tau_u^2 Q^{-1})`.
pub fn posterior_u(
    data: &LongDataset,
    subject: usize,
    graph: &RegionGraph,
    coefficients: &DMatrix<f64>,
    intercept: f64,
    sigma: f64,
    tau_u: f64,
    rho: f64,
) -> Result<SubjectPosterior> {
    for (name, v) in [("sigma", sigma), ("tau_u", tau_u)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::InvalidScale { name, value: v });
        }
    }
    let (counts, sums) = residual_sums(data, subject, coefficients, intercept);
    let q = graph.build_precision(rho)?;
    posterior_u_from_sums(&q, &counts, &sums, sigma, tau_u)
}

/// Core of [`posterior_u`], reused by the sampler with a prebuilt precision.
pub(crate) fn posterior_u_from_sums(
    q: &DMatrix<f64>,
    counts: &[usize],
    sums: &DVector<f64>,
    sigma: f64,
    tau_u: f64,
) -> Result<SubjectPosterior> {
    let r = q.nrows();
    let inv_tau2 = 1.0 / (tau_u * tau_u);
    let inv_sig2 = 1.0 / (sigma * sigma);
    let mut prec = q * inv_tau2;
    for j in 0..r {
        prec[(j, j)] += counts[j] as f64 * inv_sig2;
    }
    let chol = Cholesky::new(prec).ok_or(Error::SingularPrecision)?;
    let mean = chol.solve(&(sums * inv_sig2));
    let cov = chol.inverse();
    Ok(SubjectPosterior { mean, cov })
}

/// Joint posterior of `[b_i; u_i]` (dimension R+1) for a subject given the
/// population parameters. Used to score subjects that were not part of a
/// fit, where the intercept and deviation field must be inferred together.
pub fn joint_latent_posterior(
    data: &LongDataset,
    subject: usize,
    graph: &RegionGraph,
    coefficients: &DMatrix<f64>,
    sigma: f64,
    sigma_b: f64,
    tau_u: f64,
    rho: f64,
) -> Result<SubjectPosterior> {
    for (name, v) in [("sigma", sigma), ("sigma_b", sigma_b), ("tau_u", tau_u)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::InvalidScale { name, value: v });
        }
    }
    let r = graph.n_regions();
    let q = graph.build_precision(rho)?;
    let inv_sig2 = 1.0 / (sigma * sigma);
    let inv_tau2 = 1.0 / (tau_u * tau_u);

    let (counts, sums) = residual_sums(data, subject, coefficients, 0.0);
    let total: f64 = sums.iter().sum();
    let n_i: usize = counts.iter().sum();

    // Precision blocks: [ 1/sigma_b^2 + N_i/sigma^2 , c_r'/sigma^2 ;
    //                     c_r/sigma^2               , Q/tau^2 + diag(c)/sigma^2 ]
    let mut prec = DMatrix::zeros(r + 1, r + 1);
    prec[(0, 0)] = 1.0 / (sigma_b * sigma_b) + n_i as f64 * inv_sig2;
    for j in 0..r {
        let cj = counts[j] as f64 * inv_sig2;
        prec[(0, j + 1)] = cj;
        prec[(j + 1, 0)] = cj;
        for k in 0..r {
            prec[(j + 1, k + 1)] = q[(j, k)] * inv_tau2;
        }
        prec[(j + 1, j + 1)] += counts[j] as f64 * inv_sig2;
    }
    let mut lin = DVector::zeros(r + 1);
    lin[0] = total * inv_sig2;
    for j in 0..r {
        lin[j + 1] = sums[j] * inv_sig2;
    }
    let chol = Cholesky::new(prec).ok_or(Error::SingularPrecision)?;
    Ok(SubjectPosterior {
        mean: chol.solve(&lin),
        cov: chol.inverse(),
    })
}

/// Posterior predictive for a subject's next visit at covariates `x_new`:
/// mean `B'x + b_i 1 + m_i`, covariance `S_i + sigma^2 I`.
pub fn posterior_predictive(
    posterior: &SubjectPosterior,
    coefficients: &DMatrix<f64>,
    intercept: f64,
    sigma: f64,
    x_new: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = posterior.mean.len();
    if coefficients.ncols() != r {
        return Err(Error::DimensionMismatch(format!(
            "coefficients have {} regions, posterior has {r}",
            coefficients.ncols()
        )));
    }
    if coefficients.nrows() != x_new.len() {
        return Err(Error::DimensionMismatch(format!(
            "x_new has length {}, expected {}",
            x_new.len(),
            coefficients.nrows()
        )));
    }
    let mut mean = DVector::zeros(r);
    for j in 0..r {
        mean[j] = x_new.dot(&coefficients.column(j)) + intercept + posterior.mean[j];
    }
    let mut cov = posterior.cov.clone();
    for j in 0..r {
        cov[(j, j)] += sigma * sigma;
    }
    Ok((mean, cov))
}

/// Standardized deviation scores `z = (y - mu) / sqrt(v)`.
pub fn z_scores(ys: &[f64], means: &[f64], variances: &[f64]) -> Result<Vec<f64>> {
    if ys.len() != means.len() || ys.len() != variances.len() {
        return Err(Error::DimensionMismatch(format!(
            "z_scores got {} responses, {} means, {} variances",
            ys.len(),
            means.len(),
            variances.len()
        )));
    }
    let mut z = Vec::with_capacity(ys.len());
    for (i, ((&y, &mu), &v)) in ys.iter().zip(means).zip(variances).enumerate() {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::NonpositiveVariance { index: i });
        }
        z.push((y - mu) / v.sqrt());
    }
    Ok(z)
}

/// Default burden window: the top 10% of a subject's scores, at least one.
pub fn default_burden_m(n_scores: usize) -> usize {
    ((n_scores as f64) * 0.1).ceil().max(1.0) as usize
}

/// Mean of the `m` largest |z| among a subject's scores.
pub fn burden_index(zs: &[f64], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidConfig("burden window m must be >= 1".into()));
    }
    if m > zs.len() {
        return Err(Error::BurdenWindowTooLarge {
            m,
            available: zs.len(),
        });
    }
    let mut mags: Vec<f64> = zs.iter().map(|z| z.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(mags[..m].iter().sum::<f64>() / m as f64)
}

/// One scored observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject: String,
    pub visit: usize,
    pub region: String,
    pub y: f64,
    pub mu_hat: f64,
    pub v_hat: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: String,
    pub m: usize,
    pub burden: f64,
    pub max_abs_z: f64,
    pub prop_extreme: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub n: usize,
    pub mean_z: f64,
    pub sd_z: f64,
    pub tail_prob: f64,
}

/// Scored dataset plus per-subject and per-region rollups and the estimated
/// deviation maps that produced the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub rows: Vec<ScoreRow>,
    pub subjects: Vec<SubjectSummary>,
    pub regions: Vec<RegionSummary>,
    /// Deviation-map estimate per (subject_id, region index row-major over
    /// `region_labels`); `None` for scoring modes that do not estimate one.
    pub deviation_maps: Option<DeviationMaps>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationMaps {
    pub subject_ids: Vec<String>,
    pub region_labels: Vec<String>,
    /// n x R estimates.
    pub mean: DMatrix<f64>,
    /// n x R posterior standard deviations where available.
    pub sd: Option<DMatrix<f64>>,
}

impl DeviationReport {
    /// Builds the rollups from scored rows. `burden_m` overrides the default
    /// 10% window when given.
    pub fn from_rows(
        rows: Vec<ScoreRow>,
        burden_m: Option<usize>,
        region_labels: &[String],
        deviation_maps: Option<DeviationMaps>,
    ) -> Result<Self> {
        let mut by_subject: Vec<(String, Vec<f64>)> = Vec::new();
        let mut idx: HashMap<String, usize> = HashMap::new();
        for row in &rows {
            let k = *idx.entry(row.subject.clone()).or_insert_with(|| {
                by_subject.push((row.subject.clone(), Vec::new()));
                by_subject.len() - 1
            });
            by_subject[k].1.push(row.z);
        }
        let mut subjects = Vec::with_capacity(by_subject.len());
        for (id, zs) in &by_subject {
            let m = burden_m.unwrap_or_else(|| default_burden_m(zs.len()));
            let burden = burden_index(zs, m)?;
            let max_abs_z = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
            let extreme = zs.iter().filter(|z| z.abs() > EXTREME_Z).count();
            subjects.push(SubjectSummary {
                subject: id.clone(),
                m,
                burden,
                max_abs_z,
                prop_extreme: extreme as f64 / zs.len() as f64,
            });
        }

        let mut regions = Vec::with_capacity(region_labels.len());
        for label in region_labels {
            let zs: Vec<f64> = rows
                .iter()
                .filter(|r| &r.region == label)
                .map(|r| r.z)
                .collect();
            if zs.is_empty() {
                continue;
            }
            let n = zs.len();
            let mean = zs.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
            } else {
                0.0
            };
            let tail = zs.iter().filter(|z| z.abs() > EXTREME_Z).count() as f64 / n as f64;
            regions.push(RegionSummary {
                region: label.clone(),
                n,
                mean_z: mean,
                sd_z: sd,
                tail_prob: tail,
            });
        }

        Ok(Self {
            rows,
            subjects,
            regions,
            deviation_maps,
        })
    }

    pub fn z_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.z).collect()
    }

    pub fn write_scores_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["subject", "visit", "region", "y", "mu_hat", "v_hat", "z"])?;
        for r in &self.rows {
            wtr.write_record([
                r.subject.as_str(),
                &r.visit.to_string(),
                r.region.as_str(),
                &format!("{}", r.y),
                &format!("{}", r.mu_hat),
                &format!("{}", r.v_hat),
                &format!("{}", r.z),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_scores_reader<R: Read>(reader: R) -> Result<Vec<ScoreRow>> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec?);
        }
        Ok(rows)
    }

    pub fn write_subjects_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["subject", "m", "burden", "max_abs_z", "prop_extreme"])?;
        for s in &self.subjects {
            wtr.write_record([
                s.subject.as_str(),
                &s.m.to_string(),
                &format!("{}", s.burden),
                &format!("{}", s.max_abs_z),
                &format!("{}", s.prop_extreme),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_regions_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["region", "n", "mean_z", "sd_z", "tail_prob"])?;
        for r in &self.regions {
            wtr.write_record([
                r.region.as_str(),
                &r.n.to_string(),
                &format!("{}", r.mean_z),
                &format!("{}", r.sd_z),
                &format!("{}", r.tail_prob),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_deviation_maps_writer<W: Write>(&self, writer: W) -> Result<()> {
        let Some(maps) = &self.deviation_maps else {
            return Err(Error::InvalidConfig(
                "this report carries no deviation-map estimates".into(),
            ));
        };
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["subject", "region", "u_hat", "u_sd"])?;
        for (i, id) in maps.subject_ids.iter().enumerate() {
            for (j, label) in maps.region_labels.iter().enumerate() {
                let sd = maps
                    .sd
                    .as_ref()
                    .map(|s| format!("{}", s[(i, j)]))
                    .unwrap_or_default();
                wtr.write_record([
                    id.as_str(),
                    label.as_str(),
                    &format!("{}", maps.mean[(i, j)]),
                    &sd,
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a deviation-map CSV back into (subject_ids, region_labels, mean, sd).
    pub fn read_deviation_maps_reader<R: Read>(reader: R) -> Result<DeviationMaps> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut subject_ids: Vec<String> = Vec::new();
        let mut region_labels: Vec<String> = Vec::new();
        let mut cells: Vec<(usize, usize, f64, Option<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let sid = rec[0].to_string();
            let rl = rec[1].to_string();
            let si = match subject_ids.iter().position(|s| s == &sid) {
                Some(i) => i,
                None => {
                    subject_ids.push(sid);
                    subject_ids.len() - 1
                }
            };
            let ri = match region_labels.iter().position(|r| r == &rl) {
                Some(i) => i,
                None => {
                    region_labels.push(rl);
                    region_labels.len() - 1
                }
            };
            let mean: f64 = rec[2]
                .parse()
                .map_err(|_| Error::Parse(format!("invalid u_hat '{}'", &rec[2])))?;
            let sd: Option<f64> = if rec.len() > 3 && !rec[3].is_empty() {
                Some(
                    rec[3]
                        .parse()
                        .map_err(|_| Error::Parse(format!("invalid u_sd '{}'", &rec[3])))?,
                )
            } else {
                None
            };
            cells.push((si, ri, mean, sd));
        }
        if cells.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (n, r) = (subject_ids.len(), region_labels.len());
        let mut mean = DMatrix::zeros(n, r);
        let has_sd = cells.iter().all(|c| c.3.is_some());
        let mut sd = if has_sd { Some(DMatrix::zeros(n, r)) } else { None };
        for (i, j, m, s) in cells {
            mean[(i, j)] = m;
            if let (Some(mat), Some(v)) = (sd.as_mut(), s) {
                mat[(i, j)] = v;
            }
        }
        Ok(DeviationMaps {
            subject_ids,
            region_labels,
            mean,
            sd,
        })
    }
}
