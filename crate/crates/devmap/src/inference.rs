//! Metropolis-within-Gibbs sampler for the full posterior of
//! (B, b, u, sigma, sigma_b, tau_u, rho).
//!
//! All Gaussian blocks are exact conjugate updates: coefficients per
//! region, intercepts per subject, deviation fields per subject (sharing
//! one factorization per distinct visit-count pattern). The three scale
//! parameters move by random-walk Metropolis on the log scale against
//! half-Cauchy priors, and rho moves on the logit of its rescaled position
//! inside the admissible interval against a Beta prior. Step sizes adapt
//! toward 0.44 acceptance during warmup only, so the post-warmup kernel
//! satisfies detailed balance.
//!
//! A row-constant shift of a deviation field trades off against the
//! subject's intercept; the likelihood cannot tell them apart. The optional
//! `center_u` move (default on) samples along exactly that direction from
//! the group-invariant conditional, which is a valid Gibbs update on the
//! joint posterior and noticeably improves mixing of sigma_b and tau_u.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::fit_cross_sectional;
use crate::data::LongDataset;
use crate::diagnostics::{bulk_ess, quantile_sorted, split_rhat, write_trace_csv};
use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::model::{residual_sums, ModelState};

/// Target acceptance rate for the scalar Metropolis blocks.
const TARGET_ACCEPT: f64 = 0.44;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    /// Prior SD of every fixed-effect coefficient (mean zero).
    pub beta_sd: f64,
    /// Half-Cauchy scale shared by sigma, sigma_b, tau_u.
    pub scale_cauchy: f64,
    /// Beta shape parameters for rho's position inside the admissible
    /// interval.
    pub rho_beta: (f64, f64),
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta_sd: 10.0,
            scale_cauchy: 2.5,
            rho_beta: (1.0, 1.0),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_sd", self.beta_sd),
            ("scale_cauchy", self.scale_cauchy),
            ("rho_beta.0", self.rho_beta.0),
            ("rho_beta.1", self.rho_beta.1),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "prior parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial proposal SD on the logit-rescaled rho.
    pub rho_step: f64,
    /// Initial proposal SD on the log scales.
    pub scale_step: f64,
    /// Sample the intercept/deviation tradeoff direction each sweep.
    pub center_u: bool,
    /// Pin tau_u. `Some(0.0)` turns the model into the longitudinal
    /// non-spatial submodel: u stays at zero and rho is not sampled.
    pub fix_tau_u: Option<f64>,
    /// Pin rho instead of sampling it.
    pub fix_rho: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_samples: 1000,
            thin: 1,
            seed: 0,
            rho_step: 0.5,
            scale_step: 0.3,
            center_u: true,
            fix_tau_u: None,
            fix_rho: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_chains", self.n_chains),
            ("n_samples", self.n_samples),
            ("thin", self.thin),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("rho_step", self.rho_step), ("scale_step", self.scale_step)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if let Some(t) = self.fix_tau_u {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "fix_tau_u must be nonnegative, got {t}"
                )));
            }
        }
        Ok(())
    }

    fn tau_active(&self) -> bool {
        self.fix_tau_u.is_none()
    }

    fn spatial_field_active(&self) -> bool {
        self.fix_tau_u.map(|t| t > 0.0).unwrap_or(true)
    }
}

/// Precomputed quantities that never change during a run, plus the
/// precision cache that changes only when rho moves.
pub struct SamplerWorkspace {
    /// Per-region Gram matrices sum X X'.
    grams: Vec<DMatrix<f64>>,
    /// Subjects grouped by identical per-region observation-count vectors;
    /// each group shares one posterior factorization per sweep.
    pattern_groups: Vec<(Vec<usize>, Vec<usize>)>,
    /// Q(rho) at the current state's rho.
    q: DMatrix<f64>,
    q_logdet: f64,
}

impl SamplerWorkspace {
    pub fn new(data: &LongDataset, graph: &RegionGraph, rho: f64) -> Result<Self> {
        let p = data.n_covariates();
        let mut grams = vec![DMatrix::zeros(p, p); data.n_regions()];
        for obs in data.observations() {
            let x = data.design_row(obs);
            grams[obs.region].syger(1.0, x, x, 1.0);
        }
        let mut pattern_groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for i in 0..data.n_subjects() {
            let counts = data.subject_region_counts(i);
            match pattern_groups.iter_mut().find(|(c, _)| c == &counts) {
                Some((_, members)) => members.push(i),
                None => pattern_groups.push((counts, vec![i])),
            }
        }
        let q = graph.build_precision(rho)?;
        let q_logdet = graph.precision_log_det(rho)?;
        Ok(Self {
            grams,
            pattern_groups,
            q,
            q_logdet,
        })
    }

    fn set_rho(&mut self, graph: &RegionGraph, rho: f64) -> Result<()> {
        self.q = graph.build_precision(rho)?;
        self.q_logdet = graph.precision_log_det(rho)?;
        Ok(())
    }
}

/// Mean and covariance of one region's coefficient full conditional.
pub fn beta_full_conditional(
    data: &LongDataset,
    state: &ModelState,
    prior: &PriorConfig,
    region: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = data.n_covariates();
    let inv_sig2 = 1.0 / (state.sigma * state.sigma);
    let inv_prior = 1.0 / (prior.beta_sd * prior.beta_sd);
    let mut prec = DMatrix::identity(p, p) * inv_prior;
    let mut lin = DVector::zeros(p);
    for obs in data.observations() {
        if obs.region != region {
            continue;
        }
        let x = data.design_row(obs);
        prec.syger(inv_sig2, x, x, 1.0);
        let resid = obs.y - state.intercepts[obs.subject] - state.deviations[(obs.subject, region)];
        lin.axpy(inv_sig2 * resid, x, 1.0);
    }
    let chol = Cholesky::new(prec).ok_or(Error::SingularPrecision)?;
    let mean = chol.solve(&lin);
    Ok((mean, chol.inverse()))
}

/// Mean and variance of one subject's intercept full conditional.
pub fn b_full_conditional(data: &LongDataset, state: &ModelState, subject: usize) -> (f64, f64) {
    let inv_sig2 = 1.0 / (state.sigma * state.sigma);
    let inv_b2 = 1.0 / (state.sigma_b * state.sigma_b);
    let obs = data.subject_observations(subject);
    let mut rsum = 0.0;
    for o in obs {
        rsum += o.y
            - data.design_row(o).dot(&state.coefficients.column(o.region))
            - state.deviations[(subject, o.region)];
    }
    let prec = inv_b2 + obs.len() as f64 * inv_sig2;
    (rsum * inv_sig2 / prec, 1.0 / prec)
}

/// Draw from N(mean, cov) given the Cholesky factor of the **precision**:
/// solve L' x = z.
fn draw_from_precision<R: Rng + ?Sized>(
    chol: &Cholesky<f64, nalgebra::Dyn>,
    mean: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample(StandardNormal));
    let x = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .ok_or(Error::SingularPrecision)?;
    Ok(mean + x)
}

/// Gibbs update of all coefficient columns from their exact Gaussian full
/// conditionals.
pub fn gibbs_beta<R: Rng + ?Sized>(
    data: &LongDataset,
    ws: &SamplerWorkspace,
    state: &mut ModelState,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<()> {
    let p = data.n_covariates();
    let inv_sig2 = 1.0 / (state.sigma * state.sigma);
    let inv_prior = 1.0 / (prior.beta_sd * prior.beta_sd);

    let mut lins = vec![DVector::zeros(p); data.n_regions()];
    for obs in data.observations() {
        let resid =
            obs.y - state.intercepts[obs.subject] - state.deviations[(obs.subject, obs.region)];
        lins[obs.region].axpy(inv_sig2 * resid, data.design_row(obs), 1.0);
    }
    for j in 0..data.n_regions() {
        let mut prec = &ws.grams[j] * inv_sig2;
        for k in 0..p {
            prec[(k, k)] += inv_prior;
        }
        let chol = Cholesky::new(prec).ok_or(Error::SingularPrecision)?;
        let mean = chol.solve(&lins[j]);
        state.coefficients.set_column(j, &draw_from_precision(&chol, &mean, rng)?);
    }
    Ok(())
}

/// Gibbs update of every subject intercept.
pub fn gibbs_b<R: Rng + ?Sized>(data: &LongDataset, state: &mut ModelState, rng: &mut R) {
    for i in 0..data.n_subjects() {
        let (mean, var) = b_full_conditional(data, state, i);
        state.intercepts[i] = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Gibbs update of every deviation field from N(m_i, S_i), sharing one
/// factorization per visit-count pattern.
pub fn gibbs_u<R: Rng + ?Sized>(
    data: &LongDataset,
    ws: &SamplerWorkspace,
    state: &mut ModelState,
    rng: &mut R,
) -> Result<()> {
    let inv_tau2 = 1.0 / (state.tau_u * state.tau_u);
    let inv_sig2 = 1.0 / (state.sigma * state.sigma);
    let r = ws.q.nrows();
    for (counts, members) in &ws.pattern_groups {
        let mut prec = &ws.q * inv_tau2;
        for j in 0..r {
            prec[(j, j)] += counts[j] as f64 * inv_sig2;
        }
        let chol = Cholesky::new(prec).ok_or(Error::SingularPrecision)?;
        for &i in members {
            let (_, sums) = residual_sums(data, i, &state.coefficients, state.intercepts[i]);
            let mean = chol.solve(&(sums * inv_sig2));
            let draw = draw_from_precision(&chol, &mean, rng)?;
            for j in 0..r {
                state.deviations[(i, j)] = draw[j];
            }
        }
    }
    Ok(())
}

/// Samples the likelihood-invariant direction (b_i + c, u_i - c 1) from its
/// exact conditional. Leaves the joint posterior invariant because the map
/// is a translation group and the conditional is the prior density along
/// the orbit.
pub fn center_u<R: Rng + ?Sized>(ws: &SamplerWorkspace, state: &mut ModelState, rng: &mut R) {
    let inv_b2 = 1.0 / (state.sigma_b * state.sigma_b);
    let inv_tau2 = 1.0 / (state.tau_u * state.tau_u);
    let r = ws.q.nrows();
    let q_rowsums: DVector<f64> = DVector::from_fn(r, |j, _| ws.q.row(j).sum());
    let one_q_one: f64 = q_rowsums.sum();
    let kappa = inv_b2 + one_q_one * inv_tau2;
    for i in 0..state.intercepts.len() {
        let u_i = state.deviations.row(i);
        let one_q_u: f64 = (0..r).map(|j| q_rowsums[j] * u_i[j]).sum();
        let mean = (-state.intercepts[i] * inv_b2 + one_q_u * inv_tau2) / kappa;
        let c = mean + rng.sample::<f64, _>(StandardNormal) / kappa.sqrt();
        state.intercepts[i] += c;
        for j in 0..r {
            state.deviations[(i, j)] -= c;
        }
    }
}

/// Adaptive step sizes for the scalar Metropolis blocks.
#[derive(Debug, Clone)]
pub struct ScaleSteps {
    pub sigma: f64,
    pub sigma_b: f64,
    pub tau_u: f64,
    pub adapting: bool,
    count: usize,
}

impl ScaleSteps {
    pub fn new(step: f64) -> Self {
        Self {
            sigma: step,
            sigma_b: step,
            tau_u: step,
            adapting: true,
            count: 0,
        }
    }
}

fn log_half_cauchy(s: f64, scale: f64) -> f64 {
    -(1.0 + (s / scale) * (s / scale)).ln()
}

fn adapt_step(step: &mut f64, accept_prob: f64, count: usize) {
    let gamma = ((count + 1) as f64).powf(-0.6);
    *step = (*step * ((accept_prob - TARGET_ACCEPT) * gamma).exp()).clamp(1e-4, 10.0);
}

/// One random-walk Metropolis move on log s against `logtarget(s)`
/// (likelihood and prior terms only; the log-scale Jacobian is added here).
/// Returns the accepted value and the acceptance probability.
fn mh_log_scale<R: Rng + ?Sized, F: Fn(f64) -> f64>(
    current: f64,
    step: f64,
    logtarget: F,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let cur_lp = logtarget(current) + current.ln();
    if !cur_lp.is_finite() {
        return Err(Error::ChainDiverged {
            chain: usize::MAX,
            iteration: usize::MAX,
        });
    }
    let proposal = (current.ln() + step * rng.sample::<f64, _>(StandardNormal)).exp();
    let prop_lp = logtarget(proposal) + proposal.ln();
    let accept_prob = if prop_lp.is_finite() {
        (prop_lp - cur_lp).exp().min(1.0)
    } else {
        0.0
    };
    let value = if rng.gen::<f64>() < accept_prob {
        proposal
    } else {
        current
    };
    Ok((value, accept_prob))
}

/// Metropolis updates of (sigma, sigma_b, tau_u) on the log scale against
/// half-Cauchy priors. `update_tau` is false when tau_u is pinned. Returns
/// the three acceptance probabilities (1.0 reported for a skipped block).
pub fn mh_scales<R: Rng + ?Sized>(
    data: &LongDataset,
    ws: &SamplerWorkspace,
    state: &mut ModelState,
    prior: &PriorConfig,
    steps: &mut ScaleSteps,
    update_tau: bool,
    rng: &mut R,
) -> Result<[f64; 3]> {
    let n_obs = data.n_observations() as f64;
    let n_sub = state.intercepts.len() as f64;
    let hc = prior.scale_cauchy;

    let mut sse = 0.0;
    for obs in data.observations() {
        let resid = obs.y - state.conditional_mean(data, obs);
        sse += resid * resid;
    }
    let (sigma, a_sigma) = mh_log_scale(
        state.sigma,
        steps.sigma,
        |s| -n_obs * s.ln() - sse / (2.0 * s * s) + log_half_cauchy(s, hc),
        rng,
    )?;
    state.sigma = sigma;

    let bb = state.intercepts.norm_squared();
    let (sigma_b, a_sigma_b) = mh_log_scale(
        state.sigma_b,
        steps.sigma_b,
        |s| -n_sub * s.ln() - bb / (2.0 * s * s) + log_half_cauchy(s, hc),
        rng,
    )?;
    state.sigma_b = sigma_b;

    let mut a_tau = 1.0;
    if update_tau {
        let r = ws.q.nrows() as f64;
        let mut quad = 0.0;
        for i in 0..state.deviations.nrows() {
            let u_i = state.deviations.row(i).transpose();
            quad += u_i.dot(&(&ws.q * &u_i));
        }
        let (tau, a) = mh_log_scale(
            state.tau_u,
            steps.tau_u,
            |s| -n_sub * r * s.ln() - quad / (2.0 * s * s) + log_half_cauchy(s, hc),
            rng,
        )?;
        state.tau_u = tau;
        a_tau = a;
    }

    if steps.adapting {
        steps.count += 1;
        adapt_step(&mut steps.sigma, a_sigma, steps.count);
        adapt_step(&mut steps.sigma_b, a_sigma_b, steps.count);
        if update_tau {
            adapt_step(&mut steps.tau_u, a_tau, steps.count);
        }
    }
    Ok([a_sigma, a_sigma_b, a_tau])
}

#[derive(Debug, Clone)]
pub struct RhoStep {
    pub step: f64,
    pub adapting: bool,
    count: usize,
}

impl RhoStep {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            adapting: true,
            count: 0,
        }
    }
}

/// Metropolis update of rho on the logit of its rescaled position in the
/// admissible interval. The target combines the GMRF determinant and
/// quadratic form over all deviation fields with the Beta prior and the
/// logit Jacobian. Updates the workspace precision cache on acceptance.
/// Returns the acceptance probability.
pub fn mh_rho<R: Rng + ?Sized>(
    graph: &RegionGraph,
    ws: &mut SamplerWorkspace,
    state: &mut ModelState,
    prior: &PriorConfig,
    step: &mut RhoStep,
    rng: &mut R,
) -> Result<f64> {
    let (lo, hi) = graph.rho_interval();
    let n_fields = state.deviations.nrows() as f64;
    let inv_tau2 = 1.0 / (state.tau_u * state.tau_u);

    // Sum_i u_i' Q(rho) u_i = a_quad - rho * c_quad, cached across the
    // current and proposed rho.
    let mut a_quad = 0.0;
    let mut c_quad = 0.0;
    let w = graph.weights();
    let d = graph.degrees();
    let ridge = graph.ridge();
    for i in 0..state.deviations.nrows() {
        let u_i = state.deviations.row(i).transpose();
        for j in 0..u_i.len() {
            a_quad += (d[j] + ridge) * u_i[j] * u_i[j];
        }
        c_quad += u_i.dot(&(w * &u_i));
    }

    let (ba, bbeta) = prior.rho_beta;
    let logpost = |rho: f64, logdet: f64| {
        let wpos = (rho - lo) / (hi - lo);
        0.5 * n_fields * logdet - 0.5 * inv_tau2 * (a_quad - rho * c_quad)
            + (ba - 1.0) * wpos.ln()
            + (bbeta - 1.0) * (1.0 - wpos).ln()
            + wpos.ln()
            + (1.0 - wpos).ln()
    };

    let cur_w = (state.rho - lo) / (hi - lo);
    let cur_theta = (cur_w / (1.0 - cur_w)).ln();
    let cur_lp = logpost(state.rho, ws.q_logdet);
    if !cur_lp.is_finite() {
        return Err(Error::ChainDiverged {
            chain: usize::MAX,
            iteration: usize::MAX,
        });
    }

    let prop_theta = cur_theta + step.step * rng.sample::<f64, _>(StandardNormal);
    let prop_w = 1.0 / (1.0 + (-prop_theta).exp());
    let prop_rho = lo + (hi - lo) * prop_w;
    let accept_prob = if graph.contains_rho(prop_rho) {
        let prop_logdet = graph.precision_log_det(prop_rho)?;
        let prop_lp = logpost(prop_rho, prop_logdet);
        if prop_lp.is_finite() {
            (prop_lp - cur_lp).exp().min(1.0)
        } else {
            0.0
        }
    } else {
        // Numerically pinned to an endpoint by the logit map.
        0.0
    };
    if rng.gen::<f64>() < accept_prob {
        state.rho = prop_rho;
        ws.set_rho(graph, prop_rho)?;
    }
    if step.adapting {
        step.count += 1;
        adapt_step(&mut step.step, accept_prob, step.count);
    }
    Ok(accept_prob)
}

/// Post-warmup acceptance rates, one entry per Metropolis block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AcceptanceRates {
    pub sigma: f64,
    pub sigma_b: f64,
    pub tau_u: f64,
    pub rho: f64,
}

/// Retained draws of one chain, columnar per parameter block.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    pub sigma: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub tau_u: Vec<f64>,
    pub rho: Vec<f64>,
    pub coefficients: Vec<DMatrix<f64>>,
    pub intercepts: Vec<DVector<f64>>,
    pub deviations: Vec<DMatrix<f64>>,
    pub accept: AcceptanceRates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub chains: Vec<ChainDraws>,
    pub summaries: Vec<ParamSummary>,
    pub covariate_names: Vec<String>,
    pub region_labels: Vec<String>,
    pub subject_ids: Vec<String>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream seed for a labeled substream of a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0x517cc1b727220a95)))
}

fn run_chain(
    data: &LongDataset,
    graph: &RegionGraph,
    prior: &PriorConfig,
    config: &SamplerConfig,
    init: &ModelState,
    chain: usize,
) -> Result<ChainDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, chain as u64));
    let mut state = init.clone();
    let mut ws = SamplerWorkspace::new(data, graph, state.rho)?;
    let mut steps = ScaleSteps::new(config.scale_step);
    let mut rho_step = RhoStep::new(config.rho_step);

    let kept = config.n_samples;
    let total = config.n_warmup + config.n_samples * config.thin;
    let mut draws = ChainDraws {
        sigma: Vec::with_capacity(kept),
        sigma_b: Vec::with_capacity(kept),
        tau_u: Vec::with_capacity(kept),
        rho: Vec::with_capacity(kept),
        coefficients: Vec::with_capacity(kept),
        intercepts: Vec::with_capacity(kept),
        deviations: Vec::with_capacity(kept),
        accept: AcceptanceRates {
            sigma: 0.0,
            sigma_b: 0.0,
            tau_u: 0.0,
            rho: 0.0,
        },
    };
    let field_active = config.spatial_field_active();
    let sample_rho = field_active && config.fix_rho.is_none() && config.tau_active();
    let mut accept_count = 0usize;

    let diverged = |e: Error, iteration: usize| match e {
        Error::ChainDiverged { .. } => Error::ChainDiverged { chain, iteration },
        other => other,
    };

    for iter in 0..total {
        let warm = iter < config.n_warmup;
        steps.adapting = warm;
        rho_step.adapting = warm;

        gibbs_beta(data, &ws, &mut state, prior, &mut rng).map_err(|e| diverged(e, iter))?;
        gibbs_b(data, &mut state, &mut rng);
        if field_active {
            gibbs_u(data, &ws, &mut state, &mut rng).map_err(|e| diverged(e, iter))?;
            if config.center_u {
                center_u(&ws, &mut state, &mut rng);
            }
        }
        let accepts = mh_scales(
            data,
            &ws,
            &mut state,
            prior,
            &mut steps,
            field_active && config.tau_active(),
            &mut rng,
        )
        .map_err(|e| diverged(e, iter))?;
        let rho_accept = if sample_rho {
            mh_rho(graph, &mut ws, &mut state, prior, &mut rho_step, &mut rng)
                .map_err(|e| diverged(e, iter))?
        } else {
            1.0
        };

        if !state.sigma.is_finite()
            || !state.sigma_b.is_finite()
            || !state.tau_u.is_finite()
            || !state.rho.is_finite()
        {
            return Err(Error::ChainDiverged {
                chain,
                iteration: iter,
            });
        }

        if !warm {
            accept_count += 1;
            draws.accept.sigma += accepts[0];
            draws.accept.sigma_b += accepts[1];
            draws.accept.tau_u += accepts[2];
            draws.accept.rho += rho_accept;
            if (iter - config.n_warmup) % config.thin == 0 {
                draws.sigma.push(state.sigma);
                draws.sigma_b.push(state.sigma_b);
                draws.tau_u.push(state.tau_u);
                draws.rho.push(state.rho);
                draws.coefficients.push(state.coefficients.clone());
                draws.intercepts.push(state.intercepts.clone());
                draws.deviations.push(state.deviations.clone());
            }
        }
    }
    if accept_count > 0 {
        let n = accept_count as f64;
        draws.accept.sigma /= n;
        draws.accept.sigma_b /= n;
        draws.accept.tau_u /= n;
        draws.accept.rho /= n;
    }
    Ok(draws)
}

/// Runs all chains in parallel and summarizes the monitored scalar
/// parameters (scales, rho, every coefficient).
pub fn run_sampler(
    data: &LongDataset,
    graph: &RegionGraph,
    prior: &PriorConfig,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    prior.validate()?;
    config.validate()?;
    if data.region_labels() != graph.labels() {
        return Err(Error::Alignment(format!(
            "dataset regions {:?} do not match graph regions {:?}",
            data.region_labels(),
            graph.labels()
        )));
    }

    // Initialization: least-squares coefficients, residual-SD scales,
    // midpoint rho, zero latents.
    let cs = fit_cross_sectional(data)?;
    let sd0 = cs.sigma2.sqrt().max(1e-3);
    let rho0 = match config.fix_rho {
        Some(r) => {
            if !graph.contains_rho(r) {
                let (lo, hi) = graph.rho_interval();
                return Err(Error::RhoOutOfRange { rho: r, lo, hi });
            }
            r
        }
        None => graph.midpoint_rho(),
    };
    let init = ModelState {
        coefficients: cs.coefficients,
        intercepts: DVector::zeros(data.n_subjects()),
        deviations: DMatrix::zeros(data.n_subjects(), data.n_regions()),
        sigma: sd0,
        sigma_b: sd0,
        tau_u: config.fix_tau_u.unwrap_or(sd0),
        rho: rho0,
    };

    let chains: Vec<ChainDraws> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(data, graph, prior, config, &init, c))
        .collect::<Result<_>>()?;

    let mut out = PosteriorDraws {
        chains,
        summaries: Vec::new(),
        covariate_names: data.covariate_names().to_vec(),
        region_labels: data.region_labels().to_vec(),
        subject_ids: data.subject_ids().to_vec(),
    };
    out.summaries = out.summarize(config)?;
    Ok(out)
}

impl PosteriorDraws {
    pub fn n_kept(&self) -> usize {
        self.chains.first().map(|c| c.sigma.len()).unwrap_or(0)
    }

    /// Names of the monitored scalar parameters.
    pub fn monitored(&self) -> Vec<String> {
        self.summaries.iter().map(|s| s.name.clone()).collect()
    }

    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Per-chain draw arrays for a monitored scalar parameter.
    pub fn scalar_chains(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        match name {
            "sigma" => Some(self.chains.iter().map(|c| c.sigma.clone()).collect()),
            "sigma_b" => Some(self.chains.iter().map(|c| c.sigma_b.clone()).collect()),
            "tau_u" => Some(self.chains.iter().map(|c| c.tau_u.clone()).collect()),
            "rho" => Some(self.chains.iter().map(|c| c.rho.clone()).collect()),
            _ => {
                let (k, j) = self.parse_beta_name(name)?;
                Some(
                    self.chains
                        .iter()
                        .map(|c| c.coefficients.iter().map(|m| m[(k, j)]).collect())
                        .collect(),
                )
            }
        }
    }

    fn beta_name(&self, k: usize, j: usize) -> String {
        format!("beta[{},{}]", self.covariate_names[k], self.region_labels[j])
    }

    fn parse_beta_name(&self, name: &str) -> Option<(usize, usize)> {
        let inner = name.strip_prefix("beta[")?.strip_suffix(']')?;
        let (cov, region) = inner.rsplit_once(',')?;
        let k = self.covariate_names.iter().position(|c| c == cov)?;
        let j = self.region_labels.iter().position(|r| r == region)?;
        Some((k, j))
    }

    fn summarize(&self, config: &SamplerConfig) -> Result<Vec<ParamSummary>> {
        let mut names = vec!["sigma".to_string(), "sigma_b".to_string()];
        if config.fix_tau_u.is_none() {
            names.push("tau_u".into());
        }
        if config.fix_rho.is_none() && config.spatial_field_active() && config.fix_tau_u.is_none()
        {
            names.push("rho".into());
        }
        let (p, r) = (self.covariate_names.len(), self.region_labels.len());
        for k in 0..p {
            for j in 0..r {
                names.push(self.beta_name(k, j));
            }
        }
        names
            .iter()
            .map(|name| {
                let chains = self.scalar_chains(name).unwrap();
                summarize_param(name, &chains)
            })
            .collect()
    }

    /// Evenly spaced retained states across all chains, at most `max`.
    pub fn materialize_states(&self, max: usize) -> Vec<ModelState> {
        let kept = self.n_kept();
        let total = kept * self.chains.len();
        if total == 0 || max == 0 {
            return Vec::new();
        }
        let stride = total.div_ceil(max);
        (0..total)
            .step_by(stride)
            .map(|g| {
                let c = &self.chains[g / kept];
                let i = g % kept;
                ModelState {
                    coefficients: c.coefficients[i].clone(),
                    intercepts: c.intercepts[i].clone(),
                    deviations: c.deviations[i].clone(),
                    sigma: c.sigma[i],
                    sigma_b: c.sigma_b[i],
                    tau_u: c.tau_u[i],
                    rho: c.rho[i],
                }
            })
            .collect()
    }

    pub fn posterior_mean_deviations(&self) -> DMatrix<f64> {
        let shape = &self.chains[0].deviations[0];
        let mut acc = DMatrix::zeros(shape.nrows(), shape.ncols());
        let mut count = 0usize;
        for chain in &self.chains {
            for m in &chain.deviations {
                acc += m;
                count += 1;
            }
        }
        acc / count as f64
    }

    pub fn posterior_mean_coefficients(&self) -> DMatrix<f64> {
        let shape = &self.chains[0].coefficients[0];
        let mut acc = DMatrix::zeros(shape.nrows(), shape.ncols());
        let mut count = 0usize;
        for chain in &self.chains {
            for m in &chain.coefficients {
                acc += m;
                count += 1;
            }
        }
        acc / count as f64
    }

    pub fn posterior_mean_intercepts(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.chains[0].intercepts[0].len());
        let mut count = 0usize;
        for chain in &self.chains {
            for v in &chain.intercepts {
                acc += v;
                count += 1;
            }
        }
        acc / count as f64
    }

    /// Pooled posterior means of (sigma, sigma_b, tau_u, rho).
    pub fn posterior_mean_scales(&self) -> (f64, f64, f64, f64) {
        let pool = |f: fn(&ChainDraws) -> &Vec<f64>| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for chain in &self.chains {
                acc += f(chain).iter().sum::<f64>();
                count += f(chain).len();
            }
            acc / count as f64
        };
        (
            pool(|c| &c.sigma),
            pool(|c| &c.sigma_b),
            pool(|c| &c.tau_u),
            pool(|c| &c.rho),
        )
    }

    /// Equal-tailed pooled credible interval for rho.
    pub fn rho_credible_interval(&self, level: f64) -> (f64, f64) {
        let mut pooled: Vec<f64> = self.chains.iter().flat_map(|c| c.rho.iter().copied()).collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let alpha = (1.0 - level) / 2.0;
        (
            quantile_sorted(&pooled, alpha),
            quantile_sorted(&pooled, 1.0 - alpha),
        )
    }

    /// Mean acceptance rates across chains.
    pub fn mean_acceptance(&self) -> AcceptanceRates {
        let n = self.chains.len() as f64;
        let mut acc = AcceptanceRates {
            sigma: 0.0,
            sigma_b: 0.0,
            tau_u: 0.0,
            rho: 0.0,
        };
        for c in &self.chains {
            acc.sigma += c.accept.sigma / n;
            acc.sigma_b += c.accept.sigma_b / n;
            acc.tau_u += c.accept.tau_u / n;
            acc.rho += c.accept.rho / n;
        }
        acc
    }

    /// Long-format CSV of all monitored scalar draws.
    pub fn write_draws_csv<W: Write>(&self, writer: W) -> Result<()> {
        let params: Vec<(String, Vec<Vec<f64>>)> = self
            .monitored()
            .into_iter()
            .map(|name| {
                let chains = self.scalar_chains(&name).unwrap();
                (name, chains)
            })
            .collect();
        write_trace_csv(writer, &params)
    }

    pub fn write_summary_json<W: Write>(&self, writer: W) -> Result<()> {
        #[derive(Serialize)]
        struct SummaryFile<'a> {
            params: &'a [ParamSummary],
            acceptance: AcceptanceRates,
            n_chains: usize,
            n_kept_per_chain: usize,
        }
        let file = SummaryFile {
            params: &self.summaries,
            acceptance: self.mean_acceptance(),
            n_chains: self.chains.len(),
            n_kept_per_chain: self.n_kept(),
        };
        serde_json::to_writer_pretty(writer, &file)
            .map_err(|e| Error::Parse(format!("summary serialization failed: {e}")))?;
        Ok(())
    }
}

fn summarize_param(name: &str, chains: &[Vec<f64>]) -> Result<ParamSummary> {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(Error::TooFewDraws { needed: 1, got: 0 });
    }
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let sd = if pooled.len() > 1 {
        (pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (rhat, ess) = if chains.len() >= 2 && chains[0].len() >= 4 {
        (split_rhat(chains)?, bulk_ess(chains)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ParamSummary {
        name: name.to_string(),
        mean,
        median: quantile_sorted(&pooled, 0.5),
        sd,
        q05: quantile_sorted(&pooled, 0.05),
        q95: quantile_sorted(&pooled, 0.95),
        rhat,
        ess,
    })
}
