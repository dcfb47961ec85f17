//! Synthetic cohort generation for the six study scenarios.
//!
//! Each scenario draws region-specific coefficient curves, subject random
//! intercepts, GMRF deviation fields, and iid noise, then optionally plants
//! a region-shift abnormality in a subject subgroup and, in one scenario,
//! truncates follow-up under a missing-at-random rule. The generator returns
//! the dataset together with the full generating truth so metrics can be
//! computed against known values.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LongDataset, ObservationRecord};
use crate::error::{Error, Result};
use crate::graph::RegionGraph;

/// Center of the quadratic age basis in the nonlinear scenario. Centering
/// keeps the basis well conditioned over the 60..90 age range.
pub const QUAD_CENTER: f64 = 75.0;

/// Year gap between scheduled visits before jitter.
const VISIT_GAP: f64 = 1.5;
/// Uniform jitter half-width on visit times, strictly below VISIT_GAP/2 so
/// visit ages stay increasing.
const VISIT_JITTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Negative control: deviation fields have no cross-region dependence.
    None,
    Moderate,
    Strong,
    VariableVisits,
    MissingFollowup,
    Nonlinear,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::None,
        Scenario::Moderate,
        Scenario::Strong,
        Scenario::VariableVisits,
        Scenario::MissingFollowup,
        Scenario::Nonlinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::None => "none",
            Scenario::Moderate => "moderate",
            Scenario::Strong => "strong",
            Scenario::VariableVisits => "variable_visits",
            Scenario::MissingFollowup => "missing_followup",
            Scenario::Nonlinear => "nonlinear",
        }
    }

    pub fn parse(name: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.as_str() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario '{name}'")))
    }

    /// Spatial dependence used when the config does not override it.
    pub fn default_rho(&self) -> f64 {
        match self {
            Scenario::None => 0.0,
            Scenario::Moderate => 0.5,
            Scenario::Strong => 0.9,
            _ => 0.5,
        }
    }

    fn uses_quadratic_age(&self) -> bool {
        matches!(self, Scenario::Nonlinear)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape and size of the planted abnormality. Localized patterns shift a
/// small contiguous cluster, diffuse patterns shift every other region up to
/// half the map. Severity only changes the shift magnitude; `severe` and
/// `localized` name the same canonical 3-region 2-sigma preset from the two
/// axes of the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbnormalPattern {
    Localized,
    Diffuse,
    Mild,
    Severe,
}

impl AbnormalPattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            AbnormalPattern::Localized => "localized",
            AbnormalPattern::Diffuse => "diffuse",
            AbnormalPattern::Mild => "mild",
            AbnormalPattern::Severe => "severe",
        }
    }

    pub fn parse(name: &str) -> Result<AbnormalPattern> {
        [
            AbnormalPattern::Localized,
            AbnormalPattern::Diffuse,
            AbnormalPattern::Mild,
            AbnormalPattern::Severe,
        ]
        .into_iter()
        .find(|p| p.as_str() == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown abnormality pattern '{name}'")))
    }

    /// Shift magnitude as a multiple of the noise scale.
    pub fn magnitude_factor(&self) -> f64 {
        match self {
            AbnormalPattern::Mild => 0.5,
            _ => 2.0,
        }
    }

    /// Number of shifted regions.
    pub fn set_size(&self, n_regions: usize) -> usize {
        match self {
            AbnormalPattern::Diffuse => n_regions.div_ceil(2),
            _ => 3.min(n_regions),
        }
    }

    fn contiguous(&self) -> bool {
        !matches!(self, AbnormalPattern::Diffuse)
    }
}

/// Generating configuration for one scenario. Serde defaults make every
/// field optional in config files; `scenario` is the only one callers
/// routinely set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub n_regions: usize,
    pub seed: u64,
    /// Overrides the scenario's spatial dependence when set.
    pub rho_true: Option<f64>,
    pub sigma_true: f64,
    pub sigma_b_true: f64,
    pub tau_u_true: f64,
    pub intercept_mean: f64,
    pub intercept_sd: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub sex_mean: f64,
    pub sex_sd: f64,
    /// Quadratic age coefficient hyperparameters, nonlinear scenario only.
    pub quad_mean: f64,
    pub quad_sd: f64,
    pub abnormal_fraction: f64,
    pub pattern: AbnormalPattern,
    /// Explicit shift magnitude; defaults to the pattern factor times
    /// `sigma_true`.
    pub delta: Option<f64>,
    /// Explicit shifted-region labels; defaults to a pattern-derived set.
    pub abnormal_regions: Option<Vec<String>>,
    pub dropout_intercept: f64,
    pub dropout_age: f64,
    pub dropout_burden: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::None,
            n_subjects: 120,
            n_regions: 20,
            seed: 0,
            rho_true: None,
            sigma_true: 0.5,
            sigma_b_true: 0.5,
            tau_u_true: 1.0,
            intercept_mean: 0.0,
            intercept_sd: 0.5,
            age_mean: -0.03,
            age_sd: 0.01,
            sex_mean: 0.2,
            sex_sd: 0.1,
            quad_mean: -0.002,
            quad_sd: 0.0005,
            abnormal_fraction: 0.2,
            pattern: AbnormalPattern::Severe,
            delta: None,
            abnormal_regions: None,
            dropout_intercept: -2.0,
            dropout_age: 0.03,
            dropout_burden: 0.5,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::InvalidConfig("n_subjects must be at least 2".into()));
        }
        if self.n_regions < 2 {
            return Err(Error::InvalidConfig("n_regions must be at least 2".into()));
        }
        for (name, v) in [
            ("sigma_true", self.sigma_true),
            ("sigma_b_true", self.sigma_b_true),
            ("tau_u_true", self.tau_u_true),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("intercept_sd", self.intercept_sd),
            ("age_sd", self.age_sd),
            ("sex_sd", self.sex_sd),
            ("quad_sd", self.quad_sd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative")));
            }
        }
        if !(0.0..1.0).contains(&self.abnormal_fraction) {
            return Err(Error::InvalidConfig(
                "abnormal_fraction must lie in [0, 1)".into(),
            ));
        }
        if let Some(d) = self.delta {
            if !d.is_finite() {
                return Err(Error::InvalidConfig("delta must be finite".into()));
            }
        }
        Ok(())
    }

    fn rho(&self) -> f64 {
        self.rho_true.unwrap_or_else(|| self.scenario.default_rho())
    }

    fn shift_magnitude(&self) -> f64 {
        self.delta
            .unwrap_or_else(|| self.pattern.magnitude_factor() * self.sigma_true)
    }
}

/// Everything the generator knows and the fitted models do not. Coefficient
/// rows follow `coefficient_names`; in the nonlinear scenario the quadratic
/// basis is centered at `QUAD_CENTER` and recorded via `quad_center`.
/// `mu` is the true normative mean per observation, excluding the planted
/// shift, aligned with the dataset's observation order.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub coefficient_names: Vec<String>,
    /// Generating coefficients, one column per region.
    pub coefficients: DMatrix<f64>,
    pub intercepts: DVector<f64>,
    /// n_subjects x n_regions deviation fields.
    pub deviations: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub abnormal: Vec<bool>,
    pub abnormal_regions: Vec<usize>,
    /// Region shift applied to abnormal subjects, zero off the abnormal set.
    pub delta: DVector<f64>,
    pub rho: f64,
    pub quad_center: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphTopology {
    Path,
    Grid,
    /// Uniform points in the unit square joined within the smallest
    /// connecting radius. Deterministic for a given seed.
    RandomGeometric { seed: u64 },
}

fn region_labels(n_regions: usize) -> Vec<String> {
    let width = n_regions.to_string().len();
    (1..=n_regions).map(|i| format!("r{i:0width$}")).collect()
}

/// Largest grid row count not exceeding the square root, so the default
/// layout is as square as the region count allows.
fn grid_rows(n_regions: usize) -> usize {
    let mut best = 1;
    let mut d = 1;
    while d * d <= n_regions {
        if n_regions % d == 0 {
            best = d;
        }
        d += 1;
    }
    best
}

pub fn make_region_graph(n_regions: usize, topology: GraphTopology) -> Result<RegionGraph> {
    if n_regions < 2 {
        return Err(Error::InvalidConfig("need at least 2 regions".into()));
    }
    let labels = region_labels(n_regions);
    let mut w = DMatrix::zeros(n_regions, n_regions);
    match topology {
        GraphTopology::Path => {
            for j in 0..n_regions - 1 {
                w[(j, j + 1)] = 1.0;
                w[(j + 1, j)] = 1.0;
            }
        }
        GraphTopology::Grid => {
            let rows = grid_rows(n_regions);
            let cols = n_regions / rows;
            for a in 0..rows {
                for b in 0..cols {
                    let j = a * cols + b;
                    if b + 1 < cols {
                        w[(j, j + 1)] = 1.0;
                        w[(j + 1, j)] = 1.0;
                    }
                    if a + 1 < rows {
                        w[(j, j + cols)] = 1.0;
                        w[(j + cols, j)] = 1.0;
                    }
                }
            }
        }
        GraphTopology::RandomGeometric { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..n_regions)
                .map(|_| (rng.gen::<f64>(), rng.gen::<f64>()))
                .collect();
            let mut radius = (2.0 * (n_regions as f64).ln() / n_regions as f64).sqrt();
            loop {
                w.fill(0.0);
                for j in 0..n_regions {
                    for k in j + 1..n_regions {
                        let dx = pts[j].0 - pts[k].0;
                        let dy = pts[j].1 - pts[k].1;
                        if (dx * dx + dy * dy).sqrt() <= radius {
                            w[(j, k)] = 1.0;
                            w[(k, j)] = 1.0;
                        }
                    }
                }
                if is_connected(&w) {
                    break;
                }
                radius *= 1.2;
            }
        }
    }
    RegionGraph::new(labels, w)
}

/// Grid when the region count factors into a nontrivial rectangle, else a
/// path.
pub fn default_topology(n_regions: usize) -> GraphTopology {
    if grid_rows(n_regions) > 1 {
        GraphTopology::Grid
    } else {
        GraphTopology::Path
    }
}

fn is_connected(w: &DMatrix<f64>) -> bool {
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(j) = queue.pop_front() {
        for k in 0..n {
            if w[(j, k)] != 0.0 && !seen[k] {
                seen[k] = true;
                count += 1;
                queue.push_back(k);
            }
        }
    }
    count == n
}

/// First `k` regions reached by breadth-first search from region 0, a
/// contiguous cluster in any connected graph.
fn contiguous_cluster(graph: &RegionGraph, k: usize) -> Vec<usize> {
    let w = graph.weights();
    let n = graph.n_regions();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut out = Vec::with_capacity(k);
    while let Some(j) = queue.pop_front() {
        out.push(j);
        if out.len() == k {
            break;
        }
        for l in 0..n {
            if w[(j, l)] != 0.0 && !seen[l] {
                seen[l] = true;
                queue.push_back(l);
            }
        }
    }
    out.sort_unstable();
    out
}

fn abnormal_region_set(config: &ScenarioConfig, graph: &RegionGraph) -> Result<Vec<usize>> {
    if let Some(labels) = &config.abnormal_regions {
        let mut set = Vec::with_capacity(labels.len());
        for l in labels {
            let idx = graph
                .label_index(l)
                .ok_or_else(|| Error::UnknownRegion { label: l.clone() })?;
            set.push(idx);
        }
        set.sort_unstable();
        set.dedup();
        return Ok(set);
    }
    let k = config.pattern.set_size(config.n_regions);
    if config.pattern.contiguous() {
        Ok(contiguous_cluster(graph, k))
    } else {
        // Distributed set: every other region until the quota is met.
        Ok((0..config.n_regions).step_by(2).take(k).collect())
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws one scenario cohort. The returned truth is aligned with the
/// dataset: `mu[k]` matches `dataset.observations()[k]`.
pub fn generate(config: &ScenarioConfig) -> Result<(LongDataset, SimTruth, RegionGraph)> {
    config.validate()?;
    let graph = make_region_graph(config.n_regions, default_topology(config.n_regions))?;
    let rho = config.rho();
    if !graph.contains_rho(rho) {
        return Err(Error::InvalidConfig(format!(
            "rho_true {rho} outside the admissible interval {:?}",
            graph.rho_interval()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_subjects;
    let n_regions = config.n_regions;
    let quadratic = config.scenario.uses_quadratic_age();

    // Generating coefficient rows; the fitted design stays (1, age, sex).
    let coefficient_names: Vec<String> = if quadratic {
        vec!["intercept", "age", "age_quad", "sex"]
    } else {
        vec!["intercept", "age", "sex"]
    }
    .into_iter()
    .map(str::to_string)
    .collect();
    let p_gen = coefficient_names.len();
    let mut coefficients = DMatrix::zeros(p_gen, n_regions);
    for r in 0..n_regions {
        let z = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
        coefficients[(0, r)] = config.intercept_mean + config.intercept_sd * z(&mut rng);
        coefficients[(1, r)] = config.age_mean + config.age_sd * z(&mut rng);
        if quadratic {
            coefficients[(2, r)] = config.quad_mean + config.quad_sd * z(&mut rng);
            coefficients[(3, r)] = config.sex_mean + config.sex_sd * z(&mut rng);
        } else {
            coefficients[(2, r)] = config.sex_mean + config.sex_sd * z(&mut rng);
        }
    }

    // Abnormal subgroup and its region shift.
    let n_abnormal = ((config.abnormal_fraction * n as f64).round() as usize).min(n);
    let mut abnormal = vec![false; n];
    if n_abnormal > 0 {
        for idx in sample_indices(&mut rng, n, n_abnormal).into_iter() {
            abnormal[idx] = true;
        }
    }
    let region_set = abnormal_region_set(config, &graph)?;
    let shift = config.shift_magnitude();
    let mut delta = DVector::zeros(n_regions);
    for &r in &region_set {
        delta[r] = shift;
    }

    let subject_width = (n.max(1)).to_string().len();
    let mut records: Vec<ObservationRecord> = Vec::new();
    let mut intercepts = DVector::zeros(n);
    let mut deviations = DMatrix::zeros(n, n_regions);
    let mut mu = Vec::new();

    for i in 0..n {
        let subject = format!("s{:0subject_width$}", i + 1);
        let planned_visits = match config.scenario {
            Scenario::VariableVisits => rng.gen_range(2..=5usize),
            Scenario::MissingFollowup => 5,
            _ => 3,
        };
        let baseline_age = rng.gen_range(60.0..85.0);
        let mut ages = vec![baseline_age];
        for t in 2..=planned_visits {
            let jitter = rng.gen_range(-VISIT_JITTER..VISIT_JITTER);
            ages.push(baseline_age + VISIT_GAP * (t - 1) as f64 + jitter);
        }
        let sex = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };

        let b = config.sigma_b_true * rng.sample::<f64, _>(StandardNormal);
        intercepts[i] = b;
        let u = graph.sample_gmrf(rho, config.tau_u_true, &mut rng)?;
        deviations.row_mut(i).copy_from_slice(u.as_slice());

        // Generate every planned visit, then truncate under dropout.
        let mut visit_mu = vec![vec![0.0; n_regions]; planned_visits];
        let mut visit_y = vec![vec![0.0; n_regions]; planned_visits];
        for (t, row_mu) in visit_mu.iter_mut().enumerate() {
            let age = ages[t];
            for r in 0..n_regions {
                let mut m = coefficients[(0, r)] + coefficients[(1, r)] * age;
                if quadratic {
                    let c = age - QUAD_CENTER;
                    m += coefficients[(2, r)] * c * c + coefficients[(3, r)] * sex;
                } else {
                    m += coefficients[(2, r)] * sex;
                }
                m += b + u[r];
                row_mu[r] = m;
                let noise = config.sigma_true * rng.sample::<f64, _>(StandardNormal);
                let shift = if abnormal[i] { delta[r] } else { 0.0 };
                visit_y[t][r] = m + noise + shift;
            }
        }

        let mut kept = planned_visits;
        if config.scenario == Scenario::MissingFollowup {
            // Monotone dropout: the first dropped visit truncates the rest.
            // The hazard depends on current age and the mean absolute
            // normative residual at the previous kept visit; the first
            // visit is always kept.
            for t in 1..planned_visits {
                let prev = &visit_y[t - 1];
                let age_prev = ages[t - 1];
                let burden = (0..n_regions)
                    .map(|r| {
                        let mut fixed =
                            coefficients[(0, r)] + coefficients[(1, r)] * age_prev;
                        if quadratic {
                            let c = age_prev - QUAD_CENTER;
                            fixed += coefficients[(2, r)] * c * c
                                + coefficients[(3, r)] * sex;
                        } else {
                            fixed += coefficients[(2, r)] * sex;
                        }
                        (prev[r] - fixed).abs()
                    })
                    .sum::<f64>()
                    / n_regions as f64;
                let p_drop = logistic(
                    config.dropout_intercept
                        + config.dropout_age * (ages[t] - 70.0)
                        + config.dropout_burden * burden,
                );
                if rng.gen::<f64>() < p_drop {
                    kept = t;
                    break;
                }
            }
        }

        for t in 0..kept {
            for r in 0..n_regions {
                records.push(ObservationRecord {
                    subject: subject.clone(),
                    visit: t + 1,
                    region: graph.labels()[r].clone(),
                    y: visit_y[t][r],
                    covariates: vec![ages[t], sex],
                    abnormal: abnormal[i],
                });
                mu.push(visit_mu[t][r]);
            }
        }
    }

    let dataset = LongDataset::from_records(
        &records,
        &["age".into(), "sex".into()],
        Some(&graph.labels().to_vec()),
    )?;
    let truth = SimTruth {
        coefficient_names,
        coefficients,
        intercepts,
        deviations,
        mu,
        abnormal,
        abnormal_regions: region_set,
        delta,
        rho,
        quad_center: quadratic.then_some(QUAD_CENTER),
    };
    Ok((dataset, truth, graph))
}

impl SimTruth {
    /// Writes the observation-aligned truth table
    /// `subject,visit,region,mu_true,u_true,delta,abnormal`; `delta` is the
    /// shift actually applied to that observation.
    pub fn write_csv_writer<W: Write>(&self, data: &LongDataset, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject", "visit", "region", "mu_true", "u_true", "delta", "abnormal"])?;
        for (k, obs) in data.observations().iter().enumerate() {
            let applied = if self.abnormal[obs.subject] {
                self.delta[obs.region]
            } else {
                0.0
            };
            w.write_record(&[
                data.subject_id(obs.subject).to_string(),
                obs.visit.to_string(),
                data.region_labels()[obs.region].clone(),
                format!("{}", self.mu[k]),
                format!("{}", self.deviations[(obs.subject, obs.region)]),
                format!("{applied}"),
                (if self.abnormal[obs.subject] { "1" } else { "0" }).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv<P: AsRef<Path>>(&self, data: &LongDataset, path: P) -> Result<()> {
        self.write_csv_writer(data, std::fs::File::create(path)?)
    }

    /// Reads a truth table back against its dataset. Generator-side
    /// coefficients and intercepts are not stored in the table and come
    /// back empty; evaluation never needs them.
    pub fn read_csv_reader<R: Read>(reader: R, data: &LongDataset) -> Result<SimTruth> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("truth table missing column '{name}'")))
        };
        let (c_sub, c_vis, c_reg, c_mu, c_u, c_delta, c_ab) = (
            col("subject")?,
            col("visit")?,
            col("region")?,
            col("mu_true")?,
            col("u_true")?,
            col("delta")?,
            col("abnormal")?,
        );
        let n = data.n_subjects();
        let n_regions = data.n_regions();
        let mut mu = vec![f64::NAN; data.n_observations()];
        let mut deviations = DMatrix::from_element(n, n_regions, f64::NAN);
        let mut abnormal = vec![false; n];
        let mut delta = DVector::zeros(n_regions);

        // Row lookup by (subject, visit, region).
        let mut row_of = std::collections::HashMap::new();
        for (k, obs) in data.observations().iter().enumerate() {
            row_of.insert((obs.subject, obs.visit, obs.region), k);
        }

        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("invalid {what} value '{s}'")))
        };
        for rec in r.records() {
            let rec = rec?;
            let subject = data.find_subject(&rec[c_sub])?;
            let visit: usize = rec[c_vis]
                .parse()
                .map_err(|_| Error::Parse(format!("invalid visit '{}'", &rec[c_vis])))?;
            let region = data.find_region(&rec[c_reg])?;
            let k = *row_of.get(&(subject, visit, region)).ok_or_else(|| {
                Error::Alignment(format!(
                    "truth row ({}, {visit}, {}) not present in the dataset",
                    &rec[c_sub], &rec[c_reg]
                ))
            })?;
            mu[k] = parse_f(&rec[c_mu], "mu_true")?;
            deviations[(subject, region)] = parse_f(&rec[c_u], "u_true")?;
            let applied = parse_f(&rec[c_delta], "delta")?;
            let flag = match &rec[c_ab] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Parse(format!("invalid abnormal flag '{other}'"))),
            };
            abnormal[subject] = flag;
            if flag && applied != 0.0 {
                delta[region] = applied;
            }
        }
        if mu.iter().any(|v| v.is_nan()) {
            return Err(Error::Alignment(
                "truth table does not cover every dataset observation".into(),
            ));
        }
        // Unvisited (subject, region) cells stay NaN only if a subject has
        // no observation in that region; the generator always observes all
        // regions, but imported data may not. Zero them for map metrics.
        for v in deviations.iter_mut() {
            if v.is_nan() {
                *v = 0.0;
            }
        }
        let abnormal_regions: Vec<usize> =
            (0..n_regions).filter(|&r| delta[r] != 0.0).collect();
        Ok(SimTruth {
            coefficient_names: Vec::new(),
            coefficients: DMatrix::zeros(0, 0),
            intercepts: DVector::zeros(0),
            deviations,
            mu,
            abnormal,
            abnormal_regions,
            delta,
            rho: f64::NAN,
            quad_center: None,
        })
    }

    pub fn read_csv<P: AsRef<Path>>(path: P, data: &LongDataset) -> Result<SimTruth> {
        Self::read_csv_reader(std::fs::File::open(path)?, data)
    }

    /// Region-level truth labels: true for regions in the abnormal set.
    pub fn region_labels_abnormal(&self, n_regions: usize) -> Vec<bool> {
        let mut out = vec![false; n_regions];
        for &r in &self.abnormal_regions {
            out[r] = true;
        }
        out
    }
}
