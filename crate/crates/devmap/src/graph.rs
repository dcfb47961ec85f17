//! Region adjacency graphs and the CAR precision matrices they induce.
//!
//! A graph on `R` regions is given by a symmetric nonnegative weight matrix
//! `W` with zero diagonal. With degrees `D_rr = sum_s W_rs`, the conditional
//! autoregressive (CAR) precision at spatial dependence `rho` is
//!
//! ```text
//! Q(rho) = D - rho * W + ridge * I
//! ```
//!
//! `Q(rho)` is positive definite exactly for `rho` in the open interval
//! `(1/lambda_min, 1/lambda_max)` where `lambda_min < 0 < lambda_max` are the
//! extreme eigenvalues of `D~^{-1/2} W D~^{-1/2}` and `D~ = D + ridge * I`.
//! The ridge is zero by default; it is switched on automatically (at
//! `1e-8 * max_r D_rr`) when the graph has an isolated region, in which case
//! the admissible interval is recomputed with the ridged degrees.
//!
//! Everything here is dense and `Cholesky`-based, which is the right trade
//! for atlas-scale graphs; construction rejects more than
//! [`MAX_DENSE_REGIONS`] regions.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Dense storage is rejected above this many regions.
pub const MAX_DENSE_REGIONS: usize = 512;

/// Automatic ridge, as a fraction of the largest degree.
pub const DEFAULT_RIDGE_FACTOR: f64 = 1e-8;

/// Symmetry / nonnegativity slack when validating weight matrices.
const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct RegionGraph {
    labels: Vec<String>,
    weights: DMatrix<f64>,
    degrees: DVector<f64>,
    ridge: f64,
    rho_interval: (f64, f64),
}

impl RegionGraph {
    /// Builds a graph from labels and a symmetric weight matrix. If any
    /// region is isolated, the default ridge is applied so the precision
    /// stays invertible; otherwise the ridge is zero.
    pub fn new(labels: Vec<String>, weights: DMatrix<f64>) -> Result<Self> {
        let degrees = validate_weights(&labels, &weights)?;
        let isolated = degrees.iter().any(|&d| d <= 0.0);
        let ridge = if isolated {
            DEFAULT_RIDGE_FACTOR * degrees.max()
        } else {
            0.0
        };
        Self::assemble(labels, weights, degrees, ridge)
    }

    /// Builds a graph with an explicit ridge (`0.0` to forbid ridging, in
    /// which case an isolated region is an error).
    pub fn with_ridge(labels: Vec<String>, weights: DMatrix<f64>, ridge: f64) -> Result<Self> {
        if !ridge.is_finite() || ridge < 0.0 {
            return Err(Error::InvalidConfig(format!("ridge = {ridge} must be >= 0")));
        }
        let degrees = validate_weights(&labels, &weights)?;
        Self::assemble(labels, weights, degrees, ridge)
    }

    fn assemble(
        labels: Vec<String>,
        weights: DMatrix<f64>,
        degrees: DVector<f64>,
        ridge: f64,
    ) -> Result<Self> {
        if ridge == 0.0 {
            if let Some(r) = degrees.iter().position(|&d| d <= 0.0) {
                return Err(Error::IsolatedRegion {
                    region: labels[r].clone(),
                });
            }
        }
        let rho_interval = admissible_interval(&weights, &degrees, ridge)?;
        Ok(Self {
            labels,
            weights,
            degrees,
            ridge,
            rho_interval,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Open interval of `rho` values for which `Q(rho)` is positive definite.
    pub fn rho_interval(&self) -> (f64, f64) {
        self.rho_interval
    }

    pub fn contains_rho(&self, rho: f64) -> bool {
        rho.is_finite() && rho > self.rho_interval.0 && rho < self.rho_interval.1
    }

    pub fn midpoint_rho(&self) -> f64 {
        0.5 * (self.rho_interval.0 + self.rho_interval.1)
    }

    /// Number of undirected edges with nonzero weight.
    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    /// Undirected edges `(a, b, w)` with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n_regions();
        (0..n).flat_map(move |a| {
            ((a + 1)..n).filter_map(move |b| {
                let w = self.weights[(a, b)];
                (w > 0.0).then_some((a, b, w))
            })
        })
    }

    /// `Q(rho) = D - rho W + ridge I`, checked positive definite.
    pub fn build_precision(&self, rho: f64) -> Result<DMatrix<f64>> {
        let q = self.raw_precision(rho)?;
        // The interval check makes failure here a numerical corner case
        // (rho essentially on the boundary), but it must still be an error.
        if Cholesky::new(q.clone()).is_none() {
            return Err(Error::NotPositiveDefinite {
                context: format!("Q(rho) at rho = {rho}, ridge = {}", self.ridge),
            });
        }
        Ok(q)
    }

    /// Cholesky factor of `Q(rho)`.
    pub fn precision_cholesky(&self, rho: f64) -> Result<Cholesky<f64, Dyn>> {
        let q = self.raw_precision(rho)?;
        Cholesky::new(q).ok_or_else(|| Error::NotPositiveDefinite {
            context: format!("Q(rho) at rho = {rho}, ridge = {}", self.ridge),
        })
    }

    /// log |Q(rho)| via the Cholesky factor.
    pub fn precision_log_det(&self, rho: f64) -> Result<f64> {
        let chol = self.precision_cholesky(rho)?;
        Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    fn raw_precision(&self, rho: f64) -> Result<DMatrix<f64>> {
        if !self.contains_rho(rho) {
            return Err(Error::RhoOutOfRange {
                rho,
                lo: self.rho_interval.0,
                hi: self.rho_interval.1,
            });
        }
        let n = self.n_regions();
        let mut q = DMatrix::zeros(n, n);
        for a in 0..n {
            q[(a, a)] = self.degrees[a] + self.ridge;
            for b in 0..n {
                if b != a {
                    q[(a, b)] = -rho * self.weights[(a, b)];
                }
            }
        }
        Ok(q)
    }

    /// Draws one deviation field `u ~ N(0, tau_u^2 Q(rho)^{-1})` by solving
    /// `L^T x = z` against white noise `z`, where `Q = L L^T`.
    pub fn sample_gmrf<R: Rng + ?Sized>(
        &self,
        rho: f64,
        tau_u: f64,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if !tau_u.is_finite() || tau_u <= 0.0 {
            return Err(Error::InvalidScale {
                name: "tau_u",
                value: tau_u,
            });
        }
        let chol = self.precision_cholesky(rho)?;
        let z = DVector::from_fn(self.n_regions(), |_, _| rng.sample(StandardNormal));
        let x = chol
            .l_dirty()
            .tr_solve_lower_triangular(&z)
            .ok_or(Error::SingularPrecision)?;
        Ok(x * tau_u)
    }

    /// Reads an undirected edge list (`region_a,region_b,weight`, header
    /// required, weight optional with default 1). When `labels` is given the
    /// graph is built over exactly those regions (isolated ones allowed via
    /// the automatic ridge); otherwise regions are the sorted set of names
    /// appearing in the file.
    pub fn from_edge_list_reader<R: Read>(reader: R, labels: Option<&[String]>) -> Result<Self> {
        #[derive(Deserialize)]
        struct EdgeRow {
            region_a: String,
            region_b: String,
            weight: Option<f64>,
        }

        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "region_a" || &headers[1] != "region_b" {
            return Err(Error::Parse(
                "edge list must start with header columns region_a,region_b".into(),
            ));
        }
        let mut rows: Vec<(String, String, f64)> = Vec::new();
        for rec in rdr.deserialize() {
            let row: EdgeRow = rec?;
            let w = row.weight.unwrap_or(1.0);
            rows.push((row.region_a, row.region_b, w));
        }

        let labels: Vec<String> = match labels {
            Some(ls) => ls.to_vec(),
            None => {
                let mut names: Vec<String> = rows
                    .iter()
                    .flat_map(|(a, b, _)| [a.clone(), b.clone()])
                    .collect();
                names.sort();
                names.dedup();
                names
            }
        };
        let index = |name: &str| -> Result<usize> {
            labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::UnknownRegion { label: name.into() })
        };

        let n = labels.len();
        let mut weights = DMatrix::zeros(n, n);
        for (a, b, w) in &rows {
            let (ia, ib) = (index(a)?, index(b)?);
            if ia == ib {
                return Err(Error::Parse(format!("self-loop on region '{a}'")));
            }
            if !w.is_finite() || *w <= 0.0 {
                return Err(Error::Parse(format!("edge {a},{b} has invalid weight {w}")));
            }
            weights[(ia, ib)] = *w;
            weights[(ib, ia)] = *w;
        }
        Self::new(labels, weights)
    }

    pub fn from_edge_list_csv<P: AsRef<Path>>(path: P, labels: Option<&[String]>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_edge_list_reader(file, labels)
    }

    pub fn write_edge_list<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["region_a", "region_b", "weight"])?;
        for (a, b, w) in self.edges() {
            wtr.write_record([
                self.labels[a].as_str(),
                self.labels[b].as_str(),
                &format!("{w}"),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_edge_list_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_edge_list(file)
    }
}

fn validate_weights(labels: &[String], weights: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "a region graph needs at least 2 regions, got {n}"
        )));
    }
    if n > MAX_DENSE_REGIONS {
        return Err(Error::TooManyRegions {
            got: n,
            max: MAX_DENSE_REGIONS,
        });
    }
    if weights.nrows() != n || weights.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "weight matrix is {}x{}, expected {n}x{n}",
            weights.nrows(),
            weights.ncols()
        )));
    }
    {
        let mut seen = labels.to_vec();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate region labels".into()));
        }
    }
    for a in 0..n {
        if weights[(a, a)] != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight matrix has nonzero diagonal at region '{}'",
                labels[a]
            )));
        }
        for b in (a + 1)..n {
            let (wab, wba) = (weights[(a, b)], weights[(b, a)]);
            if !wab.is_finite() || wab < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "invalid weight {wab} between '{}' and '{}'",
                    labels[a], labels[b]
                )));
            }
            if (wab - wba).abs() > WEIGHT_TOL {
                return Err(Error::InvalidConfig(format!(
                    "weight matrix is asymmetric between '{}' and '{}'",
                    labels[a], labels[b]
                )));
            }
        }
    }
    let degrees = DVector::from_fn(n, |r, _| weights.row(r).sum());
    if degrees.iter().all(|&d| d <= 0.0) {
        return Err(Error::InvalidConfig("graph has no edges".into()));
    }
    Ok(degrees)
}

/// `(1/lambda_min, 1/lambda_max)` from the extreme eigenvalues of the
/// degree-normalized adjacency `D~^{-1/2} W D~^{-1/2}`.
fn admissible_interval(
    weights: &DMatrix<f64>,
    degrees: &DVector<f64>,
    ridge: f64,
) -> Result<(f64, f64)> {
    let n = degrees.len();
    let mut scaled = weights.clone();
    for a in 0..n {
        let da = degrees[a] + ridge;
        if da <= 0.0 {
            return Err(Error::IsolatedRegion {
                region: format!("#{a}"),
            });
        }
        for b in 0..n {
            let db = degrees[b] + ridge;
            scaled[(a, b)] /= (da * db).sqrt();
        }
    }
    let eigs = scaled.symmetric_eigenvalues();
    let lmax = eigs.max();
    let lmin = eigs.min();
    // A graph with an edge always has lmin < 0 < lmax (trace is zero).
    if !(lmin < 0.0 && lmax > 0.0) {
        return Err(Error::NotPositiveDefinite {
            context: format!("degenerate normalized-adjacency spectrum [{lmin}, {lmax}]"),
        });
    }
    Ok((1.0 / lmin, 1.0 / lmax))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("R{i:02}")).collect()
    }

    fn path_graph(n: usize) -> RegionGraph {
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            w[(i, i + 1)] = 1.0;
            w[(i + 1, i)] = 1.0;
        }
        RegionGraph::new(labels(n), w).unwrap()
    }

    fn cycle_graph(n: usize) -> RegionGraph {
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            let j = (i + 1) % n;
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
        }
        RegionGraph::new(labels(n), w).unwrap()
    }

    #[test]
    fn two_region_precision_matches_by_hand_values() {
        let g = path_graph(2);
        let q = g.build_precision(0.5).unwrap();
        assert_abs_diff_eq!(q[(0, 0)], 1.0);
        assert_abs_diff_eq!(q[(1, 1)], 1.0);
        assert_abs_diff_eq!(q[(0, 1)], -0.5);
        assert_abs_diff_eq!(q[(1, 0)], -0.5);
    }

    #[test]
    fn rho_zero_gives_diagonal_degree_matrix() {
        let g = path_graph(4);
        let q = g.build_precision(0.0).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let expect = if a == b { g.degrees()[a] } else { 0.0 };
                assert_abs_diff_eq!(q[(a, b)], expect);
            }
        }
    }

    #[test]
    fn path4_precision_is_elementwise_d_minus_rho_w_and_pd() {
        let g = path_graph(4);
        let rho = 0.9;
        let q = g.build_precision(rho).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let expect = if a == b {
                    g.degrees()[a]
                } else {
                    -rho * g.weights()[(a, b)]
                };
                assert_abs_diff_eq!(q[(a, b)], expect, epsilon = 1e-15);
            }
        }
        let min_eig = q.symmetric_eigenvalues().min();
        assert!(min_eig > 0.0, "min eigenvalue {min_eig} not positive");
    }

    #[test]
    fn two_region_interval_is_unit() {
        let g = path_graph(2);
        let (lo, hi) = g.rho_interval();
        assert_abs_diff_eq!(lo, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bipartite_regular_graph_interval_is_symmetric() {
        // Even cycles are 2-regular and bipartite.
        let g = cycle_graph(6);
        let (lo, hi) = g.rho_interval();
        assert_abs_diff_eq!(lo, -hi, epsilon = 1e-10);
    }

    #[test]
    fn five_cycle_interval_matches_closed_form_spectrum() {
        // W eigenvalues are 2 cos(2 pi k / 5); degrees are 2, so the
        // normalized spectrum is cos(2 pi k / 5).
        let g = cycle_graph(5);
        let (lo, hi) = g.rho_interval();
        let lmin = (4.0 * std::f64::consts::PI / 5.0).cos();
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(lo, 1.0 / lmin, epsilon = 1e-10);
        assert_abs_diff_eq!(lo, -1.2360679774997896, epsilon = 1e-10);
    }

    #[test]
    fn rho_outside_interval_is_rejected_and_matrix_is_indefinite() {
        let g = path_graph(4);
        let (lo, hi) = g.rho_interval();
        for rho in [lo * 1.001, hi * 1.001, lo - 0.5, hi + 0.5] {
            match g.build_precision(rho) {
                Err(Error::RhoOutOfRange { .. }) => {}
                other => panic!("expected RhoOutOfRange, got {other:?}"),
            }
        }
        // Forming D - rho W just past the upper endpoint by hand really is
        // indefinite, which is what the interval is protecting against.
        let rho = hi * 1.001;
        let n = g.n_regions();
        let mut q = DMatrix::zeros(n, n);
        for a in 0..n {
            q[(a, a)] = g.degrees()[a];
            for b in 0..n {
                if b != a {
                    q[(a, b)] = -rho * g.weights()[(a, b)];
                }
            }
        }
        assert!(q.symmetric_eigenvalues().min() <= 0.0);
    }

    #[test]
    fn isolated_region_errors_without_ridge_and_ridges_by_default() {
        let mut w = DMatrix::zeros(3, 3);
        w[(0, 1)] = 1.0;
        w[(1, 0)] = 1.0;
        // Region R02 is isolated.
        match RegionGraph::with_ridge(labels(3), w.clone(), 0.0) {
            Err(Error::IsolatedRegion { region }) => assert_eq!(region, "R02"),
            other => panic!("expected IsolatedRegion, got {other:?}"),
        }
        let g = RegionGraph::new(labels(3), w).unwrap();
        assert!(g.ridge() > 0.0);
        let (lo, hi) = g.rho_interval();
        assert!(lo < 0.0 && hi > 0.0);
        let q = g.build_precision(0.3).unwrap();
        assert_abs_diff_eq!(q[(2, 2)], g.ridge(), epsilon = 1e-20);
    }

    #[test]
    fn too_many_regions_is_rejected() {
        let n = MAX_DENSE_REGIONS + 1;
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            w[(i, i + 1)] = 1.0;
            w[(i + 1, i)] = 1.0;
        }
        match RegionGraph::new(labels(n), w) {
            Err(Error::TooManyRegions { got, max }) => {
                assert_eq!(got, n);
                assert_eq!(max, MAX_DENSE_REGIONS);
            }
            other => panic!("expected TooManyRegions, got {other:?}"),
        }
    }

    #[test]
    fn log_det_matches_eigenvalue_sum() {
        let g = path_graph(6);
        let rho = 0.7;
        let q = g.build_precision(rho).unwrap();
        let expect: f64 = q.symmetric_eigenvalues().iter().map(|e| e.ln()).sum();
        assert_abs_diff_eq!(g.precision_log_det(rho).unwrap(), expect, epsilon = 1e-8);
    }

    #[test]
    fn gmrf_draws_are_reproducible_for_a_fixed_seed() {
        let g = path_graph(5);
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let a = g.sample_gmrf(0.6, 1.5, &mut rng1).unwrap();
        let b = g.sample_gmrf(0.6, 1.5, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gmrf_empirical_covariance_matches_tau2_qinv() {
        // 3-region path, rho = 0.8, tau_u = 2: the empirical covariance of
        // 200k draws must sit within 2% relative Frobenius error of
        // tau^2 Q^{-1}.
        let g = path_graph(3);
        let (rho, tau) = (0.8, 2.0);
        let n_draws = 200_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = g.n_regions();
        let mut sum = DVector::<f64>::zeros(r);
        let mut outer = DMatrix::<f64>::zeros(r, r);
        for _ in 0..n_draws {
            let u = g.sample_gmrf(rho, tau, &mut rng).unwrap();
            sum += &u;
            outer += &u * u.transpose();
        }
        let mean = sum / n_draws as f64;
        let cov = outer / n_draws as f64 - &mean * mean.transpose();
        let q = g.build_precision(rho).unwrap();
        let target = q.try_inverse().unwrap() * (tau * tau);
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.02, "relative Frobenius error {rel}");
        // Componentwise empirical means stay within 4 sd of zero.
        for i in 0..r {
            let bound = 4.0 * (target[(i, i)] / n_draws as f64).sqrt();
            assert!(
                mean[i].abs() <= bound,
                "mean[{i}] = {} exceeds {bound}",
                mean[i]
            );
        }
    }

    #[test]
    fn gmrf_rho_zero_unit_degrees_gives_iid_standard_normals() {
        let g = path_graph(2); // degrees are 1, so Q(0) = I
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_draws = 100_000;
        let (mut s1, mut s2, mut s12) = (DVector::zeros(2), DVector::zeros(2), 0.0);
        for _ in 0..n_draws {
            let u = g.sample_gmrf(0.0, 1.0, &mut rng).unwrap();
            s1 += &u;
            s2 += u.component_mul(&u);
            s12 += u[0] * u[1];
        }
        let n = n_draws as f64;
        for i in 0..2 {
            assert!((s1[i] / n).abs() < 0.02);
            assert!((s2[i] / n - 1.0).abs() < 0.02);
        }
        assert!((s12 / n).abs() < 0.02);
    }

    #[test]
    fn invalid_tau_is_rejected() {
        let g = path_graph(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for tau in [0.0, -1.0, f64::NAN] {
            match g.sample_gmrf(0.2, tau, &mut rng) {
                Err(Error::InvalidScale { name, .. }) => assert_eq!(name, "tau_u"),
                other => panic!("expected InvalidScale, got {other:?}"),
            }
        }
    }

    #[test]
    fn edge_list_roundtrip_preserves_graph() {
        let g = cycle_graph(5);
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let got =
            RegionGraph::from_edge_list_reader(buf.as_slice(), Some(&g.labels().to_vec())).unwrap();
        assert_eq!(got.labels(), g.labels());
        assert_eq!(got.weights(), g.weights());
        assert_eq!(got.edge_count(), 5);
    }

    #[test]
    fn edge_list_with_unknown_label_is_rejected() {
        let csv = "region_a,region_b,weight\nR00,R99,1.0\n";
        let ls = labels(3);
        match RegionGraph::from_edge_list_reader(csv.as_bytes(), Some(&ls)) {
            Err(Error::UnknownRegion { label }) => assert_eq!(label, "R99"),
            other => panic!("expected UnknownRegion, got {other:?}"),
        }
    }

    #[test]
    fn edge_list_weight_defaults_to_one() {
        let csv = "region_a,region_b\nA,B\nB,C\n";
        let g = RegionGraph::from_edge_list_reader(csv.as_bytes(), None).unwrap();
        assert_eq!(g.labels(), &["A".to_string(), "B".into(), "C".into()]);
        assert_abs_diff_eq!(g.weights()[(0, 1)], 1.0);
        assert_abs_diff_eq!(g.degrees()[1], 2.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Random connected weighted graph on 2..=8 regions: a random
        /// spanning tree plus extra random edges.
        fn arb_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
            (2usize..=8).prop_flat_map(|n| {
                let tree = proptest::collection::vec(0.25f64..4.0, n - 1);
                let extras = proptest::collection::vec(
                    (0..n, 0..n, 0.25f64..4.0),
                    0..(n.max(2) - 1),
                );
                (tree, extras).prop_map(move |(tw, extras)| {
                    let mut edges: Vec<(usize, usize, f64)> = tw
                        .into_iter()
                        .enumerate()
                        .map(|(i, w)| (i, i + 1, w))
                        .collect();
                    for (a, b, w) in extras {
                        if a != b {
                            edges.push((a.min(b), a.max(b), w));
                        }
                    }
                    (n, edges)
                })
            })
        }

        proptest! {
            #[test]
            fn precision_is_symmetric_pd_inside_interval((n, edges) in arb_graph()) {
                let mut w = DMatrix::zeros(n, n);
                for (a, b, wt) in edges {
                    w[(a, b)] = wt;
                    w[(b, a)] = wt;
                }
                let g = RegionGraph::new(labels(n), w).unwrap();
                let (lo, hi) = g.rho_interval();
                prop_assert!(lo < 0.0 && hi > 0.0);
                for frac in [-0.95, -0.5, 0.0, 0.5, 0.95] {
                    let rho = if frac < 0.0 { -frac * lo } else { frac * hi };
                    let q = g.build_precision(rho).unwrap();
                    // Elementwise identity against D - rho W + ridge I.
                    for a in 0..n {
                        for b in 0..n {
                            let expect = if a == b {
                                g.degrees()[a] + g.ridge()
                            } else {
                                -rho * g.weights()[(a, b)]
                            };
                            prop_assert!((q[(a, b)] - expect).abs() <= 1e-12);
                        }
                    }
                    prop_assert!((&q - q.transpose()).norm() == 0.0);
                    prop_assert!(q.clone().cholesky().is_some());
                }
            }
        }
    }
}
