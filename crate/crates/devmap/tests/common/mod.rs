//! Shared helpers for integration tests: a brute-force Gaussian
//! conditioning oracle that works in covariance space, independent of the
//! precision-space identities used by the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use devmap::data::ObservationRecord;
use devmap::LongDataset;

/// Conditional distribution of z given y for the joint Gaussian
///
/// ```text
/// [z]   ~ N( [0      ]  ,  [ Szz       Szz G'          ] )
/// [y]        [y_mean ]     [ G Szz     G Szz G' + s2 I ]
/// ```
///
/// i.e. y = y_mean + G z + noise. Returns (mean, cov) of z | y via the
/// Schur complement, with a plain matrix inverse so the arithmetic path is
/// disjoint from the library's Cholesky solves.
pub fn condition_on_observations(
    szz: &DMatrix<f64>,
    g: &DMatrix<f64>,
    y_mean: &DVector<f64>,
    y: &DVector<f64>,
    noise_var: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let cross = szz * g.transpose();
    let mut syy = g * &cross;
    for i in 0..syy.nrows() {
        syy[(i, i)] += noise_var;
    }
    let syy_inv = syy.try_inverse().expect("observation covariance invertible");
    let gain = &cross * &syy_inv;
    let mean = &gain * (y - y_mean);
    let cov = szz - gain * cross.transpose();
    (mean, cov)
}

/// Incidence matrix A (n_obs x R) mapping a subject's deviation field to the
/// subject's observation vector, plus that vector and its fixed-effect
/// fitted means.
pub fn subject_incidence(
    data: &LongDataset,
    subject: usize,
    coefficients: &DMatrix<f64>,
    intercept: f64,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let obs = data.subject_observations(subject);
    let mut a = DMatrix::zeros(obs.len(), data.n_regions());
    let mut y = DVector::zeros(obs.len());
    let mut mean = DVector::zeros(obs.len());
    for (k, o) in obs.iter().enumerate() {
        a[(k, o.region)] = 1.0;
        y[k] = o.y;
        mean[k] = data.design_row(o).dot(&coefficients.column(o.region)) + intercept;
    }
    (a, y, mean)
}

pub fn record(subject: &str, visit: usize, region: &str, y: f64, covs: &[f64]) -> ObservationRecord {
    ObservationRecord {
        subject: subject.into(),
        visit,
        region: region.into(),
        y,
        covariates: covs.to_vec(),
        abnormal: false,
    }
}
