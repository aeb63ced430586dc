//! Numerical checks of the a priori inequalities on solved instances.
//!
//! Norms are evaluated in log form, since `exp(beta Q_k)` leaves the range
//! of `f64` for the large β the Picard bound needs. Verdicts and ratios come
//! from the logs; the reported sides are both divided by `exp(log_scale)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{freeze_generator, zero_vectors, GeneratorSpec, RbsdeData};
use crate::lattice::{AdaptedProcess, FiltrationTree, VectorProcess};
use crate::martingale::{log_h_norm_sq, log_l_norm_sq, log_s_norm_sq, log_sum_exp, MartingaleM};
use crate::rbsde::{picard_step_scale, PicardOptions, SolutionView};

pub const DEFAULT_SLACK_FACTOR: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateParams {
    pub beta: f64,
    pub gamma: Option<f64>,
    pub lipschitz: f64,
    pub c_q: f64,
    /// Both sides are the true values times `exp(-log_scale)`.
    pub log_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    /// `lhs / rhs`, with `0 / 0 = 0`.
    pub ratio: f64,
    pub slack_factor: f64,
    pub params: EstimateParams,
    pub holds: bool,
}

/// `lhs / rhs` from logs, with `0 / 0 = 0`.
fn log_ratio(log_lhs: f64, log_rhs: f64) -> f64 {
    if log_lhs == f64::NEG_INFINITY {
        0.0
    } else {
        (log_lhs - log_rhs).exp()
    }
}

fn ln_coef(c: f64, log_norm: f64) -> f64 {
    if c == 0.0 {
        f64::NEG_INFINITY
    } else {
        c.ln() + log_norm
    }
}

impl EstimateReport {
    /// Builds a report from `ln lhs` and `ln rhs`; `params.log_scale` is
    /// overwritten with the larger finite side.
    fn from_logs(name: &str, log_lhs: f64, log_rhs: f64, slack_factor: f64, mut params: EstimateParams) -> Self {
        let scale = log_lhs.max(log_rhs);
        let scale = if scale.is_finite() { scale } else { 0.0 };
        params.log_scale = scale;
        let (lhs, rhs) = ((log_lhs - scale).exp(), (log_rhs - scale).exp());
        let ratio = log_ratio(log_lhs, log_rhs);
        let holds = !log_lhs.is_nan()
            && !log_rhs.is_nan()
            && log_lhs < f64::INFINITY
            && (log_lhs == f64::NEG_INFINITY || log_lhs <= slack_factor.ln() + log_rhs);
        EstimateReport {
            name: name.to_string(),
            lhs,
            rhs,
            slack: rhs - lhs,
            ratio,
            slack_factor,
            params,
            holds,
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::BadParameters(format!("beta must be finite and > 0, got {beta}")))
    }
}

fn vector_diff(a: &VectorProcess, b: &VectorProcess) -> VectorProcess {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Ratio `lhs / rhs` of the basic a priori estimate
/// `||Y||_S^2 + ||Y||_H^2 + ||Z||_L^2 + ||K||_S^2` against
/// `||eta||^2 + ||xi^+||_S^2 + ||g(., 0, 0)||_H^2`.
///
/// The constant of the estimate is not explicit, so `holds` only asserts a
/// finite ratio. For double reflection `K` is the net push `L - U`.
pub fn check_apriori(
    tree: &FiltrationTree,
    m: &MartingaleM,
    sol: &impl SolutionView,
    data: &RbsdeData,
    beta: f64,
) -> Result<EstimateReport> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::BadParameters(format!("beta must be finite and >= 0, got {beta}")));
    }
    let c_q = tree.grid().c_q();
    let k = sol.net_push().cumulative(tree);
    let log_lhs = log_sum_exp([
        log_s_norm_sq(tree, sol.y(), beta),
        log_h_norm_sq(tree, sol.y(), beta),
        log_l_norm_sq(tree, m, sol.z(), beta),
        log_s_norm_sq(tree, &k, beta),
    ]);
    let eta_sq: f64 = tree.leaves().iter().zip(&data.eta).map(|(&v, e)| tree.reach(v) * e * e).sum();
    let xi_plus = data.xi.map(|x| x.max(0.0));
    let g0 = freeze_generator(tree, &data.g, &AdaptedProcess::zeros(tree), &zero_vectors(tree, m.dim()));
    let g0 = AdaptedProcess::from_vec(g0.into_vec());
    let log_rhs = log_sum_exp([
        ln_coef(eta_sq, beta * tree.grid().q(tree.depth())),
        log_s_norm_sq(tree, &xi_plus, beta),
        log_h_norm_sq(tree, &g0, beta),
    ]);
    let params = EstimateParams {
        beta,
        gamma: None,
        lipschitz: data.g.lipschitz(),
        c_q,
        log_scale: 0.0,
    };
    let mut rep = EstimateReport::from_logs("apriori", log_lhs, log_rhs, f64::INFINITY, params);
    rep.holds = rep.ratio.is_finite();
    Ok(rep)
}

/// Solves `data` scaled by each `lambda` and returns the a priori reports.
pub fn apriori_scaling(
    tree: &FiltrationTree,
    m: &MartingaleM,
    data: &RbsdeData,
    lambdas: &[f64],
    beta: f64,
    opts: &PicardOptions,
) -> Result<Vec<EstimateReport>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let scaled = data.scaled(lambda);
            let (sol, _) = crate::rbsde::picard_solve(tree, m, &scaled, opts)?;
            check_apriori(tree, m, &sol, &scaled, beta)
        })
        .collect()
}

/// Stability estimate
/// `(beta - 2L - 1/gamma) ||y||_H^2 + (1 - 2 L^2 gamma) ||z||_L^2 <= 2 gamma ||gbar||_H^2`
/// with `y = Y1 - Y2`, `z = Z1 - Z2`, `gbar = g1(Y2, Z2) - g2(Y2, Z2)` and
/// `L` the declared constant of `g1`.
#[allow(clippy::too_many_arguments)]
pub fn check_stability(
    tree: &FiltrationTree,
    m: &MartingaleM,
    sol1: &impl SolutionView,
    sol2: &impl SolutionView,
    g1: &GeneratorSpec,
    g2: &GeneratorSpec,
    beta: f64,
    gamma: f64,
    slack_factor: f64,
) -> Result<EstimateReport> {
    check_beta(beta)?;
    let l = g1.lipschitz();
    let cy = beta - 2.0 * l - 1.0 / gamma;
    let cz = 1.0 - 2.0 * l * l * gamma;
    if !(gamma > 0.0) || !(cy > 0.0) || !(cz > 0.0) {
        return Err(Error::BadParameters(format!(
            "stability needs gamma > 0, beta - 2L - 1/gamma > 0 and 1 - 2L^2 gamma > 0 (beta {beta}, gamma {gamma}, L {l})"
        )));
    }
    let c_q = tree.grid().c_q();
    let y = sol1.y().zip_with(sol2.y(), |a, b| a - b);
    let z = vector_diff(sol1.z(), sol2.z());
    let a = freeze_generator(tree, g1, sol2.y(), sol2.z());
    let b = freeze_generator(tree, g2, sol2.y(), sol2.z());
    let gbar = AdaptedProcess::from_vec(a.zip_with(&b, |p, q| p - q).into_vec());
    let log_lhs = log_sum_exp([ln_coef(cy, log_h_norm_sq(tree, &y, beta)), ln_coef(cz, log_l_norm_sq(tree, m, &z, beta))]);
    let log_rhs = ln_coef(2.0 * gamma, log_h_norm_sq(tree, &gbar, beta));
    Ok(EstimateReport::from_logs(
        "stability",
        log_lhs,
        log_rhs,
        slack_factor,
        EstimateParams {
            beta,
            gamma: Some(gamma),
            lipschitz: l,
            c_q,
            log_scale: 0.0,
        },
    ))
}

/// Default stability parameters for a constant `l`: `gamma = 1/(4 l^2)`
/// (1 when `l = 0`) and `beta = 1 + 2l + 1/gamma`.
pub fn stability_parameters(l: f64) -> (f64, f64) {
    let gamma = if l > 0.0 { 1.0 / (4.0 * l * l) } else { 1.0 };
    (1.0 + 2.0 * l + 1.0 / gamma, gamma)
}

/// `1158 L^2 (C_Q + 1) / beta`, the factor of the Picard-step estimate.
pub fn picard_step_factor(lipschitz: f64, c_q: f64, beta: f64) -> f64 {
    let scale = picard_step_scale(lipschitz, c_q);
    if scale == 0.0 {
        0.0
    } else {
        scale / beta
    }
}

/// Picard-step estimate
/// `||y||_S^2 + ||z||_L^2 <= 1158 L^2 (C_Q + 1) / beta (||w||_S^2 + ||v||_L^2)`
/// for solutions frozen at `(w1, v1)` and `(w2, v2)`.
#[allow(clippy::too_many_arguments)]
pub fn check_picard_step(
    tree: &FiltrationTree,
    m: &MartingaleM,
    sol1: &impl SolutionView,
    sol2: &impl SolutionView,
    (w1, v1): (&AdaptedProcess, &VectorProcess),
    (w2, v2): (&AdaptedProcess, &VectorProcess),
    lipschitz: f64,
    beta: f64,
    slack_factor: f64,
) -> Result<EstimateReport> {
    check_beta(beta)?;
    let c_q = tree.grid().c_q();
    let y = sol1.y().zip_with(sol2.y(), |a, b| a - b);
    let z = vector_diff(sol1.z(), sol2.z());
    let w = w1.zip_with(w2, |a, b| a - b);
    let v = vector_diff(v1, v2);
    let log_lhs = log_sum_exp([log_s_norm_sq(tree, &y, beta), log_l_norm_sq(tree, m, &z, beta)]);
    let log_rhs = ln_coef(
        picard_step_factor(lipschitz, c_q, beta),
        log_sum_exp([log_s_norm_sq(tree, &w, beta), log_l_norm_sq(tree, m, &v, beta)]),
    );
    Ok(EstimateReport::from_logs(
        "picard_step",
        log_lhs,
        log_rhs,
        slack_factor,
        EstimateParams {
            beta,
            gamma: None,
            lipschitz,
            c_q,
            log_scale: 0.0,
        },
    ))
}
