//! Scenario files: model, payoff, driver and solver settings in one JSON
//! document.
//!
//! ```json
//! {
//!   "model": {"kind": "brownian_walk", "steps": 4, "horizon": 1.0},
//!   "payoff": {"kind": "american_put", "strike": 1.0},
//!   "generator": {"family": "affine", "params": {"b": -0.05}},
//!   "lipschitz": 0.05,
//!   "solver": {"kind": "rbsde", "tol": 1e-18, "max_iter": 200}
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drbsde::{picard_solve_dr, solve_fixed_generator_dr_shifted, DrbsdeSolution};
use crate::error::{Error, Result};
use crate::estimates::{check_apriori, check_picard_step, check_stability, stability_parameters, EstimateReport};
use crate::generator::{build_generator, freeze_generator, zero_vectors, DrbsdeData, GeneratorConfig, GeneratorSpec, RbsdeData};
use crate::martingale::LipschitzSampling;
use crate::models::{build_payoffs, Model, ModelConfig, PayoffConfig};
use crate::rbsde::{
    default_beta, picard_solve, solve_fixed_generator_shifted, PicardDiagnostics, PicardOptions, RbsdeSolution,
    DEFAULT_PICARD_MAX_ITER, DEFAULT_PICARD_TOL,
};

/// Driver offset used for the stability check in `estimate_suite`.
pub const STABILITY_OFFSET: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Rbsde,
    Drbsde,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub kind: SolverKind,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelConfig,
    pub payoff: PayoffConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    /// Declared m-Lipschitz constant of the driver.
    #[serde(default)]
    pub lipschitz: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// Command-line style overrides applied on top of a scenario.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub beta: Option<f64>,
    pub seed: u64,
}

/// Solver input built from a scenario.
#[derive(Clone, Debug)]
pub enum Problem {
    Single(RbsdeData),
    Double(DrbsdeData),
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub model: Model,
    pub problem: Problem,
    pub options: PicardOptions,
}

#[derive(Clone, Debug)]
pub enum Solution {
    Single(RbsdeSolution),
    Double(DrbsdeSolution),
}

impl Problem {
    pub fn generator(&self) -> &GeneratorSpec {
        match self {
            Problem::Single(d) => &d.g,
            Problem::Double(d) => &d.g,
        }
    }

    pub fn d_proc(&self) -> &crate::lattice::AdaptedProcess {
        match self {
            Problem::Single(d) => &d.d_proc,
            Problem::Double(d) => &d.d_proc,
        }
    }
}

impl Solution {
    pub fn root_value(&self) -> f64 {
        match self {
            Solution::Single(s) => s.root_value(),
            Solution::Double(s) => s.root_value(),
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds model, data and options. Relative model paths resolve against
    /// `base`.
    pub fn instantiate(&self, base: &Path, overrides: &Overrides) -> Result<Instance> {
        let model = self.model.build(base, overrides.seed)?;
        let payoffs = build_payoffs(&model, &self.payoff)?;
        let g = build_generator(&self.generator, self.lipschitz, model.dim())?;
        let tree = &model.tree;
        let problem = match self.solver.kind {
            SolverKind::Rbsde => {
                if payoffs.zeta.is_some() {
                    return Err(Error::InvalidData(
                        "payoff has an upper obstacle; use solver kind `drbsde`".into(),
                    ));
                }
                Problem::Single(payoffs.rbsde_data(tree, g)?)
            }
            SolverKind::Drbsde => Problem::Double(payoffs.drbsde_data(tree, g)?),
        };
        let options = PicardOptions {
            tol: overrides.tol.or(self.solver.tol).unwrap_or(DEFAULT_PICARD_TOL),
            max_iter: overrides.max_iter.or(self.solver.max_iter).unwrap_or(DEFAULT_PICARD_MAX_ITER),
            beta: overrides.beta.or(self.solver.beta),
            lipschitz_check: Some(LipschitzSampling {
                seed: overrides.seed,
                ..Default::default()
            }),
        };
        Ok(Instance { model, problem, options })
    }
}

impl Instance {
    pub fn solve(&self) -> Result<(Solution, PicardDiagnostics)> {
        let (tree, m) = (&self.model.tree, &self.model.m);
        match &self.problem {
            Problem::Single(data) => picard_solve(tree, m, data, &self.options).map(|(s, d)| (Solution::Single(s), d)),
            Problem::Double(data) => {
                picard_solve_dr(tree, m, data, &self.options).map(|(s, d)| (Solution::Double(s), d))
            }
        }
    }

    /// β of the Picard-step check: the override if positive, else the
    /// default, else 1 (a zero constant makes the factor vanish anyway).
    fn picard_beta(&self) -> f64 {
        let g = self.problem.generator();
        let b = self
            .options
            .beta
            .unwrap_or_else(|| default_beta(g.lipschitz(), self.model.tree.grid().c_q()));
        if b > 0.0 {
            b
        } else {
            1.0
        }
    }

    /// Estimate reports for `sol`: the a priori ratio, stability against the
    /// driver shifted by `STABILITY_OFFSET`, and the Picard step between the
    /// solves frozen at `(D, 0)` and at `sol`.
    ///
    /// For double reflection the a priori right-hand side uses the lower
    /// obstacle only.
    pub fn estimate_suite(&self, sol: &Solution, slack_factor: f64) -> Result<Vec<EstimateReport>> {
        let (tree, m) = (&self.model.tree, &self.model.m);
        let g = self.problem.generator();
        let l = g.lipschitz();
        let (beta_s, gamma) = stability_parameters(l);
        let beta_p = self.picard_beta();
        let g2 = g.offset(STABILITY_OFFSET);
        let d_proc = self.problem.d_proc();
        let d = (d_proc.max_abs() > 0.0).then_some(d_proc);
        let v0 = zero_vectors(tree, m.dim());
        let p1 = freeze_generator(tree, g, d_proc, &v0);
        match (&self.problem, sol) {
            (Problem::Single(data), Solution::Single(s)) => {
                let apriori = check_apriori(tree, m, s, data, beta_s)?;
                let other = RbsdeData { g: g2.clone(), ..data.clone() };
                let (s2, _) = picard_solve(tree, m, &other, &self.options)?;
                let stability = check_stability(tree, m, s, &s2, g, &g2, beta_s, gamma, slack_factor)?;
                let f1 = solve_fixed_generator_shifted(tree, m, &p1, &data.eta, &data.xi, d)?;
                let p2 = freeze_generator(tree, g, &s.y, &s.z);
                let f2 = solve_fixed_generator_shifted(tree, m, &p2, &data.eta, &data.xi, d)?;
                let step = check_picard_step(tree, m, &f1, &f2, (d_proc, &v0), (&s.y, &s.z), l, beta_p, slack_factor)?;
                Ok(vec![apriori, stability, step])
            }
            (Problem::Double(data), Solution::Double(s)) => {
                let apriori = check_apriori(tree, m, s, &data.lower(), beta_s)?;
                let other = DrbsdeData { g: g2.clone(), ..data.clone() };
                let (s2, _) = picard_solve_dr(tree, m, &other, &self.options)?;
                let stability = check_stability(tree, m, s, &s2, g, &g2, beta_s, gamma, slack_factor)?;
                let solve = |p| solve_fixed_generator_dr_shifted(tree, m, p, &data.eta, &data.xi, &data.zeta, d);
                let f1 = solve(&p1)?;
                let f2 = solve(&freeze_generator(tree, g, &s.y, &s.z))?;
                let step = check_picard_step(tree, m, &f1, &f2, (d_proc, &v0), (&s.y, &s.z), l, beta_p, slack_factor)?;
                Ok(vec![apriori, stability, step])
            }
            _ => Err(Error::InvalidData("solution kind does not match the problem".into())),
        }
    }
}
