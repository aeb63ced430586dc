use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::generator::{DrbsdeData, Expr, GeneratorSpec, RbsdeData};
use crate::lattice::{AdaptedProcess, FiltrationTree};

fn one() -> f64 {
    1.0
}

/// How the price is read off a martingale coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceWalk {
    /// `S = S0 + sigma M`.
    #[default]
    Linear,
    /// `S = S0 prod (1 + sigma dM)`.
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffKind {
    AmericanPut {
        strike: f64,
        #[serde(default = "one")]
        s0: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        walk: PriceWalk,
        #[serde(default)]
        component: usize,
    },
    /// Put payoff for the holder; the issuer may cancel before maturity by
    /// paying the payoff plus `penalty`.
    GameOption {
        strike: f64,
        #[serde(default = "one")]
        s0: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        walk: PriceWalk,
        #[serde(default)]
        component: usize,
        penalty: f64,
    },
    /// Expressions in `t`, `k` and `m1..md` (`m` is `m1`). `eta` defaults to
    /// `xi` at the leaves.
    Custom {
        xi: String,
        #[serde(default)]
        eta: Option<String>,
        #[serde(default)]
        zeta: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffConfig {
    #[serde(flatten)]
    pub kind: PayoffKind,
    /// Optional `D` process, as an expression like the custom payoffs.
    #[serde(default)]
    pub shift: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Payoffs {
    pub eta: Vec<f64>,
    pub xi: AdaptedProcess,
    pub zeta: Option<AdaptedProcess>,
    pub d_proc: AdaptedProcess,
}

impl Payoffs {
    pub fn rbsde_data(&self, tree: &FiltrationTree, g: GeneratorSpec) -> Result<RbsdeData> {
        RbsdeData::new(tree, g, self.eta.clone(), self.d_proc.clone(), self.xi.clone())
    }

    /// Double-barrier data; without an upper obstacle `zeta` is `+inf`-like
    /// (`f64::MAX`).
    pub fn drbsde_data(&self, tree: &FiltrationTree, g: GeneratorSpec) -> Result<DrbsdeData> {
        let zeta = self.zeta.clone().unwrap_or_else(|| AdaptedProcess::constant(tree, f64::MAX));
        DrbsdeData::new(tree, g, self.eta.clone(), self.d_proc.clone(), self.xi.clone(), zeta)
    }
}

fn price(model: &Model, s0: f64, sigma: f64, walk: PriceWalk, component: usize) -> Result<AdaptedProcess> {
    if component >= model.dim() {
        return Err(Error::InvalidPayoff(format!(
            "component {component} out of range for a {}-dimensional martingale",
            model.dim()
        )));
    }
    let m = model.m.component(component);
    Ok(match walk {
        PriceWalk::Linear => m.map(|x| s0 + sigma * x),
        PriceWalk::Exponential => {
            let tree = &model.tree;
            let mut s = AdaptedProcess::constant(tree, s0);
            for v in 1..tree.len() {
                let p = tree.parent(v).expect("non-root");
                s[v] = s[p] * (1.0 + sigma * (m[v] - m[p]));
            }
            s
        }
    })
}

fn eval_expr(model: &Model, src: &str) -> Result<AdaptedProcess> {
    let tree = &model.tree;
    let mut names: Vec<String> = vec!["t".into(), "k".into()];
    names.extend((1..=model.dim()).map(|i| format!("m{i}")));
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let aliases: &[(&str, &str)] = if model.dim() >= 1 { &[("m", "m1")] } else { &[] };
    let expr = Expr::parse(src, &refs, aliases)?;
    let mut vars = vec![0.0; refs.len()];
    let out = AdaptedProcess::from_fn(tree, |v| {
        let k = tree.level_of(v);
        vars[0] = tree.grid().time(k);
        vars[1] = k as f64;
        for (slot, x) in vars[2..].iter_mut().zip(model.m.value(v).iter()) {
            *slot = *x;
        }
        expr.eval(&vars)
    });
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::InvalidPayoff(format!("expression `{src}` is not finite on every node")))
    }
}

/// Obstacles, terminal value and optional shift for `model`.
pub fn build_payoffs(model: &Model, config: &PayoffConfig) -> Result<Payoffs> {
    let tree = &model.tree;
    let (xi, zeta, eta) = match &config.kind {
        PayoffKind::AmericanPut {
            strike,
            s0,
            sigma,
            walk,
            component,
        } => {
            let s = price(model, *s0, *sigma, *walk, *component)?;
            let xi = s.map(|x| (strike - x).max(0.0));
            let eta = xi.terminal(tree);
            (xi, None, eta)
        }
        PayoffKind::GameOption {
            strike,
            s0,
            sigma,
            walk,
            component,
            penalty,
        } => {
            if !(*penalty >= 0.0) {
                return Err(Error::InvalidPayoff(format!("penalty must be >= 0, got {penalty}")));
            }
            let s = price(model, *s0, *sigma, *walk, *component)?;
            let xi = s.map(|x| (strike - x).max(0.0));
            let zeta = AdaptedProcess::from_fn(tree, |v| if tree.is_terminal(v) { xi[v] } else { xi[v] + penalty });
            let eta = xi.terminal(tree);
            (xi, Some(zeta), eta)
        }
        PayoffKind::Custom { xi, eta, zeta } => {
            let xi_p = eval_expr(model, xi)?;
            let eta = match eta {
                Some(src) => eval_expr(model, src)?.terminal(tree),
                None => xi_p.terminal(tree),
            };
            let zeta = zeta.as_deref().map(|src| eval_expr(model, src)).transpose()?;
            (xi_p, zeta, eta)
        }
    };
    let d_proc = match &config.shift {
        Some(src) => eval_expr(model, src)?,
        None => AdaptedProcess::zeros(tree),
    };
    Ok(Payoffs { eta, xi, zeta, d_proc })
}
