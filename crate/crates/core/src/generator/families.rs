use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::expr::{softplus, Expr};
use super::GeneratorSpec;
use crate::error::{Error, Result};

/// Driver selection as it appears in scenario files.
///
/// ```json
/// {"family": "affine", "params": {"a": 0.1, "b": -0.5, "c": [0.2]}}
/// {"expr": "0.5 * y + sin(z1)"}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorConfig {
    Family {
        family: String,
        #[serde(default)]
        params: BTreeMap<String, Value>,
    },
    Expr {
        expr: String,
    },
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Family {
            family: "zero".into(),
            params: BTreeMap::new(),
        }
    }
}

fn scalar(params: &BTreeMap<String, Value>, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::InvalidGenerator(format!("parameter `{key}` must be a number"))),
    }
}

fn vector(params: &BTreeMap<String, Value>, key: &str, dim: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = match params.get(key) {
        None => Vec::new(),
        Some(Value::Number(n)) => vec![n.as_f64().unwrap_or(f64::NAN)],
        Some(Value::Array(items)) => items
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| Error::InvalidGenerator(format!("parameter `{key}` must hold numbers")))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(Error::InvalidGenerator(format!("parameter `{key}` must be an array"))),
    };
    if values.len() > dim {
        return Err(Error::InvalidGenerator(format!(
            "parameter `{key}` has {} entries, martingale dimension is {dim}",
            values.len()
        )));
    }
    let mut out = values;
    out.resize(dim, 0.0);
    Ok(out)
}

fn dot(c: &[f64], z: &[f64]) -> f64 {
    c.iter().zip(z).map(|(a, b)| a * b).sum()
}

/// Instantiates a driver for a martingale of dimension `dim`.
pub fn build_generator(config: &GeneratorConfig, lipschitz: f64, dim: usize) -> Result<GeneratorSpec> {
    match config {
        GeneratorConfig::Expr { expr } => {
            let mut names: Vec<String> = vec!["t".into(), "k".into(), "y".into()];
            names.extend((1..=dim).map(|i| format!("z{i}")));
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let aliases: &[(&str, &str)] = if dim >= 1 { &[("z", "z1")] } else { &[] };
            let parsed = Expr::parse(expr, &refs, aliases)?;
            let depends = (2..refs.len()).any(|i| parsed.uses(i));
            GeneratorSpec::new(format!("expr({expr})"), lipschitz, depends, move |p, y, z| {
                let mut vars = Vec::with_capacity(3 + z.len());
                vars.extend([p.t, p.level as f64, y]);
                vars.extend_from_slice(z);
                parsed.eval(&vars)
            })
        }
        GeneratorConfig::Family { family, params } => {
            let g = match family.as_str() {
                "zero" => GeneratorSpec::zero(),
                "constant" => GeneratorSpec::constant(scalar(params, "c", 0.0)?),
                "affine" => {
                    let a = scalar(params, "a", 0.0)?;
                    let b = scalar(params, "b", 0.0)?;
                    let c = vector(params, "c", dim)?;
                    GeneratorSpec::affine(a, b, c)
                }
                "softplus" => {
                    let s = scalar(params, "scale", 1.0)?;
                    let c = vector(params, "c", dim)?;
                    let depends = s != 0.0 || c.iter().any(|&x| x != 0.0);
                    GeneratorSpec::new("softplus", lipschitz, depends, move |_, y, z| s * softplus(y) + dot(&c, z))?
                }
                "sine" => {
                    let a = scalar(params, "amplitude", 1.0)?;
                    let c = vector(params, "c", dim)?;
                    let depends = a != 0.0 || c.iter().any(|&x| x != 0.0);
                    GeneratorSpec::new("sine", lipschitz, depends, move |_, y, z| a * y.sin() + dot(&c, z))?
                }
                "funding" => {
                    // Lend at `lend_rate` when y > 0, borrow at `borrow_rate` when y < 0.
                    let rate = scalar(params, "rate", 0.0)?;
                    let lend = scalar(params, "lend_rate", rate)?;
                    let borrow = scalar(params, "borrow_rate", rate)?;
                    let depends = lend != 0.0 || borrow != 0.0;
                    GeneratorSpec::new("funding", lipschitz, depends, move |_, y, _| {
                        -lend * y.max(0.0) + borrow * (-y).max(0.0)
                    })?
                }
                other => return Err(Error::UnknownGenerator(other.to_string())),
            };
            g.with_lipschitz(lipschitz)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GenPoint;

    fn point() -> GenPoint {
        GenPoint { level: 1, node: 1, t: 0.5 }
    }

    fn parse(json: &str) -> GeneratorConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn families_evaluate() {
        let g = build_generator(&parse(r#"{"family":"affine","params":{"a":1,"b":2,"c":[3]}}"#), 5.0, 2).unwrap();
        assert_eq!(g.eval(&point(), 1.0, &[1.0, 9.0]), 6.0);
        assert!(g.depends_on_yz());
        assert_eq!(g.lipschitz(), 5.0);

        let g = build_generator(&parse(r#"{"family":"constant","params":{"c":0.25}}"#), 0.0, 1).unwrap();
        assert!(!g.depends_on_yz());
        assert_eq!(g.eval(&point(), 4.0, &[1.0]), 0.25);

        let g = build_generator(&parse(r#"{"family":"funding","params":{"lend_rate":0.1,"borrow_rate":0.3}}"#), 0.3, 1)
            .unwrap();
        assert!((g.eval(&point(), 2.0, &[0.0]) + 0.2).abs() < 1e-15);
        assert!((g.eval(&point(), -2.0, &[0.0]) - 0.6).abs() < 1e-15);

        let g = build_generator(&parse(r#"{"family":"sine","params":{"c":[1]}}"#), 2.0, 1).unwrap();
        assert_eq!(g.eval(&point(), 0.0, &[0.5]), 0.5);
    }

    #[test]
    fn expressions_see_t_y_z() {
        let g = build_generator(&parse(r#"{"expr":"t + 2*y - z + z2"}"#), 3.0, 2).unwrap();
        assert_eq!(g.eval(&point(), 1.0, &[4.0, 8.0]), 0.5 + 2.0 - 4.0 + 8.0);
        assert!(g.depends_on_yz());
        let g = build_generator(&parse(r#"{"expr":"t * 2"}"#), 0.0, 1).unwrap();
        assert!(!g.depends_on_yz());
    }

    #[test]
    fn unknown_family_and_bad_params() {
        assert!(matches!(
            build_generator(&parse(r#"{"family":"nope"}"#), 0.0, 1),
            Err(Error::UnknownGenerator(_))
        ));
        assert!(build_generator(&parse(r#"{"family":"affine","params":{"c":[1,2]}}"#), 0.0, 1).is_err());
        assert!(build_generator(&parse(r#"{"family":"affine","params":{"b":"x"}}"#), 0.0, 1).is_err());
        assert!(build_generator(&parse(r#"{"family":"zero"}"#), -1.0, 1).is_err());
    }
}
