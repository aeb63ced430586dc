//! Reading scenarios and solutions, writing reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rbsde_core::drbsde::DrbsdeSolution;
use rbsde_core::models::ModelConfig;
use rbsde_core::rbsde::{PicardDiagnostics, RbsdeSolution};
use rbsde_core::scenario::{Scenario, Solution, SolverKind};
use rbsde_core::{AdaptedProcess, FiltrationTree, MartingaleM, PredictableProcess};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

/// Parses JSON and reports the path of the first offending field.
pub fn parse_json<T: DeserializeOwned>(what: &str, text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Invalid(format!("{what}: at `{path}`: {}", e.into_inner()))
    })
}

pub fn load_scenario(path: &Path) -> Result<(Scenario, PathBuf), CliError> {
    let text = read_text(path)?;
    let sc = parse_json("config", &text)?;
    Ok((sc, base_dir(path)))
}

/// A scenario file or a bare model section.
pub fn load_model_config(path: &Path) -> Result<(ModelConfig, PathBuf), CliError> {
    let text = read_text(path)?;
    let value: Value = parse_json("config", &text)?;
    let model = match value.get("model") {
        Some(m) => parse_json("config.model", &m.to_string())?,
        None => parse_json("model", &text)?,
    };
    Ok((model, base_dir(path)))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Shortest round-trip form, in exponent notation for very small or large
/// magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn vectors(z: &[DVector<f64>]) -> Vec<Vec<f64>> {
    z.iter().map(|v| v.iter().copied().collect()).collect()
}

/// Solution document with sorted keys.
pub fn solution_json(sol: &Solution, diag: &PicardDiagnostics) -> Result<String, CliError> {
    let mut doc: BTreeMap<&str, Value> = BTreeMap::new();
    match sol {
        Solution::Single(s) => {
            doc.insert("kind", json!("rbsde"));
            doc.insert("Y", json!(s.y.values()));
            doc.insert("Z", json!(vectors(&s.z)));
            doc.insert("dK", json!(s.k_inc.values()));
        }
        Solution::Double(s) => {
            doc.insert("kind", json!("drbsde"));
            doc.insert("Y", json!(s.y.values()));
            doc.insert("Z", json!(vectors(&s.z)));
            doc.insert("dL", json!(s.l_inc.values()));
            doc.insert("dU", json!(s.u_inc.values()));
        }
    }
    doc.insert("diagnostics", serde_json::to_value(diag).map_err(|e| CliError::Other(e.to_string()))?);
    serde_json::to_string_pretty(&doc).map_err(|e| CliError::Other(e.to_string()))
}

pub fn solution_csv(tree: &FiltrationTree, m: &MartingaleM, sol: &Solution) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let res: csv::Result<()> = (|| {
        match sol {
            Solution::Single(s) => {
                w.write_record(["level", "node", "Y", "mZ_norm", "dK"])?;
                for v in 0..tree.len() {
                    w.write_record([
                        tree.level_of(v).to_string(),
                        v.to_string(),
                        num(s.y[v]),
                        num(m.mz_norm(v, &s.z[v])),
                        num(s.k_inc[v]),
                    ])?;
                }
            }
            Solution::Double(s) => {
                w.write_record(["level", "node", "Y", "mZ_norm", "dL", "dU", "active_barrier"])?;
                for v in 0..tree.len() {
                    w.write_record([
                        tree.level_of(v).to_string(),
                        v.to_string(),
                        num(s.y[v]),
                        num(m.mz_norm(v, &s.z[v])),
                        num(s.l_inc[v]),
                        num(s.u_inc[v]),
                        s.active_barrier(v).as_str().to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| CliError::Other(e.to_string()))?;
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

#[derive(Deserialize)]
struct SolutionDocument {
    kind: SolverKind,
    #[serde(rename = "Y")]
    y: Vec<f64>,
    #[serde(rename = "Z")]
    z: Vec<Vec<f64>>,
    #[serde(rename = "dK", default)]
    dk: Option<Vec<f64>>,
    #[serde(rename = "dL", default)]
    dl: Option<Vec<f64>>,
    #[serde(rename = "dU", default)]
    du: Option<Vec<f64>>,
    #[serde(default)]
    #[allow(dead_code)]
    diagnostics: Value,
}

fn checked(name: &str, values: Option<Vec<f64>>, n: usize) -> Result<Vec<f64>, CliError> {
    let values = values.ok_or_else(|| CliError::Invalid(format!("solution: missing `{name}`")))?;
    if values.len() != n {
        return Err(CliError::Invalid(format!(
            "solution: `{name}` has {} entries, the model has {n} nodes",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(CliError::Invalid(format!("solution: `{name}[{i}]` is not finite")));
    }
    Ok(values)
}

/// Loads a solution written by `solve` and checks it against the model.
pub fn load_solution(path: &Path, expected: SolverKind, tree: &FiltrationTree, dim: usize) -> Result<Solution, CliError> {
    let doc: SolutionDocument = parse_json("solution", &read_text(path)?)?;
    if doc.kind != expected {
        return Err(CliError::Invalid(format!(
            "solution kind {:?} does not match the scenario solver {:?}",
            doc.kind, expected
        )));
    }
    let n = tree.len();
    let y = AdaptedProcess::from_vec(checked("Y", Some(doc.y), n)?);
    if doc.z.len() != n {
        return Err(CliError::Invalid(format!("solution: `Z` has {} rows, the model has {n} nodes", doc.z.len())));
    }
    let mut z = Vec::with_capacity(n);
    for (i, row) in doc.z.into_iter().enumerate() {
        if row.len() != dim || row.iter().any(|x| !x.is_finite()) {
            return Err(CliError::Invalid(format!("solution: `Z[{i}]` is not a finite vector of length {dim}")));
        }
        z.push(DVector::from_vec(row));
    }
    let residuals = AdaptedProcess::zeros(tree);
    Ok(match expected {
        SolverKind::Rbsde => {
            let k_inc = PredictableProcess::from_vec(checked("dK", doc.dk, n)?);
            let k = k_inc.cumulative(tree);
            Solution::Single(RbsdeSolution {
                y,
                z,
                k_total: tree.leaves().iter().map(|&v| k[v]).collect(),
                k_inc,
                residuals,
            })
        }
        SolverKind::Drbsde => Solution::Double(DrbsdeSolution {
            y,
            z,
            l_inc: PredictableProcess::from_vec(checked("dL", doc.dl, n)?),
            u_inc: PredictableProcess::from_vec(checked("dU", doc.du, n)?),
            residuals,
        }),
    })
}

/// Writes `bytes` to `out`, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(bytes)
                .map_err(|e| CliError::Io(format!("cannot write to stdout: {e}")))
        }
    }
}
