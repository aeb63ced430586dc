use std::path::Path;

use log::info;
use rbsde_core::drbsde::{picard_solve_dr, solve_fixed_generator_dr};
use rbsde_core::estimates::EstimateReport;
use rbsde_core::generator::{freeze_generator, ShiftTransform};
use rbsde_core::oracle::{brute_force_dynkin, brute_force_snell, OracleComparison};
use rbsde_core::rbsde::{picard_solve, solve_fixed_generator, PicardDiagnostics};
use rbsde_core::scenario::{Instance, Overrides, Problem, Solution, SolverKind};
use rbsde_core::Error;

use crate::io;
use crate::{Cli, CliError, Command};

/// Largest contraction ratio accepted from the second iterate on.
pub const RATIO_BOUND: f64 = 0.6;
/// Largest DP/oracle discrepancy accepted by `oracle-compare`.
pub const ORACLE_TOL: f64 = 1e-9;

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Invalid("--config is required".into()))?;
    match &cli.command {
        Command::Solve => solve(cli, config),
        Command::Verify { solution } => verify(cli, config, solution.as_deref()),
        Command::OracleCompare { cap } => oracle_compare(cli, config, *cap),
        Command::Convergence => convergence(cli, config),
        Command::BuildModel => build_model(cli, config),
    }
}

fn instance(cli: &Cli, config: &Path) -> Result<Instance, CliError> {
    let (scenario, base) = io::load_scenario(config)?;
    let overrides = Overrides {
        tol: cli.tol,
        max_iter: cli.max_iter,
        beta: cli.beta,
        seed: cli.seed,
    };
    Ok(scenario.instantiate(&base, &overrides)?)
}

fn solve(cli: &Cli, config: &Path) -> Result<(), CliError> {
    let inst = instance(cli, config)?;
    let (sol, diag) = inst.solve()?;
    if let Some(dir) = &cli.out {
        io::write_file(&dir.join("solution.json"), io::solution_json(&sol, &diag)?.as_bytes())?;
        io::write_file(&dir.join("solution.csv"), &io::solution_csv(&inst.model.tree, &inst.model.m, &sol)?)?;
    }
    let residual = match &sol {
        Solution::Single(s) => s.max_residual(),
        Solution::Double(s) => s.max_residual(),
    };
    println!("root value: {}", sol.root_value());
    println!("iterations: {}", diag.iterations);
    println!("max defect: {residual:e}");
    println!("fixed point defect: {:e}", diag.fixed_point_defect);
    Ok(())
}

fn estimates_csv(reports: &[EstimateReport]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = || -> csv::Result<()> {
        w.write_record(["name", "lhs", "rhs", "ratio", "holds"])?;
        for r in reports {
            w.write_record([
                r.name.clone(),
                io::num(r.lhs),
                io::num(r.rhs),
                io::num(r.ratio),
                r.holds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| CliError::Other(e.to_string()))?;
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

fn verify(cli: &Cli, config: &Path, solution: Option<&Path>) -> Result<(), CliError> {
    let inst = instance(cli, config)?;
    let sol = match solution {
        Some(path) => {
            let kind = match inst.problem {
                Problem::Single(_) => SolverKind::Rbsde,
                Problem::Double(_) => SolverKind::Drbsde,
            };
            io::load_solution(path, kind, &inst.model.tree, inst.model.dim())?
        }
        None => inst.solve()?.0,
    };
    let reports = inst.estimate_suite(&sol, cli.slack_factor)?;
    for r in &reports {
        info!("{}: lhs {:e}, rhs {:e}, ratio {:e}, holds {}", r.name, r.lhs, r.rhs, r.ratio, r.holds);
    }
    io::emit(cli.out.as_deref(), &estimates_csv(&reports)?)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.holds).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("estimates failed: {}", failed.join(", "))))
    }
}

fn oracle_compare(cli: &Cli, config: &Path, cap: u128) -> Result<(), CliError> {
    let inst = instance(cli, config)?;
    let (tree, m) = (&inst.model.tree, &inst.model.m);
    // The oracles have no D term, so compare on the shifted problem.
    let d0 = inst.problem.d_proc()[tree.root()];
    let (dp, lower, upper, enumerated) = match &inst.problem {
        Problem::Single(data) => {
            let data = data.shift_transform(tree);
            let (sol, _) = picard_solve(tree, m, &data, &inst.options)?;
            let g_path = freeze_generator(tree, &data.g, &sol.y, &sol.z);
            let dp = solve_fixed_generator(tree, m, &g_path, &data.eta, &data.xi)?.root_value();
            let o = brute_force_snell(tree, &g_path, &data.xi, &data.eta, cap)?;
            (dp, o.value, o.value, o.enumerated)
        }
        Problem::Double(data) => {
            let data = data.shift_transform(tree);
            let (sol, _) = picard_solve_dr(tree, m, &data, &inst.options)?;
            let g_path = freeze_generator(tree, &data.g, &sol.y, &sol.z);
            let dp = solve_fixed_generator_dr(tree, m, &g_path, &data.eta, &data.xi, &data.zeta)?.root_value();
            let o = brute_force_dynkin(tree, &g_path, &data.xi, &data.zeta, &data.eta, cap)?;
            (dp, o.lower, o.upper, o.enumerated)
        }
    };
    let cmp = OracleComparison {
        dp: dp + d0,
        oracle_lower: lower + d0,
        oracle_upper: upper + d0,
        discrepancy: (dp - lower).abs().max((dp - upper).abs()),
    };
    println!("dp: {}", cmp.dp);
    println!("oracle lower: {}", cmp.oracle_lower);
    println!("oracle upper: {}", cmp.oracle_upper);
    println!("discrepancy: {:e}", cmp.discrepancy);
    println!("enumerated: {enumerated}");
    if let Some(out) = &cli.out {
        let text = serde_json::to_string_pretty(&cmp).map_err(|e| CliError::Other(e.to_string()))?;
        io::write_file(out, text.as_bytes())?;
    }
    if cmp.discrepancy <= ORACLE_TOL {
        Ok(())
    } else {
        Err(CliError::Failed(format!("discrepancy {:e} exceeds {ORACLE_TOL:e}", cmp.discrepancy)))
    }
}

/// Rows `n = 1..` of `diffs`; the ratio is blank when the previous
/// difference is zero.
fn convergence_csv(diag: &PicardDiagnostics) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = || -> csv::Result<()> {
        w.write_record(["iteration", "diff", "log_diff", "plain_diff", "ratio"])?;
        for n in 1..diag.diffs.len() {
            let ratio = match diag.log_diffs[n - 1] {
                prev if prev == f64::NEG_INFINITY => String::new(),
                prev => io::num((diag.log_diffs[n] - prev).exp()),
            };
            w.write_record([
                n.to_string(),
                io::num(diag.diffs[n]),
                io::num(diag.log_diffs[n]),
                io::num(diag.plain_diffs[n]),
                ratio,
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| CliError::Other(e.to_string()))?;
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

fn convergence(cli: &Cli, config: &Path) -> Result<(), CliError> {
    let inst = instance(cli, config)?;
    let diag = match inst.solve() {
        Ok((_, diag)) => diag,
        Err(Error::NotConverged(diag)) => {
            io::emit(cli.out.as_deref(), &convergence_csv(&diag)?)?;
            return Err(CliError::Core(Error::NotConverged(diag)));
        }
        Err(e) => return Err(e.into()),
    };
    io::emit(cli.out.as_deref(), &convergence_csv(&diag)?)?;
    let worst = diag.late_ratios().into_iter().fold(0.0, f64::max);
    if cli.out.is_some() {
        println!("iterations: {}", diag.iterations);
        println!("max ratio from iterate 2: {worst}");
    }
    if worst <= RATIO_BOUND {
        Ok(())
    } else {
        Err(CliError::Failed(format!("contraction ratio {worst} exceeds {RATIO_BOUND}")))
    }
}

fn build_model(cli: &Cli, config: &Path) -> Result<(), CliError> {
    let (model_config, base) = io::load_model_config(config)?;
    let model = model_config.build(&base, cli.seed)?;
    let text = serde_json::to_string_pretty(&model.to_document()).map_err(|e| CliError::Other(e.to_string()))?;
    io::emit(cli.out.as_deref(), format!("{text}\n").as_bytes())
}
