//! One function per command. Each returns the artifacts to write; the
//! dispatcher in `main` owns the output directory and the exit code.

use std::fmt::Write as _;

use mvsde::measure::second_moment;
use mvsde::sde::noise::tags;
use mvsde::sde::{derive_seed, InitSampler};
use mvsde::{
    directional_derivative, finite_difference_oracle, malliavin_limit_all, picard_solve, poc_gap,
    run_cross_decay_study, run_diagonal_convergence_study, run_mean_field_psi_study, run_moment_bound_study,
    run_poc_study, sample_noise, simulate_coupled, simulate_frozen_flow, wasserstein2, Model, OracleSystem,
    PicardOptions, PicardResult, StudyResult,
};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{Command, RunConfig};

pub struct Artifacts {
    pub csv: Vec<u8>,
    pub dat: Vec<u8>,
    pub meta: Value,
    pub passed: bool,
    /// Human-readable verdict lines for standard output.
    pub summary: Vec<String>,
}

/// A run that failed after producing something worth keeping.
pub struct Aborted {
    pub partial: Option<Box<Artifacts>>,
    pub error: mvsde::Error,
}

impl From<mvsde::Error> for Aborted {
    fn from(error: mvsde::Error) -> Self {
        match error {
            mvsde::Error::StudyAborted { partial, source } => Aborted {
                partial: Some(Box::new(study_artifacts(&partial, None))),
                error: *source,
            },
            error => Aborted { partial: None, error },
        }
    }
}

fn meta(cfg: &RunConfig, checks: Value, info: Map<String, Value>, passed: bool) -> Value {
    json!({
        "command": cfg.command,
        "seed": cfg.seed,
        "config": cfg,
        "versions": versions(),
        "checks": checks,
        "info": info,
        "passed": passed,
    })
}

pub fn versions() -> Value {
    json!({ "mvsde": mvsde::VERSION, "mvsde-cli": env!("CARGO_PKG_VERSION") })
}

pub fn run(cfg: &RunConfig) -> Result<Artifacts, Aborted> {
    match cfg.command {
        Command::Simulate => simulate(cfg),
        Command::Picard => picard(cfg),
        Command::MalliavinCheck => malliavin_check(cfg),
        Command::Poc => study(cfg, run_poc_study(&cfg.study())?),
        Command::CrossDecay => study(cfg, run_cross_decay_study(&cfg.study())?),
        Command::Psi => study(cfg, run_mean_field_psi_study(&cfg.study())?),
        Command::Diagonal => study(cfg, run_diagonal_convergence_study(&cfg.study())?),
        Command::Moments => study(cfg, run_moment_bound_study(&cfg.study())?),
    }
}

fn study(cfg: &RunConfig, result: StudyResult) -> Result<Artifacts, Aborted> {
    Ok(study_artifacts(&result, Some(cfg)))
}

fn study_artifacts(result: &StudyResult, cfg: Option<&RunConfig>) -> Artifacts {
    let mut csv = Vec::new();
    let mut dat = Vec::new();
    // writing into a Vec cannot fail
    result.write_csv(&mut csv).expect("in-memory write");
    result.write_gnuplot(&mut dat).expect("in-memory write");
    let mut meta = match cfg {
        Some(cfg) => result.meta_json(cfg, cfg.seed),
        None => result.meta_json(&Value::Null, 0),
    };
    meta["versions"] = versions();
    let mut summary: Vec<String> = result
        .fits
        .iter()
        .map(|f| format!("fit {}: slope {:.4} ± {:.4}", f.name, f.slope, f.half_width))
        .collect();
    summary.extend(result.checks.iter().map(|c| {
        format!(
            "{} {}: {} (requires {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.requirement
        )
    }));
    Artifacts {
        csv,
        dat,
        meta,
        passed: result.passed,
        summary,
    }
}

fn reference_flow(cfg: &RunConfig, samples: usize) -> mvsde::Result<PicardResult<f64>> {
    let mut opts = PicardOptions::new(cfg.scheme());
    opts.tol = cfg.picard_tol;
    opts.max_iter = cfg.picard_max_iter;
    picard_solve(
        &cfg.model(),
        &cfg.init,
        samples,
        &cfg.grid(),
        &opts,
        derive_seed(cfg.seed, tags::FLOW, 0),
    )
}

fn picard_info(res: &PicardResult<f64>, info: &mut Map<String, Value>) {
    info.insert("picard_iterations".into(), json!(res.iterations));
    info.insert("picard_converged".into(), json!(res.converged));
    info.insert("picard_tol".into(), json!(res.tol));
    info.insert("picard_residuals".into(), json!(res.residuals));
}

/// Interacting system and its decoupled partner on shared initial states
/// and noise, summarised per grid node.
fn simulate(cfg: &RunConfig) -> Result<Artifacts, Aborted> {
    let model = cfg.model();
    let grid = cfg.grid();
    let n = cfg.particles;
    let flow = reference_flow(cfg, cfg.reference_samples.unwrap_or(8 * n))?;
    let x0: Vec<f64> = cfg
        .init
        .sample(n, model.dim_state(), derive_seed(cfg.seed, tags::INIT, 0));
    let noise = sample_noise(&grid, n, model.dim_noise(), derive_seed(cfg.seed, tags::NOISE, 0))?;
    let coupled = simulate_coupled(&model, &flow.flow, &noise, &x0, cfg.scheme())?;

    let mut csv = String::from("t,ips_mean,ips_second_moment,non_ips_mean,non_ips_second_moment,flow_mean,w2\n");
    let mut dat =
        String::from("# simulate\n# t ips_mean ips_second_moment non_ips_mean non_ips_second_moment flow_mean w2\n");
    for k in 0..grid.nodes() {
        let x = coupled.ips.measure_at(k)?;
        let z = coupled.non_ips.measure_at(k)?;
        let row = [
            grid.time(k),
            x.mean()[0],
            second_moment(&x),
            z.mean()[0],
            second_moment(&z),
            flow.flow.at(k).mean()[0],
            wasserstein2(&x, &z)?.value,
        ];
        let text: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(csv, "{}", text.join(",")).expect("string write");
        writeln!(dat, "{}", text.join(" ")).expect("string write");
    }
    let gap = poc_gap(&coupled)?;
    let mut info = Map::new();
    info.insert("particles".into(), json!(n));
    info.insert("scheme".into(), json!(cfg.scheme().name()));
    info.insert("poc_gap_max".into(), json!(gap.max));
    picard_info(&flow, &mut info);
    Ok(Artifacts {
        csv: csv.into_bytes(),
        dat: dat.into_bytes(),
        meta: meta(cfg, json!([]), info, true),
        passed: true,
        summary: vec![format!("max_i sup_t |X^i − Z^i|² = {:.4e} with N = {n}", gap.max)],
    })
}

fn picard(cfg: &RunConfig) -> Result<Artifacts, Aborted> {
    let res = reference_flow(cfg, cfg.samples)?;
    let grid = cfg.grid();
    let mut dat = String::from("# picard flow\n# t mean second_moment\n");
    for k in 0..grid.nodes() {
        let mu = res.flow.at(k);
        writeln!(dat, "{} {} {}", grid.time(k), mu.mean()[0], second_moment(mu)).expect("string write");
    }
    let mut info = Map::new();
    info.insert("samples".into(), json!(cfg.samples));
    picard_info(&res, &mut info);
    let check = json!([{
        "name": "converged",
        "value": res.residuals.last(),
        "requirement": format!("final residual ≤ {}", res.tol),
        "passed": res.converged,
    }]);
    let verdict = if res.converged { "PASS" } else { "FAIL" };
    Ok(Artifacts {
        csv: res.residual_csv().into_bytes(),
        dat: dat.into_bytes(),
        meta: meta(cfg, check, info, res.converged),
        passed: res.converged,
        summary: vec![format!(
            "{verdict} converged: {} iterations, final residual {:.3e}, tolerance {:.3e}",
            res.iterations,
            res.residuals.last().copied().unwrap_or(f64::NAN),
            res.tol
        )],
    })
}

/// Piecewise-constant direction on ten blocks, values in `[0.5, 1.5)`.
fn direction(cfg: &RunConfig) -> Vec<f64> {
    let steps = cfg.steps;
    let blocks = steps.min(10);
    let levels: Vec<f64> =
        InitSampler::Uniform { low: 0.5, high: 1.5 }.sample(blocks, 1, derive_seed(cfg.seed, tags::DIRECTION, 0));
    (0..steps).map(|k| levels[k * blocks / steps]).collect()
}

/// `⟨D Z_T, h⟩` from the variational equation against the central
/// difference of `Z_T` under the Wiener shift `ε·∫h`.
fn malliavin_check(cfg: &RunConfig) -> Result<Artifacts, Aborted> {
    let model = cfg.model();
    let grid = cfg.grid();
    let scheme = cfg.scheme();
    let paths = cfg.oracle_paths;
    let flow = reference_flow(cfg, cfg.samples)?;
    let x0: Vec<f64> = cfg
        .init
        .sample(paths, model.dim_state(), derive_seed(cfg.seed, tags::INIT, 0));
    let noise = sample_noise(&grid, paths, model.dim_noise(), derive_seed(cfg.seed, tags::NOISE, 0))?;
    let z = simulate_frozen_flow(&model, &flow.flow, &x0, &noise, scheme)?;
    let h = direction(cfg);
    let last = grid.steps();
    let d = model.dim_state();

    let rows: Vec<(f64, f64)> = (0..paths)
        .into_par_iter()
        .map(|p| -> mvsde::Result<(f64, f64)> {
            let fields = malliavin_limit_all(&model, scheme, z.path(p), &flow.flow, noise.stream(p))?;
            let variational = directional_derivative(&fields, &h, 0)?[last * d];
            let shifted = finite_difference_oracle(
                &model,
                scheme,
                OracleSystem::FrozenFlow(&flow.flow),
                &x0,
                &noise,
                p,
                0,
                &h,
                cfg.epsilon,
            )?;
            Ok((variational, shifted.state(p, last)[0]))
        })
        .collect::<mvsde::Result<_>>()?;

    let mut csv = String::from("path,variational,finite_difference,rel_error\n");
    let mut dat = String::from("# malliavin-check\n# path variational finite_difference rel_error\n");
    let mut worst = 0.0f64;
    for (p, &(var, fd)) in rows.iter().enumerate() {
        let rel = (var - fd).abs() / fd.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        writeln!(csv, "{p},{var},{fd},{rel}").expect("string write");
        writeln!(dat, "{p} {var} {fd} {rel}").expect("string write");
    }
    let passed = worst <= cfg.oracle_tolerance;
    let mut info = Map::new();
    info.insert("scheme".into(), json!(scheme.name()));
    info.insert("max_rel_error".into(), json!(worst));
    picard_info(&flow, &mut info);
    let check = json!([{
        "name": "oracle_agreement",
        "value": worst,
        "requirement": format!("max relative error ≤ {}", cfg.oracle_tolerance),
        "passed": passed,
    }]);
    Ok(Artifacts {
        csv: csv.into_bytes(),
        dat: dat.into_bytes(),
        meta: meta(cfg, check, info, passed),
        passed,
        summary: vec![format!(
            "{} oracle_agreement: max relative error {worst:.3e} over {paths} paths (requires ≤ {})",
            if passed { "PASS" } else { "FAIL" },
            cfg.oracle_tolerance
        )],
    })
}
