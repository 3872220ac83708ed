//! Run configuration, the four workflows (check, solve, verify, probe), and
//! artifact emission.
//!
//! Configs are strict JSON (unknown keys rejected). Reports go to JSON,
//! trajectories and curves to CSV with a mandatory header row and `.`
//! decimals. Every run writes a manifest; JSON artifacts embed the manifest
//! hash, CSV artifacts are listed by the manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::coeffs::{
    self, AffinePerturbation, CoefficientSet, Direction, LinearProblemDef, MonotoneConstants,
};
use crate::continuation::{
    continuation_ladder, contraction_probe, Case, CaseSelect, ContinuationConfig, EngineError,
    LadderDiagnostics,
};
use crate::hypotheses::{estimate_constants, PairSampler};
use crate::kernel::RegressionBasis;
use crate::noise::{sample_noise, TimeGrid};
use crate::state::{EnsembleProcess, MarkSpace};
use crate::verify::{ensemble_from_closed_form, residual_report, ResidualReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_HYPOTHESIS: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("invalid value for \"{key}\": {msg}")]
    Invalid { key: String, msg: String },
    #[error("problem definition error: {0}")]
    Problem(String),
    #[error("artifact write failed for {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemChoice {
    Builtin(String),
    Decoupled { decoupled: DecoupledDef },
    Linear { linear: LinearProblemDef },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoupledDef {
    pub theta1: f64,
    #[serde(default)]
    pub phi_t: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationDef {
    pub case: String,
    pub delta: f64,
    pub shrink: f64,
    pub delta_min: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: bool,
}

impl Default for ContinuationDef {
    fn default() -> Self {
        Self {
            case: "auto".into(),
            delta: 0.25,
            shrink: 0.5,
            delta_min: 1.0 / 64.0,
            tol: 1e-4,
            max_iter: 60,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionDef {
    pub degree: usize,
    pub cross_cap: usize,
    pub ridge_factor: f64,
}

impl Default for RegressionDef {
    fn default() -> Self {
        let b = RegressionBasis::default();
        Self {
            degree: b.degree,
            cross_cap: b.cross_cap,
            ridge_factor: b.ridge_factor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckDef {
    pub samples: usize,
    pub radii: Vec<f64>,
}

impl Default for CheckDef {
    fn default() -> Self {
        Self {
            samples: 10_000,
            radii: vec![0.1, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumedConstantsDef {
    pub theta1: f64,
    pub theta2: f64,
    pub beta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub primed: bool,
}

fn default_c() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemChoice,
    #[serde(rename = "T", default)]
    pub horizon: Option<f64>,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub d_h: Option<usize>,
    #[serde(default)]
    pub d_e: Option<usize>,
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    #[serde(default)]
    pub marks: Option<Vec<f64>>,
    #[serde(default)]
    pub constants: Option<AssumedConstantsDef>,
    #[serde(default)]
    pub continuation: ContinuationDef,
    #[serde(default)]
    pub regression: RegressionDef,
    #[serde(default)]
    pub check: CheckDef,
    #[serde(default)]
    pub output: Option<String>,
}

/// Flag overrides; recorded in the manifest.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub paths: Option<usize>,
    pub out: Option<String>,
    pub case: Option<String>,
    pub tol: Option<f64>,
    pub delta: Option<f64>,
    pub workers: Option<usize>,
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    if cfg.steps == 0 {
        return Err(ConfigError::Invalid {
            key: "steps".into(),
            msg: "must be >= 1".into(),
        });
    }
    if cfg.paths == 0 {
        return Err(ConfigError::Invalid {
            key: "paths".into(),
            msg: "must be >= 1".into(),
        });
    }
    if let Some(t) = cfg.horizon {
        if !(t > 0.0) || !t.is_finite() {
            return Err(ConfigError::Invalid {
                key: "T".into(),
                msg: "must be a positive finite number".into(),
            });
        }
    }
    if let Some(m) = &cfg.marks {
        if m.is_empty() || m.iter().any(|w| *w <= 0.0 || !w.is_finite()) {
            return Err(ConfigError::Invalid {
                key: "marks".into(),
                msg: "weights must be positive".into(),
            });
        }
    }
    Ok(())
}

pub fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) {
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(s) = ov.steps {
        cfg.steps = s;
    }
    if let Some(p) = ov.paths {
        cfg.paths = p;
    }
    if let Some(o) = &ov.out {
        cfg.output = Some(o.clone());
    }
    if let Some(c) = &ov.case {
        cfg.continuation.case = c.clone();
    }
    if let Some(t) = ov.tol {
        cfg.continuation.tol = t;
    }
    if let Some(d) = ov.delta {
        cfg.continuation.delta = d;
    }
}

/// Instantiate the problem; returns the coefficient set plus any warnings.
pub fn build_problem(cfg: &RunConfig) -> Result<(CoefficientSet, Vec<String>), ConfigError> {
    let mut warnings = Vec::new();
    let marks = MarkSpace::new(cfg.marks.clone().unwrap_or_else(|| vec![1.0]))
        .map_err(|e| ConfigError::Problem(e.to_string()))?;
    let coeffs = match &cfg.problem {
        ProblemChoice::Builtin(name) => match name.as_str() {
            "example1" => {
                let d_h = cfg.d_h.unwrap_or(1);
                let d_e = cfg.d_e.unwrap_or(1);
                let horizon = cfg.horizon.unwrap_or(1.0);
                let x = cfg.x.clone().unwrap_or_else(|| vec![0.0; d_h]);
                coeffs::example1(d_h, d_e, marks, horizon, x)
                    .map_err(|e| ConfigError::Problem(e.to_string()))?
            }
            "example2" => {
                if cfg.d_h.unwrap_or(1) != 1 || cfg.d_e.unwrap_or(1) != 1 {
                    return Err(ConfigError::Invalid {
                        key: "d_h".into(),
                        msg: "example2 is scalar (d_h = d_e = 1)".into(),
                    });
                }
                let t_star = coeffs::example2_horizon();
                let horizon = cfg.horizon.unwrap_or(t_star);
                if (horizon - t_star).abs() > 1e-12 {
                    warnings.push(format!(
                        "example2: T = {horizon} differs from 3*pi/4 = {t_star}; the \
                         nonuniqueness statement is specific to that horizon"
                    ));
                }
                coeffs::example2(horizon).map_err(|e| ConfigError::Problem(e.to_string()))?
            }
            other => return Err(ConfigError::Problem(format!("unknown builtin \"{other}\""))),
        },
        ProblemChoice::Decoupled { decoupled } => {
            let d_h = cfg.d_h.unwrap_or(1);
            let horizon = cfg.horizon.unwrap_or(1.0);
            let x = cfg.x.clone().unwrap_or_else(|| vec![0.0; d_h]);
            let phi_t = decoupled.phi_t.clone().unwrap_or_else(|| vec![0.0; d_h]);
            coeffs::decoupled(
                decoupled.theta1,
                d_h,
                cfg.d_e.unwrap_or(1),
                cfg.d_e.unwrap_or(1),
                marks,
                horizon,
                x,
                phi_t,
            )
            .map_err(|e| ConfigError::Problem(e.to_string()))?
        }
        ProblemChoice::Linear { linear } => {
            let horizon = cfg.horizon.unwrap_or(1.0);
            let x = cfg.x.clone().unwrap_or_else(|| vec![0.0; linear.d_h]);
            linear
                .to_coefficients(horizon, x)
                .map_err(|e| ConfigError::Problem(e.to_string()))?
        }
    };
    Ok((coeffs, warnings))
}

fn resolve_constants(
    cfg: &RunConfig,
    coeffs: &CoefficientSet,
) -> Result<MonotoneConstants, ConfigError> {
    if let Some(a) = &cfg.constants {
        return MonotoneConstants::new(
            a.theta1,
            a.theta2,
            a.beta,
            a.c,
            a.gamma,
            if a.primed {
                Direction::Primed
            } else {
                Direction::Standard
            },
        )
        .map_err(|e| ConfigError::Problem(e.to_string()));
    }
    coeffs.declared.ok_or_else(|| {
        ConfigError::Problem(
            "problem declares no monotonicity constants; supply them via the \"constants\" key"
                .into(),
        )
    })
}

fn continuation_config(cfg: &RunConfig) -> Result<ContinuationConfig, ConfigError> {
    let case = match cfg.continuation.case.as_str() {
        "auto" => CaseSelect::Auto,
        "1" | "case1" => CaseSelect::Case1,
        "2" | "case2" => CaseSelect::Case2,
        other => {
            return Err(ConfigError::Invalid {
                key: "continuation.case".into(),
                msg: format!("expected auto|1|2, got \"{other}\""),
            })
        }
    };
    Ok(ContinuationConfig {
        case,
        delta_init: cfg.continuation.delta,
        delta_shrink: cfg.continuation.shrink,
        delta_min: cfg.continuation.delta_min,
        picard_tol: cfg.continuation.tol,
        picard_max_iter: cfg.continuation.max_iter,
        warm_start: cfg.continuation.warm_start,
        basis: RegressionBasis {
            degree: cfg.regression.degree,
            cross_cap: cfg.regression.cross_cap,
            ridge_factor: cfg.regression.ridge_factor,
        },
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest_hash: String,
    config: &'a RunConfig,
    overrides: &'a Overrides,
    seed: u64,
    package: &'static str,
    version: &'static str,
    warnings: &'a [String],
    artifacts: Vec<String>,
    elapsed_seconds: f64,
    timestamp_unix: u64,
}

pub fn manifest_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(&(cfg, cfg.seed, env!("CARGO_PKG_VERSION")))
        .expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

struct RunContext {
    out_dir: PathBuf,
    hash: String,
    artifacts: Vec<String>,
    started: std::time::Instant,
}

impl RunContext {
    fn new(cfg: &RunConfig, ov: &Overrides) -> Result<Self, ConfigError> {
        let out_dir = PathBuf::from(
            ov.out
                .clone()
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| "out".into()),
        );
        fs::create_dir_all(&out_dir).map_err(|e| ConfigError::Write {
            path: out_dir.display().to_string(),
            source: e,
        })?;
        Ok(Self {
            out_dir,
            hash: manifest_hash(cfg),
            artifacts: Vec::new(),
            started: std::time::Instant::now(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<(), ConfigError> {
        let path = self.out_dir.join(name);
        fs::write(&path, content).map_err(|e| ConfigError::Write {
            path: path.display().to_string(),
            source: e,
        })?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ConfigError> {
        let wrapped = serde_json::json!({
            "manifest_hash": self.hash,
            "report": value,
        });
        self.write(name, &format!("{:#}\n", wrapped))
    }

    fn finish(
        &mut self,
        cfg: &RunConfig,
        ov: &Overrides,
        warnings: &[String],
    ) -> Result<(), ConfigError> {
        let manifest = Manifest {
            manifest_hash: self.hash.clone(),
            config: cfg,
            overrides: ov,
            seed: cfg.seed,
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            warnings,
            artifacts: self.artifacts.clone(),
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ConfigError::Schema(e.to_string()))?;
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| ConfigError::Write {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// `check`: hypothesis report; exit 2 when no hypothesis package holds.
pub fn run_check(cfg: &RunConfig, ov: &Overrides) -> Result<i32, ConfigError> {
    let (coeffs, warnings) = build_problem(cfg)?;
    let mut ctx = RunContext::new(cfg, ov)?;
    let mut sampler = PairSampler::new(&coeffs, cfg.seed);
    sampler.radii = cfg.check.radii.clone();
    let report = estimate_constants(&coeffs, &sampler, cfg.check.samples)
        .map_err(|e| ConfigError::Problem(e.to_string()))?;
    print!("{}", report.render_table());
    ctx.write_json("hypotheses.json", &report)?;
    ctx.finish(cfg, ov, &warnings)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(if report.any_violation() {
        EXIT_HYPOTHESIS
    } else {
        EXIT_OK
    })
}

fn solution_sample_csv(sol: &EnsembleProcess, max_paths: usize) -> String {
    let grid = sol.grid;
    let d_h = sol.y.dim().2;
    let d_e2 = sol.z.dim().3;
    let d_e1 = sol.zz.dim().3;
    let m = sol.k.dim().2;
    let mut header = String::from("path,t");
    for d in 0..d_h {
        header.push_str(&format!(",y{d}"));
    }
    for d in 0..d_h {
        header.push_str(&format!(",Y{d}"));
    }
    for r in 0..d_h {
        for c in 0..d_e2 {
            header.push_str(&format!(",z{r}_{c}"));
        }
    }
    for r in 0..d_h {
        for c in 0..d_e1 {
            header.push_str(&format!(",Z{r}_{c}"));
        }
    }
    for j in 0..m {
        for d in 0..d_h {
            header.push_str(&format!(",k{j}_{d}"));
        }
    }
    let mut s = header;
    s.push('\n');
    for p in 0..sol.n_paths.min(max_paths) {
        for n in 0..grid.n_nodes() {
            s.push_str(&format!("{p},{}", grid.node(n)));
            for d in 0..d_h {
                s.push_str(&format!(",{}", sol.y[[p, n, d]]));
            }
            for d in 0..d_h {
                s.push_str(&format!(",{}", sol.yy[[p, n, d]]));
            }
            for r in 0..d_h {
                for c in 0..d_e2 {
                    s.push_str(&format!(",{}", sol.z[[p, n, r, c]]));
                }
            }
            for r in 0..d_h {
                for c in 0..d_e1 {
                    s.push_str(&format!(",{}", sol.zz[[p, n, r, c]]));
                }
            }
            for j in 0..m {
                for d in 0..d_h {
                    s.push_str(&format!(",{}", sol.k[[p, n, j, d]]));
                }
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Serialize)]
struct SolveSummary {
    final_alpha: f64,
    m2_norm: f64,
    diagnostics: LadderDiagnostics,
}

fn solve_inner(
    cfg: &RunConfig,
    coeffs: &CoefficientSet,
) -> Result<Result<(EnsembleProcess, LadderDiagnostics), EngineError>, ConfigError> {
    let constants = resolve_constants(cfg, coeffs)?;
    let cont = continuation_config(cfg)?;
    let grid = TimeGrid::new(coeffs.spec.horizon, cfg.steps)
        .map_err(|e| ConfigError::Problem(e.to_string()))?;
    let noise = sample_noise(cfg.seed, cfg.paths, grid, &coeffs.spec);
    Ok(continuation_ladder(coeffs, &constants, &cont, &noise))
}

/// `solve`: continuation ladder, trajectory sample, diagnostics.
pub fn run_solve(cfg: &RunConfig, ov: &Overrides) -> Result<i32, ConfigError> {
    let (coeffs, warnings) = build_problem(cfg)?;
    let mut ctx = RunContext::new(cfg, ov)?;
    match solve_inner(cfg, &coeffs)? {
        Ok((sol, diag)) => {
            let m2 = sol.m2_sq_norm().map(|v| v.sqrt()).unwrap_or(f64::NAN);
            let summary = SolveSummary {
                final_alpha: diag.rungs.last().map(|r| r.alpha).unwrap_or(f64::NAN),
                m2_norm: m2,
                diagnostics: diag,
            };
            ctx.write_json("ladder.json", &summary)?;
            ctx.write("trace.csv", &summary.diagnostics.trace_csv())?;
            ctx.write("solution_sample.csv", &solution_sample_csv(&sol, 10))?;
            ctx.finish(cfg, ov, &warnings)?;
            println!(
                "solve: reached alpha = {}, M2 norm {m2:.6e}",
                summary.final_alpha
            );
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("solver failure: {e}");
            ctx.write_json(
                "solver_error.json",
                &serde_json::json!({ "error": e.to_string() }),
            )?;
            ctx.finish(cfg, ov, &warnings)?;
            Ok(EXIT_SOLVER)
        }
    }
}

#[derive(Serialize)]
struct VerifySummary {
    subject: String,
    sup_forward: f64,
    sup_backward: f64,
    terminal_defect: f64,
    report: ResidualReport,
}

/// `verify`: residual report for a closed form or a fresh solve.
pub fn run_verify(
    cfg: &RunConfig,
    ov: &Overrides,
    closed_form: Option<&str>,
) -> Result<i32, ConfigError> {
    let (coeffs, warnings) = build_problem(cfg)?;
    let mut ctx = RunContext::new(cfg, ov)?;
    let grid = TimeGrid::new(coeffs.spec.horizon, cfg.steps)
        .map_err(|e| ConfigError::Problem(e.to_string()))?;
    let noise = sample_noise(cfg.seed, cfg.paths, grid, &coeffs.spec);

    let (subject, ens) = match closed_form {
        Some(name) => {
            let cf = coeffs.closed_form(name).ok_or_else(|| {
                ConfigError::Problem(format!(
                    "problem \"{}\" has no closed form named \"{name}\"",
                    coeffs.name
                ))
            })?;
            (
                format!("closed-form:{name}"),
                ensemble_from_closed_form(&coeffs, grid, cfg.paths, |t| cf.eval(t)),
            )
        }
        None => match solve_inner(cfg, &coeffs)? {
            Ok((sol, _)) => ("ladder-solution".to_string(), sol),
            Err(e) => {
                eprintln!("solver failure: {e}");
                ctx.write_json(
                    "solver_error.json",
                    &serde_json::json!({ "error": e.to_string() }),
                )?;
                ctx.finish(cfg, ov, &warnings)?;
                return Ok(EXIT_SOLVER);
            }
        },
    };

    match residual_report(&coeffs, &ens, &noise, &coeffs.spec.x_array()) {
        Ok(rep) => {
            println!(
                "verify[{subject}]: sup forward {:.6e}, sup backward {:.6e}, terminal {:.6e}",
                rep.sup_forward, rep.sup_backward, rep.terminal_defect
            );
            ctx.write("residual_curve.csv", &rep.curve_csv())?;
            let summary = VerifySummary {
                subject,
                sup_forward: rep.sup_forward,
                sup_backward: rep.sup_backward,
                terminal_defect: rep.terminal_defect,
                report: rep,
            };
            ctx.write_json("residuals.json", &summary)?;
            ctx.finish(cfg, ov, &warnings)?;
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("verification failure: {e}");
            ctx.finish(cfg, ov, &warnings)?;
            Ok(EXIT_SOLVER)
        }
    }
}

/// `probe`: contraction-ratio table over an alpha grid.
pub fn run_probe(
    cfg: &RunConfig,
    ov: &Overrides,
    n_pairs: usize,
    alphas: Option<Vec<f64>>,
) -> Result<i32, ConfigError> {
    let (coeffs, warnings) = build_problem(cfg)?;
    let constants = resolve_constants(cfg, &coeffs)?;
    let cont = continuation_config(cfg)?;
    let case = match cont.case {
        CaseSelect::Auto => crate::continuation::select_case(&constants)
            .map_err(|e| ConfigError::Problem(e.to_string()))?,
        CaseSelect::Case1 => Case::Case1,
        CaseSelect::Case2 => Case::Case2,
    };
    let mut ctx = RunContext::new(cfg, ov)?;
    let grid = TimeGrid::new(coeffs.spec.horizon, cfg.steps)
        .map_err(|e| ConfigError::Problem(e.to_string()))?;
    let noise = sample_noise(cfg.seed, cfg.paths, grid, &coeffs.spec);
    let alphas =
        alphas.unwrap_or_else(|| vec![cont.delta_init.min(1.0), 0.1, 0.25, 0.5, 0.75, 1.0]);

    let mut csv = String::from("alpha,pair,ratio\n");
    let mut rows = Vec::new();
    let pert = AffinePerturbation::zero();
    for (ai, &alpha) in alphas.iter().enumerate() {
        for pair in 0..n_pairs {
            let s1 = cfg.seed
                ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul((ai * n_pairs + pair) as u64 + 1));
            let v1 = EnsembleProcess::random(&coeffs.spec, grid, cfg.paths, s1, 1.0);
            let v2 = EnsembleProcess::random(&coeffs.spec, grid, cfg.paths, s1 ^ 0xabcd_ef01, 1.0);
            match contraction_probe(
                &coeffs,
                &constants,
                alpha,
                &pert,
                &v1,
                &v2,
                &noise,
                case,
                &cont.basis,
            ) {
                Ok(r) => {
                    csv.push_str(&format!("{alpha},{pair},{r}\n"));
                    rows.push(serde_json::json!({ "alpha": alpha, "pair": pair, "ratio": r }));
                }
                Err(e) => {
                    eprintln!("probe failure at alpha = {alpha}: {e}");
                    ctx.finish(cfg, ov, &warnings)?;
                    return Ok(EXIT_SOLVER);
                }
            }
        }
    }
    ctx.write("probe.csv", &csv)?;
    ctx.write_json("probe.json", &rows)?;
    ctx.finish(cfg, ov, &warnings)?;
    println!("probe: {} ratios over alphas {:?}", rows.len(), alphas);
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_with_defaults() {
        let cfg = parse_config_str(
            r#"{"problem": "example1", "T": 1.0, "steps": 100, "paths": 10000, "seed": 1}"#,
        )
        .unwrap();
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.continuation.delta, 0.25);
        assert_eq!(cfg.regression.degree, 2);
        let (coeffs, warnings) = build_problem(&cfg).unwrap();
        assert_eq!(coeffs.name, "example1");
        assert!(warnings.is_empty());
    }

    #[test]
    fn zero_steps_error_names_key() {
        let err =
            parse_config_str(r#"{"problem": "example1", "steps": 0, "paths": 10, "seed": 1}"#)
                .unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config_str(
            r#"{"problem": "example1", "steps": 10, "paths": 10, "seed": 1, "bogus": 3}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn example2_horizon_warning() {
        let cfg = parse_config_str(
            r#"{"problem": "example2", "T": 1.0, "steps": 10, "paths": 10, "seed": 1}"#,
        )
        .unwrap();
        let (_, warnings) = build_problem(&cfg).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("3*pi/4"));
    }

    #[test]
    fn decoupled_problem_choice() {
        let cfg = parse_config_str(
            r#"{"problem": {"decoupled": {"theta1": 0.3, "phi_t": [0.7]}},
                "T": 1.0, "steps": 10, "paths": 10, "seed": 1, "x": [1.0]}"#,
        )
        .unwrap();
        let (coeffs, _) = build_problem(&cfg).unwrap();
        assert_eq!(coeffs.name, "decoupled");
        assert_eq!(coeffs.declared.unwrap().theta1, 0.3);
    }

    #[test]
    fn manifest_hash_is_config_stable() {
        let a = parse_config_str(r#"{"problem": "example1", "steps": 10, "paths": 10, "seed": 1}"#)
            .unwrap();
        let b = parse_config_str(r#"{"problem": "example1", "steps": 10, "paths": 10, "seed": 1}"#)
            .unwrap();
        assert_eq!(manifest_hash(&a), manifest_hash(&b));
        let c = parse_config_str(r#"{"problem": "example1", "steps": 10, "paths": 10, "seed": 2}"#)
            .unwrap();
        assert_ne!(manifest_hash(&a), manifest_hash(&c));
    }
}
