//! Configuration, synthetic data, file formats and the four pipeline
//! commands (`generate`, `invert`, `validate`, `report`).
//!
//! Files written into an output directory:
//!
//! | file                      | content                                   |
//! |---------------------------|-------------------------------------------|
//! | `config.toml`             | resolved configuration                    |
//! | `observations.json`       | [`ObservationFile`]                       |
//! | `truth_field.csv`         | `elem_ix,elem_iy,value` (log-modulus)     |
//! | `truth_displacements.csv` | `node_ix,node_iy,ux,uy`                   |
//! | `run_trace.json`          | [`RunTrace`]                              |
//! | `posterior_mean.csv`      | field CSV                                 |
//! | `posterior_std.csv`       | field CSV                                 |
//! | `lambda.csv`              | `index,lambda0,lambda`                    |
//! | `elbo_trace.csv`          | one row per basis stage                   |
//! | `info_gain.csv`           | `d_theta,info_gain,kl_numerator`          |
//! | `mu_trace.csv`            | one row per mean iteration                |
//! | `is_report.json`          | [`ValidationOutput`]                      |
//! | `is_weights.csv`          | `sample,log_weight,normalized_weight`     |

mod config;
pub mod float;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{
    BcConfig, MeshConfig, NoiseConfig, OutputConfig, PhantomConfig, RunConfig, Shape, SmoothingConfig,
    SolverConfig, ValidationConfig,
};

use crate::driver::{run, RunTrace};
use crate::error::{Error, Result};
use crate::fem::{observe, MaterialField, Mesh2D, PlaneStrainSolver};
use crate::forward::{ElastographyModel, ForwardModel};
use crate::importance::{compare_vb_is, run_is, Comparison, ISReport};
use crate::mean::SmoothPrior;
use crate::vb::posterior_psi_stats;

pub const OBSERVATION_SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.toml";
pub const OBSERVATION_FILE: &str = "observations.json";
pub const TRUTH_FIELD_FILE: &str = "truth_field.csv";
pub const TRUTH_DISPLACEMENT_FILE: &str = "truth_displacements.csv";
pub const TRACE_FILE: &str = "run_trace.json";
pub const MEAN_FILE: &str = "posterior_mean.csv";
pub const STD_FILE: &str = "posterior_std.csv";
pub const LAMBDA_FILE: &str = "lambda.csv";
pub const ELBO_FILE: &str = "elbo_trace.csv";
pub const INFO_GAIN_FILE: &str = "info_gain.csv";
pub const MU_TRACE_FILE: &str = "mu_trace.csv";
pub const IS_REPORT_FILE: &str = "is_report.json";
pub const IS_WEIGHTS_FILE: &str = "is_weights.csv";

/// Noisy observations of the free displacement dofs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFile {
    pub schema_version: u32,
    pub d_y: usize,
    pub observed_dofs: Vec<usize>,
    pub values: Vec<f64>,
    /// Noise-free model outputs, kept for validation only.
    pub noise_free: Vec<f64>,
    pub seed: u64,
    /// Target SNR; absent for noise-free data.
    pub snr: Option<f64>,
    pub noise_std: f64,
    /// `1 / noise_std^2`; absent (infinite) for noise-free data.
    pub tau_true: Option<f64>,
}

impl ObservationFile {
    pub fn validate(&self) -> Result<()> {
        let n = self.d_y;
        if self.observed_dofs.len() != n || self.values.len() != n || self.noise_free.len() != n {
            return Err(Error::InvalidInput("observation file lengths disagree with d_y".into()));
        }
        if let Some(t) = self.tau_true {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidInput(format!("tau_true must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// `mean(signal^2) / mean(noise^2)` of the stored realization.
    pub fn empirical_snr(&self) -> Option<f64> {
        let n = self.d_y as f64;
        let signal = self.noise_free.iter().map(|y| y * y).sum::<f64>() / n;
        let noise = self
            .values
            .iter()
            .zip(&self.noise_free)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        (noise > 0.0).then(|| signal / noise)
    }

    pub fn yhat(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// Everything needed to run inference for one configuration.
#[derive(Debug)]
pub struct Problem {
    pub mesh: Mesh2D,
    pub truth: MaterialField,
    pub model: ElastographyModel,
    pub prior: Option<SmoothPrior>,
    pub mu0: DVector<f64>,
}

impl Problem {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = cfg.mesh()?;
        let truth = cfg.phantom_field(&mesh)?;
        let start = cfg.initial_field(&truth)?;
        let solver = PlaneStrainSolver::new(mesh, cfg.boundary(&mesh), cfg.mesh.poisson)?;
        let model = ElastographyModel::observing_free_dofs(solver, start.clone())?;
        let prior = if cfg.solver.smoothing.enabled {
            let pairs = SmoothPrior::pairs_for_mesh(&mesh, &start)?;
            Some(SmoothPrior::new(pairs, cfg.solver.smoothing.a_phi, cfg.solver.smoothing.b_phi)?)
        } else {
            None
        };
        let mu0 = model.restrict(&start);
        Ok(Self {
            mesh,
            truth,
            model,
            prior,
            mu0,
        })
    }

    /// Full per-element field with the free entries replaced by `free`.
    pub fn full_field(&self, free: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.template().with_free_values(free)?.psi)
    }

    /// Per-element posterior standard deviation; clamped elements get 0.
    pub fn full_std(&self, free: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.n_elements()];
        for (&k, &s) in self.model.free_elements().iter().zip(free) {
            out[k] = s;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub observations: ObservationFile,
    pub truth: MaterialField,
    pub displacements: Vec<f64>,
}

/// Solve on the phantom and add i.i.d. Gaussian noise with variance
/// `mean(y^2) / snr`.
pub fn generate_data(cfg: &RunConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let mesh = cfg.mesh()?;
    let truth = cfg.phantom_field(&mesh)?;
    let solver = PlaneStrainSolver::new(mesh, cfg.boundary(&mesh), cfg.mesh.poisson)?;
    let u = solver.solve(&truth)?.u;
    let observed = solver.free_dofs().to_vec();
    let clean = observe(&u, &observed)?;
    let n = clean.len();
    let power = clean.iter().map(|y| y * y).sum::<f64>() / n as f64;

    let (values, noise_std, tau_true) = match cfg.noise.snr {
        None => (clean.clone(), 0.0, None),
        Some(snr) => {
            let sigma = (power / snr).sqrt();
            if !(sigma > 0.0) {
                return Err(Error::InvalidInput("noise-free signal has zero power".into()));
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numerical(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
            let noisy = clean.iter().map(|y| y + normal.sample(&mut rng)).collect();
            (noisy, sigma, Some(1.0 / (sigma * sigma)))
        }
    };
    Ok(GeneratedData {
        observations: ObservationFile {
            schema_version: OBSERVATION_SCHEMA_VERSION,
            d_y: n,
            observed_dofs: observed,
            values,
            noise_free: clean,
            seed: cfg.noise.seed,
            snr: cfg.noise.snr,
            noise_std,
            tau_true,
        },
        truth,
        displacements: u,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub elem_ix: usize,
    pub elem_iy: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementRow {
    pub node_ix: usize,
    pub node_iy: usize,
    pub ux: f64,
    pub uy: f64,
}

pub fn write_field_csv(path: &Path, mesh: &Mesh2D, values: &[f64]) -> Result<()> {
    if values.len() != mesh.n_elements() {
        return Err(Error::DimensionMismatch {
            what: "field length",
            expected: mesh.n_elements(),
            got: values.len(),
        });
    }
    write_rows(
        path,
        values.iter().enumerate().map(|(k, &value)| {
            let (elem_ix, elem_iy) = mesh.element_grid(k);
            FieldRow {
                elem_ix,
                elem_iy,
                value,
            }
        }),
    )
}

pub fn read_field_csv(path: &Path) -> Result<Vec<FieldRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

pub fn write_displacement_csv(path: &Path, mesh: &Mesh2D, u: &[f64]) -> Result<()> {
    if u.len() != mesh.n_dofs() {
        return Err(Error::DimensionMismatch {
            what: "displacement length",
            expected: mesh.n_dofs(),
            got: u.len(),
        });
    }
    write_rows(
        path,
        (0..mesh.n_nodes()).map(|n| {
            let (node_ix, node_iy) = mesh.node_grid(n);
            DisplacementRow {
                node_ix,
                node_iy,
                ux: u[2 * n],
                uy: u[2 * n + 1],
            }
        }),
    )
}

#[derive(Serialize)]
struct LambdaRow {
    index: usize,
    lambda0: f64,
    lambda: f64,
}

#[derive(Serialize)]
struct StageRow {
    d_theta: usize,
    elbo: f64,
    info_gain: f64,
    mean_tau: f64,
    forward_calls: usize,
    sweeps: usize,
    w_iterations: usize,
}

#[derive(Serialize)]
struct InfoGainRow {
    d_theta: usize,
    info_gain: f64,
    kl_numerator: f64,
}

#[derive(Serialize)]
struct MuRow {
    iteration: usize,
    accepted: bool,
    regularized: bool,
    step_norm: f64,
    objective_before: f64,
    objective_after: f64,
    forward_calls: usize,
    halvings: usize,
}

#[derive(Serialize)]
struct WeightRow {
    sample: usize,
    log_weight: f64,
    normalized_weight: f64,
}

fn write_trace_tables(dir: &Path, trace: &RunTrace) -> Result<()> {
    let s = &trace.state;
    write_rows(
        &dir.join(LAMBDA_FILE),
        s.lambda0.iter().zip(s.lambda.iter()).enumerate().map(|(i, (l0, l))| LambdaRow {
            index: i + 1,
            lambda0: *l0,
            lambda: *l,
        }),
    )?;
    write_rows(
        &dir.join(ELBO_FILE),
        trace.stages.iter().map(|st| StageRow {
            d_theta: st.d_theta,
            elbo: st.elbo,
            info_gain: st.info_gain,
            mean_tau: st.mean_tau,
            forward_calls: st.forward_calls,
            sweeps: st.sweeps,
            w_iterations: st.w_iterations,
        }),
    )?;
    write_rows(
        &dir.join(INFO_GAIN_FILE),
        trace.stages.iter().map(|st| InfoGainRow {
            d_theta: st.d_theta,
            info_gain: st.info_gain,
            kl_numerator: st.kl_numerator,
        }),
    )?;
    write_rows(
        &dir.join(MU_TRACE_FILE),
        trace.mu_reports.iter().enumerate().map(|(i, r)| MuRow {
            iteration: i + 1,
            accepted: r.accepted,
            regularized: r.regularized,
            step_norm: r.step_norm,
            objective_before: r.objective_before,
            objective_after: r.objective_after,
            forward_calls: r.forward_calls,
            halvings: r.halvings,
        }),
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Generate synthetic data and write it, with the resolved configuration,
/// into `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<GeneratedData> {
    let data = generate_data(cfg)?;
    ensure_dir(out)?;
    let mesh = cfg.mesh()?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml_string()?).map_err(io_err(&out.join(CONFIG_FILE)))?;
    write_json(&out.join(OBSERVATION_FILE), &data.observations)?;
    if cfg.output.csv {
        write_field_csv(&out.join(TRUTH_FIELD_FILE), &mesh, &data.truth.psi)?;
        write_displacement_csv(&out.join(TRUTH_DISPLACEMENT_FILE), &mesh, &data.displacements)?;
    }
    Ok(data)
}

/// Run the inference on an observation file. On failure the partial trace
/// is still written before the error is returned.
pub fn cmd_invert(cfg: &RunConfig, observations: &Path, out: &Path) -> Result<RunTrace> {
    let obs: ObservationFile = read_json(observations)?;
    obs.validate()?;
    let problem = Problem::new(cfg)?;
    if obs.observed_dofs != problem.model.observed() {
        return Err(Error::InvalidInput(
            "observed dofs in the file do not match the configured model".into(),
        ));
    }
    ensure_dir(out)?;
    let result = run(
        &problem.model,
        &obs.yhat(),
        problem.mu0.clone(),
        problem.prior.clone(),
        &cfg.solver.driver,
    );
    let trace = match result {
        Ok(t) => t,
        Err(failure) => {
            write_json(&out.join(TRACE_FILE), &failure.trace)?;
            return Err(failure.error);
        }
    };
    write_json(&out.join(TRACE_FILE), &trace)?;
    if cfg.output.csv {
        let stats = posterior_psi_stats(&trace.state);
        write_field_csv(&out.join(MEAN_FILE), &problem.mesh, &problem.full_field(stats.mean.as_slice())?)?;
        write_field_csv(&out.join(STD_FILE), &problem.mesh, &problem.full_std(stats.std.as_slice()))?;
        write_trace_tables(out, &trace)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutput {
    pub report: ISReport,
    pub comparison: Comparison,
}

/// Importance-sampling check of the converged state in `out`.
pub fn cmd_validate(cfg: &RunConfig, observations: &Path, out: &Path) -> Result<ValidationOutput> {
    let obs: ObservationFile = read_json(observations)?;
    obs.validate()?;
    let trace: RunTrace = read_json(&out.join(TRACE_FILE))?;
    let problem = Problem::new(cfg)?;
    if trace.state.dim_psi() != problem.model.dim_psi() {
        return Err(Error::DimensionMismatch {
            what: "stored state dimension",
            expected: problem.model.dim_psi(),
            got: trace.state.dim_psi(),
        });
    }
    let report = run_is(
        &trace.state,
        &problem.model,
        &obs.yhat(),
        cfg.validation.samples,
        cfg.validation.seed,
    )?;
    let comparison = compare_vb_is(&trace.state, &report)?;
    let output = ValidationOutput { report, comparison };
    write_json(&out.join(IS_REPORT_FILE), &output)?;
    if cfg.output.csv {
        let w = output.report.normalized_weights();
        write_rows(
            &out.join(IS_WEIGHTS_FILE),
            output.report.log_weights.iter().zip(&w).enumerate().map(|(i, (l, n))| WeightRow {
                sample: i,
                log_weight: *l,
                normalized_weight: *n,
            }),
        )?;
    }
    Ok(output)
}

/// Human-readable summary of whatever artifacts exist in `dir`. Missing
/// files are listed; the function itself never fails.
pub fn cmd_report(dir: &Path) -> String {
    let mut lines = vec![format!("report for {}", dir.display())];
    let mut missing: Vec<PathBuf> = Vec::new();
    let mut tau_mean = None;

    match read_json::<RunTrace>(&dir.join(TRACE_FILE)) {
        Ok(t) => {
            tau_mean = Some(t.state.mean_tau());
            lines.push(format!("d_theta: {}", t.state.dim_theta()));
            lines.push(format!("forward_calls: {}", t.forward_calls));
            lines.push(format!("termination: {:?}", t.termination));
            if let Some(e) = t.final_elbo {
                lines.push(format!("final_elbo: {:.6e}", e.total));
            }
            lines.push(format!("mean_tau: {:.6e}", t.state.mean_tau()));
        }
        Err(_) => missing.push(dir.join(TRACE_FILE)),
    }
    match read_json::<ObservationFile>(&dir.join(OBSERVATION_FILE)) {
        Ok(o) => match o.tau_true {
            Some(tt) => {
                lines.push(format!("tau_true: {tt:.6e}"));
                if let Some(tm) = tau_mean {
                    lines.push(format!("tau_ratio: {:.4}", tm / tt));
                }
            }
            None => lines.push("tau_true: infinite (noise-free data)".into()),
        },
        Err(_) => missing.push(dir.join(OBSERVATION_FILE)),
    }
    match read_json::<ValidationOutput>(&dir.join(IS_REPORT_FILE)) {
        Ok(v) => {
            lines.push(format!("ess: {:.4}", v.report.ess));
            lines.push(format!("is_samples: {}", v.report.samples));
            lines.push(format!("mean_rel_diff_median: {:.4e}", v.comparison.mean_rel_median));
            lines.push(format!("std_rel_diff_median: {:.4e}", v.comparison.std_rel_median));
        }
        Err(_) => missing.push(dir.join(IS_REPORT_FILE)),
    }
    for m in &missing {
        lines.push(format!("missing: {}", m.display()));
    }
    lines.join("\n") + "\n"
}
