use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elastovb::io::{self, RunConfig, OBSERVATION_FILE};
use elastovb::Error;

/// Variational subspace inference for plane-strain elastography.
#[derive(Debug, Parser)]
#[command(name = "elastovb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the phantom and write noisy observations.
    Generate(Common),
    /// Run the adaptive variational inference on stored observations.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Observation file; defaults to observations.json in the output directory.
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Importance-sampling check of a finished run.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Observation file the run was fitted to; same default as for invert.
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Summarize the artifacts in an output directory.
    Report {
        /// Directory holding the run artifacts.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; the built-in benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed this command consumes (noise, basis or sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Upper bound on the number of basis vectors.
    #[arg(long)]
    max_bases: Option<usize>,
    /// Signal-to-noise power ratio; overrides the configured one.
    #[arg(long)]
    snr: Option<f64>,
}

enum SeedTarget {
    Noise,
    Basis,
    Sampling,
}

impl Common {
    fn resolve(&self, target: SeedTarget) -> Result<(RunConfig, PathBuf), Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::example1(),
        };
        if let Some(seed) = self.seed {
            match target {
                SeedTarget::Noise => cfg.noise.seed = seed,
                SeedTarget::Basis => cfg.solver.driver.seed = seed,
                SeedTarget::Sampling => cfg.validation.seed = seed,
            }
        }
        if let Some(m) = self.max_bases {
            cfg.solver.driver.max_bases = m;
            cfg.solver.driver.min_bases = cfg.solver.driver.min_bases.min(m);
        }
        if let Some(snr) = self.snr {
            cfg.noise.snr = Some(snr);
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate()?;
        let out = cfg.output.dir.clone();
        Ok((cfg, out))
    }
}

fn observations_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| out.join(OBSERVATION_FILE))
}

fn execute(command: Command) -> Result<String, Error> {
    match command {
        Command::Generate(common) => {
            let (cfg, out) = common.resolve(SeedTarget::Noise)?;
            let data = io::cmd_generate(&cfg, &out)?;
            let obs = &data.observations;
            Ok(format!(
                "wrote {} observations to {} (noise std {:.3e})",
                obs.d_y,
                out.display(),
                obs.noise_std
            ))
        }
        Command::Invert {
            common,
            observations,
        } => {
            let (cfg, out) = common.resolve(SeedTarget::Basis)?;
            let trace = io::cmd_invert(&cfg, &observations_path(observations, &out), &out)?;
            Ok(format!(
                "d_theta = {}, forward calls = {}, termination = {:?}",
                trace.state.dim_theta(),
                trace.forward_calls,
                trace.termination
            ))
        }
        Command::Validate {
            common,
            observations,
        } => {
            let (cfg, out) = common.resolve(SeedTarget::Sampling)?;
            let v = io::cmd_validate(&cfg, &observations_path(observations, &out), &out)?;
            Ok(format!(
                "ESS = {:.4} over {} samples, median relative mean difference = {:.3e}",
                v.report.ess, v.report.samples, v.comparison.mean_rel_median
            ))
        }
        Command::Report { out } => Ok(io::cmd_report(&out).trim_end().to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
