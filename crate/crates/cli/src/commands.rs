use std::path::{Path, PathBuf};

use pals_core::analysis::{
    fit_mle, lr_test_doubling, lr_test_rate_shift, power_scan, FitResult, FitSpec, InformationStatus, PowerExperiment,
    PowerScan, TestResult,
};
use pals_core::config::{parse_fit_spec, ExperimentKind, RunConfig};
use pals_core::lattice::{check_identity, IDENTITY_TOLERANCE};
use pals_core::report::Report;
use pals_core::spectrometer::simulate_with;
use pals_core::{FieldOrientation, Histogram, RngSeed, SpectrometerConfig};
use thiserror::Error;

use crate::manifest::{sidecar_path, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pals_core::Error),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    ConstantsFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::ConstantsFailed(_) => 1,
            Self::Usage(_) => 2,
            Self::Core(pals_core::Error::Io(_)) => 3,
            Self::Core(_) => 2,
            Self::NotConverged(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub struct Context {
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

impl Context {
    pub fn new(config_path: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>, threads: Option<usize>) -> Result<Self> {
        let config = match &config_path {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        Ok(Self {
            seed: seed.unwrap_or(config.run.seed),
            config_path,
            config,
            out,
            threads: threads.unwrap_or_else(rayon::current_num_threads),
        })
    }

    fn require_config(&self, command: &str) -> Result<()> {
        if self.config_path.is_none() {
            return Err(CliError::Usage(format!("`{command}` needs --config")));
        }
        Ok(())
    }

    fn require_out(&self, command: &str) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::Usage(format!("`{command}` needs --out")))
    }

    fn manifest(&self, command: &'static str) -> RunManifest {
        RunManifest::new(command, self.config_path.clone(), self.config.to_toml(), self.threads)
    }
}

/// Writes through a temporary file so a failed run never leaves a half-written output.
fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, text).map_err(pals_core::Error::Io)?;
    std::fs::rename(&tmp, path).map_err(pals_core::Error::Io)?;
    Ok(())
}

fn write_sidecar(path: &Path, manifest: &RunManifest) -> Result<()> {
    write_atomic(&sidecar_path(path), &manifest.sidecar_text())
}

fn stamp_histogram(h: &mut Histogram, manifest: &RunManifest) {
    for (k, v) in manifest.header() {
        h.metadata.insert(format!("manifest.{k}"), v);
    }
}

fn stamped_report(manifest: &RunManifest) -> Report {
    let mut r = Report::new();
    for (k, v) in manifest.header() {
        r.comment(format!("{k} = {v}"));
    }
    r
}

/// Writes the report to `--out` (plus sidecar) or to stdout.
fn emit_report(ctx: &Context, report: &Report, manifest: &mut RunManifest) -> Result<()> {
    let text = report.to_text()?;
    match &ctx.out {
        Some(path) => {
            manifest.outputs.push(path.clone());
            write_atomic(path, &text)?;
            write_sidecar(path, manifest)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn default_spec(cfg: &RunConfig, spectrometer: &SpectrometerConfig) -> Result<FitSpec> {
    let base = cfg.model.to_model(spectrometer.timing_fwhm)?;
    Ok(FitSpec::from_model(&spectrometer.expected_model(&base)))
}

pub fn simulate(ctx: &Context) -> Result<()> {
    ctx.require_config("simulate")?;
    let out = ctx.require_out("simulate")?;
    let cfg = &ctx.config;
    let spectrometer = cfg.spectrometer()?;
    let base = cfg.base_model()?;
    let scenario = cfg.scenario_or_default();

    let mut manifest = ctx.manifest("simulate");
    manifest.seed = Some(ctx.seed);
    manifest.outputs.push(out.to_path_buf());
    let mut h = simulate_with(spectrometer, &scenario, &base, RngSeed::new(ctx.seed, cfg.run.stream_id), cfg.run.method)?;
    stamp_histogram(&mut h, &manifest);
    write_atomic(out, &h.to_text())?;
    write_sidecar(out, &manifest)
}

fn push_fit(r: &mut Report, prefix: &str, fit: &FitResult) {
    let evaluation_only = fit.information == InformationStatus::NotApplicable;
    r.push(format!("{prefix}converged"), fit.converged);
    r.push(format!("{prefix}evaluation_only"), evaluation_only);
    r.push(format!("{prefix}n_iterations"), fit.n_iterations);
    r.push(format!("{prefix}deviance"), fit.deviance);
    r.push(format!("{prefix}degrees_of_freedom"), fit.degrees_of_freedom);
    r.push(format!("{prefix}gradient_norm"), fit.gradient_norm);
    r.push(format!("{prefix}information"), fit.information.as_str());
    r.push(format!("{prefix}rate_unit"), fit.rate_unit.as_str());
    for (i, name) in fit.names().iter().enumerate() {
        r.push(format!("{prefix}estimate.{name}"), fit.estimates[i]);
        r.push(format!("{prefix}error.{name}"), fit.std_errors[i]);
    }
}

pub fn fit(ctx: &Context, histogram: &Path, fitspec: Option<&Path>) -> Result<()> {
    let h = Histogram::read(histogram)?;
    let spec = match fitspec {
        Some(p) => parse_fit_spec(&std::fs::read_to_string(p).map_err(pals_core::Error::Io)?)?,
        None => {
            let fwhm = ctx.config.spectrometer.as_ref().map_or(SpectrometerConfig::default().timing_fwhm, |s| s.timing_fwhm);
            FitSpec::guess(&h, &ctx.config.model.to_model(fwhm)?)
        }
    };
    let result = fit_mle(&h, &spec)?;

    let mut manifest = ctx.manifest("fit");
    manifest.inputs.push(histogram.to_path_buf());
    manifest.inputs.extend(fitspec.map(Path::to_path_buf));
    let mut report = stamped_report(&manifest);
    push_fit(&mut report, "", &result);
    emit_report(ctx, &report, &mut manifest)?;

    let evaluation_only = result.information == InformationStatus::NotApplicable;
    if !result.converged && !evaluation_only {
        return Err(CliError::NotConverged(format!(
            "fit did not converge after {} iterations (report written)",
            result.n_iterations
        )));
    }
    Ok(())
}

fn push_test(r: &mut Report, prefix: &str, t: &TestResult) {
    r.push(format!("{prefix}null_hypothesis"), &t.null_hypothesis);
    r.push(format!("{prefix}statistic"), t.statistic);
    r.push(format!("{prefix}degrees_of_freedom"), t.degrees_of_freedom);
    r.push(format!("{prefix}p_value"), t.p_value);
    r.push(format!("{prefix}significance"), t.significance);
    r.push(format!("{prefix}effective_sigma"), t.effective_sigma);
    r.push(format!("{prefix}decision"), t.decision());
    r.push(format!("{prefix}converged"), t.converged);
    r.push(format!("{prefix}deviance_null"), t.deviance_null);
    r.push(format!("{prefix}deviance_alt"), t.deviance_alt);
    for (k, v) in &t.estimates {
        r.push(format!("{prefix}estimate.{k}"), v);
    }
}

pub fn experiment(ctx: &Context) -> Result<()> {
    ctx.require_config("experiment")?;
    let dir = ctx.require_out("experiment")?;
    let cfg = &ctx.config;
    let spectrometer = cfg.spectrometer()?;
    let base = cfg.base_model()?;
    let scenario = *cfg.scenario()?;
    if scenario.field_orientation == FieldOrientation::Parallel {
        return Err(CliError::Usage(
            "[scenario] field_orientation must differ from parallel: the parallel arm is the reference".into(),
        ));
    }
    let reference = scenario.with_orientation(FieldOrientation::Parallel);
    let stream = cfg.run.stream_id;

    let mut manifest = ctx.manifest("experiment");
    manifest.seed = Some(ctx.seed);
    let measured_path = dir.join(format!("{}.hist", scenario.field_orientation.as_str()));
    let parallel_path = dir.join("parallel.hist");
    let report_path = dir.join("report.txt");
    manifest.outputs = vec![measured_path.clone(), parallel_path.clone(), report_path.clone()];

    let mut measured = simulate_with(spectrometer, &scenario, &base, RngSeed::new(ctx.seed, 2 * stream), cfg.run.method)?;
    let mut parallel =
        simulate_with(spectrometer, &reference, &base, RngSeed::new(ctx.seed, 2 * stream + 1), cfg.run.method)?;
    stamp_histogram(&mut measured, &manifest);
    stamp_histogram(&mut parallel, &manifest);

    let spec = default_spec(cfg, spectrometer)?;
    let alpha = cfg.run.significance;
    let mut report = stamped_report(&manifest);
    report.push("experiment", cfg.run.experiment.as_str());
    report.push("measured_orientation", scenario.field_orientation.as_str());
    report.push("reference.comparative_factor", scenario.comparative_factor);
    report.push("reference.comparative_factor_uncertainty", scenario.comparative_factor_uncertainty);
    let converged = match cfg.run.experiment {
        ExperimentKind::Doubling => {
            let t = lr_test_doubling(&measured, &parallel, &spec, alpha)?;
            push_test(&mut report, "", &t);
            t.converged
        }
        ExperimentKind::RateShift => {
            let lambda_null = cfg.run.lambda_null.unwrap_or(base.components[base.n_components() - 1].rate);
            report.push("lambda_null", lambda_null);
            let a = lr_test_rate_shift(&measured, lambda_null, &spec, alpha)?;
            let b = lr_test_rate_shift(&parallel, lambda_null, &spec, alpha)?;
            push_test(&mut report, "measured.", &a);
            push_test(&mut report, "parallel.", &b);
            a.converged && b.converged
        }
    };

    std::fs::create_dir_all(dir).map_err(pals_core::Error::Io)?;
    write_atomic(&measured_path, &measured.to_text())?;
    write_atomic(&parallel_path, &parallel.to_text())?;
    write_atomic(&report_path, &report.to_text()?)?;
    write_sidecar(&report_path, &manifest)?;
    if !converged {
        return Err(CliError::NotConverged("a test fit did not converge (report written)".into()));
    }
    Ok(())
}

pub fn power(ctx: &Context, grid: Option<Vec<f64>>, replicas: Option<usize>) -> Result<()> {
    ctx.require_config("power")?;
    let cfg = &ctx.config;
    let spectrometer = cfg.spectrometer()?;
    let base = cfg.base_model()?;
    let measured = cfg.scenario_or_default();
    let (experiment, reference) = match cfg.run.experiment {
        ExperimentKind::Doubling => {
            if measured.field_orientation == FieldOrientation::Parallel {
                return Err(CliError::Usage(
                    "[scenario] field_orientation must differ from parallel for a doubling scan".into(),
                ));
            }
            (PowerExperiment::Doubling, measured.with_orientation(FieldOrientation::Parallel))
        }
        ExperimentKind::RateShift => (PowerExperiment::RateShift, Default::default()),
    };
    let scan = PowerScan {
        spectrometer: spectrometer.clone(),
        base,
        measured,
        reference,
        experiment,
        grid: grid.unwrap_or_else(|| cfg.run.grid.clone()),
        replicas: replicas.unwrap_or(cfg.run.replicas),
        significance: cfg.run.significance,
        seed: ctx.seed,
        method: cfg.run.method,
        lambda_null: cfg.run.lambda_null,
    };
    let curve = power_scan(&scan)?;

    let mut manifest = ctx.manifest("power");
    manifest.seed = Some(ctx.seed);
    let mut report = stamped_report(&manifest);
    report.push("experiment", experiment.as_str());
    report.push("significance", scan.significance);
    report.push("replicas", scan.replicas);
    report.push("method", scan.method.as_str());
    report.push("monotone_within_errors", curve.monotone_within_errors());
    report.push(
        "min_n_events_half_power",
        curve.min_n_for(0.5).map_or("none".to_string(), |p| p.n_events.to_string()),
    );
    report.table(
        "power",
        &["n_events", "replicas", "rejections", "failures", "power", "ci_low", "ci_high", "median_sigma"],
        curve.points.iter().map(|p| {
            vec![
                p.n_events.to_string(),
                p.replicas.to_string(),
                p.rejections.to_string(),
                p.failures.to_string(),
                p.power.to_string(),
                p.ci_low.to_string(),
                p.ci_high.to_string(),
                p.median_sigma.to_string(),
            ]
        }),
    );
    emit_report(ctx, &report, &mut manifest)
}

pub fn constants(ctx: &Context) -> Result<()> {
    let pc = ctx.config.constants;
    pc.validate().map_err(|e| CliError::Usage(format!("[constants]: {e}")))?;
    let check = check_identity(&pc).map_err(|e| CliError::Usage(format!("[constants]: {e}")))?;

    let mut manifest = ctx.manifest("constants");
    let mut report = stamped_report(&manifest);
    report.push("n3", format!("{:.6e}", check.n3));
    report.push("planck_mass_g", format!("{:.6e}", check.planck_mass));
    report.push("lattice_mass_g", format!("{:.6e}", check.lattice_mass));
    report.push("residual", format!("{:.6e}", check.residual));
    report.push("tolerance", IDENTITY_TOLERANCE);
    report.push("pass", check.pass);
    emit_report(ctx, &report, &mut manifest)?;
    if !check.pass {
        return Err(CliError::ConstantsFailed(format!(
            "identity residual {:.3e} exceeds {IDENTITY_TOLERANCE}",
            check.residual
        )));
    }
    Ok(())
}
