//! `rpmeta evaluate`: pair multivariate and univariate results across a
//! directory of simulated replicates and summarize coverage, relative bias,
//! relative interval length, and their regressions on problem size.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use rpmeta::dataset::read_dataset_csv;
use rpmeta::metrics::{
    self, ComparisonRow, EvaluationSummary, FitStatus, Interval, Predictor, RegressionResult,
    ReplicateOutcome,
};
use rpmeta::sampler::{fit, FitDiagnostics, FitOptions};
use rpmeta::simulator::TruthRecord;
use rpmeta::univariate::{analyze_univariate, parse_univariate_csv, UnivariateFlag, VariateResult};
use rpmeta::Error as CoreError;

use crate::commands::fit::{
    build_options, options_echo, parse_posterior_csv, write_fit_outputs, PosteriorRow,
    SAMPLER_CONFIG_KEYS,
};
use crate::commands::univariate::write_univariate_outputs;
use crate::config::FileConfig;
use crate::manifest::{file_entry, RunManifest, Seeds};
use crate::EvaluateArgs;

#[derive(Debug, Serialize)]
struct FitError {
    kind: String, // "infeasible" | "failed"
    message: String,
}

/// What one replicate contributed to the evaluation.
struct Processed {
    outcome: Option<ReplicateOutcome>,
    missing: Vec<String>,
    fitted_now: bool,
}

fn load_fit_status(fit_dir: &Path) -> Result<Option<(FitStatus, Vec<PosteriorRow>)>> {
    let error_path = fit_dir.join("error.json");
    if error_path.exists() {
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&error_path)?)?;
        let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or("failed");
        let status = if kind == "infeasible" {
            FitStatus::Infeasible
        } else {
            FitStatus::Failed(
                value
                    .get("message")
                    .and_then(|m| m.as_str())
                    .unwrap_or("unknown failure")
                    .to_string(),
            )
        };
        return Ok(Some((status, Vec::new())));
    }
    let diagnostics_path = fit_dir.join("diagnostics.json");
    let posterior_path = fit_dir.join("posterior.csv");
    if !diagnostics_path.exists() || !posterior_path.exists() {
        return Ok(None);
    }
    let diagnostics: FitDiagnostics =
        serde_json::from_str(&fs::read_to_string(&diagnostics_path)?)?;
    let rows = parse_posterior_csv(&posterior_path)?;
    Ok(Some((FitStatus::Fitted { converged: diagnostics.converged }, rows)))
}

fn run_fit_now(
    dataset: &rpmeta::dataset::MetaDataset,
    options: &FitOptions,
    fit_dir: &Path,
) -> Result<(FitStatus, Vec<PosteriorRow>)> {
    match fit(dataset, None, options) {
        Ok(result) => {
            write_fit_outputs(&result, fit_dir)?;
            let rows = parse_posterior_csv(&fit_dir.join("posterior.csv"))?;
            Ok((FitStatus::Fitted { converged: result.diagnostics.converged }, rows))
        }
        Err(err) => {
            let kind = match &err {
                CoreError::Infeasible { .. } => "infeasible",
                _ => "failed",
            };
            fs::create_dir_all(fit_dir)?;
            fs::write(
                fit_dir.join("error.json"),
                serde_json::to_string_pretty(&FitError {
                    kind: kind.into(),
                    message: err.to_string(),
                })?,
            )?;
            Ok(if kind == "infeasible" {
                (FitStatus::Infeasible, Vec::new())
            } else {
                (FitStatus::Failed(err.to_string()), Vec::new())
            })
        }
    }
}

fn process_replicate(
    dir: &Path,
    index: usize,
    options: &FitOptions,
    fit_missing: bool,
) -> Result<Processed> {
    let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
    let mut missing = Vec::new();

    let dataset_path = dir.join("dataset.csv");
    let truth_path = dir.join("truth.json");
    if !dataset_path.exists() || !truth_path.exists() {
        missing.push(format!("{name}: dataset.csv or truth.json"));
        return Ok(Processed { outcome: None, missing, fitted_now: false });
    }
    let dataset = read_dataset_csv(&dataset_path)?;
    let truth: TruthRecord = serde_json::from_str(&fs::read_to_string(&truth_path)?)
        .with_context(|| format!("cannot parse {}", truth_path.display()))?;
    if truth.mu_true.len() != dataset.p() {
        bail!("{name}: truth lists {} variates but the dataset has {}", truth.mu_true.len(), dataset.p());
    }

    let mut fitted_now = false;

    // multivariate side
    let fit_dir = dir.join("fit");
    let mv = match load_fit_status(&fit_dir)? {
        Some(loaded) => loaded,
        None if fit_missing => {
            // one reproducible seed per replicate
            let mut per_rep = options.clone();
            per_rep.sampler.seed = options.sampler.seed.wrapping_add(index as u64 + 1);
            fitted_now = true;
            run_fit_now(&dataset, &per_rep, &fit_dir)?
        }
        None => {
            missing.push(format!("{name}: fit outputs"));
            return Ok(Processed { outcome: None, missing, fitted_now });
        }
    };

    // univariate side
    let uv_dir = dir.join("univariate");
    let uv_path = uv_dir.join("univariate.csv");
    let uv_rows: Vec<VariateResult> = if uv_path.exists() {
        parse_univariate_csv(std::io::BufReader::new(fs::File::open(&uv_path)?))?
    } else if fit_missing {
        let results = analyze_univariate(&dataset);
        write_univariate_outputs(&results, &uv_dir)?;
        fitted_now = true;
        results
    } else {
        missing.push(format!("{name}: univariate outputs"));
        return Ok(Processed { outcome: None, missing, fitted_now });
    };

    let uv_by_id: BTreeMap<&str, &VariateResult> =
        uv_rows.iter().map(|r| (r.variate_id.as_str(), r)).collect();
    let mv_by_id: BTreeMap<&str, &PosteriorRow> =
        mv.1.iter().map(|r| (r.variate_id.as_str(), r)).collect();
    let uv_zero_width = uv_rows.iter().any(|r| r.flag == UnivariateFlag::ZeroWidth);

    // comparison rows only exist when the multivariate side produced output
    let mut rows = Vec::new();
    if matches!(mv.0, FitStatus::Fitted { .. }) {
        for (j, variate) in dataset.variates().iter().enumerate() {
            let (Some(m), Some(u)) = (mv_by_id.get(variate.as_str()), uv_by_id.get(variate.as_str()))
            else {
                bail!("{name}: variate '{variate}' missing from fit or univariate outputs");
            };
            rows.push(ComparisonRow {
                meta_id: name.clone(),
                variate_id: variate.clone(),
                mu_true: truth.mu_true[j],
                est_m: m.mean_z,
                est_u: u.estimate,
                ci_m: Interval::new(m.ci_low_z, m.ci_high_z),
                ci_u: Interval::new(u.ci_low, u.ci_high),
                n_estimates: truth.n_estimates,
                n_variates: truth.p,
            });
        }
    }

    Ok(Processed {
        outcome: Some(ReplicateOutcome {
            meta_id: name,
            n_estimates: truth.n_estimates,
            n_variates: truth.p,
            mv_status: mv.0,
            uv_zero_width,
            rows,
        }),
        missing,
        fitted_now,
    })
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    level_cri: f64,
    level_ci: f64,
    seed: u64,
    fitted_now: usize,
    missing: &'a [String],
    evaluation: &'a EvaluationSummary,
}

fn write_metrics_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "meta_id",
        "variate_id",
        "mu_true",
        "est_m",
        "ci_low_m",
        "ci_high_m",
        "est_u",
        "ci_low_u",
        "ci_high_u",
        "n_estimates",
        "n_variates",
        "log_rel_bias",
        "log_rel_length",
        "bias_flag",
        "length_flag",
    ])?;
    for row in rows {
        let (bias, bias_flag) = match metrics::log_rel_abs_bias(row) {
            Ok(v) => (v.to_string(), "ok"),
            Err(_) => (String::new(), "zero_bias"),
        };
        let (length, length_flag) = match metrics::log_rel_length(row) {
            Ok(v) => (v.to_string(), "ok"),
            Err(_) => (String::new(), "zero_width"),
        };
        w.write_record([
            row.meta_id.as_str(),
            row.variate_id.as_str(),
            &row.mu_true.to_string(),
            &row.est_m.to_string(),
            &row.ci_m.low.to_string(),
            &row.ci_m.high.to_string(),
            &row.est_u.to_string(),
            &row.ci_u.low.to_string(),
            &row.ci_u.high.to_string(),
            &row.n_estimates.to_string(),
            &row.n_variates.to_string(),
            &bias,
            &length,
            bias_flag,
            length_flag,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_curve_csv(
    reg: &RegressionResult,
    predictor: Predictor,
    rows: &[ComparisonRow],
    path: &Path,
) -> Result<()> {
    let values: Vec<usize> = rows
        .iter()
        .map(|r| match predictor {
            Predictor::Estimates => r.n_estimates,
            Predictor::Variates => r.n_variates,
        })
        .collect();
    let lo = *values.iter().min().expect("rows nonempty");
    let hi = *values.iter().max().expect("rows nonempty");
    let grid: Vec<f64> = (lo..=hi).map(|v| v as f64).collect();
    let other_mean = rows
        .iter()
        .map(|r| match predictor {
            Predictor::Estimates => r.n_variates as f64,
            Predictor::Variates => r.n_estimates as f64,
        })
        .sum::<f64>()
        / rows.len() as f64;
    let curve = metrics::regression_curve(reg, predictor, &grid, other_mean);
    let mut w = csv::Writer::from_path(path)?;
    let label = match predictor {
        Predictor::Estimates => "n_estimates",
        Predictor::Variates => "n_variates",
    };
    w.write_record([label, "rel_length", "ci_low", "ci_high"])?;
    for point in curve {
        w.write_record([
            point.value.to_string(),
            point.estimate.to_string(),
            point.lower.to_string(),
            point.upper.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: EvaluateArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.ensure_known(SAMPLER_CONFIG_KEYS)?;
    let (options, _) = build_options(&args.sampler, &file, args.seed)?;

    let mut dirs: Vec<PathBuf> = fs::read_dir(&args.replicates)
        .with_context(|| format!("cannot read {}", args.replicates.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| {
            path.is_dir()
                && path
                    .file_name()
                    .map(|n| n.to_string_lossy().starts_with("replicate_"))
                    .unwrap_or(false)
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no replicate_* directories found in {}", args.replicates.display());
    }

    let processed: Vec<Processed> = dirs
        .par_iter()
        .enumerate()
        .map(|(index, dir)| process_replicate(dir, index, &options, args.fit_missing))
        .collect::<Result<_>>()?;

    let missing: Vec<String> =
        processed.iter().flat_map(|p| p.missing.iter().cloned()).collect();
    let fitted_now = processed.iter().filter(|p| p.fitted_now).count();
    let outcomes: Vec<ReplicateOutcome> =
        processed.into_iter().filter_map(|p| p.outcome).collect();
    if outcomes.is_empty() {
        bail!(
            "no replicate had complete outputs ({} missing); rerun with --fit-missing",
            missing.len()
        );
    }

    let evaluation = metrics::evaluate_replicates(&outcomes, options.sampler.seed)?;
    let rows: Vec<ComparisonRow> =
        outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();

    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut written = Vec::new();

    let summary_path = args.out.join("summary.json");
    let report = EvaluateReport {
        level_cri: options.level,
        level_ci: 0.95,
        seed: options.sampler.seed,
        fitted_now,
        missing: &missing,
        evaluation: &evaluation,
    };
    fs::write(&summary_path, serde_json::to_string_pretty(&report)?)?;
    written.push(summary_path);

    let metrics_path = args.out.join("metrics.csv");
    write_metrics_csv(&rows, &metrics_path)?;
    written.push(metrics_path);

    if let Some(reg) = &evaluation.regression_length {
        let by_estimates = args.out.join("rel_length_by_estimates.csv");
        write_curve_csv(reg, Predictor::Estimates, &rows, &by_estimates)?;
        written.push(by_estimates);
        let by_variates = args.out.join("rel_length_by_variates.csv");
        write_curve_csv(reg, Predictor::Variates, &rows, &by_variates)?;
        written.push(by_variates);
    }

    let mut manifest = RunManifest::new(
        "evaluate",
        options_echo(&options, None),
        Seeds { master: options.sampler.seed, projection: None, chain_streams: Vec::new() },
    );
    manifest.outputs = written
        .iter()
        .map(|path| file_entry(&args.out, path))
        .collect::<Result<_>>()?;
    manifest.write(&args.out)?;

    println!(
        "evaluated {} replicates ({} analyzed, {} missing, {} fitted now)",
        evaluation.replicates_total,
        evaluation.replicates_analyzed,
        missing.len(),
        fitted_now
    );
    println!(
        "coverage: multivariate {:.3} [{:.3}, {:.3}] at {:.0}% CrI; univariate {:.3} [{:.3}, {:.3}] at 95% CI",
        evaluation.coverage_multivariate.proportion,
        evaluation.coverage_multivariate.lower,
        evaluation.coverage_multivariate.upper,
        options.level * 100.0,
        evaluation.coverage_univariate.proportion,
        evaluation.coverage_univariate.lower,
        evaluation.coverage_univariate.upper,
    );
    println!(
        "relative CrI length: {:.3} [{:.3}, {:.3}]; relative bias: {:.3} [{:.3}, {:.3}]",
        evaluation.rel_length_exp.0,
        evaluation.rel_length_exp.1,
        evaluation.rel_length_exp.2,
        evaluation.rel_bias_exp.0,
        evaluation.rel_bias_exp.1,
        evaluation.rel_bias_exp.2,
    );
    Ok(0)
}
