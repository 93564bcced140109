//! `rpmeta fit`: posterior estimation of one dataset.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use rpmeta::dataset::read_dataset_csv;
use rpmeta::projection::write_projection_csv;
use rpmeta::sampler::{fit, FitOptions, FitResult, SamplerConfig};

use crate::config::{resolve, resolve_opt, FileConfig};
use crate::manifest::{file_entry, RunManifest, Seeds};
use crate::{FitArgs, SamplerFlags};

pub const SAMPLER_CONFIG_KEYS: &[&str] = &[
    "chains",
    "warmup",
    "samples",
    "target_accept",
    "max_tree_depth",
    "rhat_threshold",
    "level",
    "q_max",
    "q",
    "seed",
];

/// Assemble fit options from defaults, a config file and flags (flags win).
pub fn build_options(
    flags: &SamplerFlags,
    file: &FileConfig,
    seed_flag: Option<u64>,
) -> Result<(FitOptions, Option<usize>)> {
    let sampler_defaults = SamplerConfig::default();
    let options_defaults = FitOptions::default();
    let sampler = SamplerConfig {
        chains: resolve(flags.chains, file, "chains", sampler_defaults.chains)?,
        warmup: resolve(flags.warmup, file, "warmup", sampler_defaults.warmup)?,
        samples: resolve(flags.samples, file, "samples", sampler_defaults.samples)?,
        target_accept: resolve(
            flags.target_accept,
            file,
            "target_accept",
            sampler_defaults.target_accept,
        )?,
        max_tree_depth: resolve(
            flags.max_tree_depth,
            file,
            "max_tree_depth",
            sampler_defaults.max_tree_depth,
        )?,
        seed: resolve(seed_flag, file, "seed", sampler_defaults.seed)?,
        rhat_threshold: resolve(
            flags.rhat_threshold,
            file,
            "rhat_threshold",
            sampler_defaults.rhat_threshold,
        )?,
    };
    let options = FitOptions {
        level: resolve(flags.level, file, "level", options_defaults.level)?,
        q_max: resolve(flags.q_max, file, "q_max", options_defaults.q_max)?,
        sampler,
    };
    let q = resolve_opt(None, file, "q")?;
    Ok((options, q))
}

pub fn options_echo(options: &FitOptions, q: Option<usize>) -> BTreeMap<String, String> {
    let mut map = BTreeMap::from([
        ("chains".into(), options.sampler.chains.to_string()),
        ("warmup".into(), options.sampler.warmup.to_string()),
        ("samples".into(), options.sampler.samples.to_string()),
        ("target_accept".into(), options.sampler.target_accept.to_string()),
        ("max_tree_depth".into(), options.sampler.max_tree_depth.to_string()),
        ("rhat_threshold".into(), options.sampler.rhat_threshold.to_string()),
        ("level".into(), options.level.to_string()),
        ("q_max".into(), options.q_max.to_string()),
        ("seed".into(), options.sampler.seed.to_string()),
    ]);
    if let Some(q) = q {
        map.insert("q".into(), q.to_string());
    }
    map
}

/// One row of posterior.csv.
#[derive(Debug, Clone)]
pub struct PosteriorRow {
    pub variate_id: String,
    pub mean_z: f64,
    pub sd_z: f64,
    pub ci_low_z: f64,
    pub ci_high_z: f64,
    pub mean_r: f64,
    pub ci_low_r: f64,
    pub ci_high_r: f64,
    pub rhat: f64,
    pub sucra: f64,
}

const POSTERIOR_HEADER: &str =
    "variate_id,mean_z,sd_z,ci_low_z,ci_high_z,mean_r,ci_low_r,ci_high_r,rhat,sucra";

/// Write posterior.csv, covariance.csv, projection.csv and diagnostics.json
/// into `dir`; returns the paths written.
pub fn write_fit_outputs(result: &FitResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let summary = &result.summary;

    let posterior_path = dir.join("posterior.csv");
    {
        let mut w = csv::Writer::from_path(&posterior_path)?;
        w.write_record(POSTERIOR_HEADER.split(','))?;
        for (k, id) in summary.variates.iter().enumerate() {
            let z = &summary.z[k];
            let r = &summary.corr[k];
            w.write_record([
                id.as_str(),
                &z.mean.to_string(),
                &z.sd.to_string(),
                &z.lower.to_string(),
                &z.upper.to_string(),
                &r.mean.to_string(),
                &r.lower.to_string(),
                &r.upper.to_string(),
                &summary.rhat[k].to_string(),
                &summary.sucra[k].to_string(),
            ])?;
        }
        w.flush()?;
    }

    let covariance_path = dir.join("covariance.csv");
    {
        let lifted = result.lifted_posterior_mean_covariance()?;
        let mut w = csv::Writer::from_path(&covariance_path)?;
        let mut header = vec!["variate_id".to_string()];
        header.extend(summary.variates.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in summary.variates.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..summary.variates.len()).map(|j| lifted[(i, j)].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
    }

    let projection_path = dir.join("projection.csv");
    {
        let file = fs::File::create(&projection_path)?;
        write_projection_csv(&result.projection, std::io::BufWriter::new(file))?;
    }

    let diagnostics_path = dir.join("diagnostics.json");
    fs::write(&diagnostics_path, serde_json::to_string_pretty(&result.diagnostics)?)?;

    Ok(vec![posterior_path, covariance_path, projection_path, diagnostics_path])
}

/// Parse a posterior.csv written by [`write_fit_outputs`].
pub fn parse_posterior_csv(path: &Path) -> Result<Vec<PosteriorRow>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines.next().context("empty posterior file")??;
    if header != POSTERIOR_HEADER {
        bail!("unexpected posterior header '{header}' in {}", path.display());
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            bail!("{}:{}: expected 10 fields, got {}", path.display(), idx + 2, fields.len());
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().with_context(|| {
                format!("{}:{}: bad number '{s}'", path.display(), idx + 2)
            })
        };
        rows.push(PosteriorRow {
            variate_id: fields[0].to_string(),
            mean_z: f(fields[1])?,
            sd_z: f(fields[2])?,
            ci_low_z: f(fields[3])?,
            ci_high_z: f(fields[4])?,
            mean_r: f(fields[5])?,
            ci_low_r: f(fields[6])?,
            ci_high_r: f(fields[7])?,
            rhat: f(fields[8])?,
            sucra: f(fields[9])?,
        });
    }
    Ok(rows)
}

pub fn run(args: FitArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.ensure_known(SAMPLER_CONFIG_KEYS)?;
    let (options, config_q) = build_options(&args.sampler, &file, args.seed)?;
    let q = args.q.or(config_q);

    let dataset = read_dataset_csv(&args.dataset)?;
    let result = fit(&dataset, q, &options)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let written = write_fit_outputs(&result, &args.out)?;

    let mut manifest = RunManifest::new(
        "fit",
        options_echo(&options, q),
        Seeds {
            master: options.sampler.seed,
            projection: Some(result.projection.seed()),
            chain_streams: result.diagnostics.chains.iter().map(|c| c.stream).collect(),
        },
    );
    manifest.inputs = vec![file_entry(
        args.dataset.parent().unwrap_or(Path::new("")),
        &args.dataset,
    )?];
    manifest.outputs = written
        .iter()
        .map(|path| file_entry(&args.out, path))
        .collect::<Result<_>>()?;
    manifest.write(&args.out)?;

    let mut report = std::io::stdout().lock();
    writeln!(
        report,
        "fit: p={} q={} n={} converged={} max rhat={:.4}",
        result.diagnostics.p,
        result.diagnostics.q,
        result.diagnostics.n,
        result.diagnostics.converged,
        result.diagnostics.rhat.iter().cloned().fold(f64::NAN, f64::max),
    )?;
    Ok(if result.diagnostics.converged { 0 } else { 2 })
}
