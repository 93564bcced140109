//! `rpmeta simulate`: write a batch of synthetic replicates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;

use rpmeta::simulator::{simulate_meta, SimConfig, SimTruth};

use crate::config::{resolve, FileConfig};
use crate::manifest::{file_entry, FileEntry, RunManifest, Seeds};
use crate::SimulateArgs;

const CONFIG_KEYS: &[&str] = &[
    "n_meta",
    "studies_min",
    "studies_max",
    "units_min",
    "units_max",
    "p_min",
    "p_max",
    "density",
    "het_sd",
    "seed",
];

pub fn build_config(args: &SimulateArgs) -> Result<SimConfig> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.ensure_known(CONFIG_KEYS)?;
    let defaults = SimConfig::default();
    let config = SimConfig {
        n_meta: resolve(args.n_meta, &file, "n_meta", defaults.n_meta)?,
        studies_range: (
            resolve(args.studies_min, &file, "studies_min", defaults.studies_range.0)?,
            resolve(args.studies_max, &file, "studies_max", defaults.studies_range.1)?,
        ),
        units_range: (
            resolve(args.units_min, &file, "units_min", defaults.units_range.0)?,
            resolve(args.units_max, &file, "units_max", defaults.units_range.1)?,
        ),
        p_range: (
            resolve(args.p_min, &file, "p_min", defaults.p_range.0)?,
            resolve(args.p_max, &file, "p_max", defaults.p_range.1)?,
        ),
        density: resolve(args.density, &file, "density", defaults.density)?,
        het_sd: resolve(args.het_sd, &file, "het_sd", defaults.het_sd)?,
        seed: resolve(args.seed, &file, "seed", defaults.seed)?,
    };
    config.validate()?;
    Ok(config)
}

pub fn replicate_dir_name(index: usize) -> String {
    format!("replicate_{index:05}")
}

/// Write one replicate's dataset.csv + truth.json into `dir`.
pub fn write_replicate(
    dataset: &rpmeta::dataset::MetaDataset,
    truth: &SimTruth,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let dataset_path = dir.join("dataset.csv");
    let file = fs::File::create(&dataset_path)?;
    rpmeta::dataset::write_dataset_csv(dataset, std::io::BufWriter::new(file))?;
    let truth_path = dir.join("truth.json");
    fs::write(&truth_path, serde_json::to_string_pretty(&truth.record())?)?;
    Ok(vec![dataset_path, truth_path])
}

pub fn config_echo(config: &SimConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("n_meta".into(), config.n_meta.to_string()),
        ("studies_min".into(), config.studies_range.0.to_string()),
        ("studies_max".into(), config.studies_range.1.to_string()),
        ("units_min".into(), config.units_range.0.to_string()),
        ("units_max".into(), config.units_range.1.to_string()),
        ("p_min".into(), config.p_range.0.to_string()),
        ("p_max".into(), config.p_range.1.to_string()),
        ("density".into(), config.density.to_string()),
        ("het_sd".into(), config.het_sd.to_string()),
        ("seed".into(), config.seed.to_string()),
    ])
}

pub fn run(args: SimulateArgs) -> Result<i32> {
    let config = build_config(&args)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;

    let written: Vec<Vec<std::path::PathBuf>> = (0..config.n_meta)
        .into_par_iter()
        .map(|index| {
            let (dataset, truth) = simulate_meta(&config, index)?;
            write_replicate(&dataset, &truth, &args.out.join(replicate_dir_name(index)))
        })
        .collect::<Result<_>>()?;

    let mut manifest = RunManifest::new(
        "simulate",
        config_echo(&config),
        Seeds { master: config.seed, projection: None, chain_streams: Vec::new() },
    );
    let outputs: Vec<FileEntry> = written
        .iter()
        .flatten()
        .map(|path| file_entry(&args.out, path))
        .collect::<Result<_>>()?;
    manifest.outputs = outputs;
    manifest.write(&args.out)?;

    println!(
        "simulated {} replicates into {} (seed {})",
        config.n_meta,
        args.out.display(),
        config.seed
    );
    Ok(0)
}
