//! `rpmeta univariate`: per-variate REML comparator analysis.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use rpmeta::dataset::read_dataset_csv;
use rpmeta::univariate::{analyze_univariate, write_univariate_csv, VariateResult};

use crate::manifest::{file_entry, RunManifest, Seeds};
use crate::UnivariateArgs;

/// Write univariate.csv into `dir`; returns the path written.
pub fn write_univariate_outputs(results: &[VariateResult], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join("univariate.csv");
    let file = fs::File::create(&path)?;
    write_univariate_csv(results, std::io::BufWriter::new(file))?;
    Ok(path)
}

pub fn run(args: UnivariateArgs) -> Result<i32> {
    // the command takes no tunables; an explicit config file must be empty
    let file = crate::config::FileConfig::load(args.config.as_deref())?;
    file.ensure_known(&[])?;

    let dataset = read_dataset_csv(&args.dataset)?;
    let results = analyze_univariate(&dataset);
    let path = write_univariate_outputs(&results, &args.out)?;

    let mut manifest = RunManifest::new(
        "univariate",
        BTreeMap::new(),
        Seeds { master: 0, projection: None, chain_streams: Vec::new() },
    );
    manifest.inputs = vec![file_entry(
        args.dataset.parent().unwrap_or(Path::new("")),
        &args.dataset,
    )?];
    manifest.outputs = vec![file_entry(&args.out, &path)?];
    manifest.write(&args.out)?;

    let flagged = results
        .iter()
        .filter(|r| r.flag != rpmeta::univariate::UnivariateFlag::Ok)
        .count();
    println!("univariate: {} variates analyzed, {flagged} flagged", results.len());
    Ok(0)
}
