//! The domain data model: studies, datasets, and indicator matrices.
//!
//! A study reports point estimates on the Fisher-z scale together with their
//! sampling standard errors, each tagged with an opaque variate identifier.
//! A dataset collects studies and fixes a deterministic (lexicographic)
//! ordering of all distinct variates so that indicator matrices, parameter
//! vectors, and output files are reproducible across runs and platforms.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A single reported estimate within a study.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub variate_id: String,
    /// Point estimate on the Fisher-z scale.
    pub y: f64,
    /// Sampling standard error, strictly positive.
    pub se: f64,
}

/// One primary study: at least one estimate, no duplicate variates.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    study_id: String,
    estimates: Vec<Estimate>,
}

impl Study {
    pub fn new(study_id: impl Into<String>, estimates: Vec<Estimate>) -> Result<Self> {
        let study_id = study_id.into();
        if estimates.is_empty() {
            return Err(Error::Domain(format!(
                "study '{study_id}' must report at least one estimate"
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &estimates {
            if !seen.insert(e.variate_id.as_str()) {
                return Err(Error::Domain(format!(
                    "study '{study_id}' reports variate '{}' more than once",
                    e.variate_id
                )));
            }
            if !e.y.is_finite() {
                return Err(Error::Domain(format!(
                    "study '{study_id}', variate '{}': estimate must be finite",
                    e.variate_id
                )));
            }
            if !(e.se > 0.0) || !e.se.is_finite() {
                return Err(Error::Domain(format!(
                    "study '{study_id}', variate '{}': standard error must be positive \
                     and finite, got {}",
                    e.variate_id, e.se
                )));
            }
        }
        Ok(Self { study_id, estimates })
    }

    pub fn study_id(&self) -> &str {
        &self.study_id
    }

    pub fn estimates(&self) -> &[Estimate] {
        &self.estimates
    }

    /// Number of estimates this study contributes.
    pub fn t(&self) -> usize {
        self.estimates.len()
    }
}

/// A meta-analysis dataset: the studies plus the ordered variate list.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    studies: Vec<Study>,
    variates: Vec<String>,
}

impl MetaDataset {
    /// Build a dataset from studies; the variate list is the lexicographically
    /// sorted union of every study's variates.
    pub fn new(studies: Vec<Study>) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::Domain("a dataset needs at least one study".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &studies {
            for e in s.estimates() {
                ids.insert(e.variate_id.clone());
            }
        }
        let variates: Vec<String> = ids.into_iter().collect();
        Ok(Self { studies, variates })
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    /// All distinct variate ids, lexicographically ordered.
    pub fn variates(&self) -> &[String] {
        &self.variates
    }

    /// Number of variates, p.
    pub fn p(&self) -> usize {
        self.variates.len()
    }

    /// Number of studies, m.
    pub fn m(&self) -> usize {
        self.studies.len()
    }

    /// Total number of estimates across studies, n.
    pub fn n(&self) -> usize {
        self.studies.iter().map(Study::t).sum()
    }

    /// Index of a variate in the canonical ordering.
    pub fn variate_index(&self, variate_id: &str) -> Option<usize> {
        self.variates.binary_search_by(|v| v.as_str().cmp(variate_id)).ok()
    }
}

/// The 0/1 matrix selecting a study's variates from the full vector.
///
/// Row j has a single 1 in the column of the study's j-th variate; columns
/// hold at most one 1 because studies report each variate at most once. The
/// matrix is stored as one column index per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    row_cols: Vec<usize>,
    cols: usize,
}

impl IndicatorMatrix {
    pub fn nrows(&self) -> usize {
        self.row_cols.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    /// Entry (j, k), either 0 or 1.
    pub fn entry(&self, row: usize, col: usize) -> u8 {
        u8::from(self.row_cols[row] == col)
    }

    /// Column index of the single 1 in each row.
    pub fn row_columns(&self) -> &[usize] {
        &self.row_cols
    }

    /// Apply to a full-length vector: returns the studied sub-vector X·v.
    pub fn select(&self, full: &[f64]) -> Vec<f64> {
        self.row_cols.iter().map(|&c| full[c]).collect()
    }

    /// Dense representation, mainly for tests and slow reference paths.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows(), self.ncols());
        for (j, &c) in self.row_cols.iter().enumerate() {
            m[(j, c)] = 1.0;
        }
        m
    }
}

/// Indicator matrix of a study under the given variate ordering.
pub fn indicator_matrix(study: &Study, variates: &[String]) -> Result<IndicatorMatrix> {
    let mut row_cols = Vec::with_capacity(study.t());
    for e in study.estimates() {
        let col = variates
            .iter()
            .position(|v| v == &e.variate_id)
            .ok_or_else(|| {
                Error::Consistency(format!(
                    "study '{}' reports unknown variate '{}'",
                    study.study_id(),
                    e.variate_id
                ))
            })?;
        row_cols.push(col);
    }
    Ok(IndicatorMatrix { row_cols, cols: variates.len() })
}

// ---------------------------------------------------------------------------
// Dataset CSV: study_id,variate_id,estimate,std_err
// ---------------------------------------------------------------------------

/// Parse a dataset from CSV with header `study_id,variate_id,estimate,std_err`.
///
/// Rejects duplicate (study, variate) pairs and non-positive standard errors
/// with the offending line number. Studies keep their order of first
/// appearance; within a study, estimates keep file order.
pub fn parse_dataset_csv<R: Read>(reader: R) -> Result<MetaDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            message: format!("cannot read header: {e}"),
        })?;
        let expect = ["study_id", "variate_id", "estimate", "std_err"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {expect:?}, got {got:?}"),
            });
        }
    }

    // (study order, rows per study)
    let mut order: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<Estimate>> = Vec::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: format!("malformed CSV record: {e}"),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let study_id = record[0].to_string();
        let variate_id = record[1].to_string();
        if study_id.is_empty() || variate_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "study_id and variate_id must be non-empty".into(),
            });
        }
        let y: f64 = record[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("estimate '{}' is not a decimal literal", &record[2]),
        })?;
        let se: f64 = record[3].parse().map_err(|_| Error::Parse {
            line,
            message: format!("std_err '{}' is not a decimal literal", &record[3]),
        })?;
        if !y.is_finite() {
            return Err(Error::Parse { line, message: "estimate must be finite".into() });
        }
        if !(se > 0.0) || !se.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("std_err must be positive and finite, got {se}"),
            });
        }
        if !seen.insert((study_id.clone(), variate_id.clone())) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate (study_id, variate_id) pair ({study_id}, {variate_id})"),
            });
        }
        let idx = match order.iter().position(|s| s == &study_id) {
            Some(i) => i,
            None => {
                order.push(study_id.clone());
                rows.push(Vec::new());
                order.len() - 1
            }
        };
        rows[idx].push(Estimate { variate_id, y, se });
    }

    if order.is_empty() {
        return Err(Error::Parse { line: 1, message: "dataset contains no data rows".into() });
    }
    let studies = order
        .into_iter()
        .zip(rows)
        .map(|(id, ests)| Study::new(id, ests))
        .collect::<Result<Vec<_>>>()?;
    MetaDataset::new(studies)
}

/// Read a dataset CSV from disk.
pub fn read_dataset_csv(path: impl AsRef<Path>) -> Result<MetaDataset> {
    let file = std::fs::File::open(path)?;
    parse_dataset_csv(std::io::BufReader::new(file))
}

/// Write a dataset in the same CSV schema accepted by the parser.
pub fn write_dataset_csv<W: Write>(dataset: &MetaDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["study_id", "variate_id", "estimate", "std_err"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for s in dataset.studies() {
        for e in s.estimates() {
            wtr.write_record([
                s.study_id(),
                e.variate_id.as_str(),
                &format!("{}", e.y),
                &format!("{}", e.se),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    wtr.flush()?;
    Ok(())
}
