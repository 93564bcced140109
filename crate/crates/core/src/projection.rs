//! Random projection matrices and lifting of low-dimensional covariances.
//!
//! The q×p map R has iid N(0, 1/q) entries, which makes E[RᵀR] = I_p so that
//! the low-dimensional covariance keeps its scale when lifted back to the
//! full space. Entries come from ChaCha8, a counter-based stream generator,
//! so a matrix is reproduced bit-exactly from (p, q, seed). The map itself is
//! arbitrary and of no analytical interest; only its seed is surfaced.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const MIN_ROW_NORM: f64 = 1e-8;

/// A q×p random projection plus the seed that regenerates it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: DMatrix<f64>,
    seed: u64,
    seed_bumps: u32,
}

impl ProjectionMatrix {
    /// Wrap explicit entries (q <= p, all finite). Used by the CSV reader and
    /// by tests that need a hand-built map; [`make_projection`] is the
    /// standard constructor.
    pub fn from_entries(entries: DMatrix<f64>, seed: u64) -> Result<Self> {
        if entries.nrows() > entries.ncols() || entries.nrows() == 0 {
            return Err(Error::Domain(format!(
                "projection must have 1 <= q <= p, got q = {}, p = {}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("projection entries must be finite".into()));
        }
        Ok(Self { entries, seed, seed_bumps: 0 })
    }

    pub fn q(&self) -> usize {
        self.entries.nrows()
    }

    pub fn p(&self) -> usize {
        self.entries.ncols()
    }

    /// The seed that reproduces `entries` exactly. If the conditioning guard
    /// ever rejected a draw, this is the bumped seed actually used.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// How many times the row-norm guard bumped the seed (astronomically
    /// unlikely to be nonzero).
    pub fn seed_bumps(&self) -> u32 {
        self.seed_bumps
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Column `k` of R, i.e. the q-vector a variate maps to.
    pub fn column(&self, k: usize) -> nalgebra::DVectorView<'_, f64> {
        self.entries.column(k)
    }
}

/// Draw a q×p projection with iid N(0, 1/q) entries from ChaCha8 keyed by
/// `seed`. Deterministic given (p, q, seed); requires 1 <= q < p.
pub fn make_projection(p: usize, q: usize, seed: u64) -> Result<ProjectionMatrix> {
    if q < 1 || q >= p {
        return Err(Error::Domain(format!(
            "make_projection requires 1 <= q < p, got q = {q}, p = {p}"
        )));
    }
    let scale = 1.0 / (q as f64).sqrt();
    let mut use_seed = seed;
    let mut bumps = 0u32;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(use_seed);
        let mut entries = DMatrix::zeros(q, p);
        // row-major fill so the stream layout is stable
        for i in 0..q {
            for j in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                entries[(i, j)] = scale * z;
            }
        }
        let degenerate = (0..q).any(|i| entries.row(i).norm() < MIN_ROW_NORM);
        if !degenerate {
            return Ok(ProjectionMatrix { entries, seed: use_seed, seed_bumps: bumps });
        }
        use_seed = use_seed.wrapping_add(1);
        bumps += 1;
    }
}

/// Lift a q×q covariance back to the full space: Rᵀ Σ R.
///
/// Σ must be symmetric to 1e-10 and positive definite (Cholesky succeeds).
/// The result is symmetric positive semi-definite with rank at most q.
pub fn lift_covariance(r: &ProjectionMatrix, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = r.q();
    if sigma.nrows() != q || sigma.ncols() != q {
        return Err(Error::Consistency(format!(
            "covariance is {}x{} but the projection has q = {q}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let asym = (sigma - sigma.transpose()).abs().max();
    if asym > 1e-10 {
        return Err(Error::Domain(format!(
            "covariance is not symmetric (max asymmetry {asym:e})"
        )));
    }
    if sigma.clone().cholesky().is_none() {
        return Err(Error::Domain("covariance is not positive definite".into()));
    }
    let lifted = r.entries.transpose() * sigma * &r.entries;
    // exact symmetrization: the two triangles differ only by round-off
    Ok((&lifted + lifted.transpose()) * 0.5)
}

// ---------------------------------------------------------------------------
// CSV persistence: `# projection p=<p> q=<q> seed=<seed>` then q rows.
// ---------------------------------------------------------------------------

/// Write the projection as CSV with a one-line metadata header. Entries use
/// shortest-round-trip formatting, so reading back is bit-exact.
pub fn write_projection_csv<W: Write>(r: &ProjectionMatrix, mut writer: W) -> Result<()> {
    writeln!(writer, "# projection p={} q={} seed={}", r.p(), r.q(), r.seed())?;
    for i in 0..r.q() {
        let row: Vec<String> = (0..r.p()).map(|j| format!("{}", r.entries[(i, j)])).collect();
        writeln!(writer, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read a projection written by [`write_projection_csv`].
pub fn read_projection_csv<R: BufRead>(reader: R) -> Result<ProjectionMatrix> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(Error::Parse { line: 1, message: "empty projection file".into() })?
        .map_err(Error::Io)?;
    let rest = header.strip_prefix("# projection ").ok_or(Error::Parse {
        line: 1,
        message: "expected header '# projection p=<p> q=<q> seed=<seed>'".into(),
    })?;
    let mut p = None;
    let mut q = None;
    let mut seed = None;
    for token in rest.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or(Error::Parse {
            line: 1,
            message: format!("malformed header token '{token}'"),
        })?;
        let parsed: u64 = value.parse().map_err(|_| Error::Parse {
            line: 1,
            message: format!("'{value}' is not an integer"),
        })?;
        match key {
            "p" => p = Some(parsed as usize),
            "q" => q = Some(parsed as usize),
            "seed" => seed = Some(parsed),
            other => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unknown header key '{other}'"),
                })
            }
        }
    }
    let (p, q, seed) = match (p, q, seed) {
        (Some(p), Some(q), Some(s)) => (p, q, s),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "header must define p, q and seed".into(),
            })
        }
    };
    let mut entries = DMatrix::zeros(q, p);
    for i in 0..q {
        let line_no = i + 2;
        let line = lines
            .next()
            .ok_or(Error::Parse {
                line: line_no,
                message: format!("expected {q} data rows, found {i}"),
            })?
            .map_err(Error::Io)?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != p {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {p} columns, got {}", fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            entries[(i, j)] = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("'{f}' is not a decimal literal"),
            })?;
        }
    }
    ProjectionMatrix::from_entries(entries, seed)
}

/// Read a projection CSV from disk.
pub fn read_projection_csv_path(path: impl AsRef<Path>) -> Result<ProjectionMatrix> {
    let file = std::fs::File::open(path)?;
    read_projection_csv(std::io::BufReader::new(file))
}
