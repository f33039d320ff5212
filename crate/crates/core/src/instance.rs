//! On-disk artifact formats: instance files, run manifests, and report
//! schemas. Everything is JSON with a fixed field order, so rerunning a
//! command with the same flags and seeds reproduces data files byte for
//! byte (manifests carry wall-clock timings and are the one exception).
//!
//! Matrices are stored row-major; all index metadata (sparsity patterns,
//! subset labels) is 1-based in files, matching the `index_base` marker.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphs::SparsityPattern;
use crate::testgen::{BenchmarkId, FunctionSpec, MatrixInstanceSpec};
use crate::types::SymmetricMatrixSet;
use crate::vertex_min::GradientSample;

/// Index convention marker written into every instance file.
pub const INDEX_BASE: u32 = 1;

/// Row-major nested-array form of a matrix.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Rebuild a matrix from row-major nested arrays; all rows must have the
/// same length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("matrix with no rows".into()));
    }
    let ncols = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::DimensionMismatch {
                context: format!("row {i} of a row-major matrix"),
                expected: ncols,
                got: row.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrices_to_rows(set: &SymmetricMatrixSet) -> Vec<Vec<Vec<f64>>> {
    set.iter().map(matrix_to_rows).collect()
}

pub fn matrices_from_rows(rows: &[Vec<Vec<f64>>]) -> Result<SymmetricMatrixSet> {
    let mats = rows
        .iter()
        .map(|r| matrix_from_rows(r))
        .collect::<Result<Vec<_>>>()?;
    SymmetricMatrixSet::new(mats)
}

/// JSON-friendly mirror of the matrix-instance ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFile {
    /// The hidden rotation R (instances are Rᵀ H̃ R), row-major.
    pub rotation: Vec<Vec<f64>>,
    pub pattern: SparsityPattern,
}

/// A generated jointly-sparsifiable matrix set with its recorded truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixInstanceFile {
    pub kind: String,
    /// File name of the manifest describing the producing run.
    pub manifest: String,
    pub index_base: u32,
    pub spec: MatrixInstanceSpec,
    pub truth: GroundTruthFile,
    /// Row-major matrices, outer index = matrix number.
    pub matrices: Vec<Vec<Vec<f64>>>,
}

pub const MATRIX_INSTANCE_KIND: &str = "matrix-instance";
pub const FUNCTION_INSTANCE_KIND: &str = "function-instance";

/// Where a function instance came from, with everything needed to rebuild
/// its analytic form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FunctionSource {
    Generated { spec: FunctionSpec },
    Builtin {
        which: BenchmarkId,
        rotation_seed: Option<u64>,
        noisy: bool,
    },
}

/// Sampled derivatives of one function plus its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionInstanceFile {
    pub kind: String,
    pub manifest: String,
    pub index_base: u32,
    pub source: FunctionSource,
    pub d: usize,
    pub sample_seed: u64,
    /// Ground-truth support in the sparse coordinates, when known.
    pub truth_pattern: Option<SparsityPattern>,
    /// Ground-truth component-size profile, when known.
    pub truth_profile: Option<Vec<usize>>,
    pub gradients: GradientSample,
    /// Row-major Hessians at the same points as `gradients`.
    pub hessians: Vec<Vec<Vec<f64>>>,
}

/// Record of one CLI run: command line, configuration fingerprint, seeds,
/// file lineage, and per-stage wall-clock timings. Data files reference
/// their manifest by file name; timings make manifests the only artifact
/// excluded from byte-identical reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config_hash: String::new(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.inputs.push(path.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.outputs.push(path.as_ref().display().to_string());
        self
    }

    pub fn timing(&mut self, stage: &str, elapsed: Duration) -> &mut Self {
        self.timings_ms
            .insert(stage.to_string(), elapsed.as_secs_f64() * 1e3);
        self
    }
}

/// SHA-256 of the canonical JSON encoding, as lowercase hex.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json =
        serde_json::to_string(value).map_err(Error::json("hashing a configuration"))?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// Manifest file name conventions: `<output stem>.manifest.json`.
pub fn manifest_path(output: &Path) -> std::path::PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.manifest.json"))
}

/// Pretty JSON with a trailing newline; field order is the declaration
/// order, so identical values produce identical bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(Error::json(&format!("serializing {}", path.display())))?;
    fs::write(path, body + "\n").map_err(Error::io(&format!("writing {}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body =
        fs::read_to_string(path).map_err(Error::io(&format!("reading {}", path.display())))?;
    serde_json::from_str(&body).map_err(Error::json(&format!("parsing {}", path.display())))
}

/// One optimized block in a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub size: usize,
    pub init: String,
    pub final_loss: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaPattern {
    pub eta: f64,
    pub pattern: SparsityPattern,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaChi {
    pub eta: f64,
    pub chi: i64,
}

/// Output schema of `sparsify`: the resolved configuration, the staged
/// results, recovered patterns per threshold, and χ values when the
/// instance recorded its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsifyReport {
    pub manifest: String,
    pub config: serde_json::Value,
    /// "function" (full three-stage pipeline) or "matrices" (direct
    /// sparsification).
    pub mode: String,
    pub d: usize,
    pub d1: usize,
    pub profile: Vec<usize>,
    pub per_block: Vec<BlockReport>,
    pub patterns_by_eta: Vec<EtaPattern>,
    pub chi_by_eta: Option<Vec<EtaChi>>,
    /// Final loss minus the loss at the ground-truth rotation on the same
    /// basis (matrix mode with recorded truth only).
    pub loss_gap: Option<f64>,
    pub polished: bool,
    pub polish_residual: Option<f64>,
    pub singular_values: Option<Vec<f64>>,
    pub border_residual: Option<f64>,
    pub off_block_residual: Option<f64>,
    /// The recovered orthogonal transform, row-major.
    pub u_total: Vec<Vec<f64>>,
    pub seed: u64,
}

/// One estimated decomposition term norm, as a CSV row of the `anova`
/// command: subset (1-based, `+`-joined), p ("1" or "inf"), the estimate,
/// the first-order bound when available, and the sampling parameters.
#[derive(Debug, Clone)]
pub struct TermNormRow {
    pub subset: Vec<usize>,
    pub p: String,
    pub estimate: f64,
    pub bound: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

pub const TERM_CSV_HEADER: &str = "subset,p,estimate,bound,n_samples,seed";

impl TermNormRow {
    /// 1-based `+`-joined subset label, e.g. `{0,2}` → `1+3`.
    pub fn subset_label(&self) -> String {
        self.subset
            .iter()
            .map(|i| (i + 1).to_string())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn to_csv_line(&self) -> String {
        let bound = self
            .bound
            .map(|b| format!("{b:.17e}"))
            .unwrap_or_default();
        format!(
            "{},{},{:.17e},{},{},{}",
            self.subset_label(),
            self.p,
            self.estimate,
            bound,
            self.n_samples,
            self.seed
        )
    }
}
