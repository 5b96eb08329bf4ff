//! File formats: CSV matrices with a shape header, JSON model files and
//! binary 8-bit PGM images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::{FitConfig, FitResult, LevelSummary};
use crate::model::{DataKind, Dataset, Dictionary, NoiseParams, SupportMask};
use crate::synth::GroundTruth;
use crate::{MscError, Result};

pub const MODEL_FORMAT: &str = "msc-model-v1";

fn format_err(path: &Path, msg: impl std::fmt::Display) -> MscError {
    MscError::Format(format!("{}: {msg}", path.display()))
}

/// Renders a matrix with one row per line under a
/// `# msc-matrix rows=<r> cols=<c>` header.
pub fn matrix_to_csv(rows: &DMatrix<f64>) -> String {
    let mut out = format!("# msc-matrix rows={} cols={}\n", rows.nrows(), rows.ncols());
    for r in 0..rows.nrows() {
        for c in 0..rows.ncols() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{}", rows[(r, c)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(path, "empty file"))?;
    let (rows, cols) = parse_header(header).ok_or_else(|| format_err(path, format!("bad header {header:?}")))?;
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        seen += 1;
        if seen > rows {
            return Err(format_err(path, format!("more than the declared {rows} rows")));
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("line {}: cannot parse {field:?}", ln + 2)))?;
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(format_err(path, format!("line {}: expected {cols} columns, found {}", ln + 2, values.len() - before)));
        }
    }
    if seen != rows {
        return Err(format_err(path, format!("declared {rows} rows, found {seen}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.trim().strip_prefix("# msc-matrix")?;
    let mut rows = None;
    let mut cols = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("rows=") {
            rows = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("cols=") {
            cols = v.parse().ok();
        }
    }
    Some((rows?, cols?))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix_csv(&fs::read_to_string(path)?, path)
}

pub fn write_matrix(path: &Path, rows: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_csv(rows))?;
    Ok(())
}

/// `data.csv` → `data.loc.csv`.
pub fn locations_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    data.with_file_name(format!("{stem}.loc.csv"))
}

/// Reads a dataset (rows are signals), attaching `locations` (one row per
/// coordinate) when given.
pub fn read_dataset(path: &Path, locations: Option<&Path>, kind: DataKind) -> Result<Dataset> {
    let rows = read_matrix(path)?;
    let data = Dataset::new(rows.transpose(), kind)?;
    match locations {
        None => Ok(data),
        Some(lp) => {
            let loc = read_matrix(lp)?;
            if loc.nrows() != data.dim() {
                return Err(MscError::invalid(format!(
                    "{} has {} location rows but {} has {} columns per signal",
                    lp.display(),
                    loc.nrows(),
                    path.display(),
                    data.dim()
                )));
            }
            data.with_locations(loc)
        }
    }
}

/// Writes the signals and, when present, the location companion file.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_matrix(path, &data.values().transpose())?;
    if let Some(loc) = data.locations() {
        write_matrix(&locations_path(path), loc)?;
    }
    Ok(())
}

/// Serialized fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub n_signals: usize,
    pub dim: usize,
    pub n_atoms: usize,
    /// `m` rows of `K` entries.
    pub dictionary: Vec<Vec<f64>>,
    pub supports: Vec<String>,
    pub weights: Vec<f64>,
    pub noise: Vec<NoiseParams>,
    pub chosen_d: usize,
    pub bic_trace: Vec<(usize, f64)>,
    pub levels: Vec<LevelRecord>,
    pub assignments: Vec<usize>,
    pub config: FitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub d: usize,
    pub loglik: f64,
    pub bic: f64,
    pub n_params: usize,
    pub expanded: usize,
    pub pruned: usize,
    pub iterations: usize,
}

impl From<&LevelSummary> for LevelRecord {
    fn from(l: &LevelSummary) -> Self {
        LevelRecord {
            d: l.d,
            loglik: l.loglik,
            bic: l.bic,
            n_params: l.n_params,
            expanded: l.expanded,
            pruned: l.pruned,
            iterations: l.trace.len().saturating_sub(1),
        }
    }
}

impl ModelFile {
    pub fn from_fit(fit: &FitResult, config: &FitConfig) -> Self {
        let atoms = fit.state.dictionary.atoms();
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            n_signals: fit.assignments.len(),
            dim: atoms.nrows(),
            n_atoms: atoms.ncols(),
            dictionary: (0..atoms.nrows()).map(|r| atoms.row(r).iter().copied().collect()).collect(),
            supports: fit.state.supports.iter().map(|m| m.to_string()).collect(),
            weights: fit.state.weights.clone(),
            noise: fit.state.noise.clone(),
            chosen_d: fit.chosen_d,
            bic_trace: fit.bic_trace(),
            levels: fit.levels.iter().map(LevelRecord::from).collect(),
            assignments: fit.assignments.clone(),
            config: config.clone(),
        }
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        let flat: Vec<f64> = self.dictionary.iter().flatten().copied().collect();
        if self.dictionary.len() != self.dim || flat.len() != self.dim * self.n_atoms {
            return Err(MscError::Format("dictionary shape does not match the header".into()));
        }
        Dictionary::new(DMatrix::from_row_slice(self.dim, self.n_atoms, &flat))
    }

    pub fn support_masks(&self) -> Result<Vec<SupportMask>> {
        self.supports.iter().map(|s| s.parse()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| MscError::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelFile = serde_json::from_str(text).map_err(|e| MscError::Format(e.to_string()))?;
        if model.format != MODEL_FORMAT {
            return Err(MscError::Format(format!("unsupported model format {:?}", model.format)));
        }
        Ok(model)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?).map_err(|e| match e {
            MscError::Format(msg) => format_err(path, msg),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Generating parameters of a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub format: String,
    /// `m` rows of `K` entries.
    pub dictionary: Vec<Vec<f64>>,
    pub supports: Vec<String>,
    pub coefficients: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub sigma2: Vec<f64>,
    pub omega: Option<f64>,
}

impl From<&GroundTruth> for TruthFile {
    fn from(t: &GroundTruth) -> Self {
        let atoms = t.dictionary.atoms();
        TruthFile {
            format: "msc-truth-v1".to_string(),
            dictionary: (0..atoms.nrows()).map(|r| atoms.row(r).iter().copied().collect()).collect(),
            supports: t.supports.iter().map(|m| m.to_string()).collect(),
            coefficients: t.coefficients.clone(),
            assignments: t.assignments.clone(),
            sigma2: t.sigma2.clone(),
            omega: t.omega,
        }
    }
}

impl TruthFile {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| MscError::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PgmImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(MscError::invalid("pixel count does not match width × height"));
        }
        Ok(PgmImage { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Pixels as an `height × width` matrix of floats.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.height, self.width, |r, c| self.get(r, c) as f64)
    }

    /// Rounds and clamps to `[0, 255]`.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (h, w) = m.shape();
        let mut pixels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                pixels.push(m[(r, c)].round().clamp(0.0, 255.0) as u8);
            }
        }
        PgmImage { width: w, height: h, pixels }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(MscError::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(MscError::Format(format!("expected binary PGM (P5), found {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| MscError::Format(format!("bad PGM header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(MscError::Format(format!("only maxval 255 is supported, found {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let payload = bytes.get(pos..).unwrap_or(&[]);
        if payload.len() != width * height {
            return Err(MscError::Format(format!(
                "PGM payload has {} bytes, expected {}",
                payload.len(),
                width * height
            )));
        }
        PgmImage::new(width, height, payload.to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?).map_err(|e| match e {
            MscError::Format(msg) => format_err(path, msg),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}
