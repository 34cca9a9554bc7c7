//! On-disk formats: dataset manifests with per-function matrices (raw f64
//! little-endian, CSV, or one consolidated container) and the versioned
//! binary basis-system file.

use crate::basis::{BasisKind, BasisSystem, TensorIndex, TensorTransform, WaveletSpec};
use crate::grid::{DatasetError, FunctionRecord, FunctionalDataset, SurfaceGrid};
use crate::wavelet::{Boundary, FilterKind};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("function {id}: matrix file {path} has wrong size (expected {expected} values, got {got})")]
    MatrixSize { id: String, path: PathBuf, expected: usize, got: usize },
    #[error("function {id}: csv parse error in {path} line {line}: {msg}")]
    Csv { id: String, path: PathBuf, line: usize, msg: String },
    #[error("container {path}: {msg}")]
    Container { path: PathBuf, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("basis file {path}: {msg}")]
    BasisFile { path: PathBuf, msg: String },
    #[error(transparent)]
    Basis(#[from] crate::basis::BasisError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).map_err(file_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestGrid {
    n_meridional: usize,
    n_circumferential: usize,
    theta_range: (f64, f64),
    phi_range: (f64, f64),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFunction {
    id: String,
    subject_id: String,
    unit_id: String,
    serial_level: f64,
    covariates: BTreeMap<String, f64>,
    /// Path to a per-function matrix file, absent when a container is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    /// "f64le" (row-major raw doubles) or "csv".
    #[serde(skip_serializing_if = "Option::is_none")]
    format: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    grid: ManifestGrid,
    /// Consolidated matrix container holding all functions in manifest order.
    #[serde(skip_serializing_if = "Option::is_none")]
    container: Option<String>,
    functions: Vec<ManifestFunction>,
}

const CONTAINER_MAGIC: &[u8; 8] = b"SPFMMDS1";

/// Write a dataset as `manifest.json` plus a consolidated binary container
/// `data.bin` in `dir`.
pub fn write_dataset(dir: &Path, ds: &FunctionalDataset) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    let manifest = Manifest {
        grid: ManifestGrid {
            n_meridional: ds.grid.n_meridional,
            n_circumferential: ds.grid.n_circumferential,
            theta_range: ds.grid.theta_range,
            phi_range: ds.grid.phi_range,
        },
        container: Some("data.bin".to_string()),
        functions: ds
            .functions
            .iter()
            .map(|f| ManifestFunction {
                id: f.id.clone(),
                subject_id: f.subject_id.clone(),
                unit_id: f.unit_id.clone(),
                serial_level: f.serial_level,
                covariates: f.covariates.clone(),
                path: None,
                format: None,
            })
            .collect(),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CONTAINER_MAGIC);
    bytes.extend_from_slice(&(ds.grid.n_meridional as u32).to_le_bytes());
    bytes.extend_from_slice(&(ds.grid.n_circumferential as u32).to_le_bytes());
    bytes.extend_from_slice(&(ds.n() as u32).to_le_bytes());
    for f in &ds.functions {
        for r in 0..ds.grid.n_meridional {
            for c in 0..ds.grid.n_circumferential {
                bytes.extend_from_slice(&f.values[(r, c)].to_le_bytes());
            }
        }
    }
    write_atomic(&dir.join("data.bin"), &bytes)?;
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

fn read_matrix_f64le(
    path: &Path,
    id: &str,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, IoError> {
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    let expected = rows * cols;
    if bytes.len() != expected * 8 {
        return Err(IoError::MatrixSize {
            id: id.to_string(),
            path: path.to_path_buf(),
            expected,
            got: bytes.len() / 8,
        });
    }
    let mut m = DMatrix::zeros(rows, cols);
    let mut buf = [0u8; 8];
    for r in 0..rows {
        for c in 0..cols {
            let off = (r * cols + c) * 8;
            buf.copy_from_slice(&bytes[off..off + 8]);
            m[(r, c)] = f64::from_le_bytes(buf);
        }
    }
    Ok(m)
}

fn read_matrix_csv(
    path: &Path,
    id: &str,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let mut m = DMatrix::zeros(rows, cols);
    let mut row = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if row >= rows {
            return Err(IoError::MatrixSize {
                id: id.to_string(),
                path: path.to_path_buf(),
                expected: rows * cols,
                got: (row + 1) * cols,
            });
        }
        let mut col = 0usize;
        for tok in line.split(',') {
            if col >= cols {
                return Err(IoError::Csv {
                    id: id.to_string(),
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("more than {cols} columns"),
                });
            }
            let v: f64 = tok.trim().parse().map_err(|e| IoError::Csv {
                id: id.to_string(),
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("{e}"),
            })?;
            m[(row, col)] = v;
            col += 1;
        }
        if col != cols {
            return Err(IoError::Csv {
                id: id.to_string(),
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected {cols} columns, got {col}"),
            });
        }
        row += 1;
    }
    if row != rows {
        return Err(IoError::MatrixSize {
            id: id.to_string(),
            path: path.to_path_buf(),
            expected: rows * cols,
            got: row * cols,
        });
    }
    Ok(m)
}

/// Load a dataset from a manifest path; the dataset is validated before
/// returning.
pub fn read_dataset(manifest_path: &Path) -> Result<FunctionalDataset, IoError> {
    let text = std::fs::read_to_string(manifest_path).map_err(file_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let grid = SurfaceGrid::with_ranges(
        manifest.grid.n_meridional,
        manifest.grid.n_circumferential,
        manifest.grid.theta_range,
        manifest.grid.phi_range,
    )?;
    let rows = grid.n_meridional;
    let cols = grid.n_circumferential;
    let mut container_data: Option<Vec<u8>> = None;
    if let Some(container) = &manifest.container {
        let cpath = dir.join(container);
        let bytes = std::fs::read(&cpath).map_err(file_err(&cpath))?;
        if bytes.len() < 20 || &bytes[..8] != CONTAINER_MAGIC {
            return Err(IoError::Container { path: cpath, msg: "bad magic".into() });
        }
        let rd = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let (cr, cc, cn) = (rd(8), rd(12), rd(16));
        if cr != rows || cc != cols || cn != manifest.functions.len() {
            return Err(IoError::Container {
                path: cpath,
                msg: format!(
                    "container is {cn} x {cr} x {cc}, manifest expects {} x {rows} x {cols}",
                    manifest.functions.len()
                ),
            });
        }
        let expected = 20 + cn * rows * cols * 8;
        if bytes.len() != expected {
            return Err(IoError::Container {
                path: cpath,
                msg: format!("file has {} bytes, expected {expected}", bytes.len()),
            });
        }
        container_data = Some(bytes);
    }
    let mut functions = Vec::with_capacity(manifest.functions.len());
    for (i, mf) in manifest.functions.iter().enumerate() {
        let values = if let Some(bytes) = &container_data {
            let mut m = DMatrix::zeros(rows, cols);
            let base = 20 + i * rows * cols * 8;
            let mut buf = [0u8; 8];
            for r in 0..rows {
                for c in 0..cols {
                    let off = base + (r * cols + c) * 8;
                    buf.copy_from_slice(&bytes[off..off + 8]);
                    m[(r, c)] = f64::from_le_bytes(buf);
                }
            }
            m
        } else {
            let rel = mf.path.as_ref().ok_or_else(|| IoError::Container {
                path: manifest_path.to_path_buf(),
                msg: format!("function {} has neither container nor path", mf.id),
            })?;
            let fpath = dir.join(rel);
            match mf.format.as_deref().unwrap_or("f64le") {
                "csv" => read_matrix_csv(&fpath, &mf.id, rows, cols)?,
                _ => read_matrix_f64le(&fpath, &mf.id, rows, cols)?,
            }
        };
        functions.push(FunctionRecord {
            id: mf.id.clone(),
            subject_id: mf.subject_id.clone(),
            unit_id: mf.unit_id.clone(),
            serial_level: mf.serial_level,
            covariates: mf.covariates.clone(),
            values,
        });
    }
    let ds = FunctionalDataset { grid, functions };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Basis-system file
// ---------------------------------------------------------------------------

const BASIS_MAGIC: &[u8; 8] = b"SPFMMBS1";

fn boundary_code(b: Boundary) -> u8 {
    match b {
        Boundary::Reflection => 0,
        Boundary::Periodic => 1,
    }
}

fn boundary_from(code: u8, path: &Path) -> Result<Boundary, IoError> {
    match code {
        0 => Ok(Boundary::Reflection),
        1 => Ok(Boundary::Periodic),
        other => Err(IoError::BasisFile {
            path: path.to_path_buf(),
            msg: format!("unknown boundary code {other}"),
        }),
    }
}

fn filter_code(f: FilterKind) -> u8 {
    match f {
        FilterKind::Db1 => 1,
        FilterKind::Db2 => 2,
        FilterKind::Db3 => 3,
        FilterKind::Db4 => 4,
        FilterKind::Db5 => 5,
    }
}

fn filter_from(code: u8, path: &Path) -> Result<FilterKind, IoError> {
    match code {
        1 => Ok(FilterKind::Db1),
        2 => Ok(FilterKind::Db2),
        3 => Ok(FilterKind::Db3),
        4 => Ok(FilterKind::Db4),
        5 => Ok(FilterKind::Db5),
        other => Err(IoError::BasisFile {
            path: path.to_path_buf(),
            msg: format!("unknown filter code {other}"),
        }),
    }
}

/// Serialize a basis system (wavelet or principal-component flavor).
pub fn write_basis(path: &Path, basis: &BasisSystem) -> Result<(), IoError> {
    let mut w: Vec<u8> = Vec::new();
    w.extend_from_slice(BASIS_MAGIC);
    w.push(filter_code(basis.spec.filter));
    w.extend_from_slice(&(basis.spec.levels as u32).to_le_bytes());
    w.push(boundary_code(basis.spec.boundary_meridional));
    w.push(boundary_code(basis.spec.boundary_circumferential));
    w.extend_from_slice(&(basis.grid.n_meridional as u32).to_le_bytes());
    w.extend_from_slice(&(basis.grid.n_circumferential as u32).to_le_bytes());
    for v in [
        basis.grid.theta_range.0,
        basis.grid.theta_range.1,
        basis.grid.phi_range.0,
        basis.grid.phi_range.1,
    ] {
        w.extend_from_slice(&v.to_le_bytes());
    }
    w.extend_from_slice(&(basis.retained.len() as u32).to_le_bytes());
    for &r in &basis.retained {
        w.extend_from_slice(&(r as u32).to_le_bytes());
    }
    for idx in &basis.index_map {
        w.push(idx.scale_meridional);
        w.push(idx.scale_circumferential);
        w.extend_from_slice(&idx.loc_meridional.to_le_bytes());
        w.extend_from_slice(&idx.loc_circumferential.to_le_bytes());
    }
    match &basis.kind {
        BasisKind::Wavelet => w.push(0),
        BasisKind::PrincipalComponents { loadings } => {
            w.push(1);
            w.extend_from_slice(&(loadings.nrows() as u32).to_le_bytes());
            w.extend_from_slice(&(loadings.ncols() as u32).to_le_bytes());
            for c in 0..loadings.ncols() {
                for r in 0..loadings.nrows() {
                    w.extend_from_slice(&loadings[(r, c)].to_le_bytes());
                }
            }
        }
    }
    // weights of the delivered basis (count matches its column space)
    w.extend_from_slice(&(basis.weights.len() as u32).to_le_bytes());
    for &wt in &basis.weights {
        w.extend_from_slice(&wt.to_le_bytes());
    }
    write_atomic(path, &w)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::BasisFile {
                path: self.path.to_path_buf(),
                msg: "truncated file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a basis system, re-deriving the synthesis rows and analysis operator
/// from the stored transform description.
pub fn read_basis(path: &Path) -> Result<BasisSystem, IoError> {
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    if bytes.len() < 8 || &bytes[..8] != BASIS_MAGIC {
        return Err(IoError::BasisFile { path: path.to_path_buf(), msg: "bad magic".into() });
    }
    let mut c = Cursor { bytes: &bytes, pos: 8, path };
    let filter = filter_from(c.u8()?, path)?;
    let levels = c.u32()? as usize;
    let bm = boundary_from(c.u8()?, path)?;
    let bc = boundary_from(c.u8()?, path)?;
    let nm = c.u32()? as usize;
    let nc = c.u32()? as usize;
    let theta = (c.f64()?, c.f64()?);
    let phi = (c.f64()?, c.f64()?);
    let grid = SurfaceGrid::with_ranges(nm, nc, theta, phi)?;
    let spec = WaveletSpec {
        filter,
        levels,
        boundary_meridional: bm,
        boundary_circumferential: bc,
    };
    let kr = c.u32()? as usize;
    let mut retained = Vec::with_capacity(kr);
    for _ in 0..kr {
        retained.push(c.u32()? as usize);
    }
    let mut index_map = Vec::with_capacity(kr);
    for _ in 0..kr {
        let sm = c.u8()?;
        let sc = c.u8()?;
        let lm = c.u32()?;
        let lc = c.u32()?;
        index_map.push(TensorIndex {
            scale_meridional: sm,
            scale_circumferential: sc,
            loc_meridional: lm,
            loc_circumferential: lc,
        });
    }
    let kind_tag = c.u8()?;
    let loadings = match kind_tag {
        0 => None,
        1 => {
            let rows = c.u32()? as usize;
            let cols = c.u32()? as usize;
            let mut l = DMatrix::zeros(rows, cols);
            for col in 0..cols {
                for row in 0..rows {
                    l[(row, col)] = c.f64()?;
                }
            }
            Some(l)
        }
        other => {
            return Err(IoError::BasisFile {
                path: path.to_path_buf(),
                msg: format!("unknown basis kind {other}"),
            })
        }
    };
    let kw = c.u32()? as usize;
    let mut weights = Vec::with_capacity(kw);
    for _ in 0..kw {
        weights.push(c.f64()?);
    }
    let transform = TensorTransform::new(grid, spec)?;
    match loadings {
        None => {
            if weights.len() != kr {
                return Err(IoError::BasisFile {
                    path: path.to_path_buf(),
                    msg: format!("{} weights for {kr} retained coefficients", weights.len()),
                });
            }
            Ok(BasisSystem::from_wavelet(&transform, retained, weights)?)
        }
        Some(l) => {
            let placeholder = vec![1.0 / kr.max(1) as f64; kr];
            let wavelet = BasisSystem::from_wavelet(&transform, retained, placeholder)?;
            Ok(wavelet.with_loadings(l, weights)?)
        }
    }
}

/// SHA-256 style checksum is overkill here; a simple FNV-1a fingerprint keeps
/// manifests dependency-light while detecting stale artifacts.
pub fn fingerprint_file(path: &Path) -> Result<u64, IoError> {
    let mut f = std::fs::File::open(path).map_err(file_err(path))?;
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf).map_err(file_err(path))?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    Ok(hash)
}

/// Fingerprint of a byte slice (same FNV-1a stream as `fingerprint_file`).
pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Write a CSV of band summaries over labeled points.
pub fn write_band_csv<W: Write>(
    mut w: W,
    labels: &[String],
    band: &crate::inference::BandSummary,
) -> std::io::Result<()> {
    writeln!(w, "point,mean,sd,pw_lo,pw_hi,joint_lo,joint_hi")?;
    for (i, label) in labels.iter().enumerate() {
        writeln!(
            w,
            "{label},{},{},{},{},{},{}",
            band.mean[i],
            band.sd[i],
            band.pointwise_lo[i],
            band.pointwise_hi[i],
            band.joint_lo[i],
            band.joint_hi[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn sample_dataset() -> FunctionalDataset {
        let grid = SurfaceGrid::new(8, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let functions = (0..5)
            .map(|i| FunctionRecord {
                id: format!("f{i}"),
                subject_id: format!("s{}", i / 2),
                unit_id: format!("u{i}"),
                serial_level: 7.0 + i as f64,
                covariates: BTreeMap::from([("age".to_string(), 30.0 + i as f64)]),
                values: DMatrix::from_fn(8, 8, |_, _| rng.gen::<f64>()),
            })
            .collect();
        FunctionalDataset { grid, functions }
    }

    #[test]
    fn dataset_round_trip_container() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.n(), 5);
        for (a, b) in ds.functions.iter().zip(&back.functions) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.unit_id, b.unit_id);
            assert_eq!(a.covariates, b.covariates);
        }
    }

    #[test]
    fn dataset_reads_per_function_files() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        // write one function as raw f64, one as CSV
        let mut raw = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                raw.extend_from_slice(&ds.functions[0].values[(r, c)].to_le_bytes());
            }
        }
        std::fs::write(dir.path().join("f0.bin"), &raw).unwrap();
        let mut csv = String::new();
        for r in 0..8 {
            let row: Vec<String> =
                (0..8).map(|c| format!("{}", ds.functions[1].values[(r, c)])).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        std::fs::write(dir.path().join("f1.csv"), &csv).unwrap();
        let manifest = serde_json::json!({
            "grid": {"n_meridional": 8, "n_circumferential": 8,
                      "theta_range": [9.0, 24.0], "phi_range": [0.0, 360.0]},
            "functions": [
                {"id": "f0", "subject_id": "s0", "unit_id": "u0", "serial_level": 7.0,
                 "covariates": {"age": 30.0}, "path": "f0.bin", "format": "f64le"},
                {"id": "f1", "subject_id": "s0", "unit_id": "u1", "serial_level": 8.0,
                 "covariates": {"age": 31.0}, "path": "f1.csv", "format": "csv"}
            ]
        });
        std::fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
        let back = read_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.n(), 2);
        assert!((back.functions[0].values[(3, 4)] - ds.functions[0].values[(3, 4)]).abs() < 1e-15);
        assert!((back.functions[1].values[(5, 2)] - ds.functions[1].values[(5, 2)]).abs() < 1e-12);
    }

    #[test]
    fn dataset_errors_name_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = serde_json::json!({
            "grid": {"n_meridional": 8, "n_circumferential": 8,
                      "theta_range": [9.0, 24.0], "phi_range": [0.0, 360.0]},
            "functions": [
                {"id": "broken", "subject_id": "s0", "unit_id": "u0", "serial_level": 7.0,
                 "covariates": {}, "path": "missing_size.bin", "format": "f64le"}
            ]
        });
        std::fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
        std::fs::write(dir.path().join("missing_size.bin"), [0u8; 16]).unwrap();
        let err = read_dataset(&dir.path().join("manifest.json")).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("broken"), "{msg}");
        assert!(msg.contains("missing_size.bin"), "{msg}");
    }

    #[test]
    fn basis_round_trip_both_kinds() {
        use crate::basis::{energy_weights, TensorTransform, WaveletSpec};
        use crate::wavelet::Boundary;
        let grid = SurfaceGrid::new(8, 8).unwrap();
        let spec = WaveletSpec {
            levels: 1,
            boundary_meridional: Boundary::Periodic,
            ..WaveletSpec::default()
        };
        let tr = TensorTransform::new(grid, spec).unwrap();
        let retained: Vec<usize> = (0..24).collect();
        let basis =
            BasisSystem::from_wavelet(&tr, retained, vec![1.0 / 24.0; 24]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        write_basis(&path, &basis).unwrap();
        let back = read_basis(&path).unwrap();
        assert_eq!(back.retained, basis.retained);
        assert_eq!(back.weights, basis.weights);
        assert!((back.synthesis_rows() - basis.synthesis_rows()).amax() < 1e-15);

        // principal-component flavor
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let coeffs = DMatrix::from_fn(30, 24, |_, _| rng.gen::<f64>() - 0.5);
        let weights = energy_weights(&coeffs).unwrap();
        let _ = weights;
        let (pc, _) = basis.pc_basis(&coeffs, 0.95).unwrap();
        let path2 = dir.path().join("basis_pc.bin");
        write_basis(&path2, &pc).unwrap();
        let back = read_basis(&path2).unwrap();
        assert_eq!(back.k(), pc.k());
        assert!((back.synthesis_rows() - pc.synthesis_rows()).amax() < 1e-12);
    }
}
