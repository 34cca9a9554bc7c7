//! Stage implementations and shared plumbing: failure classes mapped to exit
//! codes, stage directory layout, and the coefficient/truth binary files.

pub mod diagnose;
pub mod fit;
pub mod infer;
pub mod select;
pub mod simulate;
pub mod transform;

use anyhow::{anyhow, Context, Result};
use nalgebra::DMatrix;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;

/// Failure classes; main maps them to exit codes 2 / 3 / 4.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Numerical(anyhow::Error),
    NonConvergence(String),
}

pub type CmdResult = std::result::Result<(), Failure>;

pub fn validation<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Validation(e.into())
}

pub fn numerical<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Numerical(e.into())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    pub strict_convergence: bool,
}

pub struct Stages;

impl Stages {
    pub fn simulate(cfg: &RunConfig) -> PathBuf {
        cfg.run.output_dir.join("simulate")
    }

    pub fn transform(cfg: &RunConfig) -> PathBuf {
        cfg.run.output_dir.join("transform")
    }

    pub fn select(cfg: &RunConfig) -> PathBuf {
        cfg.run.output_dir.join("select")
    }

    pub fn fit(cfg: &RunConfig) -> PathBuf {
        cfg.run.output_dir.join("fit")
    }

    pub fn infer(cfg: &RunConfig) -> PathBuf {
        cfg.run.output_dir.join("infer")
    }

    pub fn diagnose(cfg: &RunConfig) -> PathBuf {
        cfg.run.output_dir.join("diagnose")
    }

    /// The dataset manifest this run reads: explicit path or the simulate
    /// stage output.
    pub fn dataset_manifest(cfg: &RunConfig) -> PathBuf {
        cfg.dataset
            .path
            .clone()
            .unwrap_or_else(|| Self::simulate(cfg).join("manifest.json"))
    }
}

// ---------------------------------------------------------------------------
// Coefficient matrix file
// ---------------------------------------------------------------------------

const COEFF_MAGIC: &[u8; 8] = b"SPFMMCF1";

pub fn write_coeffs(path: &Path, coeffs: &DMatrix<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + coeffs.len() * 8);
    bytes.extend_from_slice(COEFF_MAGIC);
    bytes.extend_from_slice(&(coeffs.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(coeffs.ncols() as u32).to_le_bytes());
    for r in 0..coeffs.nrows() {
        for c in 0..coeffs.ncols() {
            bytes.extend_from_slice(&coeffs[(r, c)].to_le_bytes());
        }
    }
    spfmm::io::write_atomic(path, &bytes)
        .with_context(|| format!("writing coefficients {}", path.display()))?;
    Ok(())
}

pub fn read_coeffs(path: &Path) -> Result<DMatrix<f64>> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading coefficients {}", path.display()))?;
    if bytes.len() < 16 || &bytes[..8] != COEFF_MAGIC {
        return Err(anyhow!("{} is not a coefficient file", path.display()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * k * 8 {
        return Err(anyhow!("{}: wrong size for {n} x {k}", path.display()));
    }
    let mut m = DMatrix::zeros(n, k);
    let mut buf = [0u8; 8];
    for r in 0..n {
        for c in 0..k {
            let off = 16 + (r * k + c) * 8;
            buf.copy_from_slice(&bytes[off..off + 8]);
            m[(r, c)] = f64::from_le_bytes(buf);
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Truth parameter file (simulate output)
// ---------------------------------------------------------------------------

const TRUTH_MAGIC: &[u8; 8] = b"SPFMMTR1";

pub struct TruthFile {
    /// Fixed effects, A x K over the full tensor space.
    pub fixed: DMatrix<f64>,
    /// Variance components per z-block, H x K.
    pub vc: DMatrix<f64>,
    pub s: Vec<f64>,
}

pub fn write_truth(path: &Path, t: &TruthFile) -> Result<()> {
    let (a, h, k) = (t.fixed.nrows(), t.vc.nrows(), t.s.len());
    let mut bytes = Vec::new();
    bytes.extend_from_slice(TRUTH_MAGIC);
    bytes.extend_from_slice(&(a as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(k as u32).to_le_bytes());
    for r in 0..a {
        for c in 0..k {
            bytes.extend_from_slice(&t.fixed[(r, c)].to_le_bytes());
        }
    }
    for r in 0..h {
        for c in 0..k {
            bytes.extend_from_slice(&t.vc[(r, c)].to_le_bytes());
        }
    }
    for v in &t.s {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    spfmm::io::write_atomic(path, &bytes)
        .with_context(|| format!("writing truth file {}", path.display()))?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<TruthFile> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading truth file {}", path.display()))?;
    if bytes.len() < 20 || &bytes[..8] != TRUTH_MAGIC {
        return Err(anyhow!("{} is not a truth file", path.display()));
    }
    let rd = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (a, h, k) = (rd(8), rd(12), rd(16));
    let mut pos = 20usize;
    let mut take = |n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            buf.copy_from_slice(&bytes[pos..pos + 8]);
            out.push(f64::from_le_bytes(buf));
            pos += 8;
        }
        out
    };
    let fixed_flat = take(a * k);
    let vc_flat = take(h * k);
    let s = take(k);
    let fixed = DMatrix::from_fn(a, k, |r, c| fixed_flat[r * k + c]);
    let vc = DMatrix::from_fn(h, k, |r, c| vc_flat[r * k + c]);
    Ok(TruthFile { fixed, vc, s })
}
