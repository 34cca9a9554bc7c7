//! Surface sampling grids and collections of surface-sampled functions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("grid too small: {0} x {1} (need at least 8 x 8)")]
    GridTooSmall(usize, usize),
    #[error("function {id}: dimension mismatch, got {rows} x {cols}, grid is {grid_rows} x {grid_cols}")]
    DimensionMismatch { id: String, rows: usize, cols: usize, grid_rows: usize, grid_cols: usize },
    #[error("function {id}: non-finite value at meridional index {row}, circumferential index {col}")]
    NonFiniteValue { id: String, row: usize, col: usize },
    #[error("function {id}: missing covariate {name:?}")]
    MissingCovariate { id: String, name: String },
    #[error("dataset is empty")]
    Empty,
    #[error("function {id}: serial level {level} is not positive")]
    NonPositiveSerialLevel { id: String, level: f64 },
}

/// Rectangular sampling grid on the projected surface. Rows index the
/// meridional angle theta, columns the circumferential angle phi; phi is
/// circular with period 360 degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub n_meridional: usize,
    pub n_circumferential: usize,
    /// [theta_min, theta_max] in degrees.
    pub theta_range: (f64, f64),
    /// [phi_min, phi_max) in degrees; the grid covers the full circle.
    pub phi_range: (f64, f64),
}

impl SurfaceGrid {
    pub fn new(n_meridional: usize, n_circumferential: usize) -> Result<Self, DatasetError> {
        Self::with_ranges(n_meridional, n_circumferential, (9.0, 24.0), (0.0, 360.0))
    }

    pub fn with_ranges(
        n_meridional: usize,
        n_circumferential: usize,
        theta_range: (f64, f64),
        phi_range: (f64, f64),
    ) -> Result<Self, DatasetError> {
        if n_meridional < 8 || n_circumferential < 8 {
            return Err(DatasetError::GridTooSmall(n_meridional, n_circumferential));
        }
        Ok(SurfaceGrid { n_meridional, n_circumferential, theta_range, phi_range })
    }

    pub fn total(&self) -> usize {
        self.n_meridional * self.n_circumferential
    }

    /// Meridional angle of grid row `r`, degrees (equally spaced, inclusive).
    pub fn theta_at(&self, r: usize) -> f64 {
        let (lo, hi) = self.theta_range;
        if self.n_meridional == 1 {
            return lo;
        }
        lo + (hi - lo) * r as f64 / (self.n_meridional - 1) as f64
    }

    /// Circumferential angle of grid column `c`, degrees (equally spaced,
    /// endpoint excluded since phi is circular).
    pub fn phi_at(&self, c: usize) -> f64 {
        let (lo, hi) = self.phi_range;
        lo + (hi - lo) * c as f64 / self.n_circumferential as f64
    }

    /// Flat index of grid point (row, col); row-major with meridional rows.
    pub fn flat(&self, r: usize, c: usize) -> usize {
        r * self.n_circumferential + c
    }

    pub fn unflat(&self, t: usize) -> (usize, usize) {
        (t / self.n_circumferential, t % self.n_circumferential)
    }
}

/// One sampled surface function plus its metadata.
#[derive(Debug, Clone)]
pub struct FunctionRecord {
    pub id: String,
    pub subject_id: String,
    /// Observation unit (an eye in the motivating study); random-effect
    /// grouping below the subject.
    pub unit_id: String,
    /// Serial level at which the surface was observed (pressure in mmHg).
    pub serial_level: f64,
    pub covariates: BTreeMap<String, f64>,
    /// n_meridional x n_circumferential samples.
    pub values: DMatrix<f64>,
}

/// A collection of surface functions sharing one grid.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    pub grid: SurfaceGrid,
    pub functions: Vec<FunctionRecord>,
}

impl FunctionalDataset {
    pub fn n(&self) -> usize {
        self.functions.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.functions.is_empty() {
            return Err(DatasetError::Empty);
        }
        for f in &self.functions {
            if f.values.nrows() != self.grid.n_meridional
                || f.values.ncols() != self.grid.n_circumferential
            {
                return Err(DatasetError::DimensionMismatch {
                    id: f.id.clone(),
                    rows: f.values.nrows(),
                    cols: f.values.ncols(),
                    grid_rows: self.grid.n_meridional,
                    grid_cols: self.grid.n_circumferential,
                });
            }
            for r in 0..f.values.nrows() {
                for c in 0..f.values.ncols() {
                    if !f.values[(r, c)].is_finite() {
                        return Err(DatasetError::NonFiniteValue {
                            id: f.id.clone(),
                            row: r,
                            col: c,
                        });
                    }
                }
            }
            if f.serial_level <= 0.0 {
                return Err(DatasetError::NonPositiveSerialLevel {
                    id: f.id.clone(),
                    level: f.serial_level,
                });
            }
        }
        Ok(())
    }

    /// Distinct serial levels across all functions, ascending.
    pub fn serial_levels(&self) -> Vec<f64> {
        let mut levels: Vec<f64> = Vec::new();
        for f in &self.functions {
            if !levels.iter().any(|&l| l == f.serial_level) {
                levels.push(f.serial_level);
            }
        }
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels
    }

    /// Distinct unit ids in first-occurrence-stable sorted order.
    pub fn unit_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.functions.iter().map(|f| f.unit_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.functions.iter().map(|f| f.subject_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Covariate values in function order; errors if any function lacks it.
    pub fn covariate(&self, name: &str) -> Result<Vec<f64>, DatasetError> {
        self.functions
            .iter()
            .map(|f| {
                f.covariates.get(name).copied().ok_or_else(|| DatasetError::MissingCovariate {
                    id: f.id.clone(),
                    name: name.to_string(),
                })
            })
            .collect()
    }

    /// Flatten a function's surface row-major (meridional rows).
    pub fn flat_values(&self, i: usize) -> Vec<f64> {
        let v = &self.functions[i].values;
        let mut out = Vec::with_capacity(v.nrows() * v.ncols());
        for r in 0..v.nrows() {
            for c in 0..v.ncols() {
                out.push(v[(r, c)]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> FunctionalDataset {
        let grid = SurfaceGrid::new(8, 8).unwrap();
        let f = FunctionRecord {
            id: "f0".into(),
            subject_id: "s0".into(),
            unit_id: "s0_L".into(),
            serial_level: 7.0,
            covariates: BTreeMap::from([("age".to_string(), 40.0)]),
            values: DMatrix::from_element(8, 8, 1.0),
        };
        FunctionalDataset { grid, functions: vec![f] }
    }

    #[test]
    fn validate_catches_nan_with_coordinates() {
        let mut ds = tiny_dataset();
        ds.functions[0].values[(2, 5)] = f64::NAN;
        match ds.validate() {
            Err(DatasetError::NonFiniteValue { id, row, col }) => {
                assert_eq!(id, "f0");
                assert_eq!((row, col), (2, 5));
            }
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn validate_catches_dimension_mismatch() {
        let mut ds = tiny_dataset();
        ds.functions[0].values = DMatrix::zeros(8, 9);
        assert!(matches!(ds.validate(), Err(DatasetError::DimensionMismatch { .. })));
    }

    #[test]
    fn grid_angles_and_flattening() {
        let grid = SurfaceGrid::with_ranges(120, 120, (9.0, 24.0), (0.0, 360.0)).unwrap();
        assert_eq!(grid.total(), 14_400);
        assert!((grid.theta_at(0) - 9.0).abs() < 1e-12);
        assert!((grid.theta_at(119) - 24.0).abs() < 1e-12);
        assert!((grid.phi_at(0) - 0.0).abs() < 1e-12);
        assert!((grid.phi_at(119) - 357.0).abs() < 1e-12);
        assert_eq!(grid.flat(1, 2), 122);
        assert_eq!(grid.unflat(122), (1, 2));
    }
}
