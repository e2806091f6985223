//! Multivariate spatial samples.

use crate::error::{Error, Result};
use crate::neighborhood::Point;

/// `n` records of a 3D location plus `p` attribute values, stored by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    locations: Vec<Point>,
    columns: Vec<Vec<f64>>,
    names: Vec<String>,
}

impl SampleSet {
    pub fn new(locations: Vec<Point>, columns: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Empty("samples"));
        }
        if columns.is_empty() {
            return Err(Error::Empty("sample variables"));
        }
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: columns.len(),
                found: names.len(),
            });
        }
        for col in &columns {
            if col.len() != locations.len() {
                return Err(Error::DimensionMismatch {
                    expected: locations.len(),
                    found: col.len(),
                });
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sample value"));
            }
        }
        if locations.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample coordinate"));
        }
        Ok(SampleSet {
            locations,
            columns,
            names,
        })
    }

    /// Variables named `v1..vp`.
    pub fn unnamed(locations: Vec<Point>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let names = (1..=columns.len()).map(|i| format!("v{i}")).collect();
        Self::new(locations, columns, names)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn location(&self, i: usize) -> Point {
        self.locations[i]
    }

    pub fn column(&self, var: usize) -> &[f64] {
        &self.columns[var]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn value(&self, i: usize, var: usize) -> f64 {
        self.columns[var][i]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Subset by sample ids, in the given order.
    pub fn select(&self, ids: &[usize]) -> SampleSet {
        SampleSet {
            locations: ids.iter().map(|&i| self.locations[i]).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| ids.iter().map(|&i| c[i]).collect())
                .collect(),
            names: self.names.clone(),
        }
    }
}
