//! 2-D cost maps on regular grids.
//!
//! A [`CostMap`] assigns a strictly positive cost rate (cost per meter of
//! travel) to every node of a regular grid. Maps are built either directly
//! from values, from a categorical land-use raster via [`CategoryTable`]
//! (airports > cities > other > water, scaled by a factor `b`), or loaded from
//! a CSV raster plus a TOML metadata sidecar.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostMapError {
    #[error("unknown land-use category `{0}`")]
    UnknownCategory(String),
    #[error("cost factor b must be > 1, got {0}")]
    NonPositiveFactor(f64),
    #[error("grid bounds must satisfy max > min and counts >= 2 per axis")]
    BadGrid,
    #[error("raster has {values} values but the grid expects {expected} ({nx} x {ny})")]
    DimensionMismatch {
        values: usize,
        expected: usize,
        nx: usize,
        ny: usize,
    },
    #[error("cost at flat index {index} is {value}; costs must be strictly positive and finite")]
    NonPositiveCost { index: usize, value: f64 },
    #[error("position ({0}, {1}) is outside the grid bounds")]
    OutOfBounds(f64, f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata parse error: {0}")]
    Meta(String),
}

/// Regular 2-D grid: node `(i, j)` sits at `min + (i*dx, j*dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec2D {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub counts: [usize; 2],
}

impl GridSpec2D {
    pub fn new(min: [f64; 2], max: [f64; 2], counts: [usize; 2]) -> Result<Self, CostMapError> {
        let ok = max[0] > min[0]
            && max[1] > min[1]
            && counts[0] >= 2
            && counts[1] >= 2
            && min.iter().chain(max.iter()).all(|v| v.is_finite());
        if !ok {
            return Err(CostMapError::BadGrid);
        }
        Ok(Self { min, max, counts })
    }

    /// Node spacing per axis; strictly positive by construction.
    pub fn spacing(&self) -> [f64; 2] {
        [
            (self.max[0] - self.min[0]) / (self.counts[0] - 1) as f64,
            (self.max[1] - self.min[1]) / (self.counts[1] - 1) as f64,
        ]
    }

    pub fn node_pos(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.spacing();
        [self.min[0] + i as f64 * h[0], self.min[1] + j as f64 * h[1]]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let eps = 1e-9;
        p[0] >= self.min[0] - eps
            && p[0] <= self.max[0] + eps
            && p[1] >= self.min[1] - eps
            && p[1] <= self.max[1] + eps
    }

    /// Cell index and in-cell fractions for a position, clamped to the grid.
    /// The cell index is at most `counts - 2` so `(i+1, j+1)` is always valid.
    pub fn locate(&self, p: [f64; 2]) -> ([usize; 2], [f64; 2]) {
        let h = self.spacing();
        let mut cell = [0usize; 2];
        let mut frac = [0f64; 2];
        for k in 0..2 {
            let t = ((p[k] - self.min[k]) / h[k]).clamp(0.0, (self.counts[k] - 1) as f64);
            let c = (t.floor() as usize).min(self.counts[k] - 2);
            cell[k] = c;
            frac[k] = t - c as f64;
        }
        (cell, frac)
    }

    /// Grid node nearest to `p`.
    pub fn nearest_node(&self, p: [f64; 2]) -> [usize; 2] {
        let h = self.spacing();
        let mut n = [0usize; 2];
        for k in 0..2 {
            let t = ((p[k] - self.min[k]) / h[k]).round();
            n[k] = (t.max(0.0) as usize).min(self.counts[k] - 1);
        }
        n
    }
}

/// Land-use categories in descending cost order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Airports,
    Cities,
    Other,
    Water,
}

impl FromStr for Category {
    type Err = CostMapError;
    fn from_str(s: &str) -> Result<Self, CostMapError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "airports" => Ok(Category::Airports),
            "cities" => Ok(Category::Cities),
            "other" => Ok(Category::Other),
            "water" => Ok(Category::Water),
            other => Err(CostMapError::UnknownCategory(other.to_string())),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Airports => "airports",
            Category::Cities => "cities",
            Category::Other => "other",
            Category::Water => "water",
        };
        f.write_str(s)
    }
}

/// Category-to-cost table: airports cost `b`, cities `1`, other `b⁻¹`,
/// water `b⁻²`, which is strictly descending for any `b > 1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CategoryTable {
    pub b: f64,
}

impl CategoryTable {
    pub fn new(b: f64) -> Result<Self, CostMapError> {
        if !(b > 1.0) || !b.is_finite() {
            return Err(CostMapError::NonPositiveFactor(b));
        }
        Ok(Self { b })
    }

    pub fn cost(&self, c: Category) -> f64 {
        match c {
            Category::Airports => self.b,
            Category::Cities => 1.0,
            Category::Other => 1.0 / self.b,
            Category::Water => 1.0 / (self.b * self.b),
        }
    }
}

/// Strictly positive cost rate per grid node, row-major with `x` fastest:
/// flat index `j * nx + i` (one row per `y` index, matching the CSV layout).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub grid: GridSpec2D,
    values: Vec<f64>,
}

/// TOML sidecar stored next to the CSV raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CostMapMeta {
    min: [f64; 2],
    max: [f64; 2],
    counts: [usize; 2],
    /// Category labels in descending cost order, for human readers.
    categories: Vec<String>,
    b: f64,
}

impl CostMap {
    pub fn new(grid: GridSpec2D, values: Vec<f64>) -> Result<Self, CostMapError> {
        let expected = grid.counts[0] * grid.counts[1];
        if values.len() != expected {
            return Err(CostMapError::DimensionMismatch {
                values: values.len(),
                expected,
                nx: grid.counts[0],
                ny: grid.counts[1],
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(CostMapError::NonPositiveCost { index, value });
            }
        }
        Ok(Self { grid, values })
    }

    /// Uniform map with the same cost everywhere.
    pub fn uniform(grid: GridSpec2D, cost: f64) -> Result<Self, CostMapError> {
        let n = grid.counts[0] * grid.counts[1];
        Self::new(grid, vec![cost; n])
    }

    /// Assign per-node costs from a row-major category raster: `b` for
    /// airports, `1` for cities, `b⁻¹` for other, `b⁻²` for water.
    pub fn build_from_categories(
        labels: &[Category],
        b: f64,
        grid: GridSpec2D,
    ) -> Result<Self, CostMapError> {
        let table = CategoryTable::new(b)?;
        let expected = grid.counts[0] * grid.counts[1];
        if labels.len() != expected {
            return Err(CostMapError::DimensionMismatch {
                values: labels.len(),
                expected,
                nx: grid.counts[0],
                ny: grid.counts[1],
            });
        }
        let values = labels.iter().map(|&c| table.cost(c)).collect();
        Self::new(grid, values)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.grid.counts[0] + i
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.idx(i, j)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Cost at an arbitrary point: the nearest node's value. Costs are
    /// discrete categories, so the field is piecewise constant; blending
    /// across a category boundary would misprice routes that follow it.
    pub fn sample_cost(&self, p: [f64; 2]) -> Result<f64, CostMapError> {
        if !self.grid.contains(p) {
            return Err(CostMapError::OutOfBounds(p[0], p[1]));
        }
        let [i, j] = self.grid.nearest_node(p);
        Ok(self.value(i, j))
    }

    /// Write the raster as CSV (one row per `y` index) and the metadata
    /// sidecar as TOML. Values use the shortest round-trip float encoding, so
    /// `load` after `save` reproduces the map bit for bit.
    pub fn save(&self, raster: &Path, meta: &Path) -> Result<(), CostMapError> {
        let [nx, ny] = self.grid.counts;
        let mut out = String::new();
        for j in 0..ny {
            for i in 0..nx {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{}", self.value(i, j)));
            }
            out.push('\n');
        }
        fs::write(raster, out)?;
        let meta_doc = CostMapMeta {
            min: self.grid.min,
            max: self.grid.max,
            counts: self.grid.counts,
            categories: ["airports", "cities", "other", "water"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            b: 4.0,
        };
        let text = toml::to_string_pretty(&meta_doc).map_err(|e| CostMapError::Meta(e.to_string()))?;
        fs::write(meta, text)?;
        Ok(())
    }

    /// Load a CSV raster plus TOML sidecar written by [`CostMap::save`] (or by
    /// hand); dimensions must agree and every cost must be positive.
    pub fn load(raster: &Path, meta: &Path) -> Result<Self, CostMapError> {
        let meta_text = fs::read_to_string(meta)?;
        let meta_doc: CostMapMeta =
            toml::from_str(&meta_text).map_err(|e| CostMapError::Meta(e.to_string()))?;
        let grid = GridSpec2D::new(meta_doc.min, meta_doc.max, meta_doc.counts)?;
        let raster_text = fs::read_to_string(raster)?;
        let mut values = Vec::with_capacity(grid.counts[0] * grid.counts[1]);
        for line in raster_text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| CostMapError::Meta(format!("bad float `{tok}` in raster")))?;
                values.push(v);
            }
        }
        Self::new(grid, values)
    }
}
