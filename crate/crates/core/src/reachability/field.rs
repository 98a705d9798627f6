//! Regular-grid scalar fields in N dimensions.
//!
//! [`ScalarFieldND`] stores a row-major value array (last axis fastest) over a
//! rectangular grid and provides multilinear interpolation, interpolated
//! central-difference gradients, and the `HJVF` binary file format used to
//! persist both Eikonal solutions (`ndim = 2`) and HJ value-function slices.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("axis {0} is invalid: need count >= 3 and max > min")]
    BadAxis(usize),
    #[error("value array has length {got}, grid expects {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("query point component {axis} = {value} is outside [{min}, {max}]")]
    OutOfBounds {
        axis: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("query dimension {got} does not match field dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("bad HJVF file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One grid axis: `count` nodes evenly spaced over `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        Self { min, max, count }
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }
}

const HJVF_MAGIC: &[u8; 4] = b"HJVF";
const HJVF_VERSION: u32 = 1;

/// Row-major scalar field (last axis fastest) with an optional time label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFieldND {
    axes: Vec<AxisSpec>,
    values: Vec<f64>,
    /// Time label in seconds (≤ 0 for backward-reachability slices).
    pub time: Option<f64>,
}

impl ScalarFieldND {
    pub fn new(axes: Vec<AxisSpec>, values: Vec<f64>) -> Result<Self, FieldError> {
        for (k, a) in axes.iter().enumerate() {
            if a.count < 3 || !(a.max > a.min) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(FieldError::BadAxis(k));
            }
        }
        let expected: usize = axes.iter().map(|a| a.count).product();
        if values.len() != expected {
            return Err(FieldError::LengthMismatch {
                got: values.len(),
                expected,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(Self {
            axes,
            values,
            time: None,
        })
    }

    /// Build by evaluating `f` at every grid node.
    pub fn from_fn(axes: Vec<AxisSpec>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self, FieldError> {
        let total: usize = axes.iter().map(|a| a.count).product();
        let ndim = axes.len();
        let mut values = vec![0.0; total];
        let mut idx = vec![0usize; ndim];
        let mut x = vec![0.0f64; ndim];
        for v in values.iter_mut() {
            for k in 0..ndim {
                x[k] = axes[k].node(idx[k]);
            }
            *v = f(&x);
            // Odometer increment, last axis fastest.
            for k in (0..ndim).rev() {
                idx[k] += 1;
                if idx[k] < axes[k].count {
                    break;
                }
                idx[k] = 0;
            }
        }
        Self::new(axes, values)
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Flat index of a node, row-major with the last axis fastest.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0usize;
        for (k, &i) in idx.iter().enumerate() {
            flat = flat * self.axes[k].count + i;
        }
        flat
    }

    pub fn node_value(&self, idx: &[usize]) -> f64 {
        self.values[self.flat_index(idx)]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.ndim()
            && x.iter().zip(&self.axes).all(|(&v, a)| {
                let eps = 1e-9 * (a.max - a.min).abs();
                v >= a.min - eps && v <= a.max + eps
            })
    }

    /// Multilinear interpolation at `x`; exact at grid nodes.
    pub fn sample(&self, x: &[f64]) -> Result<f64, FieldError> {
        if x.len() != self.ndim() {
            return Err(FieldError::DimensionMismatch {
                got: x.len(),
                expected: self.ndim(),
            });
        }
        let ndim = self.ndim();
        let mut cell = vec![0usize; ndim];
        let mut frac = vec![0f64; ndim];
        for k in 0..ndim {
            let a = &self.axes[k];
            let eps = 1e-9 * (a.max - a.min).abs();
            if x[k] < a.min - eps || x[k] > a.max + eps {
                return Err(FieldError::OutOfBounds {
                    axis: k,
                    value: x[k],
                    min: a.min,
                    max: a.max,
                });
            }
            let t = ((x[k] - a.min) / a.spacing()).clamp(0.0, (a.count - 1) as f64);
            let c = (t.floor() as usize).min(a.count - 2);
            cell[k] = c;
            frac[k] = t - c as f64;
        }
        // Accumulate over the 2^ndim cell corners.
        let corners = 1usize << ndim;
        let mut acc = 0.0;
        let mut idx = vec![0usize; ndim];
        for corner in 0..corners {
            let mut w = 1.0;
            for k in 0..ndim {
                if corner & (1 << k) != 0 {
                    idx[k] = cell[k] + 1;
                    w *= frac[k];
                } else {
                    idx[k] = cell[k];
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                acc += w * self.values[self.flat_index(&idx)];
            }
        }
        Ok(acc)
    }

    /// Central-difference gradient of the interpolated field at `x`:
    /// `q_k = (F(x + h_k e_k) - F(x - h_k e_k)) / 2 h_k`, with the probe
    /// points clamped to the grid (one-sided at the boundary).
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        if x.len() != self.ndim() {
            return Err(FieldError::DimensionMismatch {
                got: x.len(),
                expected: self.ndim(),
            });
        }
        let mut q = vec![0.0; self.ndim()];
        let mut probe = x.to_vec();
        for k in 0..self.ndim() {
            let a = &self.axes[k];
            let h = a.spacing();
            let hi = (x[k] + h).min(a.max);
            let lo = (x[k] - h).max(a.min);
            probe[k] = hi;
            let f_hi = self.sample(&probe)?;
            probe[k] = lo;
            let f_lo = self.sample(&probe)?;
            probe[k] = x[k];
            q[k] = if hi > lo { (f_hi - f_lo) / (hi - lo) } else { 0.0 };
        }
        Ok(q)
    }

    /// Write in the HJVF binary format: magic `HJVF`, version u32, ndim u32,
    /// per-axis (count u64, min f64, max f64), time f64, then row-major
    /// little-endian f64 values.
    pub fn save_hjvf(&self, path: &Path) -> Result<(), FieldError> {
        let mut buf: Vec<u8> =
            Vec::with_capacity(4 + 8 + self.ndim() * 24 + 8 + self.values.len() * 8);
        buf.extend_from_slice(HJVF_MAGIC);
        buf.extend_from_slice(&HJVF_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.ndim() as u32).to_le_bytes());
        for a in &self.axes {
            buf.extend_from_slice(&(a.count as u64).to_le_bytes());
            buf.extend_from_slice(&a.min.to_le_bytes());
            buf.extend_from_slice(&a.max.to_le_bytes());
        }
        buf.extend_from_slice(&self.time.unwrap_or(0.0).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_hjvf(path: &Path) -> Result<Self, FieldError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], FieldError> {
            if *off + n > bytes.len() {
                return Err(FieldError::Format("truncated file".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != HJVF_MAGIC {
            return Err(FieldError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != HJVF_VERSION {
            return Err(FieldError::Format(format!("unsupported version {version}")));
        }
        let ndim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut axes = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
            let min = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            let max = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            axes.push(AxisSpec::new(min, max, count));
        }
        let time = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let total: usize = axes.iter().map(|a| a.count).product();
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
        }
        let mut field = Self::new(axes, values)?;
        field.time = Some(time);
        Ok(field)
    }
}
