use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named block of the flat parameter vector, viewed as a `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Immutable segment table shared by every `ParamVector` of one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    /// Builds a contiguous layout from `(name, rows, cols)` triples.
    pub fn from_shapes<S: Into<String>>(shapes: impl IntoIterator<Item = (S, usize, usize)>) -> Self {
        let mut offset = 0;
        let segments = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let seg = Segment {
                    name: name.into(),
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                seg
            })
            .collect();
        Self {
            segments,
            len: offset,
        }
    }

    /// Single `1 x n` segment named `theta`.
    pub fn flat(n: usize) -> Self {
        Self::from_shapes([("theta", 1, n)])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat model parameters with a fixed segment layout. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch {
                expected: layout.len(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("parameter entry {i}")));
        }
        Ok(Self { values, layout })
    }

    /// Convenience for unstructured parameters (single flat segment).
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        let layout = Arc::new(Layout::flat(values.len()));
        Self::new(layout, values)
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch {
                expected: self.len(),
                found: other.len(),
            })
        }
    }

    /// Same layout, new values. Fails on length mismatch or non-finite values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: f64) -> Result<Self> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        self.with_values(values)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.with_values(self.values.iter().map(|v| v * s).collect())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Element-wise mean of parameter vectors sharing one layout.
    pub fn mean(items: &[ParamVector]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero parameter vectors".into()))?;
        let mut acc = vec![0.0; first.len()];
        for p in items {
            first.check_layout(p)?;
            for (a, v) in acc.iter_mut().zip(&p.values) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        first.with_values(acc.into_iter().map(|a| a / n).collect())
    }
}
