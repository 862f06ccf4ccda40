use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

/// A fixed linear map `y = A x` stored in compressed-row form.
///
/// Structural operations (pooling, repetition, im2col, blur, resampling) are
/// all instances of this map, so they share one forward kernel and their
/// adjoint is simply the transpose.
#[derive(Debug)]
pub struct SparseMap {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    transpose: OnceLock<Arc<SparseMap>>,
}

impl Clone for SparseMap {
    fn clone(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            vals: self.vals.clone(),
            transpose: OnceLock::new(),
        }
    }
}

/// Incremental row-by-row builder for [`SparseMap`].
pub struct SparseBuilder {
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseBuilder {
    pub fn new(cols: usize) -> Self {
        Self { cols, row_ptr: vec![0], col_idx: Vec::new(), vals: Vec::new() }
    }

    pub fn push(&mut self, col: usize, val: f64) {
        debug_assert!(col < self.cols);
        self.col_idx.push(col);
        self.vals.push(val);
    }

    pub fn end_row(&mut self) {
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn finish(self) -> SparseMap {
        SparseMap {
            rows: self.row_ptr.len() - 1,
            cols: self.cols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            vals: self.vals,
            transpose: OnceLock::new(),
        }
    }
}

impl SparseMap {
    /// Pure gather: `y[i] = x[index[i]]`, or zero when the entry is `None`.
    pub fn gather(index: &[Option<usize>], cols: usize) -> Self {
        let mut b = SparseBuilder::new(cols);
        for &i in index {
            if let Some(i) = i {
                b.push(i, 1.0);
            }
            b.end_row();
        }
        b.finish()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        let work = |(r, out): (usize, &mut f64)| {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            *out = acc;
        };
        if self.rows > 1 << 14 {
            y.par_iter_mut().enumerate().for_each(work);
        } else {
            y.iter_mut().enumerate().for_each(work);
        }
        y
    }

    /// Transpose, built once and cached. Entries within each transposed row
    /// keep ascending source-row order, so adjoint sums are order-stable.
    pub fn transposed(&self) -> Arc<SparseMap> {
        self.transpose
            .get_or_init(|| {
                let mut counts = vec![0usize; self.cols + 1];
                for &c in &self.col_idx {
                    counts[c + 1] += 1;
                }
                for i in 0..self.cols {
                    counts[i + 1] += counts[i];
                }
                let row_ptr = counts.clone();
                let mut fill = counts;
                let mut col_idx = vec![0; self.col_idx.len()];
                let mut vals = vec![0.0; self.vals.len()];
                for r in 0..self.rows {
                    for (c, v) in self.row(r) {
                        col_idx[fill[c]] = r;
                        vals[fill[c]] = v;
                        fill[c] += 1;
                    }
                }
                Arc::new(SparseMap {
                    rows: self.cols,
                    cols: self.rows,
                    row_ptr,
                    col_idx,
                    vals,
                    transpose: OnceLock::new(),
                })
            })
            .clone()
    }
}
