//! Dense row-major FP32 matrices used by the functional simulator.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn window(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Matrix {
        debug_assert!(r1 <= self.rows && c1 <= self.cols && r0 <= r1 && c0 <= c1);
        let mut out = Matrix::zeros(r1 - r0, c1 - c0);
        for r in r0..r1 {
            for c in c0..c1 {
                out[(r - r0, c - c0)] = self[(r, c)];
            }
        }
        out
    }

    pub fn write_window(&mut self, r0: usize, c0: usize, src: &Matrix) {
        for r in 0..src.rows {
            for c in 0..src.cols {
                self[(r0 + r, c0 + c)] = src[(r, c)];
            }
        }
    }

    pub fn add_window(&mut self, r0: usize, c0: usize, src: &Matrix) {
        for r in 0..src.rows {
            for c in 0..src.cols {
                self[(r0 + r, c0 + c)] += src[(r, c)];
            }
        }
    }

    /// FNV-1a over the raw bit patterns; used in result exports.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f32;
    fn index(&self, (r, c): (usize, usize)) -> &f32 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_round_trip() {
        let mut m = Matrix::zeros(4, 4);
        for i in 0..16 {
            m.data[i] = i as f32;
        }
        let w = m.window(1, 3, 2, 4);
        assert_eq!(w.rows, 2);
        assert_eq!(w[(0, 0)], 6.0);
        let mut n = Matrix::zeros(4, 4);
        n.write_window(1, 2, &w);
        assert_eq!(n[(2, 3)], 11.0);
    }
}
