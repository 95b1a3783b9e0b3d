//! Dense row-major 2-D `f64` tensor. Scalars are `1x1`, rows are `1xd`.

use super::NumError;

/// A dense matrix of `f64` values. Construction rejects non-finite entries,
/// so every tensor in a live computation holds finite data; ops that can
/// produce NaN/inf check their own outputs instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a `rows x cols` tensor from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds without the finiteness scan. For internal op outputs that are
    /// checked (or provably finite) by the caller.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self, NumError> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Result<Self, NumError> {
        Self::new(1, 1, vec![value])
    }

    /// Builds from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(NumError::ShapeMismatch {
                    op: "Tensor::from_rows",
                    detail: format!("row {i} has {} values, expected {c}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// The single value of a `1x1` tensor.
    pub fn item(&self) -> Result<f64, NumError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NumError::NonScalarOutput { rows: self.rows, cols: self.cols })
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Plain transpose, for oracles and parameter IO.
    pub fn transposed(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_raw(self.cols, self.rows, out)
    }

    /// Elementwise in-place add; shapes must match.
    pub(crate) fn add_assign(&mut self, other: &Tensor) -> Result<(), NumError> {
        if self.shape() != other.shape() {
            return Err(NumError::ShapeMismatch {
                op: "add_assign",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Largest absolute entry; 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(2, 2, vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, NumError::ShapeMismatch { op: "Tensor::new", .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { .. }));
        let err = Tensor::new(1, 1, vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { .. }));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.get(0, 2), 3.0);
        assert_eq!(t.get(1, 0), 4.0);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let t = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = t.transposed();
        assert_eq!(tt.shape(), (3, 2));
        assert_eq!(tt.get(2, 1), 6.0);
        assert_eq!(tt.transposed(), t);
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(4.5).unwrap().item().unwrap(), 4.5);
        assert!(Tensor::zeros(1, 2).item().is_err());
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        let err = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, NumError::ShapeMismatch { .. }));
    }
}
