use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch of variable-length row sequences packed without padding.
///
/// `data` holds `indptr[batch]` rows of `row_width` values; request `i` owns
/// rows `indptr[i]..indptr[i+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaggedTensor<T> {
    data: Vec<T>,
    indptr: Vec<usize>,
    row_width: usize,
}

impl<T: Scalar> RaggedTensor<T> {
    pub fn new(data: Vec<T>, indptr: Vec<usize>, row_width: usize) -> Result<Self> {
        if indptr.is_empty() || indptr[0] != 0 {
            return Err(Error::DimensionMismatch {
                context: "indptr must start at 0".into(),
            });
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::DimensionMismatch {
                context: "indptr must be nondecreasing".into(),
            });
        }
        let rows = *indptr.last().unwrap();
        if data.len() != rows * row_width {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "ragged data holds {} values for {rows} rows of width {row_width}",
                    data.len()
                ),
            });
        }
        Ok(Self {
            data,
            indptr,
            row_width,
        })
    }

    /// All-zero tensor with one sequence per entry of `lens`.
    pub fn zeros(lens: &[usize], row_width: usize) -> Self {
        let mut indptr = Vec::with_capacity(lens.len() + 1);
        indptr.push(0);
        let mut total = 0;
        for l in lens {
            total += l;
            indptr.push(total);
        }
        Self {
            data: vec![T::ZERO; total * row_width],
            indptr,
            row_width,
        }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.indptr.len() - 1
    }

    #[inline]
    pub fn total_rows(&self) -> usize {
        *self.indptr.last().unwrap()
    }

    #[inline]
    pub fn row_width(&self) -> usize {
        self.row_width
    }

    #[inline]
    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len_of(&self, request: usize) -> usize {
        self.indptr[request + 1] - self.indptr[request]
    }

    pub fn lens(&self) -> Vec<usize> {
        self.indptr.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Global row index of request-relative row `q_idx`.
    #[inline]
    pub fn global_row(&self, request: usize, q_idx: usize) -> usize {
        self.indptr[request] + q_idx
    }

    #[inline]
    pub fn row(&self, global_row: usize) -> &[T] {
        &self.data[global_row * self.row_width..(global_row + 1) * self.row_width]
    }

    pub fn request_rows(&self, request: usize) -> &[T] {
        &self.data[self.indptr[request] * self.row_width..self.indptr[request + 1] * self.row_width]
    }

    /// Request owning the given global row (binary search over indptr).
    pub fn request_of_row(&self, global_row: usize) -> usize {
        match self.indptr.binary_search(&global_row) {
            // on a boundary: the row starts the next request, but empty
            // requests share the boundary, so scan to the one that has rows
            Ok(mut i) => {
                while self.indptr[i + 1] == self.indptr[i] {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_indptr() {
        assert!(RaggedTensor::new(vec![0.0f64; 6], vec![0, 2, 3], 2).is_ok());
        assert!(RaggedTensor::new(vec![0.0f64; 6], vec![1, 3], 2).is_err());
        assert!(RaggedTensor::new(vec![0.0f64; 6], vec![0, 3, 2], 2).is_err());
        assert!(RaggedTensor::new(vec![0.0f64; 5], vec![0, 2, 3], 2).is_err());
    }

    #[test]
    fn row_lookup_handles_empty_requests() {
        let t = RaggedTensor::<f64>::zeros(&[2, 0, 3], 4);
        assert_eq!(t.batch(), 3);
        assert_eq!(t.total_rows(), 5);
        assert_eq!(t.request_of_row(0), 0);
        assert_eq!(t.request_of_row(1), 0);
        assert_eq!(t.request_of_row(2), 2);
        assert_eq!(t.request_of_row(4), 2);
        assert_eq!(t.len_of(1), 0);
    }
}
