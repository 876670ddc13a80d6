//! Block-sparse row structure over the kv cache.
//!
//! The sparse matrix is (query tiles) x (kv column blocks): row block `r`
//! lists, in `indices[indptr[r]..indptr[r+1]]`, the column blocks holding its
//! kv tokens in logical order. Column blocks address a backing pool of
//! `(block, token, head, dim)` entries, so the head dimension stays
//! contiguous and several structures can share one pool without moving data.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Backing storage for kv tokens, addressed by column-block id.
#[derive(Clone, Debug)]
pub struct KvPool<T> {
    block_tokens: usize,
    kv_heads: usize,
    head_dim: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> KvPool<T> {
    pub fn new(block_tokens: usize, kv_heads: usize, head_dim: usize) -> Self {
        assert!(block_tokens >= 1);
        Self {
            block_tokens,
            kv_heads,
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    pub fn block_tokens(&self) -> usize {
        self.block_tokens
    }

    #[inline]
    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.keys.len() / (self.block_tokens * self.kv_heads * self.head_dim)
    }

    /// Append one zeroed block, returning its id.
    pub fn alloc_block(&mut self) -> usize {
        let id = self.num_blocks();
        let elems = self.block_tokens * self.kv_heads * self.head_dim;
        self.keys.extend(std::iter::repeat_n(T::ZERO, elems));
        self.values.extend(std::iter::repeat_n(T::ZERO, elems));
        id
    }

    #[inline]
    fn offset(&self, block: usize, token: usize, head: usize) -> usize {
        ((block * self.block_tokens + token) * self.kv_heads + head) * self.head_dim
    }

    #[inline]
    pub fn key_row(&self, block: usize, token: usize, head: usize) -> &[T] {
        let o = self.offset(block, token, head);
        &self.keys[o..o + self.head_dim]
    }

    #[inline]
    pub fn value_row(&self, block: usize, token: usize, head: usize) -> &[T] {
        let o = self.offset(block, token, head);
        &self.values[o..o + self.head_dim]
    }

    /// Write one token's key/value rows for every head. `k` and `v` are
    /// `kv_heads * head_dim` long.
    pub fn write_token(&mut self, block: usize, token: usize, k: &[T], v: &[T]) {
        debug_assert_eq!(k.len(), self.kv_heads * self.head_dim);
        debug_assert_eq!(v.len(), self.kv_heads * self.head_dim);
        let o = self.offset(block, token, 0);
        self.keys[o..o + k.len()].copy_from_slice(k);
        self.values[o..o + v.len()].copy_from_slice(v);
    }
}

/// Block-sparse row matrix over a shared kv pool.
#[derive(Clone, Debug)]
pub struct BsrMatrix<T> {
    block_rows: usize,
    cols_blocks: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    /// Logical kv tokens per row block; the final referenced block may be
    /// partially occupied (effective length instead of padding).
    row_kv_len: Vec<usize>,
    pool: Arc<KvPool<T>>,
}

impl<T: Scalar> BsrMatrix<T> {
    /// Build and validate a structure over `pool`. `indices` per row must be
    /// strictly increasing (deterministic gather order) and consistent with
    /// `row_kv_len` under the pool's block size.
    pub fn new(
        pool: Arc<KvPool<T>>,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        row_kv_len: Vec<usize>,
    ) -> Result<Self> {
        if indptr.is_empty() || indptr[0] != 0 || *indptr.last().unwrap() != indices.len() {
            return Err(Error::DimensionMismatch {
                context: "bsr indptr does not index the indices array".into(),
            });
        }
        let rows = indptr.len() - 1;
        if row_kv_len.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "row_kv_len must have one entry per row block".into(),
            });
        }
        let cols_blocks = pool.num_blocks();
        let bc = pool.block_tokens();
        for r in 0..rows {
            let row = &indices[indptr[r]..indptr[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::UnsortedPages { request: r });
            }
            for &b in row {
                if b >= cols_blocks {
                    return Err(Error::InvalidPage {
                        page: b,
                        pages: cols_blocks,
                    });
                }
            }
            let len = row_kv_len[r];
            let nnz = row.len();
            let (lo, hi) = if nnz == 0 {
                (0, 0)
            } else {
                ((nnz - 1) * bc + 1, nnz * bc)
            };
            if len < lo || len > hi {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "row {r}: {len} tokens inconsistent with {nnz} blocks of {bc}"
                    ),
                });
            }
        }
        Ok(Self {
            block_rows: 0,
            cols_blocks,
            indptr,
            indices,
            row_kv_len,
            pool,
        })
    }

    /// Tag the structure with its row-block height (query rows per row
    /// block). Purely descriptive; gathering does not depend on it.
    pub fn with_block_rows(mut self, block_rows: usize) -> Self {
        self.block_rows = block_rows;
        self
    }

    #[inline]
    pub fn rows_blocks(&self) -> usize {
        self.indptr.len() - 1
    }

    #[inline]
    pub fn cols_blocks(&self) -> usize {
        self.cols_blocks
    }

    #[inline]
    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    #[inline]
    pub fn block_cols(&self) -> usize {
        self.pool.block_tokens()
    }

    #[inline]
    pub fn pool(&self) -> &Arc<KvPool<T>> {
        &self.pool
    }

    #[inline]
    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn row_indices(&self, row: usize) -> &[usize] {
        &self.indices[self.indptr[row]..self.indptr[row + 1]]
    }

    #[inline]
    pub fn row_kv_len(&self, row: usize) -> usize {
        self.row_kv_len[row]
    }

    /// Whether a row's blocks are consecutive pool blocks, in which case
    /// token addresses follow from plain affine arithmetic.
    fn row_is_affine(&self, row: usize) -> bool {
        let idx = self.row_indices(row);
        idx.windows(2).all(|w| w[1] == w[0] + 1)
    }

    #[inline]
    fn locate(&self, row: usize, token: usize) -> (usize, usize) {
        let bc = self.pool.block_tokens();
        let idx = self.row_indices(row);
        (idx[token / bc], token % bc)
    }

    fn check_span(&self, row: usize, start: usize, end: usize) -> Result<()> {
        if row >= self.rows_blocks() {
            return Err(Error::RowOutOfRange {
                row,
                rows: self.rows_blocks(),
            });
        }
        let len = self.row_kv_len[row];
        if start > end || end > len {
            return Err(Error::SpanOutOfRange { start, end, len });
        }
        Ok(())
    }

    /// Gather a span of one row's logical tokens for a single kv head into
    /// caller-provided buffers of `(end - start) * head_dim` elements.
    pub fn gather_tile_head_into(
        &self,
        row: usize,
        start: usize,
        end: usize,
        kv_head: usize,
        out_keys: &mut [T],
        out_values: &mut [T],
    ) -> Result<()> {
        self.check_span(row, start, end)?;
        let d = self.pool.head_dim();
        debug_assert!(out_keys.len() >= (end - start) * d);
        debug_assert!(out_values.len() >= (end - start) * d);
        if self.row_is_affine(row) && end > start {
            // dense path: consecutive blocks, addresses are affine in the
            // token index
            let idx = self.row_indices(row);
            let base = idx[0];
            let bc = self.pool.block_tokens();
            for (i, token) in (start..end).enumerate() {
                let block = base + token / bc;
                let k = self.pool.key_row(block, token % bc, kv_head);
                let v = self.pool.value_row(block, token % bc, kv_head);
                out_keys[i * d..(i + 1) * d].copy_from_slice(k);
                out_values[i * d..(i + 1) * d].copy_from_slice(v);
            }
            return Ok(());
        }
        for (i, token) in (start..end).enumerate() {
            let (block, off) = self.locate(row, token);
            out_keys[i * d..(i + 1) * d].copy_from_slice(self.pool.key_row(block, off, kv_head));
            out_values[i * d..(i + 1) * d]
                .copy_from_slice(self.pool.value_row(block, off, kv_head));
        }
        Ok(())
    }

    /// Gather a span of one row's logical tokens for every kv head, token
    /// major: `(end - start) x kv_heads x head_dim`.
    pub fn gather_tile(&self, row: usize, start: usize, end: usize) -> Result<(Vec<T>, Vec<T>)> {
        self.check_span(row, start, end)?;
        let d = self.pool.head_dim();
        let h = self.pool.kv_heads();
        let mut keys = Vec::with_capacity((end - start) * h * d);
        let mut values = Vec::with_capacity((end - start) * h * d);
        for token in start..end {
            let (block, off) = self.locate(row, token);
            for head in 0..h {
                keys.extend_from_slice(self.pool.key_row(block, off, head));
                values.extend_from_slice(self.pool.value_row(block, off, head));
            }
        }
        Ok((keys, values))
    }

    /// Materialize one row's whole logical kv sequence for a single head.
    pub fn materialize_row_head(&self, row: usize, kv_head: usize) -> Result<(Vec<T>, Vec<T>)> {
        let len = self.row_kv_len[row];
        let d = self.pool.head_dim();
        let mut keys = vec![T::ZERO; len * d];
        let mut values = vec![T::ZERO; len * d];
        self.gather_tile_head_into(row, 0, len, kv_head, &mut keys, &mut values)?;
        Ok((keys, values))
    }
}
