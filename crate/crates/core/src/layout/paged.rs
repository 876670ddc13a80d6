//! Paged kv cache: per-request page lists over a shared page pool, plus the
//! conversion to the block-sparse structure consumed by the engine.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::bsr::{BsrMatrix, KvPool};

#[derive(Clone, Debug)]
struct RequestPages {
    pages: Vec<usize>,
    /// Occupied tokens in the final page, in `1..=page_size` (0 only for an
    /// empty request with no pages).
    last_len: usize,
}

impl RequestPages {
    fn logical_len(&self, page_size: usize) -> usize {
        if self.pages.is_empty() {
            0
        } else {
            (self.pages.len() - 1) * page_size + self.last_len
        }
    }
}

/// Append-only paged kv storage. Pages are allocated monotonically from the
/// pool, so each request's page list is strictly increasing. Requests may
/// reference the same leading pages to share a prefix.
#[derive(Clone, Debug)]
pub struct PagedKvCache<T> {
    pool: Arc<KvPool<T>>,
    requests: Vec<RequestPages>,
}

impl<T: Scalar> PagedKvCache<T> {
    pub fn new(page_size: usize, kv_heads: usize, head_dim: usize) -> Self {
        Self {
            pool: Arc::new(KvPool::new(page_size, kv_heads, head_dim)),
            requests: Vec::new(),
        }
    }

    #[inline]
    pub fn page_size(&self) -> usize {
        self.pool.block_tokens()
    }

    #[inline]
    pub fn pool(&self) -> &Arc<KvPool<T>> {
        &self.pool
    }

    pub fn num_requests(&self) -> usize {
        self.requests.len()
    }

    pub fn page_list(&self, request: usize) -> &[usize] {
        &self.requests[request].pages
    }

    pub fn logical_len(&self, request: usize) -> usize {
        self.requests[request].logical_len(self.page_size())
    }

    fn pool_mut(&mut self) -> &mut KvPool<T> {
        // single-writer mutation; clones lazily if a snapshot is still alive
        Arc::make_mut(&mut self.pool)
    }

    /// Add a request with `len` tokens of kv data (`len * kv_heads *
    /// head_dim` values each for keys and values), returning its id.
    pub fn add_request(&mut self, keys: &[T], values: &[T], len: usize) -> usize {
        self.add_request_with_prefix(&[], keys, values, len)
    }

    /// Add a request that shares `prefix_pages` (all fully occupied) with
    /// previously inserted requests and appends `suffix_len` fresh tokens.
    pub fn add_request_with_prefix(
        &mut self,
        prefix_pages: &[usize],
        suffix_keys: &[T],
        suffix_values: &[T],
        suffix_len: usize,
    ) -> usize {
        let page_size = self.page_size();
        let width = self.pool.kv_heads() * self.pool.head_dim();
        debug_assert_eq!(suffix_keys.len(), suffix_len * width);
        debug_assert_eq!(suffix_values.len(), suffix_len * width);
        let mut pages = prefix_pages.to_vec();
        let mut last_len = if pages.is_empty() { 0 } else { page_size };
        for t in 0..suffix_len {
            if last_len == page_size || pages.is_empty() {
                let page = self.pool_mut().alloc_block();
                pages.push(page);
                last_len = 0;
            }
            let page = *pages.last().unwrap();
            self.pool_mut().write_token(
                page,
                last_len,
                &suffix_keys[t * width..(t + 1) * width],
                &suffix_values[t * width..(t + 1) * width],
            );
            last_len += 1;
        }
        self.requests.push(RequestPages { pages, last_len });
        self.requests.len() - 1
    }

    /// Append `len` tokens to an existing request.
    pub fn append_many(&mut self, request: usize, keys: &[T], values: &[T], len: usize) {
        let width = self.pool.kv_heads() * self.pool.head_dim();
        for t in 0..len {
            self.append_token(
                request,
                &keys[t * width..(t + 1) * width],
                &values[t * width..(t + 1) * width],
            );
        }
    }

    /// Append one token to an existing request (decode step).
    pub fn append_token(&mut self, request: usize, key: &[T], value: &[T]) {
        let page_size = self.page_size();
        let need_page = {
            let req = &self.requests[request];
            req.pages.is_empty() || req.last_len == page_size
        };
        if need_page {
            let page = self.pool_mut().alloc_block();
            let req = &mut self.requests[request];
            req.pages.push(page);
            req.last_len = 0;
        }
        let (page, token) = {
            let req = &self.requests[request];
            (*req.pages.last().unwrap(), req.last_len)
        };
        self.pool_mut().write_token(page, token, key, value);
        self.requests[request].last_len += 1;
    }
}

/// Convert the page table into a block-sparse structure with one row block
/// per query tile of each request: request `i` contributes
/// `ceil(fused_qo_rows[i] / tile_rows)` row blocks, each listing exactly the
/// request's pages in page order. The final partial page is carried as an
/// effective row length, never padded.
pub fn page_table_to_bsr<T: Scalar>(
    cache: &PagedKvCache<T>,
    fused_qo_rows: &[usize],
    tile_rows: usize,
) -> Result<BsrMatrix<T>> {
    assert!(tile_rows >= 1);
    if fused_qo_rows.len() != cache.num_requests() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "{} fused row counts for {} cached requests",
                fused_qo_rows.len(),
                cache.num_requests()
            ),
        });
    }
    let pages = cache.pool.num_blocks();
    let mut indptr = vec![0usize];
    let mut indices = Vec::new();
    let mut row_kv_len = Vec::new();
    for (request, rows) in fused_qo_rows.iter().enumerate() {
        let req = &cache.requests[request];
        let len = req.logical_len(cache.page_size());
        if req.pages.is_empty() && len != 0 {
            return Err(Error::EmptyPageList {
                request,
                claimed: len,
            });
        }
        if req.pages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::UnsortedPages { request });
        }
        for &p in &req.pages {
            if p >= pages {
                return Err(Error::InvalidPage { page: p, pages });
            }
        }
        let tiles = rows.div_ceil(tile_rows);
        for _ in 0..tiles {
            indices.extend_from_slice(&req.pages);
            indptr.push(indices.len());
            row_kv_len.push(len);
        }
    }
    BsrMatrix::new(cache.pool.clone(), indptr, indices, row_kv_len)
        .map(|b| b.with_block_rows(tile_rows))
}
