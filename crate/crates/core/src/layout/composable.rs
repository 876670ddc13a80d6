//! Composable formats: one logical kv matrix stored as several block-sparse
//! parts whose per-row attention states merge back with the state operator.
//!
//! The shipped decomposition targets shared prefixes: requests in a group
//! share their leading pages, so the prefix lives in one part whose row
//! blocks batch the whole group (B_r = group query rows), while each
//! request's unique suffix lives in a second part with B_r = 1. Only index
//! arrays are computed; both parts reference the original pool.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::bsr::BsrMatrix;
use super::paged::PagedKvCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartRole {
    SharedPrefix,
    UniqueSuffix,
}

/// Query-row coverage of one row block of a part: `row_count` contiguous
/// query rows starting at global query row `row_start`, attending kv
/// positions `kv_start..kv_start + kv_len` of their own requests.
#[derive(Clone, Copy, Debug)]
pub struct RowCover {
    pub row_start: usize,
    pub row_count: usize,
    pub kv_start: usize,
}

#[derive(Clone, Debug)]
pub struct FormatPart<T> {
    pub role: PartRole,
    pub bsr: BsrMatrix<T>,
    /// One entry per row block of `bsr`, in row-block order.
    pub covers: Vec<RowCover>,
}

/// Ordered list of parts forming one logical kv matrix.
#[derive(Clone, Debug)]
pub struct ComposableFormat<T> {
    pub parts: Vec<FormatPart<T>>,
}

impl<T: Scalar> ComposableFormat<T> {
    /// Check the coverage partition structurally: per query row, the kv
    /// spans contributed by all parts are disjoint and their union is
    /// exactly `0..l_kv` of the row's request.
    pub fn validate_coverage(&self, qo_lens: &[usize], kv_lens: &[usize]) -> Result<()> {
        let total_rows: usize = qo_lens.iter().sum();
        let mut row_request = Vec::with_capacity(total_rows);
        for (request, l) in qo_lens.iter().enumerate() {
            row_request.extend(std::iter::repeat_n(request, *l));
        }
        let mut spans: Vec<Vec<(usize, usize)>> = vec![Vec::new(); total_rows];
        for part in &self.parts {
            if part.covers.len() != part.bsr.rows_blocks() {
                return Err(Error::DimensionMismatch {
                    context: "part covers must match its row blocks".into(),
                });
            }
            for (rb, cover) in part.covers.iter().enumerate() {
                let kv_len = part.bsr.row_kv_len(rb);
                if kv_len == 0 {
                    continue;
                }
                for row in cover.row_start..cover.row_start + cover.row_count {
                    if row >= total_rows {
                        return Err(Error::BadCoverage {
                            row,
                            context: "covered row beyond the batch".into(),
                        });
                    }
                    spans[row].push((cover.kv_start, cover.kv_start + kv_len));
                }
            }
        }
        for (row, mut row_spans) in spans.into_iter().enumerate() {
            let l_kv = kv_lens[row_request[row]];
            row_spans.sort_unstable();
            let mut cursor = 0;
            for (start, end) in row_spans {
                if start != cursor {
                    return Err(Error::BadCoverage {
                        row,
                        context: format!("expected span starting at {cursor}, found {start}"),
                    });
                }
                cursor = end;
            }
            if cursor != l_kv {
                return Err(Error::BadCoverage {
                    row,
                    context: format!("covered {cursor} of {l_kv} kv tokens"),
                });
            }
        }
        Ok(())
    }
}

/// One shared-prefix group: `row_count` contiguous global query rows (the
/// rows of a contiguous request range) sharing the first `prefix_len` kv
/// tokens.
#[derive(Clone, Copy, Debug)]
pub struct PrefixGroup {
    pub first_request: usize,
    pub num_requests: usize,
    pub prefix_len: usize,
}

/// Decompose a paged cache into a shared-prefix part and a unique-suffix
/// part. Groups must all cover the same number of query rows (that count
/// becomes the prefix part's B_r), their requests must be contiguous and
/// non-overlapping, prefix lengths must be page aligned, and every member
/// must actually reference the same prefix pages. Requests outside any group
/// appear only in the suffix part, covering their full kv range.
pub fn decompose_shared_prefix<T: Scalar>(
    cache: &PagedKvCache<T>,
    qo_lens: &[usize],
    groups: &[PrefixGroup],
) -> Result<ComposableFormat<T>> {
    let n = cache.num_requests();
    if qo_lens.len() != n {
        return Err(Error::DimensionMismatch {
            context: format!("{} query lengths for {n} cached requests", qo_lens.len()),
        });
    }
    let page_size = cache.page_size();
    let row_offset: Vec<usize> = std::iter::once(0)
        .chain(qo_lens.iter().scan(0, |acc, l| {
            *acc += l;
            Some(*acc)
        }))
        .collect();

    let mut grouped = vec![false; n];
    let mut group_rows: Option<usize> = None;
    let mut prefix_indptr = vec![0usize];
    let mut prefix_indices = Vec::new();
    let mut prefix_kv_len = Vec::new();
    let mut prefix_covers = Vec::new();

    for group in groups {
        let end = group.first_request + group.num_requests;
        if group.num_requests == 0 || end > n {
            return Err(Error::NonContiguousGroup);
        }
        for flag in &mut grouped[group.first_request..end] {
            if std::mem::replace(flag, true) {
                return Err(Error::NonContiguousGroup);
            }
        }
        if group.prefix_len % page_size != 0 {
            return Err(Error::UnalignedPrefix {
                len: group.prefix_len,
                page_size,
            });
        }
        let prefix_pages = group.prefix_len / page_size;
        let reference = &cache.page_list(group.first_request)[..prefix_pages];
        for r in group.first_request..end {
            if cache.logical_len(r) < group.prefix_len {
                return Err(Error::SpanOutOfRange {
                    start: 0,
                    end: group.prefix_len,
                    len: cache.logical_len(r),
                });
            }
            if cache.page_list(r).len() < prefix_pages
                || &cache.page_list(r)[..prefix_pages] != reference
            {
                return Err(Error::PrefixNotShared);
            }
        }
        let rows = row_offset[end] - row_offset[group.first_request];
        match group_rows {
            None => group_rows = Some(rows),
            Some(existing) if existing != rows => {
                return Err(Error::GroupSizeMismatch {
                    a: existing,
                    b: rows,
                })
            }
            _ => {}
        }
        prefix_indices.extend_from_slice(reference);
        prefix_indptr.push(prefix_indices.len());
        prefix_kv_len.push(group.prefix_len);
        prefix_covers.push(RowCover {
            row_start: row_offset[group.first_request],
            row_count: rows,
            kv_start: 0,
        });
    }

    // suffix part: one B_r = 1 row block per query row
    let mut suffix_indptr = vec![0usize];
    let mut suffix_indices = Vec::new();
    let mut suffix_kv_len = Vec::new();
    let mut suffix_covers = Vec::new();
    let mut request_prefix = vec![0usize; n];
    for group in groups {
        request_prefix[group.first_request..group.first_request + group.num_requests]
            .fill(group.prefix_len);
    }
    for request in 0..n {
        let prefix_len = request_prefix[request];
        let suffix_len = cache.logical_len(request) - prefix_len;
        let skip_pages = prefix_len / page_size;
        for row in row_offset[request]..row_offset[request + 1] {
            suffix_indices.extend_from_slice(&cache.page_list(request)[skip_pages..]);
            suffix_indptr.push(suffix_indices.len());
            suffix_kv_len.push(suffix_len);
            suffix_covers.push(RowCover {
                row_start: row,
                row_count: 1,
                kv_start: prefix_len,
            });
        }
    }

    let mut parts = Vec::new();
    if !prefix_kv_len.is_empty() {
        let bsr = BsrMatrix::new(
            cache.pool().clone(),
            prefix_indptr,
            prefix_indices,
            prefix_kv_len,
        )?
        .with_block_rows(group_rows.unwrap_or(0));
        parts.push(FormatPart {
            role: PartRole::SharedPrefix,
            bsr,
            covers: prefix_covers,
        });
    }
    let suffix_bsr = BsrMatrix::new(
        cache.pool().clone(),
        suffix_indptr,
        suffix_indices,
        suffix_kv_len,
    )?
    .with_block_rows(1);
    parts.push(FormatPart {
        role: PartRole::UniqueSuffix,
        bsr: suffix_bsr,
        covers: suffix_covers,
    });

    let format = ComposableFormat { parts };
    let kv_lens: Vec<usize> = (0..n).map(|r| cache.logical_len(r)).collect();
    format.validate_coverage(qo_lens, &kv_lens)?;
    Ok(format)
}
