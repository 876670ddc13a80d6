//! Load-balanced plan construction.
//!
//! The planner takes per-request sequence lengths, splits each query tile's
//! kv range into bounded chunks, and assigns chunks to abstract CTA work
//! queues greedily: longest chunk first, always onto the currently cheapest
//! queue. Ties break by work index and by lowest CTA id, so identical length
//! inputs always produce the identical plan, and with it a deterministic
//! contraction order. No atomic aggregation exists anywhere; every partial
//! output has a fixed slot and a fixed merge position.
//!
//! Query tiles whose kv range fits in a single chunk are marked for
//! writethrough: they bypass the partial-output workspace entirely.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::streaming::KV_TILE_TOKENS;

/// Query tile sizes the engine ships microkernels for.
pub const TILE_SIZES: [usize; 5] = [1, 16, 32, 64, 128];

/// Sequence-length and cost inputs of one planning round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub qo_lens: Vec<usize>,
    pub kv_lens: Vec<usize>,
    pub heads: HeadConfig,
    pub num_ctas: usize,
    /// Query tile size T_q, counted in fused rows (query rows x group size).
    pub tile_size: usize,
    /// Cost-model weights: cost(T_q, l) = alpha * T_q + beta * l.
    pub alpha: f64,
    pub beta: f64,
    /// Column-block size of the kv structure; chunk boundaries align down to
    /// multiples of it so no block is ever split across CTAs.
    pub block_cols: usize,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.qo_lens.len() != self.kv_lens.len() {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "{} query lengths vs {} kv lengths",
                    self.qo_lens.len(),
                    self.kv_lens.len()
                ),
            });
        }
        if !TILE_SIZES.contains(&self.tile_size) {
            return Err(Error::InvalidTileSize(self.tile_size));
        }
        if self.num_ctas == 0 {
            return Err(Error::ZeroBound {
                context: "num_ctas".into(),
            });
        }
        if self.block_cols == 0 {
            return Err(Error::ZeroBound {
                context: "block_cols".into(),
            });
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.qo_lens.len()
    }

    /// Fused query length of one request: `l_qo * group_size`.
    pub fn fused_qo(&self, request: usize) -> usize {
        self.qo_lens[request] * self.heads.group_size()
    }

    pub fn tiles_of(&self, request: usize) -> usize {
        self.fused_qo(request).div_ceil(self.tile_size)
    }

    pub fn total_tiles(&self) -> usize {
        (0..self.batch()).map(|r| self.tiles_of(r)).sum()
    }

    /// Hash of the sequence-length information (FNV-1a, stable).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.word(self.qo_lens.len() as u64);
        for &l in &self.qo_lens {
            h.word(l as u64);
        }
        for &l in &self.kv_lens {
            h.word(l as u64);
        }
        h.word(self.heads.num_qo_heads as u64);
        h.word(self.heads.num_kv_heads as u64);
        h.word(self.heads.head_dim as u64);
        h.word(self.num_ctas as u64);
        h.word(self.tile_size as u64);
        h.word(self.alpha.to_bits());
        h.word(self.beta.to_bits());
        h.word(self.block_cols as u64);
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn word(&mut self, w: u64) {
        for byte in w.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Pick the smallest shipped tile size at or above the batch's average fused
/// query length (mean of `l_qo * g`), saturating at the largest.
pub fn select_tile_size(workload: &WorkloadSpec) -> Result<usize> {
    if workload.qo_lens.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let g = workload.heads.group_size();
    let total: usize = workload.qo_lens.iter().map(|l| l * g).sum();
    let mean = total as f64 / workload.qo_lens.len() as f64;
    Ok(*TILE_SIZES
        .iter()
        .find(|&&t| t as f64 >= mean)
        .unwrap_or(&TILE_SIZES[TILE_SIZES.len() - 1]))
}

/// Maximum kv tokens per chunk: total tile work divided by the CTA count,
/// rounded up and clamped to at least one token.
pub fn compute_kv_chunk_limit(workload: &WorkloadSpec) -> usize {
    let total: usize = (0..workload.batch())
        .map(|r| workload.tiles_of(r) * workload.kv_lens[r])
        .sum();
    total.div_ceil(workload.num_ctas).max(1)
}

/// One chunk of one query tile's kv range, assigned to a CTA queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WorkItem {
    pub request: usize,
    /// Global tile id (request-major, tile order).
    pub tile: usize,
    pub chunk_start: usize,
    pub chunk_end: usize,
    pub work_index: usize,
    /// Partial-output slot, or `None` for writethrough.
    pub slot: Option<usize>,
}

impl WorkItem {
    pub fn chunk_len(&self) -> usize {
        self.chunk_end - self.chunk_start
    }
}

/// Identity of one query tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TileInfo {
    pub request: usize,
    pub tile_in_request: usize,
    /// Fused-row span of the tile, request relative.
    pub fused_row_start: usize,
    pub fused_row_end: usize,
}

/// How one tile's final rows are produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum MergeEntry {
    /// Single chunk: stage 1 wrote the final rows directly.
    Direct,
    /// Zero-length kv: rows are the empty state (zero output).
    Empty,
    /// Ordered partial slots to contract, ascending chunk start.
    Partials(Vec<usize>),
}

/// Scheduler output: per-CTA work queues, the partial-to-final index
/// mapping, and the cost ledger backing balance reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub workload: WorkloadSpec,
    pub kv_chunk_limit: usize,
    pub queues: Vec<Vec<WorkItem>>,
    pub tiles: Vec<TileInfo>,
    pub merge: Vec<MergeEntry>,
    pub cta_cost: Vec<f64>,
    pub num_slots: usize,
    pub fingerprint: u64,
}

impl Plan {
    pub fn total_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn makespan(&self) -> f64 {
        self.cta_cost.iter().cloned().fold(0.0, f64::max)
    }

    pub fn chunk_count(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }
}

#[derive(PartialEq)]
struct CtaCost {
    cost: f64,
    cta: usize,
}

impl Eq for CtaCost {}

impl Ord for CtaCost {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.cta.cmp(&other.cta))
    }
}

impl PartialOrd for CtaCost {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Chunk boundaries of one tile's kv range: the uniform `kv_chunk_limit`
/// grid with interior boundaries aligned down to `block_cols` multiples
/// (deduplicated), so no block is ever split across CTAs. The chunk count
/// never exceeds `ceil(l_kv / kv_chunk_limit)`, which keeps the partial-slot
/// bound intact.
fn chunk_boundaries(l_kv: usize, kv_chunk_limit: usize, block_cols: usize) -> Vec<usize> {
    let n = l_kv.div_ceil(kv_chunk_limit);
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(0);
    for c in 1..n {
        let raw = c * kv_chunk_limit;
        let aligned = if block_cols > 1 {
            raw / block_cols * block_cols
        } else {
            raw
        };
        if aligned > *bounds.last().unwrap() {
            bounds.push(aligned);
        }
    }
    bounds.push(l_kv);
    bounds
}

/// Build the load-balanced plan for one workload.
pub fn build_plan(workload: &WorkloadSpec) -> Result<Plan> {
    workload.validate()?;
    let kv_chunk_limit = compute_kv_chunk_limit(workload);

    // enumerate tiles and split each tile's kv range into chunks
    let mut tiles = Vec::new();
    let mut chunks: Vec<WorkItem> = Vec::new();
    let mut merge: Vec<MergeEntry> = Vec::new();
    let mut num_slots = 0usize;
    for request in 0..workload.batch() {
        let fused = workload.fused_qo(request);
        let l_kv = workload.kv_lens[request];
        for tile_in_request in 0..workload.tiles_of(request) {
            let tile = tiles.len();
            tiles.push(TileInfo {
                request,
                tile_in_request,
                fused_row_start: tile_in_request * workload.tile_size,
                fused_row_end: ((tile_in_request + 1) * workload.tile_size).min(fused),
            });
            if l_kv == 0 {
                merge.push(MergeEntry::Empty);
                continue;
            }
            let bounds = chunk_boundaries(l_kv, kv_chunk_limit, workload.block_cols);
            if bounds.len() == 2 {
                chunks.push(WorkItem {
                    request,
                    tile,
                    chunk_start: 0,
                    chunk_end: l_kv,
                    work_index: 0, // assigned below
                    slot: None,
                });
                merge.push(MergeEntry::Direct);
            } else {
                let mut slots = Vec::with_capacity(bounds.len() - 1);
                for span in bounds.windows(2) {
                    let slot = num_slots;
                    num_slots += 1;
                    slots.push(slot);
                    chunks.push(WorkItem {
                        request,
                        tile,
                        chunk_start: span[0],
                        chunk_end: span[1],
                        work_index: 0,
                        slot: Some(slot),
                    });
                }
                merge.push(MergeEntry::Partials(slots));
            }
        }
    }
    for (w, item) in chunks.iter_mut().enumerate() {
        item.work_index = w;
    }

    // descending chunk length, ties by ascending work index
    chunks.sort_by(|a, b| {
        b.chunk_len()
            .cmp(&a.chunk_len())
            .then(a.work_index.cmp(&b.work_index))
    });

    // greedy assignment onto the cheapest CTA (ties: lowest id)
    let mut queues: Vec<Vec<WorkItem>> = vec![Vec::new(); workload.num_ctas];
    let mut cta_cost = vec![0.0f64; workload.num_ctas];
    let mut heap: BinaryHeap<Reverse<CtaCost>> = (0..workload.num_ctas)
        .map(|cta| Reverse(CtaCost { cost: 0.0, cta }))
        .collect();
    for item in chunks {
        let Reverse(CtaCost { cost, cta }) = heap.pop().expect("heap holds every CTA");
        let new_cost = cost
            + workload.alpha * workload.tile_size as f64
            + workload.beta * item.chunk_len() as f64;
        queues[cta].push(item);
        cta_cost[cta] = new_cost;
        heap.push(Reverse(CtaCost {
            cost: new_cost,
            cta,
        }));
    }

    Ok(Plan {
        fingerprint: workload.fingerprint(),
        workload: workload.clone(),
        kv_chunk_limit,
        queues,
        tiles,
        merge,
        cta_cost,
        num_slots,
    })
}

/// Upper bounds the workspace is sized for; fixed for an engine's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WorkspaceBounds {
    pub max_num_ctas: usize,
    pub max_tile_size: usize,
    pub max_qo_heads: usize,
    pub max_head_dim: usize,
    pub max_requests: usize,
    pub max_tiles: usize,
}

/// Section sizes and fixed byte offsets of the workspace buffer. Offsets are
/// a pure function of the bounds and the element width; they never change
/// once an engine is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WorkspaceLayout {
    pub meta_words: usize,
    /// Elements in the partial-output section:
    /// `2 * #CTA * T_q * H_qo * (D + 1)`.
    pub partial_elems: usize,
    /// Per-slot element stride, `T_q * H_qo * (D + 1)`.
    pub slot_stride: usize,
    pub max_slots: usize,
    pub scratch_elems: usize,
    pub meta_offset: usize,
    pub partial_offset: usize,
    pub scratch_offset: usize,
    pub total_bytes: usize,
}

/// Words of metadata one plan may occupy, given the bounds.
fn meta_capacity(bounds: &WorkspaceBounds) -> usize {
    let max_items = bounds.max_tiles + 2 * bounds.max_num_ctas;
    8 // header: fingerprint, counts
        + 2 * bounds.max_requests // qo/kv lengths
        + bounds.max_num_ctas + 1 // queue indptr
        + 6 * max_items // work items
        + bounds.max_tiles + 1 // merge indptr
        + 2 * bounds.max_num_ctas // merge slot lists
        + 4 * bounds.max_tiles // tile table
}

/// Size the workspace sections from upper bounds and assign their fixed
/// offsets. `elem_bytes` is the engine element width (4 or 8).
pub fn estimate_workspace(bounds: &WorkspaceBounds, elem_bytes: usize) -> Result<WorkspaceLayout> {
    let fields = [
        (bounds.max_num_ctas, "max_num_ctas"),
        (bounds.max_tile_size, "max_tile_size"),
        (bounds.max_qo_heads, "max_qo_heads"),
        (bounds.max_head_dim, "max_head_dim"),
        (bounds.max_requests, "max_requests"),
        (bounds.max_tiles, "max_tiles"),
    ];
    for (value, name) in fields {
        if value == 0 {
            return Err(Error::ZeroBound {
                context: name.into(),
            });
        }
    }
    let slot_stride = bounds.max_tile_size * bounds.max_qo_heads * (bounds.max_head_dim + 1);
    let max_slots = 2 * bounds.max_num_ctas;
    let partial_elems = max_slots * slot_stride;
    let scratch_elems =
        bounds.max_num_ctas * (bounds.max_tile_size + 2 * KV_TILE_TOKENS) * bounds.max_head_dim;
    let meta_words = meta_capacity(bounds);
    let meta_offset = 0;
    let partial_offset = meta_offset + meta_words * 8;
    let scratch_offset = partial_offset + partial_elems * elem_bytes;
    let total_bytes = scratch_offset + scratch_elems * elem_bytes;
    Ok(WorkspaceLayout {
        meta_words,
        partial_elems,
        slot_stride,
        max_slots,
        scratch_elems,
        meta_offset,
        partial_offset,
        scratch_offset,
        total_bytes,
    })
}
