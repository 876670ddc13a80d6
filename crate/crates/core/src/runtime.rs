//! Plan/run execution engine.
//!
//! The engine is initialized once with upper bounds; its workspace sections
//! (scheduler metadata, partial outputs, per-CTA scratch) get fixed offsets
//! that never change afterwards, mirroring the constraints of captured-graph
//! execution. `plan` turns sequence lengths into a cached [`Plan`] and copies
//! its metadata image into the workspace; `run` executes a plan against
//! concrete tensors in two stages:
//!
//! 1. every CTA queue drains its work items through the streaming kernel;
//!    single-chunk tiles write final rows directly (writethrough), split
//!    tiles write `(output, lse)` into their assigned partial slots;
//! 2. each split tile's slot list is contracted with the state merge
//!    operator in plan order.
//!
//! Work items write disjoint rows/slots and the merge order is fixed by the
//! plan, so outputs are bit-identical for any worker count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layout::{BsrMatrix, ComposableFormat, RaggedTensor};
use crate::scalar::Scalar;
use crate::schedule::{
    build_plan, estimate_workspace, MergeEntry, Plan, WorkItem, WorkloadSpec, WorkspaceBounds,
    WorkspaceLayout,
};
use crate::streaming::{
    streaming_tile_attention, KvTileRef, KvTileSource, PartialState, QueryRowMeta, QueryTile,
    TileContext, KV_TILE_TOKENS,
};
use crate::variant::{IndexContext, VariantSpec};

/// Cheap, shareable reference to a cached plan.
#[derive(Clone, Debug)]
pub struct PlanHandle {
    plan: Arc<Plan>,
}

impl PlanHandle {
    #[inline]
    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    #[inline]
    pub fn fingerprint(&self) -> u64 {
        self.plan.fingerprint
    }

    /// Whether two handles reference the identical plan object.
    pub fn same_plan(&self, other: &PlanHandle) -> bool {
        Arc::ptr_eq(&self.plan, &other.plan)
    }
}

/// Bounded LRU of plans keyed by workload fingerprint. Hits return the
/// identical plan object.
#[derive(Debug)]
pub struct PlanCache {
    capacity: usize,
    entries: Vec<(u64, Arc<Plan>)>,
}

impl PlanCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&mut self, fingerprint: u64) -> Option<Arc<Plan>> {
        let pos = self.entries.iter().position(|(f, _)| *f == fingerprint)?;
        let entry = self.entries.remove(pos);
        let plan = entry.1.clone();
        self.entries.insert(0, entry);
        Some(plan)
    }

    fn insert(&mut self, fingerprint: u64, plan: Arc<Plan>) {
        self.entries.insert(0, (fingerprint, plan));
        if self.entries.len() > self.capacity {
            self.entries.pop();
        }
    }
}

/// Raw section base addresses, recorded by stability tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionPtrs {
    pub meta: usize,
    pub partials: usize,
    pub scratch: usize,
}

/// Execution options. `corrupt_contraction` replaces the stage-2 state merge
/// with a plain average that ignores the lse scales; it exists only as a
/// negative control for the verification harness.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub corrupt_contraction: bool,
}

/// Kv-side input of one run.
pub enum KvInput<'a, T> {
    Bsr(&'a BsrMatrix<T>),
    Composable(&'a ComposableFormat<T>),
}

/// Per-item partial-slot views of one CTA queue, in item order (`None` for
/// writethrough items).
type SlotViews<'a, T> = Vec<Option<&'a mut [T]>>;

/// (global query row, qo head, state) triples produced by one row-block job.
type RowStates<T> = Vec<(usize, usize, PartialState<T>)>;

/// The attention engine: fixed-capacity workspace plus plan cache.
pub struct Engine<T> {
    bounds: WorkspaceBounds,
    layout: WorkspaceLayout,
    meta: Vec<u64>,
    partials: Vec<T>,
    scratch: Vec<T>,
    cache: PlanCache,
    pool: Option<Arc<rayon::ThreadPool>>,
    workers: usize,
}

/// Default capacity of the plan cache.
pub const DEFAULT_PLAN_CACHE_CAPACITY: usize = 16;

impl<T: Scalar> Engine<T> {
    /// Allocate an engine for the given bounds, using the process-global
    /// worker pool.
    pub fn new(bounds: WorkspaceBounds) -> Result<Self> {
        Self::with_config(bounds, None, DEFAULT_PLAN_CACHE_CAPACITY)
    }

    /// Allocate with an explicit worker count (still independent of
    /// `num_ctas`, which is a scheduling parameter).
    pub fn with_workers(bounds: WorkspaceBounds, workers: usize) -> Result<Self> {
        Self::with_config(bounds, Some(workers), DEFAULT_PLAN_CACHE_CAPACITY)
    }

    pub fn with_config(
        bounds: WorkspaceBounds,
        workers: Option<usize>,
        plan_cache_capacity: usize,
    ) -> Result<Self> {
        let layout = estimate_workspace(&bounds, size_of::<T>())?;
        let pool = match workers {
            None | Some(0) => None,
            Some(n) => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::BoundsExceeded {
                        context: format!("worker pool: {e}"),
                    })?,
            )),
        };
        Ok(Self {
            bounds,
            meta: vec![0; layout.meta_words],
            partials: vec![T::ZERO; layout.partial_elems],
            scratch: vec![T::ZERO; layout.scratch_elems],
            layout,
            cache: PlanCache::new(plan_cache_capacity),
            workers: workers.unwrap_or(0),
            pool,
        })
    }

    #[inline]
    pub fn bounds(&self) -> &WorkspaceBounds {
        &self.bounds
    }

    /// Explicit worker count, or 0 when running on the global pool.
    #[inline]
    pub fn workers(&self) -> usize {
        self.workers
    }

    #[inline]
    pub fn workspace_layout(&self) -> &WorkspaceLayout {
        &self.layout
    }

    /// Workspace capacity in bytes, for callers that account allocations.
    pub fn workspace_bytes(&self) -> usize {
        self.layout.total_bytes
    }

    pub fn section_ptrs(&self) -> SectionPtrs {
        SectionPtrs {
            meta: self.meta.as_ptr() as usize,
            partials: self.partials.as_ptr() as usize,
            scratch: self.scratch.as_ptr() as usize,
        }
    }

    pub fn plan_cache_len(&self) -> usize {
        self.cache.len()
    }

    fn check_bounds(&self, workload: &WorkloadSpec) -> Result<()> {
        let checks = [
            (workload.batch(), self.bounds.max_requests, "requests"),
            (workload.total_tiles(), self.bounds.max_tiles, "tiles"),
            (workload.tile_size, self.bounds.max_tile_size, "tile size"),
            (
                workload.heads.num_qo_heads,
                self.bounds.max_qo_heads,
                "query heads",
            ),
            (
                workload.heads.head_dim,
                self.bounds.max_head_dim,
                "head dim",
            ),
            (workload.num_ctas, self.bounds.max_num_ctas, "CTAs"),
        ];
        for (actual, max, what) in checks {
            if actual > max {
                return Err(Error::BoundsExceeded {
                    context: format!("{what}: {actual} > {max}"),
                });
            }
        }
        Ok(())
    }

    /// Build (or cache-hit) the plan for a workload and copy its metadata
    /// image into the workspace metadata section. Workloads beyond the
    /// declared bounds are refused: the static workspace cannot grow.
    pub fn plan(&mut self, workload: &WorkloadSpec) -> Result<PlanHandle> {
        workload.validate()?;
        self.check_bounds(workload)?;
        let fingerprint = workload.fingerprint();
        let plan = match self.cache.get(fingerprint) {
            Some(plan) => plan,
            None => {
                let plan = Arc::new(build_plan(workload)?);
                self.cache.insert(fingerprint, plan.clone());
                plan
            }
        };
        self.write_metadata(&plan)?;
        Ok(PlanHandle { plan })
    }

    /// Serialize the plan's integer image into the metadata section at its
    /// fixed offset.
    fn write_metadata(&mut self, plan: &Plan) -> Result<()> {
        let w = &plan.workload;
        let total_items: usize = plan.queues.iter().map(|q| q.len()).sum();
        let mut words: Vec<u64> = Vec::with_capacity(self.layout.meta_words);
        words.extend([
            plan.fingerprint,
            w.batch() as u64,
            w.num_ctas as u64,
            w.tile_size as u64,
            plan.tiles.len() as u64,
            total_items as u64,
            plan.num_slots as u64,
            plan.kv_chunk_limit as u64,
        ]);
        words.extend(w.qo_lens.iter().map(|&l| l as u64));
        words.extend(w.kv_lens.iter().map(|&l| l as u64));
        let mut acc = 0u64;
        words.push(0);
        for q in &plan.queues {
            acc += q.len() as u64;
            words.push(acc);
        }
        for item in plan.queues.iter().flatten() {
            words.extend([
                item.request as u64,
                item.tile as u64,
                item.chunk_start as u64,
                item.chunk_end as u64,
                item.work_index as u64,
                item.slot.map_or(0, |s| s as u64 + 1),
            ]);
        }
        for tile in &plan.tiles {
            words.extend([
                tile.request as u64,
                tile.tile_in_request as u64,
                tile.fused_row_start as u64,
                tile.fused_row_end as u64,
            ]);
        }
        for entry in &plan.merge {
            match entry {
                MergeEntry::Empty => words.push(0),
                MergeEntry::Direct => words.push(1),
                MergeEntry::Partials(slots) => {
                    words.push(2 + slots.len() as u64);
                }
            }
        }
        for entry in &plan.merge {
            if let MergeEntry::Partials(slots) = entry {
                words.extend(slots.iter().map(|&s| s as u64));
            }
        }
        if words.len() > self.layout.meta_words {
            return Err(Error::BoundsExceeded {
                context: format!(
                    "plan metadata of {} words exceeds the {}-word section",
                    words.len(),
                    self.layout.meta_words
                ),
            });
        }
        self.meta[..words.len()].copy_from_slice(&words);
        Ok(())
    }

    /// Execute a planned workload. See the module docs for the two-stage
    /// structure.
    pub fn run(
        &mut self,
        handle: &PlanHandle,
        q: &RaggedTensor<T>,
        kv: &KvInput<'_, T>,
        variant: &VariantSpec,
    ) -> Result<RaggedTensor<T>> {
        self.run_with_options(handle, q, kv, variant, RunOptions::default())
    }

    pub fn run_with_options(
        &mut self,
        handle: &PlanHandle,
        q: &RaggedTensor<T>,
        kv: &KvInput<'_, T>,
        variant: &VariantSpec,
        options: RunOptions,
    ) -> Result<RaggedTensor<T>> {
        let plan = handle.plan();
        let w = &plan.workload;
        let cfg = &w.heads;
        if q.lens() != w.qo_lens {
            return Err(Error::PlanShapeMismatch {
                context: "query lengths differ from the planned lengths".into(),
            });
        }
        if q.row_width() != cfg.num_qo_heads * cfg.head_dim {
            return Err(Error::PlanShapeMismatch {
                context: format!(
                    "query row width {} for {} heads of dim {}",
                    q.row_width(),
                    cfg.num_qo_heads,
                    cfg.head_dim
                ),
            });
        }
        let mut output = RaggedTensor::<T>::zeros(&w.qo_lens, q.row_width());
        match kv {
            KvInput::Bsr(bsr) => {
                self.validate_bsr(plan, bsr)?;
                self.run_bsr(plan, q, bsr, variant, options, &mut output)?;
            }
            KvInput::Composable(format) => {
                self.validate_composable(plan, format)?;
                run_composable(self.pool.clone(), plan, q, format, variant, &mut output)?;
            }
        }
        Ok(output)
    }

    fn validate_bsr(&self, plan: &Plan, bsr: &BsrMatrix<T>) -> Result<()> {
        let w = &plan.workload;
        if bsr.rows_blocks() != plan.total_tiles() {
            return Err(Error::PlanShapeMismatch {
                context: format!(
                    "{} bsr row blocks for {} planned tiles",
                    bsr.rows_blocks(),
                    plan.total_tiles()
                ),
            });
        }
        if bsr.block_rows() != w.tile_size {
            return Err(Error::PlanShapeMismatch {
                context: format!(
                    "bsr block rows {} vs planned tile size {}",
                    bsr.block_rows(),
                    w.tile_size
                ),
            });
        }
        if bsr.block_cols() != w.block_cols {
            return Err(Error::PlanShapeMismatch {
                context: format!(
                    "bsr block cols {} vs planned {}",
                    bsr.block_cols(),
                    w.block_cols
                ),
            });
        }
        if bsr.pool().kv_heads() != w.heads.num_kv_heads
            || bsr.pool().head_dim() != w.heads.head_dim
        {
            return Err(Error::PlanShapeMismatch {
                context: "kv pool head layout differs from the plan".into(),
            });
        }
        for (tile, info) in plan.tiles.iter().enumerate() {
            if bsr.row_kv_len(tile) != w.kv_lens[info.request] {
                return Err(Error::PlanShapeMismatch {
                    context: format!(
                        "tile {tile}: bsr holds {} kv tokens, plan expects {}",
                        bsr.row_kv_len(tile),
                        w.kv_lens[info.request]
                    ),
                });
            }
        }
        Ok(())
    }

    fn validate_composable(&self, plan: &Plan, format: &ComposableFormat<T>) -> Result<()> {
        let w = &plan.workload;
        for part in &format.parts {
            if part.bsr.pool().kv_heads() != w.heads.num_kv_heads
                || part.bsr.pool().head_dim() != w.heads.head_dim
            {
                return Err(Error::PlanShapeMismatch {
                    context: "composable part pool head layout differs from the plan".into(),
                });
            }
        }
        format.validate_coverage(&w.qo_lens, &w.kv_lens)?;
        Ok(())
    }

    fn run_bsr(
        &mut self,
        plan: &Plan,
        q: &RaggedTensor<T>,
        bsr: &BsrMatrix<T>,
        variant: &VariantSpec,
        options: RunOptions,
        output: &mut RaggedTensor<T>,
    ) -> Result<()> {
        let w = &plan.workload;
        let cfg = w.heads;
        let d = cfg.head_dim;
        let slot_stride = self.layout.slot_stride;

        // poison the used slots so an unwritten one is detectable
        let used = plan.num_slots * slot_stride;
        for x in &mut self.partials[..used] {
            *x = T::NAN;
        }

        let out_shared = SharedOut::new(output.data_mut());
        let out_indptr = q.indptr().to_vec();
        let partials = &mut self.partials;
        let scratch = &mut self.scratch;
        let per_cta_scratch =
            (self.bounds.max_tile_size + 2 * KV_TILE_TOKENS) * self.bounds.max_head_dim;

        // hand each CTA its items' slot views, in queue order
        let mut slot_views: Vec<Option<&mut [T]>> = partials
            .chunks_mut(slot_stride)
            .take(plan.num_slots)
            .map(Some)
            .collect();
        let mut cta_slots: Vec<SlotViews<'_, T>> = Vec::with_capacity(w.num_ctas);
        for queue in &plan.queues {
            let views = queue
                .iter()
                .map(|item| {
                    item.slot
                        .map(|s| slot_views[s].take().expect("slot owned once"))
                })
                .collect();
            cta_slots.push(views);
        }

        let stage1 = |(cta, (scratch, slots)): (usize, (&mut [T], SlotViews<'_, T>))| {
            let mut slots = slots;
            for (item, slot) in plan.queues[cta].iter().zip(slots.iter_mut()) {
                run_work_item(
                    plan,
                    q,
                    bsr,
                    variant,
                    item,
                    slot.as_deref_mut(),
                    &out_shared,
                    scratch,
                )?;
            }
            Ok::<(), Error>(())
        };
        let stage1_all = || {
            scratch
                .par_chunks_mut(per_cta_scratch)
                .take(w.num_ctas)
                .zip(cta_slots)
                .enumerate()
                .try_for_each(stage1)
        };
        match &self.pool {
            Some(pool) => pool.install(stage1_all)?,
            None => stage1_all()?,
        }

        // stage 2: contract split tiles in plan order
        let partials: &[T] = partials;
        let stage2 = |(tile, entry): (usize, &MergeEntry)| {
            let MergeEntry::Partials(slots) = entry else {
                return Ok(());
            };
            let info = &plan.tiles[tile];
            let n_rows = info.fused_row_end - info.fused_row_start;
            let g = cfg.group_size();
            for kv_head in 0..cfg.num_kv_heads {
                for r in 0..n_rows {
                    let mut states = Vec::with_capacity(slots.len());
                    for &slot in slots {
                        let base = slot * slot_stride + (kv_head * n_rows + r) * (d + 1);
                        let row = &partials[base..base + d];
                        let lse = partials[base + d];
                        if lse.is_nan() {
                            return Err(Error::UnwrittenSlot { slot });
                        }
                        states.push(PartialState::from_slot(row, lse, variant.use_softmax));
                    }
                    let merged = contraction(&states, options.corrupt_contraction)?;
                    let fused_row = info.fused_row_start + r;
                    let (q_idx, head_in_group) = crate::layout::fused_to_original(fused_row, g);
                    let qo_head = kv_head * g + head_in_group;
                    let ctx = IndexContext {
                        request: info.request,
                        q_idx,
                        kv_idx: 0,
                        qo_head,
                        kv_head,
                        l_qo: w.qo_lens[info.request],
                        l_kv: w.kv_lens[info.request],
                    };
                    let row = finalize_output_row(&merged, variant, &ctx);
                    let global = out_indptr[info.request] + q_idx;
                    let offset = global * cfg.num_qo_heads * d + qo_head * d;
                    // SAFETY: (row, head) targets are disjoint across tiles
                    unsafe { out_shared.write(offset, &row) };
                }
            }
            Ok::<(), Error>(())
        };
        let stage2_all = || plan.merge.par_iter().enumerate().try_for_each(stage2);
        match &self.pool {
            Some(pool) => pool.install(stage2_all)?,
            None => stage2_all()?,
        }
        Ok(())
    }
}

/// Left-fold of the state merge over an ordered slot list. The corrupted
/// form averages outputs while ignoring scales (negative control only).
pub fn contraction<T: Scalar>(
    states: &[PartialState<T>],
    corrupt: bool,
) -> Result<PartialState<T>> {
    let (first, rest) = states.split_first().ok_or(Error::EmptyStateList)?;
    if corrupt {
        let dim = first.output().len();
        let mut acc = vec![T::ZERO; dim];
        for state in states {
            for (a, x) in acc.iter_mut().zip(state.output()) {
                *a += *x;
            }
        }
        let n = T::from_f64(states.len() as f64);
        for a in acc.iter_mut() {
            *a = *a / n;
        }
        return Ok(PartialState::from_slot(
            &acc,
            T::ZERO,
            matches!(first, PartialState::Softmax(_)),
        ));
    }
    let mut acc = first.clone();
    for state in rest {
        acc = acc.merge(state)?;
    }
    Ok(acc)
}

/// Apply the output transform to a finished state and return the row in
/// engine precision.
fn finalize_output_row<T: Scalar>(
    state: &PartialState<T>,
    variant: &VariantSpec,
    ctx: &IndexContext,
) -> Vec<T> {
    let mut row: Vec<f64> = state.output().iter().map(|x| x.to_f64()).collect();
    (variant.output_transform)(&mut row, ctx, &variant.params);
    row.into_iter().map(T::from_f64).collect()
}

/// Stage 1 of one work item: stream the chunk for every kv head, then either
/// write final rows (writethrough) or fill the assigned partial slot.
#[allow(clippy::too_many_arguments)]
fn run_work_item<T: Scalar>(
    plan: &Plan,
    q: &RaggedTensor<T>,
    bsr: &BsrMatrix<T>,
    variant: &VariantSpec,
    item: &WorkItem,
    mut slot: Option<&mut [T]>,
    out: &SharedOut<T>,
    scratch: &mut [T],
) -> Result<()> {
    let w = &plan.workload;
    let cfg = w.heads;
    let d = cfg.head_dim;
    let g = cfg.group_size();
    let info = &plan.tiles[item.tile];
    let n_rows = info.fused_row_end - info.fused_row_start;
    let l_qo = w.qo_lens[info.request];
    let l_kv = w.kv_lens[info.request];

    let (q_stage, kv_stage) = scratch.split_at_mut(n_rows * d);
    let (k_stage, v_stage) = kv_stage.split_at_mut(KV_TILE_TOKENS * d);

    for kv_head in 0..cfg.num_kv_heads {
        // stage the tile's fused query rows for this kv head
        let mut meta = Vec::with_capacity(n_rows);
        for r in 0..n_rows {
            let fused_row = info.fused_row_start + r;
            let (q_idx, head_in_group) = crate::layout::fused_to_original(fused_row, g);
            let qo_head = kv_head * g + head_in_group;
            meta.push(QueryRowMeta { q_idx, qo_head });
            let src = &q.row(q.global_row(info.request, q_idx))[qo_head * d..(qo_head + 1) * d];
            q_stage[r * d..(r + 1) * d].copy_from_slice(src);
        }
        let tile = QueryTile {
            rows: &q_stage[..n_rows * d],
            meta: &meta,
            head_dim: d,
        };
        let ctx = TileContext {
            request: info.request,
            kv_head,
            l_qo,
            l_kv,
        };
        let source = BsrChunkTiles {
            bsr,
            row: item.tile,
            cursor: item.chunk_start,
            span_end: item.chunk_end,
            ctx_offset: 0,
            kv_head,
            head_dim: d,
            k_stage,
            v_stage,
        };
        let states = streaming_tile_attention(&tile, source, variant, &ctx)?;

        match slot.as_deref_mut() {
            None => {
                // writethrough: final rows land straight in the output
                for (r, state) in states.iter().enumerate() {
                    let m = &meta[r];
                    let pair_ctx = IndexContext {
                        request: info.request,
                        q_idx: m.q_idx,
                        kv_idx: 0,
                        qo_head: m.qo_head,
                        kv_head,
                        l_qo,
                        l_kv,
                    };
                    let row = finalize_output_row(state, variant, &pair_ctx);
                    let global = q.global_row(info.request, m.q_idx);
                    let offset = global * cfg.num_qo_heads * d + m.qo_head * d;
                    // SAFETY: the plan assigns each (row, head) to one tile,
                    // and a DIRECT tile has exactly this one chunk
                    unsafe { out.write(offset, &row) };
                }
            }
            Some(slot) => {
                for (r, state) in states.iter().enumerate() {
                    let (row, lse) = state.to_slot();
                    let base = (kv_head * n_rows + r) * (d + 1);
                    slot[base..base + d].copy_from_slice(row);
                    slot[base + d] = lse;
                }
            }
        }
    }
    Ok(())
}

/// Composable execution: one pass per part accumulating per-(row, head)
/// states, parts merged in order with the state operator, then one finalize
/// sweep.
fn run_composable<T: Scalar>(
    pool: Option<Arc<rayon::ThreadPool>>,
    plan: &Plan,
    q: &RaggedTensor<T>,
    format: &ComposableFormat<T>,
    variant: &VariantSpec,
    output: &mut RaggedTensor<T>,
) -> Result<()> {
    let w = &plan.workload;
    let cfg = w.heads;
    let d = cfg.head_dim;
    let g = cfg.group_size();
    let total_rows = q.total_rows();
    let mut table: Vec<Option<PartialState<T>>> = vec![None; total_rows * cfg.num_qo_heads];

    for part in &format.parts {
        // per row block of the part: stream its kv span for every kv head
        let jobs: Result<Vec<RowStates<T>>> = {
            let work = |rb: usize| -> Result<RowStates<T>> {
                let cover = part.covers[rb];
                let part_len = part.bsr.row_kv_len(rb);
                let mut produced = Vec::new();
                for kv_head in 0..cfg.num_kv_heads {
                    for row in cover.row_start..cover.row_start + cover.row_count {
                        let request = q.request_of_row(row);
                        let q_idx = row - q.indptr()[request];
                        let l_qo = w.qo_lens[request];
                        let l_kv = w.kv_lens[request];
                        for head_in_group in 0..g {
                            let qo_head = kv_head * g + head_in_group;
                            let meta = [QueryRowMeta { q_idx, qo_head }];
                            let q_row = &q.row(row)[qo_head * d..(qo_head + 1) * d];
                            let tile = QueryTile {
                                rows: q_row,
                                meta: &meta,
                                head_dim: d,
                            };
                            let ctx = TileContext {
                                request,
                                kv_head,
                                l_qo,
                                l_kv,
                            };
                            let mut k_stage = vec![T::ZERO; KV_TILE_TOKENS * d];
                            let mut v_stage = vec![T::ZERO; KV_TILE_TOKENS * d];
                            let source = BsrChunkTiles {
                                bsr: &part.bsr,
                                row: rb,
                                cursor: 0,
                                span_end: part_len,
                                ctx_offset: cover.kv_start,
                                kv_head,
                                head_dim: d,
                                k_stage: &mut k_stage,
                                v_stage: &mut v_stage,
                            };
                            let mut states =
                                streaming_tile_attention(&tile, source, variant, &ctx)?;
                            produced.push((row, qo_head, states.pop().expect("one row")));
                        }
                    }
                }
                Ok(produced)
            };
            let run_all = || {
                (0..part.bsr.rows_blocks())
                    .into_par_iter()
                    .map(work)
                    .collect()
            };
            match &pool {
                Some(pool) => pool.install(run_all),
                None => run_all(),
            }
        };
        // merge this part's states into the table, in part-list order
        for produced in jobs? {
            for (row, qo_head, state) in produced {
                let cell = &mut table[row * cfg.num_qo_heads + qo_head];
                *cell = Some(match cell.take() {
                    None => state,
                    Some(prev) => prev.merge(&state)?,
                });
            }
        }
    }

    let width = output.row_width();
    for row in 0..total_rows {
        let request = q.request_of_row(row);
        let q_idx = row - q.indptr()[request];
        for qo_head in 0..cfg.num_qo_heads {
            let state = match table[row * cfg.num_qo_heads + qo_head].take() {
                Some(s) => s,
                None => PartialState::empty(d, variant.use_softmax),
            };
            let ctx = IndexContext {
                request,
                q_idx,
                kv_idx: 0,
                qo_head,
                kv_head: qo_head / g,
                l_qo: w.qo_lens[request],
                l_kv: w.kv_lens[request],
            };
            let out_row = finalize_output_row(&state, variant, &ctx);
            output.data_mut()[row * width + qo_head * d..row * width + (qo_head + 1) * d]
                .copy_from_slice(&out_row);
        }
    }
    Ok(())
}

/// Kv tile source that gathers chunk spans from a bsr row into staging
/// buffers, `KV_TILE_TOKENS` tokens at a time.
struct BsrChunkTiles<'a, T> {
    bsr: &'a BsrMatrix<T>,
    row: usize,
    cursor: usize,
    span_end: usize,
    /// Added to gathered positions when reporting kv indices to hooks (used
    /// by composable parts whose rows cover a later kv span).
    ctx_offset: usize,
    kv_head: usize,
    head_dim: usize,
    k_stage: &'a mut [T],
    v_stage: &'a mut [T],
}

impl<T: Scalar> KvTileSource<T> for BsrChunkTiles<'_, T> {
    fn next_tile(&mut self) -> Result<Option<KvTileRef<'_, T>>> {
        if self.cursor >= self.span_end {
            return Ok(None);
        }
        let take = KV_TILE_TOKENS.min(self.span_end - self.cursor);
        let d = self.head_dim;
        self.bsr.gather_tile_head_into(
            self.row,
            self.cursor,
            self.cursor + take,
            self.kv_head,
            &mut self.k_stage[..take * d],
            &mut self.v_stage[..take * d],
        )?;
        let kv_start = self.ctx_offset + self.cursor;
        self.cursor += take;
        Ok(Some(KvTileRef {
            keys: &self.k_stage[..take * d],
            values: &self.v_stage[..take * d],
            kv_start,
            len: take,
        }))
    }
}

/// Shared mutable view used for scattered, plan-disjoint writes from
/// parallel workers.
struct SharedOut<T> {
    ptr: *mut T,
    len: usize,
}

unsafe impl<T: Send> Send for SharedOut<T> {}
unsafe impl<T: Send> Sync for SharedOut<T> {}

impl<T: Copy> SharedOut<T> {
    fn new(slice: &mut [T]) -> Self {
        Self {
            ptr: slice.as_mut_ptr(),
            len: slice.len(),
        }
    }

    /// SAFETY: concurrent callers must write disjoint ranges; the plan
    /// guarantees each (row, head) belongs to exactly one writer.
    unsafe fn write(&self, offset: usize, src: &[T]) {
        assert!(offset + src.len() <= self.len);
        unsafe {
            std::ptr::copy_nonoverlapping(src.as_ptr(), self.ptr.add(offset), src.len());
        }
    }
}
