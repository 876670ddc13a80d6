//! Verification and benchmark harness shared by the CLI and the test
//! suites: stages generated workloads into the paged cache, runs the engine,
//! compares against the oracle, and reports schedule-balance metrics.

use std::time::Instant;

use serde::Serialize;

use crate::config::operational_intensity;
use crate::error::Result;
use crate::layout::{page_table_to_bsr, BsrMatrix, PagedKvCache, RaggedTensor};
use crate::oracle::{oracle_attention, OracleInputs};
use crate::runtime::{Engine, KvInput, RunOptions};
use crate::scalar::Scalar;
use crate::schedule::{select_tile_size, Plan, WorkloadSpec, WorkspaceBounds};
use crate::variant::VariantSpec;
use crate::workload::{generate_workload, GeneratedWorkload, WorkloadProfile};

/// A workload staged for engine execution: scheduler spec plus the paged kv
/// structure built from the generated dense data.
pub struct StagedWorkload<T> {
    pub spec: WorkloadSpec,
    pub cache: PagedKvCache<T>,
    pub bsr: BsrMatrix<T>,
}

/// Load generated kv data into a paged cache (page size = `block_cols`) and
/// derive the block-sparse view matching the chosen tile size.
pub fn stage_workload<T: Scalar>(
    gen: &GeneratedWorkload<T>,
    num_ctas: usize,
    block_cols: usize,
    tile_size: Option<usize>,
) -> Result<StagedWorkload<T>> {
    let mut spec = gen.workload_spec(num_ctas, 1, block_cols);
    spec.tile_size = match tile_size {
        Some(t) => t,
        None => select_tile_size(&spec)?,
    };
    let mut cache = PagedKvCache::new(block_cols, gen.heads.num_kv_heads, gen.heads.head_dim);
    for request in 0..gen.kv_lens.len() {
        cache.add_request(
            gen.keys.request_rows(request),
            gen.values.request_rows(request),
            gen.kv_lens[request],
        );
    }
    let fused: Vec<usize> = (0..spec.batch()).map(|r| spec.fused_qo(r)).collect();
    let bsr = page_table_to_bsr(&cache, &fused, spec.tile_size)?;
    Ok(StagedWorkload { spec, cache, bsr })
}

/// Engine bounds sized exactly for one workload (one-shot runs).
pub fn bounds_for(spec: &WorkloadSpec) -> WorkspaceBounds {
    WorkspaceBounds {
        max_num_ctas: spec.num_ctas,
        max_tile_size: spec.tile_size,
        max_qo_heads: spec.heads.num_qo_heads,
        max_head_dim: spec.heads.head_dim,
        max_requests: spec.batch().max(1),
        max_tiles: spec.total_tiles().max(1),
    }
}

/// Widen a tensor to f64 for the oracle.
pub fn widen<T: Scalar>(t: &RaggedTensor<T>) -> RaggedTensor<f64> {
    RaggedTensor::new(
        t.data().iter().map(|x| x.to_f64()).collect(),
        t.indptr().to_vec(),
        t.row_width(),
    )
    .expect("shape preserved")
}

/// Max absolute and relative error of engine output against the oracle run
/// on the same (widened) inputs.
pub fn compare_to_oracle<T: Scalar>(
    gen: &GeneratedWorkload<T>,
    output: &RaggedTensor<T>,
    variant: &VariantSpec,
) -> Result<(f64, f64)> {
    let q = widen(&gen.q);
    let keys = widen(&gen.keys);
    let values = widen(&gen.values);
    let oracle = oracle_attention(
        &OracleInputs {
            q: &q,
            keys: &keys,
            values: &values,
            cfg: gen.heads,
        },
        variant,
    )?;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (e, o) in output.data().iter().zip(oracle.output.data()) {
        let abs = (e.to_f64() - o).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / o.abs().max(1.0));
    }
    Ok((max_abs, max_rel))
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub precision: String,
    pub variant: String,
    pub batch: usize,
    pub total_qo_rows: usize,
    pub tile_size: usize,
    pub num_ctas: usize,
    pub plan_fingerprint: u64,
}

/// Run plan+run for a profile and compare against the oracle at the
/// precision's tolerance.
pub fn verify<T: Scalar>(
    profile: &WorkloadProfile,
    variant: &VariantSpec,
    num_ctas: usize,
    block_cols: usize,
    workers: Option<usize>,
    options: RunOptions,
) -> Result<VerifyReport> {
    let gen = generate_workload::<T>(profile)?;
    let staged = stage_workload(&gen, num_ctas, block_cols, None)?;
    let mut engine: Engine<T> = match workers {
        Some(w) => Engine::with_workers(bounds_for(&staged.spec), w)?,
        None => Engine::new(bounds_for(&staged.spec))?,
    };
    let handle = engine.plan(&staged.spec)?;
    let output = engine.run_with_options(
        &handle,
        &gen.q,
        &KvInput::Bsr(&staged.bsr),
        variant,
        options,
    )?;
    let (max_abs, max_rel) = compare_to_oracle(&gen, &output, variant)?;
    Ok(VerifyReport {
        pass: max_abs <= T::ORACLE_TOL,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        tolerance: T::ORACLE_TOL,
        precision: if size_of::<T>() == 4 { "f32" } else { "f64" }.to_string(),
        variant: variant.name.clone(),
        batch: profile.batch,
        total_qo_rows: gen.q.total_rows(),
        tile_size: staged.spec.tile_size,
        num_ctas,
        plan_fingerprint: handle.fingerprint(),
    })
}

/// Model-cost balance metrics of one plan, alongside the unscheduled
/// baseline that pins one whole request per CTA (round robin, no kv
/// splitting).
#[derive(Clone, Debug, Serialize)]
pub struct BalanceReport {
    pub per_cta_cost: Vec<f64>,
    pub makespan: f64,
    pub mean_cost: f64,
    /// max / mean per-CTA cost; 1.0 is perfectly balanced.
    pub imbalance: f64,
    pub chunk_count: usize,
    pub intensity_per_request: Vec<f64>,
    pub baseline_per_cta_cost: Vec<f64>,
    pub baseline_makespan: f64,
    pub baseline_imbalance: f64,
}

fn imbalance_of(costs: &[f64]) -> f64 {
    let max = costs.iter().cloned().fold(0.0, f64::max);
    let mean = costs.iter().sum::<f64>() / costs.len().max(1) as f64;
    if mean == 0.0 {
        1.0
    } else {
        max / mean
    }
}

pub fn balance_report(plan: &Plan) -> BalanceReport {
    let w = &plan.workload;
    let mut baseline = vec![0.0f64; w.num_ctas];
    for request in 0..w.batch() {
        let tiles = w.tiles_of(request);
        let cost =
            tiles as f64 * (w.alpha * w.tile_size as f64 + w.beta * w.kv_lens[request] as f64);
        baseline[request % w.num_ctas] += cost;
    }
    let g = w.heads.group_size();
    let intensity = (0..w.batch())
        .map(|r| operational_intensity(w.qo_lens[r], w.kv_lens[r], g).unwrap_or(0.0))
        .collect();
    BalanceReport {
        per_cta_cost: plan.cta_cost.clone(),
        makespan: plan.makespan(),
        mean_cost: plan.cta_cost.iter().sum::<f64>() / w.num_ctas as f64,
        imbalance: imbalance_of(&plan.cta_cost),
        chunk_count: plan.chunk_count(),
        intensity_per_request: intensity,
        baseline_makespan: baseline.iter().cloned().fold(0.0, f64::max),
        baseline_imbalance: imbalance_of(&baseline),
        baseline_per_cta_cost: baseline,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub balance: BalanceReport,
    pub repeats: usize,
    pub wall_ms_per_run: f64,
    pub workspace_bytes: usize,
    pub verify_max_abs_err: f64,
    /// Explicit worker count driving the run; 0 means the global pool.
    pub workers: usize,
}

/// Time plan+run over `repeats` (after one warmup) and report balance plus
/// timing. Timings are wall clock and only meaningful relative to each
/// other.
pub fn bench<T: Scalar>(
    profile: &WorkloadProfile,
    variant: &VariantSpec,
    num_ctas: usize,
    block_cols: usize,
    repeats: usize,
    workers: Option<usize>,
) -> Result<BenchReport> {
    let gen = generate_workload::<T>(profile)?;
    let staged = stage_workload(&gen, num_ctas, block_cols, None)?;
    let mut engine: Engine<T> = match workers {
        Some(w) => Engine::with_workers(bounds_for(&staged.spec), w)?,
        None => Engine::new(bounds_for(&staged.spec))?,
    };
    let handle = engine.plan(&staged.spec)?;
    let kv = KvInput::Bsr(&staged.bsr);
    let output = engine.run(&handle, &gen.q, &kv, variant)?;
    let (max_abs, _) = compare_to_oracle(&gen, &output, variant)?;

    let repeats = repeats.max(1);
    let start = Instant::now();
    for _ in 0..repeats {
        let handle = engine.plan(&staged.spec)?;
        engine.run(&handle, &gen.q, &kv, variant)?;
    }
    let wall_ms_per_run = start.elapsed().as_secs_f64() * 1e3 / repeats as f64;

    Ok(BenchReport {
        balance: balance_report(handle.plan()),
        repeats,
        wall_ms_per_run,
        workspace_bytes: engine.workspace_bytes(),
        verify_max_abs_err: max_abs,
        workers: engine.workers(),
    })
}
