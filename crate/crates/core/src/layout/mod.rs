//! KV-cache storage: ragged query/output tensors, the block-sparse kv
//! structure with its backing pool, page-table conversion, shared-prefix
//! decomposition, head-group fusion and binary tensor dumps.

mod bsr;
mod composable;
mod fusion;
mod io;
mod paged;
mod ragged;

pub use bsr::{BsrMatrix, KvPool};
pub use composable::{
    decompose_shared_prefix, ComposableFormat, FormatPart, PartRole, PrefixGroup,
};
pub use fusion::{fuse_head_groups, fused_to_original, original_to_fused, HeadFusionMap};
pub use io::{read_tensor, write_tensor, TensorHeader, FIKV_MAGIC, FIKV_VERSION};
pub use paged::{page_table_to_bsr, PagedKvCache};
pub use ragged::RaggedTensor;
