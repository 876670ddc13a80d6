use thiserror::Error;

/// Errors returned across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("cannot merge an empty list of attention states")]
    EmptyStateList,

    #[error("workload batch is empty")]
    EmptyBatch,

    #[error("operational intensity requires nonzero lengths (l_qo={l_qo}, l_kv={l_kv})")]
    ZeroLength { l_qo: usize, l_kv: usize },

    #[error("invalid page index {page} (pool holds {pages} pages)")]
    InvalidPage { page: usize, pages: usize },

    #[error("request {request} claims {claimed} tokens but has no pages")]
    EmptyPageList { request: usize, claimed: usize },

    #[error("page indices of request {request} are not strictly increasing")]
    UnsortedPages { request: usize },

    #[error("tile span {start}..{end} out of range for a row of {len} tokens")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("row block {row} out of range ({rows} row blocks)")]
    RowOutOfRange { row: usize, rows: usize },

    #[error("{qo} query heads are not divisible by {kv} kv heads")]
    NonDivisibleHeads { qo: usize, kv: usize },

    #[error("prefix group rows must be contiguous and non-overlapping")]
    NonContiguousGroup,

    #[error("all prefix groups must cover the same number of query rows (saw {a} and {b})")]
    GroupSizeMismatch { a: usize, b: usize },

    #[error("prefix length {len} is not aligned to page size {page_size}")]
    UnalignedPrefix { len: usize, page_size: usize },

    #[error("requests in a group do not share the claimed prefix pages")]
    PrefixNotShared,

    #[error("kv coverage of query row {row} is not a partition: {context}")]
    BadCoverage { row: usize, context: String },

    #[error("invalid tile size {0}; must be one of 1, 16, 32, 64, 128")]
    InvalidTileSize(usize),

    #[error("workload exceeds engine bounds: {context}")]
    BoundsExceeded { context: String },

    #[error("workspace bounds must be positive: {context}")]
    ZeroBound { context: String },

    #[error("input shape does not match the plan: {context}")]
    PlanShapeMismatch { context: String },

    #[error("partial slot {slot} was read before being written")]
    UnwrittenSlot { slot: usize },

    #[error("invalid workload profile: {0}")]
    InvalidProfile(String),

    #[error("invalid variant spec: {0}")]
    InvalidVariant(String),

    #[error("tensor io: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad tensor file: {0}")]
    BadTensorFile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
