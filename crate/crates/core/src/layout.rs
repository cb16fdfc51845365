//! Row orderings for `[outer, inner, C]` data flattened to rows.

use std::sync::Arc;

/// Gather index turning `(outer, inner)` row order into `(inner, outer)`.
///
/// Output row `i·outer + o` reads input row `o·inner + i`. Time-major
/// `[T, N]` rows become node-major with `swap_major(T, N)`.
pub fn swap_major(outer: usize, inner: usize) -> Arc<Vec<Option<usize>>> {
    Arc::new(
        (0..outer * inner)
            .map(|r| Some((r % outer) * inner + r / outer))
            .collect(),
    )
}
