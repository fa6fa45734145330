use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::Side;

/// Optimizer-state scalar counts for one `m×n` parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    /// Two full Adam moments: `2·m·n`.
    pub full_scalars: u64,
    /// Two projected moments plus (optionally) the basis, on the cheaper side.
    pub projected_scalars: u64,
    pub reduction_fraction: f64,
    /// Side achieving `projected_scalars`.
    pub side: Side,
}

fn projected_on(side: Side, m: u64, n: u64, r: u64, store_basis: bool) -> u64 {
    let (moments, basis) = match side {
        Side::Left => (2 * r * n, m * r),
        Side::Right => (2 * m * r, n * r),
    };
    moments + if store_basis { basis } else { 0 }
}

/// Memory accounting for rank-`r` projection of an `m×n` parameter.
///
/// Left: `2·r·n (+ m·r)`; Right: `2·m·r (+ n·r)`; the smaller is reported.
pub fn memory_footprint(
    m: usize,
    n: usize,
    r: usize,
    store_basis: bool,
) -> Result<MemoryFootprint> {
    if r > m.min(n) {
        return Err(Error::dim(
            "memory_footprint",
            format!("rank <= {}", m.min(n)),
            r,
        ));
    }
    let (m, n, r) = (m as u64, n as u64, r as u64);
    let full = 2 * m * n;
    let left = projected_on(Side::Left, m, n, r, store_basis);
    let right = projected_on(Side::Right, m, n, r, store_basis);
    let (projected, side) = if left <= right {
        (left, Side::Left)
    } else {
        (right, Side::Right)
    };
    let reduction_fraction = if full == 0 {
        0.0
    } else {
        1.0 - projected as f64 / full as f64
    };
    Ok(MemoryFootprint {
        full_scalars: full,
        projected_scalars: projected,
        reduction_fraction,
        side,
    })
}
