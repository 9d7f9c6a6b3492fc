//! Per-thread count of inner products evaluated by [`Tape::matmul_nt`](super::Tape::matmul_nt).

use std::cell::Cell;

thread_local! {
    static INNER_PRODUCTS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn tick() {
    INNER_PRODUCTS.with(|c| c.set(c.get() + 1));
}

pub fn inner_products() -> u64 {
    INNER_PRODUCTS.with(Cell::get)
}

pub fn reset_inner_products() {
    INNER_PRODUCTS.with(|c| c.set(0));
}
