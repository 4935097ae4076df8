//! Thread-local multiply-accumulate counter.
//!
//! Forward kernels report the MACs they actually execute. Counting is off
//! unless a [`count_macs`] scope is active on the current thread.

use std::cell::Cell;

thread_local! {
    static DEPTH: Cell<u32> = const { Cell::new(0) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(macs: u64) {
    DEPTH.with(|d| {
        if d.get() > 0 {
            MACS.with(|m| m.set(m.get() + macs));
        }
    });
}

/// Run `f` and return its result with the number of MACs executed inside it.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(|m| m.get());
    DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    DEPTH.with(|d| d.set(d.get() - 1));
    let after = MACS.with(|m| m.get());
    (out, after - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_scopes_accumulate() {
        add(5);
        let ((_, inner), outer) = count_macs(|| {
            add(3);
            count_macs(|| add(4))
        });
        assert_eq!(inner, 4);
        assert_eq!(outer, 7);
    }
}
