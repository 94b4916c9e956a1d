//! Training, evaluation and ablation orchestration.

pub mod ablate;
pub mod eval;
pub mod gradsuite;
pub mod optimizer;
pub mod train;

use std::sync::Once;

/// Caps the worker pool from DIFFMOD_THREADS when set. Called once by entry
/// points; later calls are no-ops.
pub fn init_thread_pool() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("DIFFMOD_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
