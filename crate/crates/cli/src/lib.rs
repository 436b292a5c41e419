//! Library surface of the `aeriscast` command-line tool: configuration
//! loading with overrides and run hashing, and the pipeline step
//! implementations behind each subcommand.

pub mod commands;
pub mod config;

pub use commands::Pipeline;
pub use config::{load_config, LoadedConfig, RunConfig};

/// Caps the global worker pool from `AERISCAST_THREADS` when set.
/// Harmless if the pool was already initialized.
pub fn init_threads() {
    if let Ok(v) = std::env::var("AERISCAST_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}
