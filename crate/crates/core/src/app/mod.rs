//! File formats, synthetic data, checkpoints, cost estimates and the
//! command-line interface.

mod bench;
mod checkpoint;
pub mod cli;
mod config_file;
mod fewshot_run;
mod flops;
mod manifest;
mod points;
mod synth;

pub use bench::{bench_report, bench_rows, dim_pairs, format_rows, model_table, BenchRow, BenchSettings};
pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, MAGIC, VERSION};
pub use config_file::{format_config, load_config, parse_config};
pub use fewshot_run::{run_fewshot, summarize, FewShotOptions, TrialResult};
pub use flops::{
    estimate_flops, layer_flops, linear_flops, rational_flops, vanilla_kan_flops, FlopReport, FlopRow, FLOP_CONVENTION,
};
pub use manifest::{load_dataset, DatasetManifest, MANIFEST_NAME};
pub use points::{format_points, load_points_file, parse_points, save_points_file, write_atomic};
pub use synth::{sample_shape, synth_clouds, synth_dataset, Shape};
