//! Training, evaluation and the desk-scale experiments.

mod checkpoint;
mod config;
mod eval;
mod experiments;
mod train;

pub use checkpoint::{load_bench_dir, load_checkpoint, save_bench_dir, save_checkpoint};
pub use config::{KeyValues, Optimizer, TrainConfig, DEFAULT_TRAIN_LR, DEFAULT_TRAIN_TAU};
pub use eval::{evaluate, mean_std, predict, DomainScore, Group, MetricReport, Score};
pub use experiments::{
    export_activations, jaccard, run_ablation, run_seeds, setup, slot_sweep, test_samples, top_slots, ActivationExport,
    AblationCell, AblationTable, SeedRun, SlotSweep, SweepPoint, TOP_FRACTION,
};
pub use train::{init_state, steps_per_epoch, train, TrainRun, TrainState};
