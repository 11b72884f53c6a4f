//! Desk-scale learning harness: toy model, procedural data, training loop,
//! evaluation and ablations.

pub mod data;
pub mod model;
pub mod train;

pub use data::{held_out_scenes, make_dataset, GeometrySet, SceneGeometry, SceneSpec, TrainSample, HELD_OUT_SEED_BASE};
pub use model::{masked_mse, Ablation, ForwardInputs, ForwardOutput, ModelConfig, PosVars, ToyModel};
pub use train::{
    batch_loss, checkpoint_path, evaluate, evaluate_sample, front_backprojection, mean_defined, predict, Augment, Prediction, SampleSource,
    SceneEval, StepLog, TrainConfig, Trainer, CHECKPOINT_NAME,
};
