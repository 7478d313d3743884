//! Objectives, negative sampling, optimization and the three training
//! loops: CMBLM pretraining, the baseline word predictor and the energy
//! model.

pub mod data;
pub mod negatives;
pub mod objective;
pub mod optim;
pub mod trainer;

pub use data::{mask_ids, mask_targets, CmblmBatch, EncodedInstance};
pub use objective::{candidate_set, energy_objective, energy_scores, evaluate, EnergyItem, LossOutput, Objective};
pub use negatives::{sample_negatives, NegativeSampling};
pub use optim::{Adam, TrainConfig};
pub use trainer::{pretrain_cmblm, train_baseline, train_energy, Init, MetricsRecord, TaskData, TrainOutcome};
