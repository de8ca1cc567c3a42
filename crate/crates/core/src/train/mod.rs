//! Optimizer, data ingestion, checkpoints and the training schedules.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod trainer;

pub use checkpoint::{Checkpoint, NamedTensor, TensorData};
pub use data::{load, load_cifar10, load_mnist, make_batch, Dataset, DatasetKind, Normalization, Split};
pub use optim::{adam_step, linear_lr, Adam};
pub use trainer::{
    evaluate, load_network, metrics_csv, network_checkpoint, predictions, restore_network, restore_normalization, train_teacher,
    train_two_step, MetricRow, TaskData, TrainConfig, TrainOutcome,
};
