pub mod error;
pub mod exec;
pub mod graph;
pub mod kernels;
pub mod kmeans;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod model_io;
pub mod numerics;
pub mod readout;
pub mod search;

pub use error::{ErrorKind, GckmError, Result};
pub use exec::Exec;
pub use graph::{AggregationMode, Graph, Role};
pub use kernels::{GramMatrix, KernelSpec};
pub use layer::{GckmLayerModel, LayerSpec};
pub use model::{cluster, initialize, train, DeepModel, EvalReport, ModelConfig, OptimizerConfig, SelectionMetric, TrainOptions};
pub use readout::{ReadoutSpec, SemiSupModel};
pub use search::{run_search, SearchOptions, SearchSpace};
