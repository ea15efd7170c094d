//! Cross-lingual legal judgment prediction experiments.
//!
//! * [`corpus`]: case records, filters, oversampling, distributions
//! * [`translator`]: MT backends, batching, retry and persistent cache
//! * [`augment`]: translation planning and augmented corpus assembly
//! * [`encoder`]: hierarchical block classifier, adapters, smoothed loss
//! * [`trainer`]: experiment configs, training loop, lr grid selection
//! * [`evaluator`]: macro-F1, aggregation and stratified score grids
//! * [`stats`]: almost-stochastic-order testing and 1-D Wasserstein distances
//! * [`pipeline`]: the `prepare` / `run` / `report` / `aso` / `distances` commands

pub mod augment;
pub mod corpus;
pub mod encoder;
pub mod evaluator;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod trainer;
pub mod translator;
