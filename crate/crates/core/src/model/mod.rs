//! Conditioned generator, critic and their building blocks.

pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod conv;
pub mod critic;
pub mod generator;
pub mod norm;
pub mod params;

pub use config::{ConditionTuple, MlpShape, NetConfig, Variant, NUM_ENCODERS, NUM_LEVELS};
pub use consistency::BandProjector;
pub use conv::{filter_scaled_conv, per_sample_conv3x3};
pub use critic::{ConvCritic, Critic};
pub use generator::{count_params, layer_plan, Generator, GeneratorInputs, GeneratorOutput, LayerSpec, Overrides};
pub use norm::{conditional_instance_norm, instance_normalize, NORM_EPS};
pub use params::{Linear, MultiHeadMlp, ParamStore};
pub use checkpoint::{config_hash, load_checkpoint, load_checkpoint_expecting, read_header, save_checkpoint, CheckpointHeader, CheckpointMeta};
