//! Parameter storage, reverse-mode gradients, Adam, and the policy/flow networks.

mod checkpoint;
mod model;
mod params;
mod tabular;
mod tape;

pub use checkpoint::{
    encode_checkpoint, load_checkpoint, read_manifest, save_checkpoint, ArrayManifest, CheckpointManifest,
    CheckpointMeta, RngState, CHECKPOINT_FORMAT, MANIFEST_FILE,
};
pub use model::{
    ActivationTrace, Architecture, FlowHead, Forward, LayerActivations, Model, NetworkConfig, PolicyNetwork,
    SequenceModel, StepNodes, FLOW_HIDDEN_LAYER, FLOW_OUTPUT_BIAS, FLOW_OUTPUT_WEIGHT, TRUNK_LAYER_1, TRUNK_LAYER_2,
};
pub use params::{adam_step, AdamConfig, Gradients, ParamArray, ParamGroup, ParamId, ParamStore};
pub use tabular::{FlowTarget, TabularModel};
pub use tape::{NodeId, Tape};
