//! Toy decoder transformer with rectangular attention over injected KB rows.

mod attention;
mod config;
mod engine;
mod tape_forward;
mod vocab;
mod weights;

pub use attention::rectangular_attention;
pub use config::ModelConfig;
pub use engine::{argmax, lm_loss, Decoded, Knowledge, LayerTrace, Model, RectAttnTrace};
pub use tape_forward::{
    adapter_grads, adapter_param_id, tape_forward, TapeAdapters, TapeBackbone, TapeOutput, TapePass, TrainSelect,
    BACKBONE_PARAM_BASE,
};
pub use vocab::{Vocab, BOS, EOS, PUNCT, SEP};
pub use weights::{AdapterSet, Backbone, BlockWeights, LayerAdapters};
