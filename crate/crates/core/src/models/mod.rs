//! Model graphs, architecture builders, weight files, and two-stage prediction.

mod arch;
mod builders;
mod graph;
mod hierarchy;
mod weights;

pub use arch::{Architecture, BackboneConfig, BlockConfig, ModelKind};
pub use builders::{
    build_baseline_binary_cnn, build_fusion_model, build_mini_dense_backbone, build_subclass_initial_cnn,
    FUSION_BRANCH_UNITS, FUSION_DROPOUT, FUSION_HIDDEN_UNITS, L2_LAMBDA,
};
pub use graph::{
    output_probabilities, BnUpdate, ForwardPass, GraphBuilder, Head, LayerNode, Mode, ModelGraph, BN_EPS,
    BN_MOMENTUM,
};
pub use hierarchy::{argmax, hierarchical_predict, hierarchical_predict_batch, Classifier, Diagnosis};
pub use weights::{
    assign_weights, card_path, decode_weights, encode_weights, load_architecture, load_model,
    load_weights_into, save_model, save_weights, MAGIC, VERSION,
};
