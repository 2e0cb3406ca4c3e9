//! Tensor-network classifiers: labeled dense tensors, hypergraph networks,
//! reverse-mode gradients, variance-matched initialization, trainable bond
//! dimensions and the MNIST training pipeline around them.

pub mod autodiff;
pub mod chain;
pub mod data;
pub mod error;
pub mod init;
pub mod network;
pub mod rankreg;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_diff_check, Gradients, Tape};
pub use chain::{ChainGrads, ChainModel, ChainPass};
pub use data::{avg_pool_2x2, load_idx, preprocess, zigzag_flatten, FeatureMap, FeatureSet, ImageDataset};
pub use error::{Error, Result};
pub use init::{
    copy_node_init, element_variance, init_dense, init_per_tensor, CopyInitPlan, DenseSelection, Distribution, InitReport,
    InitSpec, MonteCarloStats, Scheme,
};
pub use network::{
    build_chain, build_mps, effective_hypergraph, full_contract, inputs_from_flat, ContractionOrder, EdgeId,
    EffectiveGraph, HyperEdge, Inputs, Leg, Node, NodeId, Slot, TensorNetwork,
};
pub use rankreg::{
    insert_regularizers, mask_diagonal, penalized_loss, soft_param_count, truncate_and_absorb, Absorb, MaskMode,
    Penalty, RankRegularizer,
};
pub use tensor::{contract, copy_node_with_labels, diag_tensor, make_copy_node, outer, pair_product, Label, Tensor};
pub use train::{
    adam_step, evaluate, softmax_cross_entropy, train, train_from, AdamConfig, AdamState, Checkpoint, Evaluator,
    RunRecord, Splits, TrainConfig,
};
