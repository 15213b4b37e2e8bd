//! Few-shot molecular property prediction.
//!
//! A molecule is encoded twice: as a graph (message passing over atoms) and
//! as a token sequence (hashed n-gram counts reduced by PCA). An attention
//! block fuses the two views into one embedding, episodes of support/query
//! molecules train the encoder around weighted class prototypes, and a tree
//! search over peripheral-deletion subgraphs extracts the substructures the
//! trained model credits for a positive prediction.

pub mod ama;
pub mod autodiff;
pub mod encoders;
pub mod episodes;
pub mod mcts;
pub mod metrics;
pub mod model;
pub mod protonet;
pub mod smiles;
