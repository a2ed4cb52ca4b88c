//! Toy RNN-Transducer: recurrent encoder, prediction network and additive
//! joint network, with the exact lattice loss, hand-derived gradients,
//! checkpoint averaging and internal-LM extraction by zeroing the acoustic
//! input of the joint.

mod lattice;
mod model;
mod train;

pub use lattice::{loss_backward, loss_forward, JointLattice, LatticeGrad};
pub use model::{TransducerConfig, TransducerModel};
pub use train::{average_checkpoints, train_transducer, RnntTrainConfig, RnntTrainReport};
