//! Guaranteed output bounds for feed-forward ReLU networks, forward
//! reachability of linear plants in feedback with network policies, and
//! certified robust action selection for Q-networks.

pub mod carrl;
pub mod closed_loop;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod network;
pub mod partition;
pub mod problems;
pub mod propagators;

pub use error::{Error, Result};
pub use network::{load_network, save_network, Network};
