//! The U-shaped encoder / bottleneck / decoder network.

pub mod config;
pub mod io;
pub mod layers;
pub mod network;

pub use config::ModelConfig;
pub use io::{load_weights, save_weights};
pub use network::{analytic_param_count, argmax_labels, MambaUnet, StageShape};
