//! State space model core: continuous definition, discretization, scans.

pub mod continuous;
pub mod scan;
pub mod selective;

pub use continuous::{
    default_a_diagonal, simulate_ode, taylor_discretize_b, zoh_discretize, ContinuousSsm,
    DiscretizedSsm, Trajectory,
};
pub use scan::{
    max_relative_deviation, scan_parallel, scan_sequential, Affine, Discretization, ScanParams,
    SelectiveScanInput, DEFAULT_CHUNK,
};
pub use selective::{selective_scan, SsmProjection};
