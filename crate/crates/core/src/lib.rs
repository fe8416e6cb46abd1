pub mod dephasing;
pub mod dynamics;
pub mod error;
pub mod kde;
pub mod linalg;
pub mod liouville;
pub mod network;
pub mod optimizer;
pub mod pipeline;
pub mod rim;
pub mod sensitivity;
pub mod spline;
pub mod stats;
