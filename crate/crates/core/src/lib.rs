//! EV charging on tree-shaped distribution networks: network model,
//! conic allocation, discrete-time simulation and ensemble statistics.

pub mod allocation;
pub mod experiment;
pub mod netmodel;
pub mod simulate;
pub mod stats;
