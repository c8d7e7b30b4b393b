//! Biased random walks on Galton-Watson trees: trap geometry, escape
//! regimes and scaling behavior, simulated at desk scale.

pub mod analytics;
pub mod cli;
pub mod distributions;
pub mod oracle;
pub mod stats;
pub mod trees;
pub mod walk;
