//! Classifier training, conditional autoregressive inversion of intermediate
//! representations, and mutual-information estimators.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod eval;
pub mod inverter;
pub mod io;
pub mod mi;
pub mod mse;
pub mod seed;
