//! Federated learning with unary-encoded, shuffled model updates, and the
//! source inference attacks used to measure how much such updates leak.
//!
//! Modules follow the data flow: [`data`] loads and partitions examples,
//! [`nn`] trains local models, [`codec`] turns a model into unary codes and
//! quantized residuals, [`federation`] runs the rounds, and [`attack`]
//! plays the curious server.

pub mod attack;
pub mod codec;
pub mod data;
pub mod federation;
pub mod nn;
pub mod rng;
