//! Predictive uplink QoS for tele-operated driving.
//!
//! The pipeline: [`simkit`] simulates a multi-cell uplink scenario and emits
//! per-window traces; [`featureset`] turns traces into a labeled dataset;
//! [`rforest`] trains a random-forest throughput model; [`tsforecast`]
//! projects dynamic input features over a prediction horizon; [`inference`]
//! combines the two to answer prediction requests; [`sustain`] serves
//! threshold notifications on predicted crossings; [`todapp`] maps predicted
//! QoS to application adaptation decisions. [`pipeline`] orchestrates
//! experiment batches and backs the `todqos` CLI.

pub mod featureset;
pub mod inference;
pub mod pipeline;
pub mod rforest;
pub mod simkit;
pub mod sustain;
pub mod todapp;
pub mod tsforecast;
