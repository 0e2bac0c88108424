//! Map-sharing protocol engine: overlap assessment, redundancy-controlled map
//! expansion, proactive map sharing and update detection, plus a synthetic
//! multi-agent simulator to drive them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod ids;
pub mod map_store;
pub mod overlap;
pub mod wire;
pub mod expansion;
pub mod sharing;
pub mod runtime;
pub mod sim;
