//! Symbolic regression as conditional language modelling.
//!
//! A point cloud of `(x, y)` samples is embedded by an order-invariant set
//! encoder ([`tnet`]), a small GPT ([`gpt`]) decodes an equation skeleton
//! character by character, and BFGS ([`fit`]) fills in the constants.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::too_many_arguments
)]

pub mod bench;
pub mod config;
pub mod eqgen;
pub mod expr;
pub mod fit;
pub mod gp;
pub mod gpt;
pub mod infer;
pub mod model;
pub mod nn;
pub mod tnet;
pub mod train;
