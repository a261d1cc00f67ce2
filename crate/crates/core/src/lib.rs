//! Mode detection and state estimation for randomly switched linear systems,
//! with a small power-grid front end that produces the switched models.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod gridmodel;
pub mod matnum;
pub mod rsls;
pub mod detect;
pub mod observe;
pub mod harness;
