// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod dynamics;
pub mod lowlevel;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod model;
pub mod modes;
pub mod plant;
