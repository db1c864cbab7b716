#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod geometry;
pub mod surface;
pub mod kinematics;
pub mod depth;
pub mod tracker;
pub mod evaluation;
pub mod registry;
pub mod icp;
