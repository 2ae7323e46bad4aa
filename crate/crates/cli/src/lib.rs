//! Command-line batch tools and the annotation HTTP service.

pub mod batch;
pub mod service;
