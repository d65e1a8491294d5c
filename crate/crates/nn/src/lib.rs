//! Autodiff engine, Dense-Vnet segmentation network and training loop.

pub mod autodiff;
pub mod densevnet;
pub mod trainer;
