//! Minimal convolutional building blocks with exact gradients.

pub(crate) mod layers;
pub(crate) mod unet;
