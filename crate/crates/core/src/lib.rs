//! Adversarial protection of images against diffusion-based customization.
//!
//! The crate adds small, bounded perturbations to images so that diffusion
//! pipelines that fine-tune on them, or condition on them as a reference
//! (adapter or reference-net features), reconstruct them poorly.
//!
//! * [`pgd`]: iterative signed-gradient protector with l-infinity projection.
//! * [`encoder`]: a ViT noise encoder that protects in one forward pass, and
//!   its two-phase trainer.
//! * [`loss`]: the attack objective shared by both.
//! * [`eval`]: invisibility and identity metrics, robustness and transfer
//!   harnesses.
//!
//! All models run on the small [`graph`] autodiff tape in `f64`. Toy
//! denoisers and conditioners make the whole pipeline runnable without
//! pretrained weights; real ones plug in through [`backend::BackendRegistry`]
//! and [`conditioner::ConditionerRegistry`].

pub mod augment;
pub mod backend;
pub mod cli;
pub mod conditioner;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod loss;
pub mod maps;
pub mod pgd;
pub mod types;

pub use error::{Error, Result};
pub use types::{clamp_to_pixel_range, ImageTensor, LossWeights, Method, NoiseBudget, Perturbation, ProtectionRecord};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/types.md")]
    mod types {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/pgd.md")]
    mod pgd {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
