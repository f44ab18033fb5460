//! Abductive preference learning on a desk-scale causal language model.
//!
//! The crate holds a small reverse-mode autodiff engine ([`tensor`]), a
//! transformer policy ([`lm`]), DPO-family losses in standard and
//! role-swapped form ([`losses`]), a synthetic dataset pipeline
//! ([`datagen`]), training loops ([`trainer`]), metrics and an exact Bayes
//! oracle ([`evalkit`]), and the `abdpref` command line ([`cli`]).
//!
//! The guide in `book/` walks through each piece; its code blocks run as
//! doc-tests of this crate.

pub mod cli;
pub mod datagen;
pub mod evalkit;
pub mod gradcheck;
pub mod lm;
pub mod losses;
pub mod tensor;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
