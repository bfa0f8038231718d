pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod scan;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
pub mod readme {}

/// The guide in `book/`, compiled so its snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod tensors {}
    #[doc = include_str!("../../../book/src/scan.md")]
    pub mod scan {}
    #[doc = include_str!("../../../book/src/ssm.md")]
    pub mod ssm {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    pub mod blocks {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
