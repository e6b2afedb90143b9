pub mod config;
pub mod data;
pub mod error;
pub mod fisher;
pub mod pack;
pub mod params;
pub mod pipeline;
pub mod refine;
pub mod report;
pub mod rng;
pub mod selector;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
