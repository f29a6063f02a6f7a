//! Reconstruction of under-reported case counts from hospital admissions.

pub mod bootstrap;
pub mod deconv;
pub mod ident;
pub mod kernel;
pub mod pipeline;
pub mod quantile;
pub mod report;
pub mod select;
pub mod series;
pub mod synth;

// The book's code blocks run as doc-tests through these empty modules.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/kernel.md")]
    mod kernel {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/deconvolution.md")]
    mod deconvolution {}
    #[doc = include_str!("../../../book/src/lambda.md")]
    mod lambda {}
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    mod bootstrap {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
