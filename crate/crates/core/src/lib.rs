pub mod attention_analysis;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod evaluation;
pub mod gradcheck_suite;
pub mod error;
pub mod model;
pub mod nn;
pub mod readout;
pub mod tensorcore;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct ModelChapter;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/attention.md")]
    pub struct Attention;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
    #[doc = include_str!("../../../README.md")]
    pub struct Readme;
}
