pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod flow;
pub mod instruction;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod speaker;
pub mod tensor;
pub mod tensor_io;
pub mod train;
pub mod world;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/instructions.md")]
    mod instructions {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    mod conditioning {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/speaker.md")]
    mod speaker {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
