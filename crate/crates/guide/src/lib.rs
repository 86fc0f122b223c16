//! Book listings compiled as doc tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/plucker.md")]
pub mod plucker {}

#[doc = include_str!("../../../book/src/grassmann-layer.md")]
pub mod grassmann_layer {}

#[doc = include_str!("../../../book/src/causality.md")]
pub mod causality {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
