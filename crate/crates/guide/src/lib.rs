//! The book's chapters, included here so their code runs as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/signals.md")]
pub mod signals {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/vae.md")]
pub mod vae {}

#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}

#[doc = include_str!("../../../book/src/boosting.md")]
pub mod boosting {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/wire.md")]
pub mod wire {}

#[doc = include_str!("../../../book/src/energy.md")]
pub mod energy {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
