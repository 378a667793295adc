//! Toy vision-language policy: a linear patch encoder feeding a small
//! pre-norm transformer decoder over a closed vocabulary.
//!
//! Two forward paths share the same kernels. [`Policy::forward_logprobs`]
//! records on a [`crate::autodiff::Tape`] and packs many completions behind
//! one copy of their prompt; [`Policy::sample`] decodes incrementally with a
//! key/value cache.

pub mod checkpoint;
mod infer;
mod model;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use infer::{argmax, Completion, KvCache, Prefix};
pub use model::{effective_temperature, Params, Policy, PolicyConfig, PromptInput, SeqRef};
pub use vocab::Vocabulary;

#[cfg(test)]
mod tests;
