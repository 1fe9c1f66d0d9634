//! Fit video into a language model's context window.
//!
//! A video is worth thousands of tokens, and a context window has only so
//! many. This crate plans that trade: it decides how many frames fit a given
//! window ([`budget`]), condenses each frame's patch embeddings into a short
//! run of visual tokens ([`vision`]), aligns subtitle cues to the sampled
//! frames ([`subtitles`]), and interleaves everything into one model-ready
//! sequence ([`assembler`]). Low-rank adapters and finite-difference gradient
//! checks ([`lora`], [`gradcheck`]) cover the trainable pieces, and an
//! LLM-judge harness ([`eval`]) scores open-ended predictions.
//!
//! Everything is deterministic: fixed seeds, explicit arithmetic, no hidden
//! global state. The same inputs produce bit-identical outputs across runs.

pub mod assembler;
pub mod budget;
pub mod eval;
pub mod gradcheck;
pub mod lora;
pub mod subtitles;
pub mod tokenizer;
pub mod vision;

pub use budget::{plan_budget, preset_plan, sample_frame_indices, BudgetPlan, ModelPreset};
pub use tokenizer::Vocab;

// Every code block in the guide compiles and runs with the test suite.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod guide_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/budgeting.md")]
pub mod guide_budgeting {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tokens.md")]
pub mod guide_tokens {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/subtitles.md")]
pub mod guide_subtitles {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/vision.md")]
pub mod guide_vision {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
pub mod guide_training {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/lora.md")]
pub mod guide_lora {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/assembly.md")]
pub mod guide_assembly {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod guide_evaluation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod guide_cli {}
