//! Stack-augmented recurrent language models and the tooling around them:
//! a small reverse-mode autodiff engine, formal-language tasks with exact
//! membership oracles, training with freeze modes, length-bucketed
//! evaluation, length-stability diagnostics, and word-level language
//! modelling.

pub mod eval;
pub mod experiment;
pub mod lang;
pub mod nn;
pub mod ptb;
pub mod seed;
pub mod stability;
pub mod tensor;
pub mod train;
