//! Predicting instructor intervention in MOOC discussion threads.
//!
//! A thread of student posts is encoded hierarchically: a word-level LSTM
//! turns each post into a post vector, and a post-level LSTM turns the
//! running sequence of post vectors into context snapshots. Four
//! classifier variants sit on top — plain hierarchical LSTM (hLSTM) and
//! three attention mechanisms over the contexts (UPA, PPA, APA) — plus a
//! feature-rich logistic-regression baseline. Everything trains with a
//! hand-rolled reverse-mode autodiff core and per-instance Adam updates.

pub mod attention;
pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod pipeline;
pub mod train;
