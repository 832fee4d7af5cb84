//! Trace-driven semantic clone detection.
//!
//! Executables are observed at runtime through typed traces. Each executable
//! gets a generative density model of its joint input/output behavior, and
//! pairs of executables are compared by a rejecting filter pipeline: a static
//! type check, a two-sample distribution test on the observed data, and a
//! likelihood-ratio test that conditions one model on values generated by the
//! other. Pairs that survive all three stages are reported as semantic clones
//! and merged into clone classes.
//!
//! The [`corpus`] module ships a small builtin benchmark with known ground
//! truth, and the `cloneflow` binary exposes the whole flow as `generate`,
//! `train`, `detect`, and `evaluate` subcommands. The `book/` directory in
//! the repository walks through every concept with runnable snippets.

pub mod corpus;
pub mod encoding;
pub mod flow;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod space;
pub mod stats;
pub mod trace;

mod book;
