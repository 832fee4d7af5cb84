//! Doc-tested copies of the guide chapters in `book/`.
//!
//! Every fenced Rust block in the guide runs as a doc-test here, so a chapter
//! cannot drift from the current API without failing `cargo test`. One module
//! per chapter, so a failure names the chapter that broke.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/traces.md")]
pub mod traces {}

#[doc = include_str!("../../../book/src/encoding.md")]
pub mod encoding {}

#[doc = include_str!("../../../book/src/flows.md")]
pub mod flows {}

#[doc = include_str!("../../../book/src/conditional.md")]
pub mod conditional {}

#[doc = include_str!("../../../book/src/statistics.md")]
pub mod statistics {}

#[doc = include_str!("../../../book/src/search-space.md")]
pub mod search_space {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/corpus.md")]
pub mod corpus {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
