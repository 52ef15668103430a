// Every chapter is pulled in as a module doc so `cargo test --doc` runs the
// code blocks in the book. One module per chapter keeps failures traceable.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("src/branches.md")]
pub mod branches {}
#[doc = include_str!("src/conjectures.md")]
pub mod conjectures {}
#[doc = include_str!("src/gateway.md")]
pub mod gateway {}
#[doc = include_str!("src/prompts.md")]
pub mod prompts {}
#[doc = include_str!("src/traces.md")]
pub mod traces {}
#[doc = include_str!("src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
