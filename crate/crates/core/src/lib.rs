pub mod chunker;
pub mod clock;
pub mod config;
pub mod evolution;
pub mod harness;
pub mod hitl;
pub mod memory;
pub mod model;
pub mod mutation;
pub mod ndjson;
pub mod rng;
pub mod service;
pub mod session;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/chunking.md")]
    mod chunking {}
    #[doc = include_str!("../../../book/src/mutation.md")]
    mod mutation {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/trainee.md")]
    mod trainee {}
    #[doc = include_str!("../../../book/src/evolution.md")]
    mod evolution {}
    #[doc = include_str!("../../../book/src/operator.md")]
    mod operator {}
}
