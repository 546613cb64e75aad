pub mod cli;
pub mod curvature;
pub mod error;
pub mod gradspace;
pub mod layers;
pub mod metanet;
pub mod mlp;
pub mod numerics;
pub mod params;
pub mod perm;
pub mod suites;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(not(target_arch = "wasm32"))]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
