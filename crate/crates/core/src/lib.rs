//! Test-time adaptation of a frozen vision-language classifier over a stream
//! of precomputed embeddings.
//!
//! The engine keeps a per-class cache of low-entropy samples, ranked by an
//! entropy reweighted with the agreement of a committee of nested text
//! embeddings, and slowly calibrates the text embeddings toward the test
//! distribution. Predictions fuse the cache-augmented classifier with a
//! Gaussian class-mean classifier.
//!
//! ```no_run
//! use reta::datagen::{generate_benchmark, SyntheticSpec};
//! use reta::io::RunConfig;
//! use reta::pipeline::run_stream;
//!
//! let bench = generate_benchmark(&SyntheticSpec::default())?;
//! let out = run_stream(&bench.prompts, bench.stream(), &RunConfig::default())?;
//! println!("{:?}", out.metrics.top1_accuracy);
//! # Ok::<(), reta::Error>(())
//! ```

pub mod cache;
pub mod calibration;
pub mod consistency;
pub mod datagen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod textspace;

pub use error::{Error, Result};
