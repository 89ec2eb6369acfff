//! Speech refinement for impaired speech.
//!
//! A recording is turned into log-Mel features, classified into one of four
//! speech conditions, transcribed, rewritten into fluent text by a language
//! model prompted with the condition, and re-synthesised in a chosen style.
//!
//! ```
//! use speech_refine::refine::rule_refine;
//!
//! let clean = rule_refine("I w-w-want um the the book", None).unwrap();
//! assert_eq!(clean, "I want the book");
//! ```

pub mod audio;
pub mod backends;
pub mod config;
pub mod fixtures;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod sir;

pub use audio::{AudioClip, AudioError, DspConfig, MelFrontEnd, MelSpectrogram};
pub use backends::{Backends, StyleSpec};
pub use pipeline::{Pipeline, RefineOptions, RefineSession, SessionStore};
pub use sir::{ClassPosterior, ImpairmentClass, SirModel};
