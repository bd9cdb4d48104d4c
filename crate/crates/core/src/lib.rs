//! Continual-learning SLAM from a raw video stream.
//!
//! The front-end learns an under-complete dictionary online and encodes every
//! frame as a sparse code; a quadratic Bayesian surprise filter gates the
//! dictionary updates so the representation only changes when the stream does.
//! Sparse codes double as loop-closure templates for a cosine-similarity
//! matcher, and a lightweight experience map turns odometry plus closures into
//! a relaxed trajectory. A deterministic warehouse simulator provides aliased
//! test streams, and the eval module scores runs against ground truth.

pub mod backend;
pub mod dataset;
pub mod dlsc;
pub mod eval;
pub mod frame;
pub mod matcher;
pub mod pipeline;
pub mod surprise;
pub mod synthstream;
