//! Two-tower episode discovery recommender with multi-source contrastive
//! augmentation.
//!
//! The crate covers the whole pipeline: dataset model and I/O
//! ([`datamodel`]), feature encoding ([`featurize`]), the ReLU tower pair
//! with hand-written gradients and Adam ([`tower`]), nearest-neighbor lookup
//! over pre-trained embedding spaces ([`neighbors`]), the interaction and
//! NT-Xent objectives plus the training loop ([`objective`]), ranking
//! evaluation with popularity baselines ([`evaluate`]) and a planted-signal
//! synthetic data generator ([`synthgen`]).
//!
//! Data-parallel inner loops go through [`exec::Exec`]. With the `parallel`
//! feature (default) they run on rayon; without it everything is sequential.
//! Both paths produce bitwise-identical results.

pub mod datamodel;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod featurize;
pub mod linalg;
pub mod neighbors;
pub mod objective;
pub mod rng;
pub mod synthgen;
pub mod tower;

pub use error::{Error, Result};
