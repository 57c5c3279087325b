//! Latent-aligned soft mixture-of-experts imitation learning.
//!
//! Two training stages share this crate: an unsupervised student/teacher
//! latent pretraining ([`pretrain`]) and a soft mixture-of-experts policy
//! whose routing is regularized to follow the student's latent geometry
//! ([`policy`], [`losses`], [`trainer`]). [`phaseworld`] provides the
//! synthetic pick-transport-release demonstrations and [`eval`] the
//! rollouts, phase-alignment metrics and ablation harness.

pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod phaseworld;
pub mod policy;
pub mod pretrain;
pub mod trainer;

pub use error::{Error, Result};
