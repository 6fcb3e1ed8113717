//! Discrete diffusion with Gumbel-residual inversion.
//!
//! The crate covers two model families over categorical token sequences:
//!
//! * multinomial (mask-and-replace) diffusion, with closed-form forward
//!   marginals and posteriors ([`multinomial`]);
//! * masked generative modeling with schedule-driven renoising ([`maskgen`]).
//!
//! For both, [`dice`] records per-step residual latents `z_t` while inverting a
//! clean sequence, then replays the reverse sampler with those residuals mixed
//! with fresh Gumbel noise. With full residual weight and no noise the replay
//! reproduces the source exactly; intermediate weights trade structure
//! preservation against adherence to a new condition.
//!
//! Denoisers are exact Bayes posteriors over small, fully specified toy
//! distributions ([`denoise`]), so every stage can be checked against
//! enumeration.

pub mod analysis;
pub mod denoise;
pub mod dice;
pub mod error;
pub mod maskgen;
pub mod multinomial;
pub mod rng;
pub mod schedules;
pub mod tokens;

pub use error::{DiceError, Result};
pub use rng::{RngStream, SeedProvenance};
pub use tokens::{GumbelField, LogitField, TokenSeq, Vocab, LOG_FLOOR};
