//! Road-safety-feature mapping from sequences of geo-referenced street imagery.
//!
//! The crate covers the whole pipeline:
//!
//! * [`geo`]: road networks, haversine geometry, equal-interval sampling,
//!   request-URL construction and GeoJSON prediction maps.
//! * [`data`]: label/feature files, sliding-window sequences, class counts and
//!   a synthetic corridor generator.
//! * [`nn`]: hand-differentiated layers, binary cross-entropy, Adam, a
//!   finite-difference gradient checker and the model container format.
//! * [`cnn`]: a small frame encoder with a 3-way sigmoid head.
//! * [`lstm`]: the LSTM sequence classifier (shared and separate multi-label
//!   modes), BPTT training and corridor prediction.
//! * [`eval`]: per-class precision/recall/F, count-weighted average F and the
//!   isolated-error diagnostic.
//! * [`train`]: the mini-batch Adam loop shared by both models.
//! * [`config`]: the flat `key = value` pipeline configuration.
//! * [`seed`]: per-stage random streams derived from one master seed.

pub mod cnn;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod lstm;
pub mod nn;
pub mod seed;
pub mod train;

pub use error::{Error, Result};

/// The three road safety features, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    /// Rumble strips.
    Rs,
    /// Metal crash barrier.
    Mcb,
    /// Concrete barrier.
    Cb,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Rs, Class::Mcb, Class::Cb];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Upper-case tag used in reports (`RS`, `MCB`, `CB`).
    pub fn tag(self) -> &'static str {
        match self {
            Class::Rs => "RS",
            Class::Mcb => "MCB",
            Class::Cb => "CB",
        }
    }

    /// Lower-case key used in file headers and model groups.
    pub fn key(self) -> &'static str {
        match self {
            Class::Rs => "rs",
            Class::Mcb => "mcb",
            Class::Cb => "cb",
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-class boolean labels indexed by [`Class::index`].
pub type Labels = [bool; 3];
