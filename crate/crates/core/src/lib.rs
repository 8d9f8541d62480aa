//! Desk-scale synthetic human-mobility pipeline.
//!
//! The pipeline turns public per-city inputs (boundary polygon, population
//! raster, categorized POIs, commuting OD flows) into synthetic daily
//! trajectories:
//!
//! 1. [`geo`] tessellates the city boundary into indexed 1 km cells.
//! 2. [`features`] assembles a 38-dim profile vector per cell.
//! 3. [`autoencoder`] compresses profiles into a shared 8-dim embedding space.
//! 4. [`codec`] converts visit streams into 48-slot days and 48x8 embedding
//!    sequences.
//! 5. [`diffusion`] trains a denoiser over embedding sequences and generates
//!    new ones with deterministic DDIM sampling seeded by OD-informed noise.
//! 6. [`matcher`] snaps generated embeddings back to concrete locations.
//! 7. [`metrics`], [`privacy`] and [`scaling`] validate the output; [`oracle`]
//!    provides a mechanistic ground-truth corpus so the whole loop can be
//!    checked without license-restricted data.

pub mod autoencoder;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod fixture;
pub mod geo;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod privacy;
pub mod rng;
pub mod scaling;

pub use error::{Error, Result};

/// Half-hour slots per day; slot 0 covers 00:00-00:30.
pub const SLOT_COUNT: usize = 48;
/// Dimension of the shared location embedding space.
pub const EMBED_DIM: usize = 8;
/// Per-location profile vector length: pop(1) + poi(34) + popularity(1) + coords(2).
pub const FEATURE_DIM: usize = 38;
/// Number of POI categories.
pub const POI_DIM: usize = 34;
/// Number of popularity rank classes (deciles).
pub const RANK_CLASSES: usize = 10;
