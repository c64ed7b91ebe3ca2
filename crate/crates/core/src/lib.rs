//! Lattice-Boltzmann halo-exchange laboratory.
//!
//! Rank contexts are threads talking over an in-process message fabric
//! ([`transport`]). Each rank owns a padded D3Q19 subdomain ([`lattice`]),
//! finds its 26 neighbours on a Cartesian process grid ([`topology`]) and
//! refreshes its one-site halo with either the three-stage blocking
//! protocol or the 26-message non-blocking one ([`halo`]).

pub mod bench;
pub mod config;
pub mod error;
pub mod halo;
pub mod lattice;
pub mod metrics;
pub mod overlap;
pub mod report;
pub mod topology;
pub mod transport;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use halo::{HaloExchanger, Strategy};
pub use lattice::{DistributionField, VelocitySet};
pub use topology::{CartesianTopology, HaloNeighbour};
pub use transport::{run_ranks, Endpoint, Fabric, TransportConfig};
