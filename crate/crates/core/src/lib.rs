//! Geolocation-based contact tracing between a health authority, a location
//! provider, an identity provider and an independent third-party authority.

pub mod adversary;
pub mod auditor;
pub mod codec;
pub mod crypto;
pub mod formats;
pub mod geo;
pub mod ha;
pub mod intermediaries;
pub mod lp;
pub mod model;
pub mod protocol;
pub mod scenario;
pub mod simnet;
pub mod synthgen;
