//! Landmark-based route training for people with cognitive impairments.
//!
//! The crate covers the whole lifecycle of a trained route: exploratory walk
//! capture ([`erw`]), curation and negotiation of the route definition
//! ([`design`]), adaptive on-the-street training ([`engine`]), progress
//! indicators ([`indicators`]) and a deterministic walker used to exercise
//! all of it without leaving the desk ([`sim`]).

pub mod design;
pub mod engine;
pub mod erw;
pub mod geo;
pub mod ids;
pub mod indicators;
pub mod media;
pub mod payload;
pub mod privacy;
pub mod route;
pub mod sim;
