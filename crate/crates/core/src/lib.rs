//! Collusive fraud-ring detection over health-insurance visit records.
//!
//! The pipeline filters claim tables, builds a weighted co-visit network
//! between patients, mines candidate groups with Louvain, and computes the
//! group metrics, rankings and similarity views an auditor works from.

pub mod analytics;
pub mod codesim;
pub mod community;
pub mod covisit;
pub mod ingest;
pub mod pipeline;
pub mod synthgen;
