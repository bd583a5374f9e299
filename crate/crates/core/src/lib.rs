//! Pure, allocation-only building blocks for turning per-patient note
//! collections into schema-validated structured records.
//!
//! Everything in this crate is deterministic and free of IO. File formats,
//! network clients and the orchestration service live in the `forge` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod dates;
pub mod eval;
pub mod extract;
pub mod job;
pub mod json;
pub mod rbac;
pub mod schema;
pub mod text;
pub mod vector;

#[cfg(feature = "testkit")]
pub mod testkit;
