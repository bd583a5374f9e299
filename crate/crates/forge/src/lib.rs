//! IO, endpoints, worker pipeline and orchestrator for forge.

pub mod checkpoint;
pub mod config;
pub mod evalio;
pub mod index_store;
pub mod ingest;
pub mod llm;
pub mod mock;
pub mod pipeline;
pub mod repo;
pub mod sbatch;
pub mod server;
