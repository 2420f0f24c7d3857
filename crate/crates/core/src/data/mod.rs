//! Synthetic multi-domain data, leave-one-domain-out splits and
//! domain-balanced batching.

mod batch;
mod generate;
pub mod snapshot;
mod split;

pub use batch::{sample_batch, Batch, EpochSampler};
pub use generate::{generate, DatasetSpec, DomainDataset, Sample};
pub use split::{leave_one_out, Split};
