//! Core building blocks for running a community mesh network.
//!
//! Nodes are described by platform-independent configuration stored in an
//! extensible [`registry`]. Addresses come from hierarchical prefix pools
//! ([`allocator`]). Configuration is turned into per-platform configuration
//! and firmware bundles by the [`firmware`] transformation pipeline, using
//! declarative device descriptors for validation. Running nodes report
//! versioned status documents ([`telemetry`]) which are processed by
//! monitoring pipelines ([`monitor`]) and stored as downsampled time series
//! ([`datastream`]).

pub mod allocator;
pub mod datastream;
pub mod firmware;
pub mod monitor;
pub mod registry;
pub mod stock;
pub mod telemetry;

/// Seconds since the Unix epoch.
pub type Timestamp = i64;

pub use allocator::{Allocation, IpPrefix, Pool, PoolError, PoolSet};

pub use datastream::{
    AggregateBucket, Datapoint, Datastream, DatastreamError, DerivedSpec, Granularity, StreamId,
    Value, ValueType,
};

/// Identifier of a node; nodes are identified by RFC-4122 UUIDs.
pub type NodeId = uuid::Uuid;

pub use firmware::{DeviceDatabase, DeviceDescriptor, FirmwareBundle, PlatformConfig, TransformError, Transformer};
pub use registry::{ConfigDocument, ConfigIssue, ItemInstance, NodeDatabase, Registry, RegistryError};
pub use telemetry::{Dispatcher, TelemetryDocument, TelemetryError};
pub use monitor::{Context, Pipeline, Processor, RunReport, Runner, WorkingSet};
