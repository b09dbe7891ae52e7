//! Architecture-dispatched builders and asynchronous build jobs.
//!
//! Builders here do not compile images. They package the rendered platform
//! configuration and a manifest into a deterministic tar archive, which is
//! the artifact a real toolchain would embed into an image.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DeviceDescriptor, TransformError, TransformFailure, Transformer};
use crate::registry::ConfigDocument;
use crate::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareBundle {
    pub node: NodeId,
    pub platform: String,
    pub architecture: String,
    pub model_id: String,
    pub platform_config: String,
    pub packages: BTreeSet<String>,
    pub builder_id: String,
    /// Hex SHA-256 over the canonical JSON of every other field.
    pub digest: String,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    node: &'a NodeId,
    platform: &'a str,
    architecture: &'a str,
    model_id: &'a str,
    platform_config: &'a str,
    packages: &'a BTreeSet<String>,
    builder_id: &'a str,
}

impl FirmwareBundle {
    pub fn compute_digest(&self) -> String {
        let input = DigestInput {
            node: &self.node,
            platform: &self.platform,
            architecture: &self.architecture,
            model_id: &self.model_id,
            platform_config: &self.platform_config,
            packages: &self.packages,
            builder_id: &self.builder_id,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&input).expect("serializable")))
    }

    /// The bundle as a tar archive with fixed metadata, byte-identical for
    /// identical bundles.
    pub fn archive(&self) -> Vec<u8> {
        let mut builder = tar::Builder::new(Vec::new());
        let manifest = serde_json::to_vec_pretty(self).expect("serializable");
        let config_name = format!("etc/config/{}.conf", self.platform);
        for (path, data) in [("manifest.json", manifest.as_slice()), (config_name.as_str(), self.platform_config.as_bytes())]
        {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_uid(0);
            header.set_gid(0);
            builder.append_data(&mut header, path, data).expect("writing to a Vec cannot fail");
        }
        builder.into_inner().expect("writing to a Vec cannot fail")
    }
}

pub struct BuildRequest<'a> {
    pub node: NodeId,
    pub platform: &'a str,
    pub device: &'a DeviceDescriptor,
    pub platform_config: String,
    pub packages: BTreeSet<String>,
}

pub trait Builder: Send + Sync {
    fn id(&self) -> &str;
    fn supports(&self, architecture: &str) -> bool;
    fn build(&self, req: &BuildRequest<'_>) -> Result<FirmwareBundle, String>;
}

/// Packages configuration without a toolchain.
pub struct StubBuilder {
    id: String,
    architectures: BTreeSet<String>,
}

impl StubBuilder {
    pub fn new(id: &str, architectures: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { id: id.into(), architectures: architectures.into_iter().map(Into::into).collect() }
    }
}

impl Builder for StubBuilder {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports(&self, architecture: &str) -> bool {
        self.architectures.contains(architecture)
    }

    fn build(&self, req: &BuildRequest<'_>) -> Result<FirmwareBundle, String> {
        let mut bundle = FirmwareBundle {
            node: req.node,
            platform: req.platform.into(),
            architecture: req.device.architecture.clone(),
            model_id: req.device.model_id.clone(),
            platform_config: req.platform_config.clone(),
            packages: req.packages.clone(),
            builder_id: self.id.clone(),
            digest: String::new(),
        };
        bundle.digest = bundle.compute_digest();
        Ok(bundle)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("no builder supports architecture `{0}`")]
    NoBuilderForArchitecture(String),
    #[error("configuration failed validation ({} errors)", .0.len())]
    ValidationFailed(Vec<TransformError>),
    #[error("platform `{0}` is not registered")]
    UnknownPlatform(String),
    #[error("builder failed: {0}")]
    Builder(String),
}

impl From<TransformFailure> for BuildError {
    fn from(f: TransformFailure) -> Self {
        match f {
            TransformFailure::UnknownPlatform(p) => BuildError::UnknownPlatform(p),
            TransformFailure::Errors(e) => BuildError::ValidationFailed(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum BuildState {
    Queued,
    Running,
    Done { bundle: FirmwareBundle },
    Failed { error: String },
}

impl BuildState {
    pub fn is_finished(&self) -> bool {
        matches!(self, BuildState::Done { .. } | BuildState::Failed { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildJob {
    pub id: u64,
    pub node: NodeId,
    pub platform: String,
    pub builder_id: String,
    #[serde(flatten)]
    pub state: BuildState,
}

#[derive(Default)]
struct Jobs {
    next_id: u64,
    jobs: BTreeMap<u64, BuildJob>,
    /// Finished archives by bundle digest.
    artifacts: BTreeMap<String, Arc<Vec<u8>>>,
}

/// Runs builds on a bounded worker pool and keeps their results.
pub struct BuildService {
    transformer: Arc<Transformer>,
    builders: Vec<Arc<dyn Builder>>,
    pool: rayon::ThreadPool,
    state: Arc<(Mutex<Jobs>, Condvar)>,
}

impl BuildService {
    pub fn new(transformer: Arc<Transformer>, builders: Vec<Arc<dyn Builder>>, workers: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .thread_name(|i| format!("builder-{i}"))
            .build()
            .expect("thread pool");
        Self { transformer, builders, pool, state: Arc::new((Mutex::new(Jobs::default()), Condvar::new())) }
    }

    pub fn builder_for(&self, architecture: &str) -> Option<&Arc<dyn Builder>> {
        self.builders.iter().find(|b| b.supports(architecture))
    }

    /// Transforms and packages synchronously.
    pub fn build_now(
        &self,
        node: NodeId,
        config: &ConfigDocument,
        device: &DeviceDescriptor,
        platform: &str,
    ) -> Result<FirmwareBundle, BuildError> {
        let builder = self
            .builder_for(&device.architecture)
            .ok_or_else(|| BuildError::NoBuilderForArchitecture(device.architecture.clone()))?;
        run_build(&self.transformer, builder.as_ref(), node, config, device, platform)
    }

    /// Checks that the build can start, then queues it. Returns the job id.
    pub fn submit(
        &self,
        node: NodeId,
        config: ConfigDocument,
        device: DeviceDescriptor,
        platform: &str,
    ) -> Result<u64, BuildError> {
        let builder = self
            .builder_for(&device.architecture)
            .cloned()
            .ok_or_else(|| BuildError::NoBuilderForArchitecture(device.architecture.clone()))?;
        let errors = self.transformer.validate(&config, &device, platform)?;
        if !errors.is_empty() {
            return Err(BuildError::ValidationFailed(errors));
        }
        let id = {
            let mut jobs = self.state.0.lock();
            jobs.next_id += 1;
            let id = jobs.next_id;
            jobs.jobs.insert(
                id,
                BuildJob {
                    id,
                    node,
                    platform: platform.into(),
                    builder_id: builder.id().into(),
                    state: BuildState::Queued,
                },
            );
            id
        };
        let state = Arc::clone(&self.state);
        let transformer = Arc::clone(&self.transformer);
        let platform = platform.to_string();
        self.pool.spawn(move || {
            set_state(&state, id, BuildState::Running, None);
            let result = run_build(&transformer, builder.as_ref(), node, &config, &device, &platform);
            match result {
                Ok(bundle) => {
                    let archive = Arc::new(bundle.archive());
                    set_state(&state, id, BuildState::Done { bundle }, Some(archive));
                }
                Err(e) => set_state(&state, id, BuildState::Failed { error: e.to_string() }, None),
            }
        });
        Ok(id)
    }

    pub fn job(&self, id: u64) -> Option<BuildJob> {
        self.state.0.lock().jobs.get(&id).cloned()
    }

    pub fn jobs(&self) -> Vec<BuildJob> {
        self.state.0.lock().jobs.values().cloned().collect()
    }

    /// Blocks until the job finishes or the timeout passes.
    pub fn wait(&self, id: u64, timeout: Duration) -> Option<BuildJob> {
        let (lock, cv) = &*self.state;
        let deadline = std::time::Instant::now() + timeout;
        let mut jobs = lock.lock();
        loop {
            let job = jobs.jobs.get(&id)?;
            if job.state.is_finished() {
                return Some(job.clone());
            }
            if cv.wait_until(&mut jobs, deadline).timed_out() {
                return jobs.jobs.get(&id).cloned();
            }
        }
    }

    pub fn artifact(&self, digest: &str) -> Option<Arc<Vec<u8>>> {
        self.state.0.lock().artifacts.get(digest).cloned()
    }
}

fn set_state(state: &(Mutex<Jobs>, Condvar), id: u64, new: BuildState, archive: Option<Arc<Vec<u8>>>) {
    let mut jobs = state.0.lock();
    if let (Some(a), BuildState::Done { bundle }) = (archive, &new) {
        jobs.artifacts.insert(bundle.digest.clone(), a);
    }
    if let Some(job) = jobs.jobs.get_mut(&id) {
        job.state = new;
    }
    state.1.notify_all();
}

fn run_build(
    transformer: &Transformer,
    builder: &dyn Builder,
    node: NodeId,
    config: &ConfigDocument,
    device: &DeviceDescriptor,
    platform: &str,
) -> Result<FirmwareBundle, BuildError> {
    let out = transformer.transform(config, device, platform)?;
    let req = BuildRequest {
        node,
        platform,
        device,
        platform_config: transformer.render(&out),
        packages: out.packages,
    };
    builder.build(&req).map_err(BuildError::Builder)
}
