//! State snapshots in a data directory. Every file is written to a temporary
//! name first and renamed into place, so a crash never leaves half a file.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use meshwatch_core::registry::NodeRecord;
use meshwatch_core::telemetry::{NodeSource, SourceMode};
use meshwatch_core::{Datastream, NodeId, Pool};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::app::App;

const NODES: &str = "nodes.json";
const SOURCES: &str = "sources.json";
const POOLS: &str = "pools.json";
const STREAMS: &str = "streams.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Corrupt { path: String, message: String },
}

/// Telemetry source including its token, which the public form omits.
#[derive(Serialize, Deserialize)]
struct SavedSource {
    node: NodeId,
    mode: SourceMode,
    #[serde(default)]
    pull_url: Option<String>,
    interval_s: u64,
    token: String,
}

pub struct SavedState {
    pub nodes: Vec<NodeRecord>,
    pub sources: Vec<NodeSource>,
    pub pools: Vec<Pool>,
    pub streams: Option<Datastream>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.display().to_string(), source }
}

fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), PersistError> {
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    let mut out = BufWriter::new(file);
    fill(&mut out).map_err(io_err(&tmp))?;
    let file = out.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    write_atomic(path, |out| serde_json::to_writer_pretty(out, value).map_err(std::io::Error::other))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, PersistError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    serde_json::from_reader(BufReader::new(file))
        .map(Some)
        .map_err(|e| PersistError::Corrupt { path: path.display().to_string(), message: e.to_string() })
}

pub fn save(dir: &Path, app: &App) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(NODES), &app.db.export())?;
    let sources: Vec<SavedSource> = app
        .sources_with_tokens()
        .into_iter()
        .map(|s| SavedSource { node: s.node, mode: s.mode, pull_url: s.pull_url, interval_s: s.interval_s, token: s.token })
        .collect();
    write_json(&dir.join(SOURCES), &sources)?;
    write_json(&dir.join(POOLS), &app.pools.snapshot())?;
    write_atomic(&dir.join(STREAMS), |out| app.streams.export_jsonl(out))
}

/// Reads a snapshot; `None` when the directory holds no state yet.
pub fn load(dir: &Path) -> Result<Option<SavedState>, PersistError> {
    let Some(nodes) = read_json::<Vec<NodeRecord>>(&dir.join(NODES))? else {
        return Ok(None);
    };
    let sources = read_json::<Vec<SavedSource>>(&dir.join(SOURCES))?
        .unwrap_or_default()
        .into_iter()
        .map(|s| NodeSource { node: s.node, mode: s.mode, pull_url: s.pull_url, interval_s: s.interval_s, token: s.token })
        .collect();
    let pools = read_json(&dir.join(POOLS))?.unwrap_or_default();
    let path = dir.join(STREAMS);
    let streams = match fs::File::open(&path) {
        Ok(f) => Some(
            Datastream::import_jsonl(BufReader::new(f))
                .map_err(|e| PersistError::Corrupt { path: path.display().to_string(), message: e.to_string() })?,
        ),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(io_err(&path)(e)),
    };
    Ok(Some(SavedState { nodes, sources, pools, streams }))
}

#[cfg(test)]
mod tests {
    use crate::app::tests::{minimal_config, test_config};
    use crate::app::{App, Clock, NewNode};

    #[test]
    fn state_survives_a_restart() {
        let dir = tempfile::tempdir().unwrap();
        let config = crate::config::ServiceConfig { data_dir: Some(dir.path().into()), ..test_config() };
        let app = App::new(config.clone(), Clock::virtual_at(100)).unwrap();
        let created = app
            .create_node(NewNode { config: Some(minimal_config("tp-wr741ndv1")), ..Default::default() })
            .unwrap();
        let allocation = app.allocate("mesh-v4", 26, created.uuid).unwrap();
        app.run_pipeline("monitoring").unwrap();
        app.save().unwrap();
        drop(app);

        let again = App::new(config, Clock::virtual_at(200)).unwrap();
        assert_eq!(again.db.get_config(&created.uuid).unwrap(), minimal_config("tp-wr741ndv1"));
        assert_eq!(again.sources_with_tokens()[0].token, created.token);
        let pool = again.pools.get("mesh-v4").unwrap();
        assert_eq!(pool.lock().allocation(&allocation.prefix).map(|a| a.owner), Some(created.uuid));
        assert!(!again.streams.is_empty());
        assert!(!dir.path().join("nodes.tmp").exists());
    }
}
