//! In-memory node store holding one document per node and registration point.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::{ConfigDocument, ConfigIssue, Predicate, Registry, RegistryError, CONFIG_POINT};
use crate::{NodeId, Timestamp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub uuid: NodeId,
    pub created_at: Timestamp,
    /// Registration point name to the node's document on that point.
    #[serde(default)]
    pub documents: BTreeMap<String, ConfigDocument>,
}

/// Hook run on configuration before it is stored, typically a transformation
/// dry run against the selected device.
pub trait ConfigValidator: Send + Sync {
    fn validate(&self, node: NodeId, config: &ConfigDocument) -> Vec<ConfigIssue>;
}

impl<F> ConfigValidator for F
where
    F: Fn(NodeId, &ConfigDocument) -> Vec<ConfigIssue> + Send + Sync,
{
    fn validate(&self, node: NodeId, config: &ConfigDocument) -> Vec<ConfigIssue> {
        self(node, config)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SetConfigError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("document does not match the schema ({} issues)", .0.len())]
    SchemaViolation(Vec<ConfigIssue>),
    #[error("configuration failed validation ({} issues)", .0.len())]
    ValidationFailed(Vec<ConfigIssue>),
}

impl SetConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            SetConfigError::SchemaViolation(i) | SetConfigError::ValidationFailed(i) => i,
            _ => &[],
        }
    }
}

pub struct NodeDatabase {
    registry: Arc<Registry>,
    nodes: RwLock<BTreeMap<NodeId, NodeRecord>>,
}

impl NodeDatabase {
    pub fn new(registry: Arc<Registry>) -> Self {
        Self { registry, nodes: RwLock::new(BTreeMap::new()) }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn create_node(&self, uuid: NodeId, created_at: Timestamp) -> Result<(), SetConfigError> {
        let mut nodes = self.nodes.write();
        if nodes.contains_key(&uuid) {
            return Err(SetConfigError::DuplicateNode(uuid));
        }
        nodes.insert(uuid, NodeRecord { uuid, created_at, documents: BTreeMap::new() });
        Ok(())
    }

    pub fn contains(&self, uuid: &NodeId) -> bool {
        self.nodes.read().contains_key(uuid)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.read().keys().copied().collect()
    }

    pub fn node(&self, uuid: &NodeId) -> Option<NodeRecord> {
        self.nodes.read().get(uuid).cloned()
    }

    pub fn len(&self) -> usize {
        self.nodes.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn document(&self, uuid: &NodeId, point: &str) -> Result<ConfigDocument, SetConfigError> {
        let nodes = self.nodes.read();
        let node = nodes.get(uuid).ok_or(SetConfigError::UnknownNode(*uuid))?;
        Ok(node.documents.get(point).cloned().unwrap_or_default())
    }

    pub fn get_config(&self, uuid: &NodeId) -> Result<ConfigDocument, SetConfigError> {
        self.document(uuid, CONFIG_POINT)
    }

    /// Replaces a node's configuration if it passes the schema and then the
    /// validator. On any error the stored document is left untouched.
    pub fn set_config(
        &self,
        uuid: &NodeId,
        doc: ConfigDocument,
        validator: Option<&dyn ConfigValidator>,
    ) -> Result<(), SetConfigError> {
        if !self.contains(uuid) {
            return Err(SetConfigError::UnknownNode(*uuid));
        }
        let issues = doc.validate(&self.registry, CONFIG_POINT);
        if !issues.is_empty() {
            return Err(SetConfigError::SchemaViolation(issues));
        }
        if let Some(v) = validator {
            let issues = v.validate(*uuid, &doc);
            if !issues.is_empty() {
                return Err(SetConfigError::ValidationFailed(issues));
            }
        }
        self.store(uuid, CONFIG_POINT, doc)
    }

    /// Replaces a node's document on any point after a schema check.
    pub fn put_document(&self, uuid: &NodeId, point: &str, doc: ConfigDocument) -> Result<(), SetConfigError> {
        let issues = doc.validate(&self.registry, point);
        if !issues.is_empty() {
            return Err(SetConfigError::SchemaViolation(issues));
        }
        self.store(uuid, point, doc)
    }

    fn store(&self, uuid: &NodeId, point: &str, doc: ConfigDocument) -> Result<(), SetConfigError> {
        let mut nodes = self.nodes.write();
        let node = nodes.get_mut(uuid).ok_or(SetConfigError::UnknownNode(*uuid))?;
        node.documents.insert(point.to_string(), doc);
        Ok(())
    }

    /// Nodes whose document on `point` satisfies the predicate.
    pub fn query(&self, point: &str, predicate: &Predicate) -> Result<BTreeSet<NodeId>, RegistryError> {
        predicate.check(&self.registry, point)?;
        let empty = ConfigDocument::new();
        Ok(self
            .nodes
            .read()
            .values()
            .filter(|n| predicate.matches(n.documents.get(point).unwrap_or(&empty), &self.registry, point))
            .map(|n| n.uuid)
            .collect())
    }

    pub fn export(&self) -> Vec<NodeRecord> {
        self.nodes.read().values().cloned().collect()
    }

    /// Loads records without schema checks; used to restore an export.
    pub fn import(&self, records: Vec<NodeRecord>) {
        let mut nodes = self.nodes.write();
        for r in records {
            nodes.insert(r.uuid, r);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::tests::fig3;
    use crate::registry::ItemInstance;

    fn db() -> NodeDatabase {
        let mut r = fig3();
        r.register_choice("core.general#device", "tp-wr741ndv4", "TP-Link WR741ND v4").unwrap();
        r.register_choice("core.general#device", "other", "Other").unwrap();
        NodeDatabase::new(Arc::new(r))
    }

    fn with_device(device: &str) -> ConfigDocument {
        let mut doc = ConfigDocument::new();
        doc.push("info", ItemInstance::new("ExtendedCfg").with("name", "n").with("device", device));
        doc
    }

    #[test]
    fn device_query() {
        let db = db();
        let (a, b, c) = (NodeId::from_u128(1), NodeId::from_u128(2), NodeId::from_u128(3));
        for id in [a, b, c] {
            db.create_node(id, 0).unwrap();
        }
        db.set_config(&a, with_device("tp-wr741ndv4"), None).unwrap();
        db.set_config(&b, with_device("other"), None).unwrap();
        let mut plain = ConfigDocument::new();
        plain.push("info", ItemInstance::new("InfoCfg").with("name", "c"));
        db.set_config(&c, plain, None).unwrap();
        let hits = db.query(CONFIG_POINT, &"info.device == 'tp-wr741ndv4'".parse().unwrap()).unwrap();
        assert_eq!(hits, BTreeSet::from([a]));
    }

    #[test]
    fn empty_database_query() {
        let db = db();
        assert!(db.query(CONFIG_POINT, &Predicate::eq("info.device", "x")).unwrap().is_empty());
    }

    #[test]
    fn rejected_config_leaves_store_untouched() {
        let db = db();
        let id = NodeId::from_u128(9);
        db.create_node(id, 0).unwrap();
        db.set_config(&id, with_device("other"), None).unwrap();
        let before = db.get_config(&id).unwrap().to_canonical_json();

        let mut bad = with_device("other");
        bad.0.get_mut("info").unwrap()[0].values.insert("colour".into(), "red".into());
        let err = db.set_config(&id, bad, None).unwrap_err();
        assert!(matches!(err, SetConfigError::SchemaViolation(_)));
        assert_eq!(err.issues()[0].path, "info[0].colour");

        let refuse = |_: NodeId, _: &ConfigDocument| vec![ConfigIssue::new("wireless", "radio[0]", "no")];
        let err = db.set_config(&id, with_device("tp-wr741ndv4"), Some(&refuse)).unwrap_err();
        assert!(matches!(err, SetConfigError::ValidationFailed(_)));
        assert_eq!(db.get_config(&id).unwrap().to_canonical_json(), before);
    }

    #[test]
    fn schema_checks() {
        let db = db();
        let id = NodeId::from_u128(4);
        db.create_node(id, 0).unwrap();
        let mut doc = ConfigDocument::new();
        doc.push("info", ItemInstance::new("ExtendedCfg").with("device", "nope").with("version", "x"));
        doc.push("info", ItemInstance::new("InfoCfg"));
        let issues = db.set_config(&id, doc, None).unwrap_err().issues().to_vec();
        let paths: Vec<_> = issues.iter().map(|i| i.path.as_str()).collect();
        assert_eq!(paths, ["info", "info[0].device", "info[0].version"]);
    }

    #[test]
    fn unknown_and_duplicate_nodes() {
        let db = db();
        let id = NodeId::from_u128(5);
        assert!(matches!(db.get_config(&id), Err(SetConfigError::UnknownNode(_))));
        db.create_node(id, 0).unwrap();
        assert!(matches!(db.create_node(id, 0), Err(SetConfigError::DuplicateNode(_))));
    }
}
