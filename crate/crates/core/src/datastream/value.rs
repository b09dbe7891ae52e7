use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Numeric,
    Graph,
}

/// A stored datapoint value. `Null` only appears in derived streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Number(f64),
    Graph(Graph),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Number(v)
    }
}

impl From<Graph> for Value {
    fn from(g: Graph) -> Self {
        Value::Graph(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datapoint {
    #[serde(rename = "t")]
    pub ts: Timestamp,
    #[serde(rename = "v")]
    pub value: Value,
}

/// Topology snapshot: a set of nodes and the edges between them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

impl Graph {
    /// Returns the first edge endpoint that does not name a node.
    pub fn dangling_endpoint(&self) -> Option<&str> {
        let ids: std::collections::HashSet<&str> =
            self.nodes.iter().map(|n| n.id.as_str()).collect();
        self.edges
            .iter()
            .flat_map(|e| [e.from.as_str(), e.to.as_str()])
            .find(|id| !ids.contains(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untagged_value_json() {
        assert_eq!(serde_json::to_string(&Value::Null).unwrap(), "null");
        assert_eq!(serde_json::to_string(&Value::Number(8.0)).unwrap(), "8.0");
        let v: Value = serde_json::from_str("null").unwrap();
        assert!(v.is_null());
        let v: Value = serde_json::from_str("3").unwrap();
        assert_eq!(v, Value::Number(3.0));
        let v: Value = serde_json::from_str(r#"{"nodes":[{"id":"a"}],"edges":[]}"#).unwrap();
        assert!(matches!(v, Value::Graph(_)));
    }

    #[test]
    fn dangling_edge_detected() {
        let g = Graph {
            nodes: vec![GraphNode { id: "a".into(), attrs: BTreeMap::new() }],
            edges: vec![GraphEdge { from: "a".into(), to: "b".into(), attrs: BTreeMap::new() }],
        };
        assert_eq!(g.dangling_endpoint(), Some("b"));
    }
}
