//! Context-sensitive defaults as declarative rule trees.
//!
//! Rules are written as JSON:
//!
//! ```json
//! {
//!   "device_path": "info.device",
//!   "rules": [{
//!     "id": "wlan-project",
//!     "when": {"eq": {"path": "project.project", "value": "wlan"}},
//!     "children": [{
//!       "id": "two-vifs",
//!       "when": {"radio_feature": {"feature": "multiple-vifs"}},
//!       "actions": [
//!         {"remove_instances": {"item": "WifiInterfaceConfig"}},
//!         {"create_instance": {"item": "WifiInterfaceConfig", "values": {"mode": "mesh"}}}
//!       ]
//!     }]
//!   }]
//! }
//! ```
//!
//! Evaluation is lazy. Given the set of changed field paths, only subtrees
//! whose conditions mention a changed field are visited. A rule fires when
//! its condition holds and either its own condition mentions a change or an
//! ancestor fired; firing forces its children to be considered too. Fired
//! rules are recorded in [`FormState`] together with a fingerprint of the
//! values their conditions read, and are not fired again for the same
//! inputs. That keeps defaults from overwriting user edits on unrelated
//! changes and makes repeated application a no-op.
//!
//! Actions may not write anything a condition reads; the compiler rejects
//! such rule sets, so the outcome does not depend on evaluation order.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::document::check_path;
use super::query::literal_eq;
use super::{ConfigDocument, FieldKind, ItemInstance, Registry, RegistryError};
use crate::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Eq { path: String, value: Json },
    Ne { path: String, value: Json },
    In { path: String, values: Vec<Json> },
    Not(Box<Condition>),
    All(Vec<Condition>),
    Any(Vec<Condition>),
    /// Some radio of the selected device has the feature.
    RadioFeature { feature: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Sets `registry_id.field` on the first instance, creating an instance
    /// of the root item when there is none.
    SetDefault { path: String, value: Json },
    CreateInstance {
        item: String,
        #[serde(default)]
        values: BTreeMap<String, Json>,
    },
    /// Removes instances of the item and its subclasses.
    RemoveInstances { item: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Condition>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<RuleSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_path: Option<String>,
    pub rules: Vec<RuleSpec>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RuleError {
    #[error("rule `{rule}`: {source}")]
    UnknownField { rule: String, source: RegistryError },
    #[error("rule `{rule}`: item `{item}` is not registered")]
    UnknownItem { rule: String, item: String },
    #[error("rule `{rule}`: `{path}` must be registry_id.field")]
    InvalidTarget { rule: String, path: String },
    #[error("rule `{rule}` writes `{target}` which a condition reads")]
    WritesConditionInput { rule: String, target: String },
    #[error("rule id `{0}` is used twice")]
    DuplicateRuleId(String),
    #[error("rule `{0}` tests radio features but no device path is configured")]
    NoDevicePath(String),
    #[error("cannot parse rules: {0}")]
    Parse(String),
}

/// Answers capability questions about a device model.
pub trait DeviceCapabilities {
    fn radio_has_feature(&self, device: &str, feature: &str) -> bool;
}

/// Capabilities of a world without devices.
pub struct NoDevices;

impl DeviceCapabilities for NoDevices {
    fn radio_has_feature(&self, _: &str, _: &str) -> bool {
        false
    }
}

impl<F: Fn(&str, &str) -> bool> DeviceCapabilities for F {
    fn radio_has_feature(&self, device: &str, feature: &str) -> bool {
        self(device, feature)
    }
}

/// Per form session memory of fired rules.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FormState {
    /// Rule id to the fingerprint of the inputs it last fired on.
    pub evaluated_rules: BTreeMap<String, String>,
    /// Last seen value of every condition input, as resolved lists.
    pub last_values: BTreeMap<String, Json>,
}

#[derive(Clone, Debug)]
struct CompiledRule {
    id: String,
    when: Option<Condition>,
    actions: Vec<Action>,
    own_refs: BTreeSet<String>,
    subtree_refs: BTreeSet<String>,
    /// Inputs of this rule's and its ancestors' conditions.
    context_refs: BTreeSet<String>,
    children: Vec<CompiledRule>,
}

#[derive(Clone, Debug)]
pub struct RuleSet {
    point: String,
    device_path: Option<String>,
    roots: Vec<CompiledRule>,
    all_refs: BTreeSet<String>,
}

fn split(path: &str) -> Vec<String> {
    path.split('.').map(str::to_string).collect()
}

/// Does a change to `changed` affect a read of `reference`?
fn touches(reference: &str, changed: &str) -> bool {
    reference == changed
        || reference.strip_prefix(changed).is_some_and(|rest| rest.starts_with('.'))
}

fn touched(refs: &BTreeSet<String>, changed: &BTreeSet<String>) -> bool {
    refs.iter().any(|r| changed.iter().any(|c| touches(r, c)))
}

struct Compiler<'a> {
    registry: &'a Registry,
    point: &'a str,
    device_path: Option<&'a str>,
    ids: BTreeSet<String>,
    /// (rule id, field path written) and (rule id, registry id rewritten).
    writes_fields: Vec<(String, String)>,
    writes_ids: Vec<(String, String)>,
}

impl Compiler<'_> {
    fn condition_refs(&self, rule: &str, cond: &Condition, out: &mut BTreeSet<String>) -> Result<(), RuleError> {
        let path_ref = |path: &str, out: &mut BTreeSet<String>| {
            check_path(self.registry, self.point, &split(path))
                .map_err(|source| RuleError::UnknownField { rule: rule.into(), source })?;
            out.insert(path.to_string());
            Ok(())
        };
        match cond {
            Condition::Eq { path, .. } | Condition::Ne { path, .. } | Condition::In { path, .. } => {
                path_ref(path, out)
            }
            Condition::Not(c) => self.condition_refs(rule, c, out),
            Condition::All(cs) | Condition::Any(cs) => {
                cs.iter().try_for_each(|c| self.condition_refs(rule, c, out))
            }
            Condition::RadioFeature { .. } => {
                let dp = self.device_path.ok_or_else(|| RuleError::NoDevicePath(rule.into()))?;
                path_ref(dp, out)
            }
        }
    }

    fn item_registry_id(&self, rule: &str, item: &str) -> Result<String, RuleError> {
        self.registry
            .item(self.point, item)
            .and_then(|i| i.registry_id.clone())
            .ok_or_else(|| RuleError::UnknownItem { rule: rule.into(), item: item.into() })
    }

    fn check_action(&mut self, rule: &str, action: &Action) -> Result<(), RuleError> {
        match action {
            Action::SetDefault { path, .. } => {
                let segs = split(path);
                if segs.len() != 2 {
                    return Err(RuleError::InvalidTarget { rule: rule.into(), path: path.clone() });
                }
                self.registry
                    .field(self.point, &segs[0], &segs[1])
                    .map_err(|source| RuleError::UnknownField { rule: rule.into(), source })?;
                self.writes_fields.push((rule.into(), path.clone()));
            }
            Action::CreateInstance { item, values } => {
                let rid = self.item_registry_id(rule, item)?;
                let fields = self.registry.effective_fields(self.point, item).expect("item exists");
                for name in values.keys() {
                    if !fields.iter().any(|f| &f.name == name) {
                        return Err(RuleError::UnknownField {
                            rule: rule.into(),
                            source: RegistryError::UnknownField { registry_id: rid, field: name.clone() },
                        });
                    }
                }
                self.writes_ids.push((rule.into(), rid));
            }
            Action::RemoveInstances { item } => {
                let rid = self.item_registry_id(rule, item)?;
                self.writes_ids.push((rule.into(), rid));
            }
        }
        Ok(())
    }

    fn compile(&mut self, spec: &RuleSpec, inherited: &BTreeSet<String>) -> Result<CompiledRule, RuleError> {
        if !self.ids.insert(spec.id.clone()) {
            return Err(RuleError::DuplicateRuleId(spec.id.clone()));
        }
        let mut own_refs = BTreeSet::new();
        if let Some(c) = &spec.when {
            self.condition_refs(&spec.id, c, &mut own_refs)?;
        }
        for a in &spec.actions {
            self.check_action(&spec.id, a)?;
        }
        let context_refs: BTreeSet<String> = inherited.union(&own_refs).cloned().collect();
        let children = spec
            .children
            .iter()
            .map(|c| self.compile(c, &context_refs))
            .collect::<Result<Vec<_>, _>>()?;
        let mut subtree_refs = own_refs.clone();
        for c in &children {
            subtree_refs.extend(c.subtree_refs.iter().cloned());
        }
        Ok(CompiledRule {
            id: spec.id.clone(),
            when: spec.when.clone(),
            actions: spec.actions.clone(),
            own_refs,
            subtree_refs,
            context_refs,
            children,
        })
    }

    /// Registry ids a path reads, following references.
    fn ids_on_path(&self, path: &str) -> Vec<String> {
        let segs = split(path);
        let mut out = vec![segs[0].clone()];
        let mut current = segs[0].clone();
        for name in &segs[1..segs.len() - 1] {
            if let Ok(f) = self.registry.field(self.point, &current, name) {
                if let (FieldKind::ItemReference, Some(t)) = (f.kind, &f.target) {
                    out.push(t.clone());
                    current = t.clone();
                }
            }
        }
        out
    }
}

impl RuleSet {
    pub fn compile(
        registry: &Registry,
        point: &str,
        device_path: Option<&str>,
        rules: &[RuleSpec],
    ) -> Result<Self, RuleError> {
        if let Err(source) = registry.items(point) {
            return Err(RuleError::UnknownField { rule: String::new(), source });
        }
        let mut c = Compiler {
            registry,
            point,
            device_path,
            ids: BTreeSet::new(),
            writes_fields: Vec::new(),
            writes_ids: Vec::new(),
        };
        let roots = rules.iter().map(|r| c.compile(r, &BTreeSet::new())).collect::<Result<Vec<_>, _>>()?;
        let all_refs: BTreeSet<String> = roots.iter().flat_map(|r| r.subtree_refs.iter().cloned()).collect();
        for read in &all_refs {
            if let Some((rule, target)) = c.writes_fields.iter().find(|(_, w)| w == read) {
                return Err(RuleError::WritesConditionInput { rule: rule.clone(), target: target.clone() });
            }
            let ids = c.ids_on_path(read);
            if let Some((rule, target)) = c.writes_ids.iter().find(|(_, w)| ids.contains(w)) {
                return Err(RuleError::WritesConditionInput { rule: rule.clone(), target: target.clone() });
            }
        }
        Ok(Self { point: point.into(), device_path: device_path.map(str::to_string), roots, all_refs })
    }

    pub fn from_json(registry: &Registry, point: &str, json: &str) -> Result<Self, RuleError> {
        let file: RuleFile = serde_json::from_str(json).map_err(|e| RuleError::Parse(e.to_string()))?;
        Self::compile(registry, point, file.device_path.as_deref(), &file.rules)
    }

    /// Every field path read by some condition.
    pub fn inputs(&self) -> &BTreeSet<String> {
        &self.all_refs
    }

    /// Inputs whose value differs from what the state last saw.
    pub fn changed_inputs(&self, registry: &Registry, doc: &ConfigDocument, state: &FormState) -> BTreeSet<String> {
        self.all_refs
            .iter()
            .filter(|r| state.last_values.get(*r) != Some(&self.read(registry, doc, r)))
            .cloned()
            .collect()
    }

    fn read(&self, registry: &Registry, doc: &ConfigDocument, path: &str) -> Json {
        Json::Array(doc.resolve(registry, &self.point, &split(path)).into_iter().cloned().collect())
    }

    fn holds(&self, registry: &Registry, doc: &ConfigDocument, caps: &dyn DeviceCapabilities, cond: &Condition) -> bool {
        let values = |path: &str| doc.resolve(registry, &self.point, &split(path));
        match cond {
            Condition::Eq { path, value } => values(path).into_iter().any(|v| literal_eq(v, value)),
            Condition::Ne { path, value } => values(path).into_iter().any(|v| !literal_eq(v, value)),
            Condition::In { path, values: vs } => {
                values(path).into_iter().any(|v| vs.iter().any(|x| literal_eq(v, x)))
            }
            Condition::Not(c) => !self.holds(registry, doc, caps, c),
            Condition::All(cs) => cs.iter().all(|c| self.holds(registry, doc, caps, c)),
            Condition::Any(cs) => cs.iter().any(|c| self.holds(registry, doc, caps, c)),
            Condition::RadioFeature { feature } => {
                let dp = self.device_path.as_deref().expect("checked at compile time");
                values(dp).into_iter().filter_map(Json::as_str).any(|d| caps.radio_has_feature(d, feature))
            }
        }
    }

    fn fingerprint(&self, registry: &Registry, doc: &ConfigDocument, refs: &BTreeSet<String>) -> String {
        let map: BTreeMap<&str, Json> = refs.iter().map(|r| (r.as_str(), self.read(registry, doc, r))).collect();
        serde_json::to_string(&map).expect("json values serialize")
    }

    fn run_actions(&self, registry: &Registry, doc: &mut ConfigDocument, actions: &[Action]) {
        for action in actions {
            match action {
                Action::SetDefault { path, value } => {
                    let (rid, field) = path.split_once('.').expect("checked at compile time");
                    let list = doc.instances_mut(rid);
                    if list.is_empty() {
                        let root = registry.root_item(&self.point, rid).expect("checked at compile time");
                        list.push(new_instance(registry, &self.point, &root.name, &BTreeMap::new()));
                    }
                    list[0].values.insert(field.into(), value.clone());
                }
                Action::CreateInstance { item, values } => {
                    let rid = registry.item(&self.point, item).and_then(|i| i.registry_id.clone()).expect("checked");
                    doc.push(&rid, new_instance(registry, &self.point, item, values));
                }
                Action::RemoveInstances { item } => {
                    let rid = registry.item(&self.point, item).and_then(|i| i.registry_id.clone()).expect("checked");
                    doc.remove_where(registry, &self.point, &rid, |i| registry.is_a(&self.point, &i.item, item));
                }
            }
        }
    }

    fn clear(state: &mut FormState, rule: &CompiledRule) {
        state.evaluated_rules.remove(&rule.id);
        for c in &rule.children {
            Self::clear(state, c);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn visit(
        &self,
        registry: &Registry,
        rule: &CompiledRule,
        forced: bool,
        changed: &BTreeSet<String>,
        doc: &mut ConfigDocument,
        state: &mut FormState,
        caps: &dyn DeviceCapabilities,
    ) {
        if !forced && !touched(&rule.subtree_refs, changed) {
            return;
        }
        if !rule.when.as_ref().is_none_or(|c| self.holds(registry, doc, caps, c)) {
            Self::clear(state, rule);
            return;
        }
        let fired = forced || touched(&rule.own_refs, changed);
        if fired {
            let fp = self.fingerprint(registry, doc, &rule.context_refs);
            if state.evaluated_rules.get(&rule.id) != Some(&fp) {
                self.run_actions(registry, doc, &rule.actions);
                state.evaluated_rules.insert(rule.id.clone(), fp);
            }
        }
        for child in &rule.children {
            self.visit(registry, child, fired, changed, doc, state, caps);
        }
    }

    /// Applies defaults for a change of `changed` field paths. A changed
    /// path also covers everything below it (`info` covers `info.device`).
    pub fn apply_defaults(
        &self,
        registry: &Registry,
        mut doc: ConfigDocument,
        changed: &BTreeSet<String>,
        mut state: FormState,
        caps: &dyn DeviceCapabilities,
    ) -> (ConfigDocument, FormState) {
        if changed.is_empty() {
            return (doc, state);
        }
        for rule in &self.roots {
            self.visit(registry, rule, false, changed, &mut doc, &mut state, caps);
        }
        for r in &self.all_refs {
            if changed.iter().any(|c| touches(r, c)) {
                state.last_values.insert(r.clone(), self.read(registry, &doc, r));
            }
        }
        (doc, state)
    }

    /// Evaluates every rule as if all inputs had changed, from a fresh state.
    pub fn apply_all(
        &self,
        registry: &Registry,
        mut doc: ConfigDocument,
        caps: &dyn DeviceCapabilities,
    ) -> (ConfigDocument, FormState) {
        let mut state = FormState::default();
        for rule in &self.roots {
            self.visit(registry, rule, true, &BTreeSet::new(), &mut doc, &mut state, caps);
        }
        for r in &self.all_refs {
            state.last_values.insert(r.clone(), self.read(registry, &doc, r));
        }
        (doc, state)
    }
}

/// A fresh instance with schema defaults, overridden by `values`.
pub(crate) fn new_instance(
    registry: &Registry,
    point: &str,
    item: &str,
    values: &BTreeMap<String, Json>,
) -> ItemInstance {
    let mut inst = ItemInstance::new(item);
    for f in registry.effective_fields(point, item).unwrap_or_default() {
        if let Some(d) = &f.default {
            inst.values.insert(f.name.clone(), d.clone());
        }
    }
    inst.values.extend(values.iter().map(|(k, v)| (k.clone(), v.clone())));
    inst
}

/// Form states keyed by node and session id.
#[derive(Default)]
pub struct FormSessions {
    sessions: Mutex<HashMap<(NodeId, String), FormState>>,
}

impl FormSessions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, node: NodeId, session: &str) -> FormState {
        self.sessions.lock().get(&(node, session.to_string())).cloned().unwrap_or_default()
    }

    pub fn put(&self, node: NodeId, session: &str, state: FormState) {
        self.sessions.lock().insert((node, session.to_string()), state);
    }

    pub fn end(&self, node: NodeId, session: &str) -> Option<FormState> {
        self.sessions.lock().remove(&(node, session.to_string()))
    }
}
