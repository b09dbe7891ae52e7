//! Per-node documents of item instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::{FieldKind, Multiplicity, Registry, RegistryError};

/// One stored instance. `item` is the most-derived item name; field values
/// are flattened next to it in JSON. Item-reference values are indices into
/// the referenced registry id's instance list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemInstance {
    #[serde(rename = "_item")]
    pub item: String,
    #[serde(flatten)]
    pub values: BTreeMap<String, Json>,
}

impl ItemInstance {
    pub fn new(item: &str) -> Self {
        Self { item: item.into(), values: BTreeMap::new() }
    }

    pub fn with(mut self, field: &str, value: impl Into<Json>) -> Self {
        self.values.insert(field.into(), value.into());
        self
    }

    pub fn get(&self, field: &str) -> Option<&Json> {
        self.values.get(field).filter(|v| !v.is_null())
    }
}

/// Registry id to ordered instances; list position is the instance index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigDocument(pub BTreeMap<String, Vec<ItemInstance>>);

/// A problem found in a document, attributed to the module that found it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub module: String,
    pub path: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(module: &str, path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { module: module.into(), path: path.into(), message: message.into() }
    }
}

pub(crate) const SCHEMA_MODULE: &str = "registry";

impl ConfigDocument {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn instances(&self, registry_id: &str) -> &[ItemInstance] {
        self.0.get(registry_id).map_or(&[], Vec::as_slice)
    }

    pub fn instances_mut(&mut self, registry_id: &str) -> &mut Vec<ItemInstance> {
        self.0.entry(registry_id.into()).or_default()
    }

    /// Appends and returns the new instance's index.
    pub fn push(&mut self, registry_id: &str, instance: ItemInstance) -> usize {
        let list = self.instances_mut(registry_id);
        list.push(instance);
        list.len() - 1
    }

    pub fn first(&self, registry_id: &str) -> Option<&ItemInstance> {
        self.instances(registry_id).first()
    }

    /// Convenience for one-to-one items: the first instance's field value.
    pub fn value(&self, registry_id: &str, field: &str) -> Option<&Json> {
        self.first(registry_id)?.get(field)
    }

    /// Canonical JSON bytes; stable because every map is ordered.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("documents always serialize")
    }

    /// Removes the instances of `registry_id` selected by `remove` and
    /// renumbers references into that list. References to removed instances
    /// are dropped from the referencing instance.
    pub fn remove_where(
        &mut self,
        registry: &Registry,
        point: &str,
        registry_id: &str,
        mut remove: impl FnMut(&ItemInstance) -> bool,
    ) -> usize {
        let Some(list) = self.0.get_mut(registry_id) else { return 0 };
        let mut remap: Vec<Option<u64>> = Vec::with_capacity(list.len());
        let mut kept = 0u64;
        for inst in list.iter() {
            if remove(inst) {
                remap.push(None);
            } else {
                remap.push(Some(kept));
                kept += 1;
            }
        }
        let removed = remap.iter().filter(|r| r.is_none()).count();
        if removed == 0 {
            return 0;
        }
        let mut idx = 0;
        list.retain(|_| {
            idx += 1;
            remap[idx - 1].is_some()
        });
        for instances in self.0.values_mut() {
            for inst in instances.iter_mut() {
                let Some(fields) = registry.effective_fields(point, &inst.item) else { continue };
                for f in fields {
                    if f.kind != FieldKind::ItemReference || f.target.as_deref() != Some(registry_id) {
                        continue;
                    }
                    let Some(old) = inst.values.get(&f.name).and_then(Json::as_u64) else { continue };
                    match remap.get(old as usize).copied().flatten() {
                        Some(new) => {
                            inst.values.insert(f.name.clone(), new.into());
                        }
                        None => {
                            inst.values.remove(&f.name);
                        }
                    }
                }
            }
        }
        removed
    }

    /// Resolves `registry_id.field(.field)*` to every value it reaches,
    /// following item references for intermediate segments. Nulls and
    /// missing values are skipped. The path must have passed [`check_path`].
    pub fn resolve<'a>(&'a self, registry: &Registry, point: &str, path: &[String]) -> Vec<&'a Json> {
        let Some((rid, fields)) = path.split_first() else { return Vec::new() };
        let Some((last, hops)) = fields.split_last() else { return Vec::new() };
        let mut current = rid.as_str();
        let mut frontier: Vec<&ItemInstance> = self.instances(current).iter().collect();
        for hop in hops {
            let Ok(spec) = registry.field(point, current, hop) else { return Vec::new() };
            let Some(target) = spec.target.as_deref() else { return Vec::new() };
            let targets = self.instances(target);
            frontier = frontier
                .into_iter()
                .filter_map(|inst| inst.get(hop).and_then(Json::as_u64))
                .filter_map(|idx| targets.get(idx as usize))
                .collect();
            current = target;
        }
        frontier.into_iter().filter_map(|inst| inst.get(last)).collect()
    }

    /// Checks the document against the schema of `point`.
    pub fn validate(&self, registry: &Registry, point: &str) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut issue = |path: String, msg: String| issues.push(ConfigIssue::new(SCHEMA_MODULE, path, msg));
        for (rid, instances) in &self.0 {
            let Some(root) = registry.root_item(point, rid) else {
                issue(rid.clone(), format!("unknown registry id `{rid}`"));
                continue;
            };
            if root.multiplicity == Multiplicity::One && instances.len() > 1 {
                issue(rid.clone(), format!("`{rid}` allows a single instance"));
            }
            for (idx, inst) in instances.iter().enumerate() {
                let base = format!("{rid}[{idx}]");
                if !registry.is_a(point, &inst.item, &root.name) {
                    issue(base.clone(), format!("`{}` is not a `{rid}` item", inst.item));
                    continue;
                }
                let fields = registry.effective_fields(point, &inst.item).expect("item exists");
                for name in inst.values.keys() {
                    if !fields.iter().any(|f| &f.name == name) {
                        issue(format!("{base}.{name}"), format!("`{}` has no field `{name}`", inst.item));
                    }
                }
                for f in fields {
                    let path = format!("{base}.{}", f.name);
                    let Some(v) = inst.get(&f.name) else {
                        if f.required {
                            issue(path, "required field is missing".into());
                        }
                        continue;
                    };
                    let problem = match f.kind {
                        FieldKind::String => (!v.is_string()).then(|| "expected a string".to_string()),
                        FieldKind::Integer => (v.as_i64().is_none()).then(|| "expected an integer".to_string()),
                        FieldKind::Decimal => (!v.is_number()).then(|| "expected a number".to_string()),
                        FieldKind::Boolean => (!v.is_boolean()).then(|| "expected a boolean".to_string()),
                        FieldKind::Choice => {
                            let cp = f.choice_point.as_deref().unwrap_or_default();
                            match v.as_str() {
                                Some(s) if registry.has_choice(cp, s) => None,
                                Some(s) => Some(format!("`{s}` is not a registered choice of `{cp}`")),
                                None => Some("expected a choice value".to_string()),
                            }
                        }
                        FieldKind::ItemReference => {
                            let target = f.target.as_deref().unwrap_or_default();
                            match v.as_u64() {
                                Some(i) if (i as usize) < self.instances(target).len() => None,
                                Some(i) => Some(format!("no `{target}` instance at index {i}")),
                                None => Some("expected an instance index".to_string()),
                            }
                        }
                    };
                    if let Some(msg) = problem {
                        issue(path, msg);
                    }
                }
            }
        }
        issues
    }
}

/// Validates a path against the schema: the first segment must be a
/// registry id of `point` and every later segment a field of the family
/// reached so far; only the last may be a non-reference field.
pub(crate) fn check_path(registry: &Registry, point: &str, path: &[String]) -> Result<(), RegistryError> {
    let Some((rid, fields)) = path.split_first() else {
        return Err(RegistryError::UnknownRegistryId(String::new()));
    };
    if fields.is_empty() {
        return Err(RegistryError::UnknownField { registry_id: rid.clone(), field: String::new() });
    }
    let mut current = rid.clone();
    for (i, name) in fields.iter().enumerate() {
        let spec = registry.field(point, &current, name)?;
        if i + 1 < fields.len() {
            match (&spec.kind, &spec.target) {
                (FieldKind::ItemReference, Some(t)) => current = t.clone(),
                _ => {
                    return Err(RegistryError::UnknownField {
                        registry_id: current,
                        field: fields[i + 1].clone(),
                    })
                }
            }
        }
    }
    Ok(())
}
