//! Extensible, platform-independent node schema.
//!
//! Modules register class-like schema items on named registration points
//! (`node.config`, `node.monitoring`). An item either starts a new family
//! under a registry id or subclasses an existing item, inheriting its fields.
//! Queries address a family through its registry id, so a field declared on
//! any subclass can be reached as `info.device` without naming the subclass.

mod db;
mod document;
mod form;
mod query;
pub mod rules;

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use db::{ConfigValidator, NodeDatabase, NodeRecord, SetConfigError};
pub use document::{ConfigDocument, ConfigIssue, ItemInstance};
pub use form::{ChoiceOption, FormContext, FormDescriptor, FormField, FormItem};
pub use query::{Comparison, Predicate, QueryParseError};
pub use rules::{Action, Condition, DeviceCapabilities, FormSessions, NoDevices, FormState, RuleError, RuleFile, RuleSet, RuleSpec};

pub const CONFIG_POINT: &str = "node.config";
pub const MONITORING_POINT: &str = "node.monitoring";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    String,
    Integer,
    Decimal,
    Boolean,
    Choice,
    ItemReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Extension point supplying the allowed values of a choice field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_point: Option<String>,
    /// Registry id referenced by an item-reference field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<serde_json::Value>,
}

impl FieldSpec {
    fn of(name: &str, kind: FieldKind) -> Self {
        Self { name: name.into(), kind, choice_point: None, target: None, required: false, default: None }
    }

    pub fn string(name: &str) -> Self {
        Self::of(name, FieldKind::String)
    }

    pub fn integer(name: &str) -> Self {
        Self::of(name, FieldKind::Integer)
    }

    pub fn decimal(name: &str) -> Self {
        Self::of(name, FieldKind::Decimal)
    }

    pub fn boolean(name: &str) -> Self {
        Self::of(name, FieldKind::Boolean)
    }

    pub fn choice(name: &str, choice_point: &str) -> Self {
        Self { choice_point: Some(choice_point.into()), ..Self::of(name, FieldKind::Choice) }
    }

    pub fn item_ref(name: &str, target: &str) -> Self {
        Self { target: Some(target.into()), ..Self::of(name, FieldKind::ItemReference) }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn with_default(mut self, value: impl Into<serde_json::Value>) -> Self {
        self.default = Some(value.into());
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Multiplicity {
    #[default]
    One,
    Many,
}

/// A schema item definition. Roots carry a registry id; subclasses name
/// their parent and inherit its registry id and multiplicity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaItem {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub multiplicity: Multiplicity,
}

impl SchemaItem {
    pub fn root(name: &str, registry_id: &str) -> Self {
        Self {
            name: name.into(),
            registry_id: Some(registry_id.into()),
            parent: None,
            fields: Vec::new(),
            multiplicity: Multiplicity::One,
        }
    }

    pub fn subclass(name: &str, parent: &str) -> Self {
        Self {
            name: name.into(),
            registry_id: None,
            parent: Some(parent.into()),
            fields: Vec::new(),
            multiplicity: Multiplicity::One,
        }
    }

    pub fn many(mut self) -> Self {
        self.multiplicity = Multiplicity::Many;
        self
    }

    pub fn field(mut self, field: FieldSpec) -> Self {
        self.fields.push(field);
        self
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq, Clone)]
pub enum RegistryError {
    #[error("registration point `{0}` does not exist")]
    UnknownPoint(String),
    #[error("registration point `{0}` already exists")]
    DuplicatePoint(String),
    #[error("registry id `{0}` is already owned by another root item")]
    DuplicateRegistryId(String),
    #[error("item `{0}` is already registered")]
    DuplicateItem(String),
    #[error("item `{0}` cannot inherit from itself")]
    CyclicParent(String),
    #[error("item `{0}` is not registered")]
    UnknownItem(String),
    #[error("registry id `{0}` is not registered")]
    UnknownRegistryId(String),
    #[error("`{registry_id}` has no field `{field}`")]
    UnknownField { registry_id: String, field: String },
    #[error("field `{field}` is already defined in the `{registry_id}` family")]
    DuplicateField { registry_id: String, field: String },
    #[error("field `{0}` is invalid: {1}")]
    InvalidField(String, String),
    #[error("choice `{value}` is already registered on `{point}`")]
    DuplicateChoice { point: String, value: String },
    #[error("item `{0}` must either name a registry id or a parent")]
    MissingRegistryId(String),
}

#[derive(Clone, Debug, Default)]
struct PointSchema {
    /// Items by name, in registration order.
    items: IndexMap<String, SchemaItem>,
    /// Registry id to root item name.
    roots: BTreeMap<String, String>,
}

/// The set of registration points, their items and choice extension points.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    points: BTreeMap<String, PointSchema>,
    choices: BTreeMap<String, IndexMap<String, String>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry with the `node.config` and `node.monitoring` points.
    pub fn with_standard_points() -> Self {
        let mut r = Self::new();
        r.create_point(CONFIG_POINT).expect("fresh registry");
        r.create_point(MONITORING_POINT).expect("fresh registry");
        r
    }

    pub fn create_point(&mut self, name: &str) -> Result<(), RegistryError> {
        if self.points.contains_key(name) {
            return Err(RegistryError::DuplicatePoint(name.into()));
        }
        self.points.insert(name.into(), PointSchema::default());
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = &str> {
        self.points.keys().map(String::as_str)
    }

    fn point(&self, name: &str) -> Result<&PointSchema, RegistryError> {
        self.points.get(name).ok_or_else(|| RegistryError::UnknownPoint(name.into()))
    }

    pub fn register_item(&mut self, point_name: &str, mut item: SchemaItem) -> Result<(), RegistryError> {
        let point = self.point(point_name)?;
        if item.parent.as_deref() == Some(item.name.as_str()) {
            return Err(RegistryError::CyclicParent(item.name));
        }
        if point.items.contains_key(&item.name) {
            return Err(RegistryError::DuplicateItem(item.name));
        }
        let registry_id = match &item.parent {
            Some(parent) => {
                let parent_item =
                    point.items.get(parent).ok_or_else(|| RegistryError::UnknownItem(parent.clone()))?;
                let inherited = parent_item.registry_id.clone().expect("stored items carry a registry id");
                if item.registry_id.as_ref().is_some_and(|id| *id != inherited) {
                    return Err(RegistryError::DuplicateRegistryId(item.registry_id.unwrap()));
                }
                item.multiplicity = parent_item.multiplicity;
                inherited
            }
            None => {
                let id = item.registry_id.clone().ok_or_else(|| RegistryError::MissingRegistryId(item.name.clone()))?;
                if point.roots.contains_key(&id) {
                    return Err(RegistryError::DuplicateRegistryId(id));
                }
                id
            }
        };

        let mut seen: Vec<&str> = Vec::new();
        for field in &item.fields {
            if field.name.starts_with('_') || field.name.contains('.') || field.name.is_empty() {
                return Err(RegistryError::InvalidField(field.name.clone(), "reserved name".into()));
            }
            if seen.contains(&field.name.as_str())
                || self.family_field(point, &registry_id, &field.name).is_some()
            {
                return Err(RegistryError::DuplicateField { registry_id, field: field.name.clone() });
            }
            seen.push(&field.name);
            match field.kind {
                FieldKind::Choice if field.choice_point.is_none() => {
                    return Err(RegistryError::InvalidField(field.name.clone(), "choice without extension point".into()));
                }
                FieldKind::ItemReference => {
                    let target = field.target.as_deref().ok_or_else(|| {
                        RegistryError::InvalidField(field.name.clone(), "reference without target".into())
                    })?;
                    if target != registry_id && !point.roots.contains_key(target) {
                        return Err(RegistryError::UnknownRegistryId(target.into()));
                    }
                }
                _ => {}
            }
        }

        let point = self.points.get_mut(point_name).expect("checked above");
        if item.parent.is_none() {
            point.roots.insert(registry_id.clone(), item.name.clone());
        }
        item.registry_id = Some(registry_id);
        point.items.insert(item.name.clone(), item);
        Ok(())
    }

    pub fn register_choice(&mut self, extension_point: &str, value: &str, label: &str) -> Result<(), RegistryError> {
        let entries = self.choices.entry(extension_point.into()).or_default();
        if entries.contains_key(value) {
            return Err(RegistryError::DuplicateChoice { point: extension_point.into(), value: value.into() });
        }
        entries.insert(value.into(), label.into());
        Ok(())
    }

    /// Registered `(value, label)` pairs of an extension point, in registration order.
    pub fn choices(&self, extension_point: &str) -> impl Iterator<Item = (&str, &str)> {
        self.choices
            .get(extension_point)
            .into_iter()
            .flat_map(|m| m.iter().map(|(v, l)| (v.as_str(), l.as_str())))
    }

    pub fn has_choice(&self, extension_point: &str, value: &str) -> bool {
        self.choices.get(extension_point).is_some_and(|m| m.contains_key(value))
    }

    pub fn item(&self, point: &str, name: &str) -> Option<&SchemaItem> {
        self.points.get(point)?.items.get(name)
    }

    pub fn items(&self, point: &str) -> Result<impl Iterator<Item = &SchemaItem>, RegistryError> {
        Ok(self.point(point)?.items.values())
    }

    pub fn registry_ids(&self, point: &str) -> Result<impl Iterator<Item = &str>, RegistryError> {
        Ok(self.point(point)?.roots.keys().map(String::as_str))
    }

    pub fn root_item(&self, point: &str, registry_id: &str) -> Option<&SchemaItem> {
        let p = self.points.get(point)?;
        p.items.get(p.roots.get(registry_id)?)
    }

    /// Is `item` the named ancestor or one of its subclasses?
    pub fn is_a(&self, point: &str, item: &str, ancestor: &str) -> bool {
        let Some(p) = self.points.get(point) else { return false };
        let mut cur = p.items.get(item);
        while let Some(i) = cur {
            if i.name == ancestor {
                return true;
            }
            cur = i.parent.as_ref().and_then(|n| p.items.get(n));
        }
        false
    }

    /// Fields of `item` including inherited ones, ancestors first.
    pub fn effective_fields(&self, point: &str, item: &str) -> Option<Vec<&FieldSpec>> {
        let p = self.points.get(point)?;
        let mut chain = Vec::new();
        let mut cur = p.items.get(item);
        cur?;
        while let Some(i) = cur {
            chain.push(i);
            cur = i.parent.as_ref().and_then(|n| p.items.get(n));
        }
        Some(chain.iter().rev().flat_map(|i| i.fields.iter()).collect())
    }

    /// Looks a field up anywhere in a registry-id family.
    pub fn field(&self, point: &str, registry_id: &str, field: &str) -> Result<&FieldSpec, RegistryError> {
        let p = self.point(point)?;
        if !p.roots.contains_key(registry_id) {
            return Err(RegistryError::UnknownRegistryId(registry_id.into()));
        }
        self.family_field(p, registry_id, field).ok_or_else(|| RegistryError::UnknownField {
            registry_id: registry_id.into(),
            field: field.into(),
        })
    }

    fn family_field<'a>(&self, p: &'a PointSchema, registry_id: &str, field: &str) -> Option<&'a FieldSpec> {
        p.items
            .values()
            .filter(|i| i.registry_id.as_deref() == Some(registry_id))
            .flat_map(|i| i.fields.iter())
            .find(|f| f.name == field)
    }
}
