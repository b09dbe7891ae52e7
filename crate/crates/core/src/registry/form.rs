//! Serializable form descriptors generated from the schema.

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::{FieldKind, Multiplicity, Registry, RegistryError};

/// Context a form is generated for. It is echoed into the descriptor so
/// that clients can tell which device and project the defaults assume.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<String>,
    /// Free-form audience tag (e.g. "novice"); carried through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audience: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub value: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormField {
    pub name: String,
    pub kind: FieldKind,
    pub required: bool,
    /// Item that declares the field (an ancestor for inherited fields).
    pub declared_by: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<ChoiceOption>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormItem {
    pub name: String,
    pub registry_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub multiplicity: Multiplicity,
    pub fields: Vec<FormField>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormDescriptor {
    pub point: String,
    pub context: FormContext,
    pub items: Vec<FormItem>,
}

impl Registry {
    pub fn form_schema(&self, point: &str, context: FormContext) -> Result<FormDescriptor, RegistryError> {
        let items = self
            .items(point)?
            .map(|item| {
                let mut declared = Vec::new();
                let mut cur = Some(item);
                while let Some(i) = cur {
                    declared.push(i);
                    cur = i.parent.as_deref().and_then(|p| self.item(point, p));
                }
                let fields = declared
                    .iter()
                    .rev()
                    .flat_map(|owner| owner.fields.iter().map(move |f| (owner.name.clone(), f)))
                    .map(|(owner, f)| FormField {
                        name: f.name.clone(),
                        kind: f.kind,
                        required: f.required,
                        declared_by: owner,
                        default: f.default.clone(),
                        choices: f.choice_point.as_deref().map(|cp| {
                            self.choices(cp)
                                .map(|(v, l)| ChoiceOption { value: v.into(), label: l.into() })
                                .collect()
                        }),
                        target: f.target.clone(),
                    })
                    .collect();
                FormItem {
                    name: item.name.clone(),
                    registry_id: item.registry_id.clone().expect("stored items carry a registry id"),
                    parent: item.parent.clone(),
                    multiplicity: item.multiplicity,
                    fields,
                }
            })
            .collect();
        Ok(FormDescriptor { point: point.into(), context, items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::tests::fig3;
    use crate::registry::CONFIG_POINT;

    #[test]
    fn fig3_descriptor() {
        let mut r = fig3();
        r.register_choice("core.general#device", "tp-wr741ndv4", "TP-Link WR741ND v4").unwrap();
        let d = r.form_schema(CONFIG_POINT, FormContext::default()).unwrap();
        let ext = d.items.iter().find(|i| i.name == "ExtendedCfg").unwrap();
        assert_eq!(ext.registry_id, "info");
        let names: Vec<_> = ext.fields.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["name", "device", "version"]);
        assert_eq!(ext.fields[0].declared_by, "InfoCfg");
        assert_eq!(
            ext.fields[1].choices.as_deref().unwrap(),
            [ChoiceOption { value: "tp-wr741ndv4".into(), label: "TP-Link WR741ND v4".into() }]
        );
    }

    #[test]
    fn empty_point() {
        let r = Registry::with_standard_points();
        let ctx = FormContext { audience: Some("novice".into()), ..Default::default() };
        let d = r.form_schema("node.monitoring", ctx.clone()).unwrap();
        assert!(d.items.is_empty());
        assert_eq!(d.context, ctx);
        assert!(matches!(r.form_schema("nope", FormContext::default()), Err(RegistryError::UnknownPoint(_))));
    }
}
