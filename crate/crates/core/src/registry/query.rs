//! Registry path predicates such as `info.device == "tp-wr741ndv4"`.
//!
//! Grammar: `registry_id(.field)+ OP literal` where `OP` is `==`, `!=` or
//! `in`. Literals are JSON values; single-quoted strings are accepted too.
//! A node matches when any instance (of the root item or any subclass)
//! reached by the path holds a value satisfying the comparison. Missing and
//! null values never match, not even for `!=`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::document::check_path;
use super::{ConfigDocument, Registry, RegistryError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "lowercase")]
pub enum Comparison {
    Eq(Json),
    Ne(Json),
    In(Vec<Json>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub path: Vec<String>,
    #[serde(flatten)]
    pub comparison: Comparison,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("cannot parse predicate `{input}`: {reason}")]
pub struct QueryParseError {
    pub input: String,
    pub reason: String,
}

/// Equality on literals where `1` and `1.0` are the same number.
pub(crate) fn literal_eq(a: &Json, b: &Json) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

impl Comparison {
    pub fn holds(&self, value: &Json) -> bool {
        match self {
            Comparison::Eq(x) => literal_eq(value, x),
            Comparison::Ne(x) => !literal_eq(value, x),
            Comparison::In(xs) => xs.iter().any(|x| literal_eq(value, x)),
        }
    }
}

impl Predicate {
    pub fn new(path: &str, comparison: Comparison) -> Self {
        Self { path: path.split('.').map(str::to_string).collect(), comparison }
    }

    pub fn eq(path: &str, value: impl Into<Json>) -> Self {
        Self::new(path, Comparison::Eq(value.into()))
    }

    /// Rejects paths that do not resolve against the schema.
    pub fn check(&self, registry: &Registry, point: &str) -> Result<(), RegistryError> {
        check_path(registry, point, &self.path)
    }

    pub fn matches(&self, doc: &ConfigDocument, registry: &Registry, point: &str) -> bool {
        doc.resolve(registry, point, &self.path).into_iter().any(|v| self.comparison.holds(v))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = self.path.join(".");
        match &self.comparison {
            Comparison::Eq(v) => write!(f, "{path} == {v}"),
            Comparison::Ne(v) => write!(f, "{path} != {v}"),
            Comparison::In(vs) => write!(f, "{path} in {}", Json::Array(vs.clone())),
        }
    }
}

fn parse_literal(s: &str) -> Result<Json, String> {
    let s = s.trim();
    if s.len() >= 2 && s.starts_with('\'') && s.ends_with('\'') {
        return Ok(Json::String(s[1..s.len() - 1].to_string()));
    }
    serde_json::from_str(s).map_err(|e| format!("bad literal `{s}`: {e}"))
}

impl FromStr for Predicate {
    type Err = QueryParseError;

    fn from_str(input: &str) -> Result<Self, Self::Err> {
        let fail = |reason: String| QueryParseError { input: input.to_string(), reason };
        let s = input.trim();
        let path_end = s
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-'))
            .unwrap_or(s.len());
        let (path, rest) = s.split_at(path_end);
        let segments: Vec<String> = path.split('.').map(str::to_string).collect();
        if segments.len() < 2 || segments.iter().any(String::is_empty) {
            return Err(fail("expected registry_id.field".into()));
        }
        let rest = rest.trim_start();
        let comparison = if let Some(lit) = rest.strip_prefix("==") {
            Comparison::Eq(parse_literal(lit).map_err(fail)?)
        } else if let Some(lit) = rest.strip_prefix("!=") {
            Comparison::Ne(parse_literal(lit).map_err(fail)?)
        } else if let Some(lit) = rest.strip_prefix("in").filter(|l| l.starts_with([' ', '['])) {
            match parse_literal(lit).map_err(fail)? {
                Json::Array(values) => Comparison::In(values),
                _ => return Err(fail("`in` needs a list".into())),
            }
        } else if let Some(lit) = rest.strip_prefix('=') {
            Comparison::Eq(parse_literal(lit).map_err(fail)?)
        } else {
            return Err(fail("expected ==, != or in".into()));
        };
        Ok(Predicate { path: segments, comparison })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::tests::fig3;
    use crate::registry::{ItemInstance, CONFIG_POINT};

    #[test]
    fn parse_forms() {
        let p: Predicate = "info.device == 'tp-wr741ndv4'".parse().unwrap();
        assert_eq!(p, Predicate::eq("info.device", "tp-wr741ndv4"));
        let p: Predicate = r#"info.version in [1, 2]"#.parse().unwrap();
        assert_eq!(p.comparison, Comparison::In(vec![1.into(), 2.into()]));
        let p: Predicate = r#"info.name != "x""#.parse().unwrap();
        assert_eq!(p.comparison, Comparison::Ne("x".into()));
        assert!("info == 1".parse::<Predicate>().is_err());
        assert!("info.name ~ 1".parse::<Predicate>().is_err());
        assert!("info.version in 3".parse::<Predicate>().is_err());
    }

    #[test]
    fn display_round_trips() {
        for s in [r#"info.device == "a""#, r#"info.version in [1,2]"#, r#"info.name != 3"#] {
            let p: Predicate = s.parse().unwrap();
            assert_eq!(p.to_string().parse::<Predicate>().unwrap(), p);
        }
    }

    #[test]
    fn subclass_fields_reachable_through_root_id() {
        let r = fig3();
        let mut doc = ConfigDocument::new();
        doc.push("info", ItemInstance::new("ExtendedCfg").with("device", "tp-wr741ndv4"));
        assert!(Predicate::eq("info.device", "tp-wr741ndv4").matches(&doc, &r, CONFIG_POINT));
        assert!(!Predicate::eq("info.device", "other").matches(&doc, &r, CONFIG_POINT));
    }

    #[test]
    fn missing_values_never_match() {
        let r = fig3();
        let mut doc = ConfigDocument::new();
        doc.push("info", ItemInstance::new("InfoCfg").with("name", "a"));
        let ne = Predicate::new("info.device", Comparison::Ne("x".into()));
        assert!(!ne.matches(&doc, &r, CONFIG_POINT));
    }

    #[test]
    fn numbers_compare_by_value() {
        assert!(literal_eq(&1.into(), &serde_json::json!(1.0)));
        assert!(!literal_eq(&"1".into(), &1.into()));
    }

    #[test]
    fn check_rejects_unknown_segments() {
        let r = fig3();
        assert!(Predicate::eq("info.device", "x").check(&r, CONFIG_POINT).is_ok());
        assert!(matches!(
            Predicate::eq("nope.device", "x").check(&r, CONFIG_POINT),
            Err(RegistryError::UnknownRegistryId(_))
        ));
        assert!(matches!(
            Predicate::eq("info.colour", "x").check(&r, CONFIG_POINT),
            Err(RegistryError::UnknownField { .. })
        ));
        assert!(matches!(
            Predicate::eq("info.name.deeper", "x").check(&r, CONFIG_POINT),
            Err(RegistryError::UnknownField { .. })
        ));
    }
}
