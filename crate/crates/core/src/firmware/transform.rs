//! Platform-dependent transformation of node configuration.
//!
//! A platform is defined by its transform modules and the packages it can
//! install. Modules run in ascending priority order over the same
//! under-construction [`PlatformConfig`], so later modules may read what
//! earlier ones produced. Errors are collected from every module; any error
//! makes the whole transformation fail.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::DeviceDescriptor;
use crate::registry::{ConfigDocument, ConfigIssue};

/// A transformation error: the module that raised it, the config path it
/// concerns and a message.
pub type TransformError = ConfigIssue;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub section_type: String,
    pub name: String,
    pub options: BTreeMap<String, String>,
}

impl Section {
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.options.insert(key.into(), value.to_string());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderStyle {
    /// `config <type> '<name>'` blocks with `option` lines.
    Uci,
    /// One `type.name.option=value` line per option.
    KeyValue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformConfig {
    pub platform: String,
    pub sections: Vec<Section>,
    /// Packages the configuration needs installed.
    pub packages: BTreeSet<String>,
}

impl PlatformConfig {
    pub fn new(platform: &str) -> Self {
        Self { platform: platform.into(), sections: Vec::new(), packages: BTreeSet::new() }
    }

    /// The section with this type and name, appended if missing.
    pub fn section(&mut self, section_type: &str, name: &str) -> &mut Section {
        let pos = self.sections.iter().position(|s| s.section_type == section_type && s.name == name);
        let pos = pos.unwrap_or_else(|| {
            self.sections.push(Section {
                section_type: section_type.into(),
                name: name.into(),
                options: BTreeMap::new(),
            });
            self.sections.len() - 1
        });
        &mut self.sections[pos]
    }

    pub fn find(&self, section_type: &str, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.section_type == section_type && s.name == name)
    }

    pub fn render(&self, style: RenderStyle) -> String {
        let mut out = String::new();
        match style {
            RenderStyle::Uci => {
                for s in &self.sections {
                    let _ = writeln!(out, "config {} '{}'", s.section_type, s.name);
                    for (k, v) in &s.options {
                        let _ = writeln!(out, "\toption {k} '{}'", v.replace('\'', "'\\''"));
                    }
                    out.push('\n');
                }
            }
            RenderStyle::KeyValue => {
                for s in &self.sections {
                    for (k, v) in &s.options {
                        let _ = writeln!(out, "{}.{}.{k}={v}", s.section_type, s.name);
                    }
                }
            }
        }
        out
    }
}

/// What a module sees while it runs.
pub struct TransformContext<'a> {
    pub config: &'a ConfigDocument,
    pub device: &'a DeviceDescriptor,
    pub platform: &'a str,
    pub output: PlatformConfig,
    available: &'a BTreeSet<String>,
    module: String,
    errors: Vec<TransformError>,
}

impl TransformContext<'_> {
    pub fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(TransformError::new(&self.module, path, message));
    }

    /// Declares that `path` needs `package`. Reports an error attributed to
    /// the running module when the platform does not offer it.
    pub fn require_package(&mut self, path: impl Into<String>, package: &str) -> bool {
        if self.available.contains(package) {
            self.output.packages.insert(package.into());
            true
        } else {
            let msg = format!("package `{package}` is not available on {}", self.platform);
            self.error(path, msg);
            false
        }
    }
}

pub trait TransformModule: Send + Sync {
    fn name(&self) -> &str;
    fn priority(&self) -> i32;
    fn apply(&self, ctx: &mut TransformContext<'_>);
}

#[derive(Clone)]
pub struct Platform {
    pub name: String,
    pub style: RenderStyle,
    pub packages: BTreeSet<String>,
    modules: Vec<Arc<dyn TransformModule>>,
}

impl Platform {
    pub fn new(name: &str, style: RenderStyle, packages: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { name: name.into(), style, packages: packages.into_iter().map(Into::into).collect(), modules: Vec::new() }
    }

    pub fn with_module(mut self, module: Arc<dyn TransformModule>) -> Self {
        self.modules.push(module);
        self.modules.sort_by(|a, b| (a.priority(), a.name()).cmp(&(b.priority(), b.name())));
        self
    }

    pub fn module_names(&self) -> Vec<&str> {
        self.modules.iter().map(|m| m.name()).collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TransformFailure {
    #[error("platform `{0}` is not registered")]
    UnknownPlatform(String),
    #[error("transformation failed with {} errors", .0.len())]
    Errors(Vec<TransformError>),
}

#[derive(Clone, Default)]
pub struct Transformer {
    platforms: BTreeMap<String, Platform>,
}

impl Transformer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_platform(&mut self, platform: Platform) {
        self.platforms.insert(platform.name.clone(), platform);
    }

    pub fn platform(&self, name: &str) -> Option<&Platform> {
        self.platforms.get(name)
    }

    pub fn platforms(&self) -> impl Iterator<Item = &str> {
        self.platforms.keys().map(String::as_str)
    }

    pub fn transform(
        &self,
        config: &ConfigDocument,
        device: &DeviceDescriptor,
        platform: &str,
    ) -> Result<PlatformConfig, TransformFailure> {
        let p = self.platforms.get(platform).ok_or_else(|| TransformFailure::UnknownPlatform(platform.into()))?;
        let mut ctx = TransformContext {
            config,
            device,
            platform,
            output: PlatformConfig::new(platform),
            available: &p.packages,
            module: String::new(),
            errors: Vec::new(),
        };
        for m in &p.modules {
            ctx.module = m.name().to_string();
            m.apply(&mut ctx);
        }
        if ctx.errors.is_empty() {
            Ok(ctx.output)
        } else {
            Err(TransformFailure::Errors(ctx.errors))
        }
    }

    /// Dry run: the errors `transform` would report.
    pub fn validate(
        &self,
        config: &ConfigDocument,
        device: &DeviceDescriptor,
        platform: &str,
    ) -> Result<Vec<TransformError>, TransformFailure> {
        match self.transform(config, device, platform) {
            Ok(_) => Ok(Vec::new()),
            Err(TransformFailure::Errors(e)) => Ok(e),
            Err(other) => Err(other),
        }
    }

    /// Renders a transformed config in its platform's text form.
    pub fn render(&self, config: &PlatformConfig) -> String {
        let style = self.platforms.get(&config.platform).map_or(RenderStyle::Uci, |p| p.style);
        config.render(style)
    }
}
