//! Flat `key = value` configuration files.
//!
//! Keys are `section.field`, e.g. `synth.delta_mnf = 0.25`. Blank lines and
//! lines starting with `#` are ignored. Unknown sections or fields are errors.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::cycles::{FeatureMode, TaskKind};
use crate::spectral::NormScope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate key '{0}'")]
    Duplicate(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': '{value}' ({message})")]
    BadValue { key: String, value: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, message: "empty key".into() });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies every key of `section` to `target`.
    pub fn apply<S: Settings>(&self, target: &mut S) -> Result<(), ConfigError> {
        for (k, v) in self.iter() {
            if let Some(field) = k.strip_prefix(S::SECTION).and_then(|r| r.strip_prefix('.')) {
                target.set(field, v).map_err(|e| match e {
                    ConfigError::UnknownKey(_) => ConfigError::UnknownKey(k.to_string()),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    /// Rejects keys whose section is not in `sections`.
    pub fn check_sections(&self, sections: &[&str]) -> Result<(), ConfigError> {
        for k in self.entries.keys() {
            let section = k.split_once('.').map(|(s, _)| s);
            if !section.is_some_and(|s| sections.contains(&s)) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }
}

/// A value that can be read from and echoed to a config file.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(f64, usize, u64, bool, TaskKind);

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "" | "none" | "all" => Ok(None),
            _ => s.parse::<usize>().map(Some).map_err(|e| e.to_string()),
        }
    }
    fn render(&self) -> String {
        self.map_or("all".into(), |v| v.to_string())
    }
}

impl ConfigValue for NormScope {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(NormScope::Global),
            "per_bin" => Ok(NormScope::PerBin),
            _ => Err("expected global or per_bin".into()),
        }
    }
    fn render(&self) -> String {
        match self {
            NormScope::Global => "global".into(),
            NormScope::PerBin => "per_bin".into(),
        }
    }
}

impl ConfigValue for FeatureMode {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "relative" => Ok(FeatureMode::Relative),
            "raw" => Ok(FeatureMode::Raw),
            _ => Err("expected relative or raw".into()),
        }
    }
    fn render(&self) -> String {
        match self {
            FeatureMode::Relative => "relative".into(),
            FeatureMode::Raw => "raw".into(),
        }
    }
}

pub fn parse_field<T: ConfigValue>(key: &str, value: &str) -> Result<T, ConfigError> {
    T::parse_value(value).map_err(|message| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message,
    })
}

/// A config section with named, overridable fields.
pub trait Settings {
    const SECTION: &'static str;
    fn set(&mut self, field: &str, value: &str) -> Result<(), ConfigError>;
    /// `(field, value)` pairs in declaration order.
    fn echo(&self) -> Vec<(String, String)>;
}

/// Implements [`Settings`] for a struct by listing its configurable fields.
#[macro_export]
macro_rules! impl_settings {
    ($ty:ty, $section:literal, [$($field:ident),* $(,)?]) => {
        impl $crate::config::Settings for $ty {
            const SECTION: &'static str = $section;

            fn set(&mut self, field: &str, value: &str) -> Result<(), $crate::config::ConfigError> {
                match field {
                    $(stringify!($field) => {
                        self.$field = $crate::config::parse_field(field, value)?;
                    })*
                    _ => return Err($crate::config::ConfigError::UnknownKey(field.to_string())),
                }
                Ok(())
            }

            fn echo(&self) -> Vec<(String, String)> {
                use $crate::config::ConfigValue;
                vec![$((stringify!($field).to_string(), self.$field.render())),*]
            }
        }
    };
}
