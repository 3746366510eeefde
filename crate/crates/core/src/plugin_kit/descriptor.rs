use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical::canonical_json;
use crate::model::{Capability, OptionValue, PluginKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionType {
    Boolean,
    Integer,
    Decimal,
    Text,
}

/// One configurable plugin option, with its default and bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub name: String,
    pub value_type: OptionType,
    pub default: OptionValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_values: Option<Vec<String>>,
}

impl OptionSpec {
    pub fn boolean(name: &str, default: bool) -> Self {
        Self::new(name, OptionType::Boolean, OptionValue::Boolean(default))
    }

    pub fn integer(name: &str, default: i64, min: Option<i64>, max: Option<i64>) -> Self {
        OptionSpec {
            min: min.map(|v| v as f64),
            max: max.map(|v| v as f64),
            ..Self::new(name, OptionType::Integer, OptionValue::Integer(default))
        }
    }

    pub fn decimal(name: &str, default: f64, min: Option<f64>, max: Option<f64>) -> Self {
        OptionSpec {
            min,
            max,
            ..Self::new(name, OptionType::Decimal, OptionValue::Decimal(default))
        }
    }

    pub fn text(name: &str, default: &str) -> Self {
        Self::new(name, OptionType::Text, OptionValue::Text(default.into()))
    }

    fn new(name: &str, value_type: OptionType, default: OptionValue) -> Self {
        OptionSpec {
            name: name.into(),
            value_type,
            default,
            min: None,
            max: None,
            allowed_values: None,
        }
    }

    /// Validate a value against type, bounds and allowed values.
    pub fn check(&self, value: &OptionValue) -> Result<(), String> {
        let numeric = match (self.value_type, value) {
            (OptionType::Boolean, OptionValue::Boolean(_)) => None,
            (OptionType::Integer, OptionValue::Integer(i)) => Some(*i as f64),
            (OptionType::Decimal, OptionValue::Decimal(d)) => {
                if !d.is_finite() {
                    return Err("value is not finite".into());
                }
                Some(*d)
            }
            (OptionType::Decimal, OptionValue::Integer(i)) => Some(*i as f64),
            (OptionType::Text, OptionValue::Text(s)) => {
                if let Some(allowed) = &self.allowed_values {
                    if !allowed.iter().any(|a| a == s) {
                        return Err(format!("`{s}` is not one of {allowed:?}"));
                    }
                }
                None
            }
            (expected, got) => return Err(format!("expected {expected:?}, got {got}")),
        };
        if let Some(x) = numeric {
            if let Some(min) = self.min {
                if x < min {
                    return Err(format!("{x} is below the minimum {min}"));
                }
            }
            if let Some(max) = self.max {
                if x > max {
                    return Err(format!("{x} is above the maximum {max}"));
                }
            }
        }
        Ok(())
    }
}

/// Registry metadata for one plugin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub plugin_id: String,
    pub kind: PluginKind,
    pub author: String,
    pub description: String,
    pub required_capabilities: BTreeSet<Capability>,
    pub option_schema: Vec<OptionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_interval_ms: Option<u64>,
}

impl PluginDescriptor {
    /// Lowercase hex SHA-256 of the descriptor's canonical JSON.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("descriptor serializes");
        hex::encode(Sha256::digest(canonical_json(&value)))
    }

    pub fn option(&self, name: &str) -> Option<&OptionSpec> {
        self.option_schema.iter().find(|o| o.name == name)
    }
}
