//! Experiment entities and the JSON metadata documents that describe an
//! experiment's configurable parameters.

use std::fmt;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dispatch::DispatchPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// One choice of a select field, written as a single-entry object
/// `{"label": "value"}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectOption {
    pub label: String,
    pub value: String,
}

impl Serialize for SelectOption {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        map.serialize_entry(&self.label, &self.value)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for SelectOption {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Plain(String),
            Pair(IndexMap<String, String>),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Plain(s) => Ok(SelectOption {
                label: s.clone(),
                value: s,
            }),
            Raw::Pair(map) if map.len() == 1 => {
                let (label, value) = map.into_iter().next().expect("one entry");
                Ok(SelectOption { label, value })
            }
            Raw::Pair(map) => Err(de::Error::custom(format!(
                "select option must have exactly one entry, found {}",
                map.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectField {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placeholder: Option<String>,
    pub options: Vec<SelectOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumberField {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placeholder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub step: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FieldDescriptor {
    Select(SelectField),
    Number(NumberField),
}

/// Metadata document from which a configuration form is rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfigSchema {
    pub name: String,
    pub description: String,
    pub configuration: IndexMap<String, FieldDescriptor>,
}

const STEP_TOLERANCE: f64 = 1e-9;

impl NumberField {
    fn check_value(&self, field: &str, v: f64) -> Result<(), ValidationError> {
        if !v.is_finite() {
            return Err(ValidationError::new(field, "not a finite number"));
        }
        if v < self.min || v > self.max {
            return Err(ValidationError::new(
                field,
                format!("{v} is outside [{}, {}]", self.min, self.max),
            ));
        }
        let steps = (v - self.min) / self.step;
        if (steps - steps.round()).abs() > STEP_TOLERANCE * steps.abs().max(1.0) {
            return Err(ValidationError::new(
                field,
                format!("{v} is not a multiple of step {} from {}", self.step, self.min),
            ));
        }
        Ok(())
    }
}

impl ExperimentConfigSchema {
    pub fn from_json(text: &str) -> Result<Self, ValidationError> {
        let schema: Self =
            serde_json::from_str(text).map_err(|e| ValidationError::new("schema", e.to_string()))?;
        schema.check()?;
        Ok(schema)
    }

    /// Structural checks on the document itself.
    pub fn check(&self) -> Result<(), ValidationError> {
        for (key, field) in &self.configuration {
            match field {
                FieldDescriptor::Select(s) => {
                    if s.options.is_empty() {
                        return Err(ValidationError::new(key, "select has no options"));
                    }
                    if let Some(v) = &s.value {
                        if !s.options.iter().any(|o| &o.value == v) {
                            return Err(ValidationError::new(key, "default is not an option"));
                        }
                    }
                }
                FieldDescriptor::Number(n) => {
                    if n.step.is_nan() || n.step <= 0.0 {
                        return Err(ValidationError::new(key, "step must be positive"));
                    }
                    if n.min > n.max {
                        return Err(ValidationError::new(key, "min exceeds max"));
                    }
                    if let Some(v) = n.value {
                        n.check_value(key, v)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks submitted values, filling defaults for omitted fields.
    pub fn validate(
        &self,
        values: &serde_json::Map<String, Value>,
    ) -> Result<IndexMap<String, Value>, ValidationError> {
        if let Some(unknown) = values.keys().find(|k| !self.configuration.contains_key(*k)) {
            return Err(ValidationError::new(unknown, "not a field of this experiment"));
        }
        let mut out = IndexMap::new();
        for (key, field) in &self.configuration {
            let given = values.get(key).filter(|v| !v.is_null());
            let value = match field {
                FieldDescriptor::Select(s) => {
                    let chosen = match given {
                        Some(Value::String(v)) => v.clone(),
                        Some(_) => return Err(ValidationError::new(key, "expected a string")),
                        None => s
                            .value
                            .clone()
                            .ok_or_else(|| ValidationError::new(key, "a value is required"))?,
                    };
                    if !s.options.iter().any(|o| o.value == chosen) {
                        return Err(ValidationError::new(
                            key,
                            format!("{chosen:?} is not one of the options"),
                        ));
                    }
                    Value::String(chosen)
                }
                FieldDescriptor::Number(n) => {
                    let v = match given {
                        Some(v) => v
                            .as_f64()
                            .ok_or_else(|| ValidationError::new(key, "expected a number"))?,
                        None => n
                            .value
                            .ok_or_else(|| ValidationError::new(key, "a value is required"))?,
                    };
                    n.check_value(key, v)?;
                    serde_json::Number::from_f64(v)
                        .map(Value::Number)
                        .expect("finite")
                }
            };
            out.insert(key.clone(), value);
        }
        Ok(out)
    }
}

/// Metadata documents bundled with the service.
pub fn builtin_templates() -> Vec<ExperimentConfigSchema> {
    [
        include_str!("../templates/template_experiment.json"),
        include_str!("../templates/lexical_probe.json"),
    ]
    .iter()
    .map(|t| ExperimentConfigSchema::from_json(t).expect("bundled template is valid"))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    HttpChat,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Mock => "mock",
            ProviderKind::HttpChat => "http_chat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mock" => Some(ProviderKind::Mock),
            "http_chat" | "http" => Some(ProviderKind::HttpChat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentState {
    Draft,
    Running,
    Paused,
    Stopped,
    Complete,
}

impl ExperimentState {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentState::Draft => "draft",
            ExperimentState::Running => "running",
            ExperimentState::Paused => "paused",
            ExperimentState::Stopped => "stopped",
            ExperimentState::Complete => "complete",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "draft" => ExperimentState::Draft,
            "running" => ExperimentState::Running,
            "paused" => ExperimentState::Paused,
            "stopped" => ExperimentState::Stopped,
            "complete" => ExperimentState::Complete,
            _ => return None,
        })
    }

    /// Draft → Running ↔ Paused → {Stopped, Complete}. A stopped experiment
    /// may be resumed; Complete is terminal.
    pub fn can_transition(self, to: ExperimentState) -> bool {
        use ExperimentState::*;
        matches!(
            (self, to),
            (Draft, Running)
                | (Running, Paused)
                | (Paused, Running)
                | (Running, Stopped)
                | (Paused, Stopped)
                | (Running, Complete)
                | (Stopped, Running)
        )
    }

    pub fn is_terminal_for_stream(self) -> bool {
        matches!(self, ExperimentState::Stopped | ExperimentState::Complete)
    }
}

impl fmt::Display for ExperimentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub name: String,
    pub description: String,
    pub wordlist_id: Option<String>,
    pub battery_id: String,
    pub provider_kind: ProviderKind,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub dispatch: DispatchPolicy,
    /// Validated form values the experiment was created from.
    pub config: IndexMap<String, Value>,
    pub created_at: DateTime<Utc>,
    pub state: ExperimentState,
}

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 10;

/// Everything needed to create an experiment except its id and state.
#[derive(Debug, Clone, PartialEq)]
pub struct NewExperiment {
    pub id: Option<String>,
    pub name: String,
    pub description: String,
    pub wordlist_id: Option<String>,
    pub battery_id: String,
    pub provider_kind: ProviderKind,
    pub dispatch: DispatchPolicy,
    pub config: IndexMap<String, Value>,
}

impl NewExperiment {
    /// Validates `values` against `schema` and pulls out the provider
    /// parameters: `model` (required), `temperature` (default 0) and
    /// `max_tokens` (default 10).
    pub fn from_form(
        schema: &ExperimentConfigSchema,
        name: impl Into<String>,
        values: &serde_json::Map<String, Value>,
    ) -> Result<Self, ValidationError> {
        let config = schema.validate(values)?;
        let out = Self {
            id: None,
            name: name.into(),
            description: schema.description.clone(),
            wordlist_id: None,
            battery_id: crate::store::BUILTIN_BATTERY_ID.to_string(),
            provider_kind: ProviderKind::Mock,
            dispatch: DispatchPolicy::default(),
            config,
        };
        out.model()?;
        out.temperature()?;
        out.max_output_tokens()?;
        Ok(out)
    }

    pub fn model(&self) -> Result<String, ValidationError> {
        match self.config.get("model") {
            Some(Value::String(m)) if !m.is_empty() => Ok(m.clone()),
            _ => Err(ValidationError::new("model", "a model is required")),
        }
    }

    pub fn temperature(&self) -> Result<f64, ValidationError> {
        let t = match self.config.get("temperature") {
            None => 0.0,
            Some(v) => v
                .as_f64()
                .ok_or_else(|| ValidationError::new("temperature", "expected a number"))?,
        };
        if !(0.0..=1.0).contains(&t) {
            return Err(ValidationError::new(
                "temperature",
                format!("{t} is outside [0, 1]"),
            ));
        }
        Ok(t)
    }

    pub fn max_output_tokens(&self) -> Result<u32, ValidationError> {
        match self.config.get("max_tokens") {
            None => Ok(DEFAULT_MAX_OUTPUT_TOKENS),
            Some(v) => v
                .as_f64()
                .filter(|n| *n >= 1.0 && n.fract() == 0.0 && *n <= f64::from(u32::MAX))
                .map(|n| n as u32)
                .ok_or_else(|| ValidationError::new("max_tokens", "expected a positive integer")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn form_template() -> ExperimentConfigSchema {
        builtin_templates().remove(0)
    }

    fn values(v: Value) -> serde_json::Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn parses_bundled_template() {
        let t = form_template();
        assert_eq!(t.name, "Template experiment");
        let keys: Vec<&str> = t.configuration.keys().map(String::as_str).collect();
        assert_eq!(keys, ["model", "temperature"]);
        let FieldDescriptor::Select(model) = &t.configuration["model"] else {
            panic!("model is a select")
        };
        assert_eq!(model.options.len(), 2);
        assert_eq!(model.options[1].label, "ChatGPT 4");
        let FieldDescriptor::Number(temp) = &t.configuration["temperature"] else {
            panic!("temperature is a number")
        };
        assert_eq!(
            (temp.min, temp.max, temp.step, temp.value),
            (0.0, 1.0, 0.1, Some(0.0))
        );
    }

    #[test]
    fn option_serializes_as_single_entry_object() {
        let o = SelectOption {
            label: "ChatGPT 4".into(),
            value: "ChatGPT 4".into(),
        };
        assert_eq!(
            serde_json::to_value(&o).unwrap(),
            json!({"ChatGPT 4": "ChatGPT 4"})
        );
        let plain: SelectOption = serde_json::from_value(json!("m")).unwrap();
        assert_eq!(plain.value, "m");
        assert!(serde_json::from_value::<SelectOption>(json!({"a": "a", "b": "b"})).is_err());
    }

    #[test]
    fn accepts_in_range_temperature() {
        let t = form_template();
        let v = t
            .validate(&values(json!({"model": "ChatGPT 3.5", "temperature": 0})))
            .unwrap();
        assert_eq!(v["temperature"].as_f64(), Some(0.0));
        assert!(t
            .validate(&values(json!({"model": "ChatGPT 4", "temperature": 0.7})))
            .is_ok());
    }

    #[test]
    fn rejects_out_of_range_temperature() {
        let err = form_template()
            .validate(&values(json!({"model": "ChatGPT 3.5", "temperature": 1.5})))
            .unwrap_err();
        assert_eq!(err.field, "temperature");
        let err = form_template()
            .validate(&values(json!({"model": "ChatGPT 3.5", "temperature": 0.05})))
            .unwrap_err();
        assert!(err.reason.contains("step"));
    }

    #[test]
    fn rejects_unknown_model_and_fields() {
        let t = form_template();
        assert_eq!(
            t.validate(&values(json!({"model": "GPT-5"}))).unwrap_err().field,
            "model"
        );
        assert_eq!(t.validate(&values(json!({}))).unwrap_err().field, "model");
        assert_eq!(
            t.validate(&values(json!({"model": "ChatGPT 4", "top_p": 1})))
                .unwrap_err()
                .field,
            "top_p"
        );
    }

    #[test]
    fn malformed_schemas_are_rejected() {
        let empty = r#"{"name":"x","description":"","configuration":{"m":{"type":"select","options":[]}}}"#;
        assert!(ExperimentConfigSchema::from_json(empty).is_err());
        let bad_step = r#"{"name":"x","description":"","configuration":{"t":{"type":"number","step":0,"min":0,"max":1}}}"#;
        assert!(ExperimentConfigSchema::from_json(bad_step).is_err());
        let bad_value = r#"{"name":"x","description":"","configuration":{"t":{"type":"number","value":2,"step":1,"min":0,"max":1}}}"#;
        assert!(ExperimentConfigSchema::from_json(bad_value).is_err());
    }

    #[test]
    fn form_extracts_provider_parameters() {
        let t = builtin_templates().remove(1);
        let new = NewExperiment::from_form(&t, "probe", &values(json!({"temperature": 0.2}))).unwrap();
        assert_eq!(new.model().unwrap(), "gpt-3.5-turbo");
        assert_eq!(new.temperature().unwrap(), 0.2);
        assert_eq!(new.max_output_tokens().unwrap(), 10);
    }

    #[test]
    fn state_machine() {
        use ExperimentState::*;
        assert!(Draft.can_transition(Running));
        assert!(Running.can_transition(Paused));
        assert!(Paused.can_transition(Running));
        assert!(Paused.can_transition(Stopped));
        assert!(Stopped.can_transition(Running));
        assert!(!Complete.can_transition(Running));
        assert!(!Draft.can_transition(Stopped));
        assert!(!Draft.can_transition(Complete));
        assert!(!Paused.can_transition(Complete));
    }
}
