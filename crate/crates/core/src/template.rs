//! Predefined experiment templates with `{{param}}` placeholders.
//!
//! A template body is kept as raw JSON so that any string field, including
//! resource strings, may carry tokens. Substitution is a single left-to-right
//! pass over each string: values are inserted literally and never re-scanned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{is_dns_label, validate_experiment_spec, ExperimentSpec, Violation};
use crate::store::{Mutation, Store, StoreError};

/// Scalar default of a parameter; keeps its JSON form for round-trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Number(serde_json::Number),
    String(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Number(n) => write!(f, "{n}"),
            ParamValue::String(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateParameter {
    pub name: String,
    /// Prefill default. Does not satisfy `required`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<ParamValue>,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub name: String,
    #[serde(default)]
    pub author: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<TemplateParameter>,
    #[serde(rename = "experimentSpec")]
    pub experiment_spec: Value,
}

impl TemplateSpec {
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("template serialization is infallible")
    }

    pub fn parameter(&self, name: &str) -> Option<&TemplateParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSummary {
    pub name: String,
    pub author: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code")]
pub enum TemplateViolation {
    InvalidTemplateName { name: String },
    InvalidParameterName { name: String },
    DuplicateParameter { name: String },
    UndeclaredToken { token: String },
    UnusedParameter { name: String },
    MalformedToken { path: String },
    InvalidBody { violation: Violation },
}

impl fmt::Display for TemplateViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateViolation::InvalidTemplateName { name } => write!(f, "invalid template name `{name}`"),
            TemplateViolation::InvalidParameterName { name } => write!(f, "invalid parameter name `{name}`"),
            TemplateViolation::DuplicateParameter { name } => write!(f, "parameter `{name}` declared twice"),
            TemplateViolation::UndeclaredToken { token } => write!(f, "token `{{{{{token}}}}}` is not declared"),
            TemplateViolation::UnusedParameter { name } => write!(f, "parameter `{name}` is never used"),
            TemplateViolation::MalformedToken { path } => write!(f, "malformed `{{{{` token at {path}"),
            TemplateViolation::InvalidBody { violation } => write!(f, "experimentSpec.{violation}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{0}` not found")]
    NotFound(String),
    #[error("template `{0}` already exists")]
    Conflict(String),
    #[error("template is invalid: {}", join(.0))]
    ValidationFailed(Vec<TemplateViolation>),
    #[error("missing required parameter `{0}`")]
    MissingRequiredParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("instantiated spec is invalid: {}", join(.0))]
    ResultInvalid(Vec<Violation>),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl TemplateError {
    pub fn code(&self) -> &'static str {
        match self {
            TemplateError::NotFound(_) => "NotFound",
            TemplateError::Conflict(_) => "Conflict",
            TemplateError::ValidationFailed(_) => "ValidationFailed",
            TemplateError::MissingRequiredParameter(_) => "MissingRequiredParameter",
            TemplateError::UnknownParameter(_) => "UnknownParameter",
            TemplateError::ResultInvalid(_) => "ResultInvalid",
            TemplateError::Store(_) => "StoreError",
        }
    }
}

/// Piece of a string split at `{{name}}` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment<'a> {
    Text(&'a str),
    Token(&'a str),
}

fn is_param_name(s: &str) -> bool {
    let mut bytes = s.bytes();
    matches!(bytes.next(), Some(b) if b.is_ascii_alphabetic() || b == b'_')
        && bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Splits `s` into literal text and tokens. Any `{{` that does not open a
/// well-formed `{{name}}` token is an error.
pub fn tokenize(s: &str) -> Result<Vec<Segment<'_>>, usize> {
    let mut out = Vec::new();
    let mut rest = s;
    let mut offset = 0;
    while let Some(open) = rest.find("{{") {
        if open > 0 {
            out.push(Segment::Text(&rest[..open]));
        }
        let after = &rest[open + 2..];
        let Some(close) = after.find("}}") else {
            return Err(offset + open);
        };
        let name = &after[..close];
        if !is_param_name(name) {
            return Err(offset + open);
        }
        out.push(Segment::Token(name));
        let consumed = open + 2 + close + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    Ok(out)
}

/// Replaces every token with its value. Returns the new string and the
/// number of replacements, or the first token without a value.
pub fn substitute(s: &str, values: &BTreeMap<String, String>) -> Result<(String, usize), String> {
    let segments = tokenize(s).map_err(|_| s.to_string())?;
    let mut out = String::with_capacity(s.len());
    let mut count = 0;
    for seg in segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Token(name) => {
                let v = values.get(name).ok_or_else(|| name.to_string())?;
                out.push_str(v);
                count += 1;
            }
        }
    }
    Ok((out, count))
}

fn walk_strings<'v>(value: &'v Value, path: &mut String, f: &mut dyn FnMut(&str, &'v str)) {
    match value {
        Value::String(s) => f(path, s),
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                walk_strings(item, path, f);
                path.truncate(len);
            }
        }
        Value::Object(map) => {
            for (k, v) in map {
                let len = path.len();
                if !path.is_empty() {
                    path.push('.');
                }
                path.push_str(k);
                walk_strings(v, path, f);
                path.truncate(len);
            }
        }
        _ => {}
    }
}

fn map_strings(value: &Value, f: &mut dyn FnMut(&str) -> Result<String, String>) -> Result<Value, String> {
    Ok(match value {
        Value::String(s) => Value::String(f(s)?),
        Value::Array(items) => Value::Array(items.iter().map(|v| map_strings(v, f)).collect::<Result<_, _>>()?),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| Ok((k.clone(), map_strings(v, f)?)))
                .collect::<Result<_, String>>()?,
        ),
        other => other.clone(),
    })
}

/// Token names in order of occurrence (with repeats), plus malformed paths.
fn collect_tokens(body: &Value) -> (Vec<String>, Vec<String>) {
    let mut tokens = Vec::new();
    let mut malformed = Vec::new();
    walk_strings(body, &mut String::new(), &mut |path, s| match tokenize(s) {
        Ok(segs) => tokens.extend(segs.into_iter().filter_map(|seg| match seg {
            Segment::Token(t) => Some(t.to_string()),
            Segment::Text(_) => None,
        })),
        Err(_) => malformed.push(path.to_string()),
    });
    (tokens, malformed)
}

/// Number of `{{name}}` occurrences in the body.
pub fn token_occurrences(body: &Value) -> usize {
    collect_tokens(body).0.len()
}

/// Substitutes `values` into the body and decodes the result. A body
/// without `meta.name` takes the template's name.
fn render(template: &TemplateSpec, values: &BTreeMap<String, String>) -> Result<ExperimentSpec, Vec<Violation>> {
    let mut rendered = map_strings(&template.experiment_spec, &mut |s| substitute(s, values).map(|(out, _)| out))
        .map_err(|token| vec![Violation::new("experimentSpec", format!("no value for token `{token}`"))])?;
    if let Some(meta) = rendered.get_mut("meta").and_then(Value::as_object_mut) {
        let unnamed = meta.get("name").and_then(Value::as_str).is_none_or(str::is_empty);
        if unnamed {
            meta.insert("name".into(), Value::String(template.name.clone()));
        }
    }
    let spec: ExperimentSpec =
        serde_json::from_value(rendered).map_err(|e| vec![Violation::new("experimentSpec", e.to_string())])?;
    let violations = validate_experiment_spec(&spec);
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(violations)
    }
}

pub fn validate_template(t: &TemplateSpec) -> Vec<TemplateViolation> {
    let mut out = Vec::new();
    if !is_dns_label(&t.name) {
        out.push(TemplateViolation::InvalidTemplateName { name: t.name.clone() });
    }
    let mut declared = BTreeSet::new();
    for p in &t.parameters {
        if !is_param_name(&p.name) {
            out.push(TemplateViolation::InvalidParameterName { name: p.name.clone() });
        }
        if !declared.insert(p.name.as_str()) {
            out.push(TemplateViolation::DuplicateParameter { name: p.name.clone() });
        }
    }
    let (tokens, malformed) = collect_tokens(&t.experiment_spec);
    out.extend(malformed.into_iter().map(|path| TemplateViolation::MalformedToken { path }));
    let used: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
    for token in &used {
        if !declared.contains(token) {
            out.push(TemplateViolation::UndeclaredToken { token: token.to_string() });
        }
    }
    for p in &t.parameters {
        if !used.contains(p.name.as_str()) && !out.iter().any(|v| matches!(v, TemplateViolation::DuplicateParameter { name } if *name == p.name)) {
            out.push(TemplateViolation::UnusedParameter { name: p.name.clone() });
        }
    }
    if out.is_empty() {
        let defaults = t
            .parameters
            .iter()
            .map(|p| (p.name.clone(), p.value.as_ref().map_or_else(|| "0".to_string(), ToString::to_string)))
            .collect();
        if let Err(violations) = render(t, &defaults) {
            out.extend(violations.into_iter().map(|violation| TemplateViolation::InvalidBody { violation }));
        }
    }
    out
}

/// Fills a template's parameters. Required parameters must be supplied
/// explicitly; optional ones fall back to their default, or to the empty
/// string when they have none.
pub fn instantiate(template: &TemplateSpec, params: &BTreeMap<String, String>) -> Result<ExperimentSpec, TemplateError> {
    if let Some(unknown) = params.keys().find(|k| template.parameter(k).is_none()) {
        return Err(TemplateError::UnknownParameter(unknown.clone()));
    }
    let mut values = BTreeMap::new();
    for p in &template.parameters {
        let value = match (params.get(&p.name), p.required) {
            (Some(v), _) => v.clone(),
            (None, true) => return Err(TemplateError::MissingRequiredParameter(p.name.clone())),
            (None, false) => p.value.as_ref().map(ToString::to_string).unwrap_or_default(),
        };
        values.insert(p.name.clone(), value);
    }
    render(template, &values).map_err(TemplateError::ResultInvalid)
}

/// Reads a template file. Besides strict JSON this tolerates two things
/// hand-written files commonly contain: trailing commas before `}`/`]`, and
/// string literals wrapped across lines (each line break plus surrounding
/// indentation becomes a single space).
pub fn parse_template_file(text: &str) -> Result<TemplateSpec, serde_json::Error> {
    serde_json::from_str(&relax_json(text))
}

fn relax_json(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if in_string {
            if escaped {
                escaped = false;
                out.push(c);
            } else if c == '\\' {
                escaped = true;
                out.push(c);
            } else if c == '"' {
                in_string = false;
                out.push(c);
            } else if c == '\n' || c == '\r' {
                while out.ends_with([' ', '\t']) {
                    out.pop();
                }
                while i + 1 < chars.len() && chars[i + 1].is_whitespace() {
                    i += 1;
                }
                out.push(' ');
            } else {
                out.push(c);
            }
        } else if c == '"' {
            in_string = true;
            out.push(c);
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|ch| !ch.is_whitespace());
            if !matches!(next, Some('}') | Some(']')) {
                out.push(c);
            }
        } else {
            out.push(c);
        }
        i += 1;
    }
    out
}

/// Named templates, persisted through the shared store.
pub struct TemplateRegistry {
    store: Arc<Store>,
    templates: RwLock<BTreeMap<String, TemplateSpec>>,
}

impl TemplateRegistry {
    pub fn new(store: Arc<Store>, templates: BTreeMap<String, TemplateSpec>) -> Self {
        TemplateRegistry { store, templates: RwLock::new(templates) }
    }

    pub fn register(&self, template: TemplateSpec) -> Result<TemplateSpec, TemplateError> {
        let violations = validate_template(&template);
        if !violations.is_empty() {
            return Err(TemplateError::ValidationFailed(violations));
        }
        let mut templates = self.templates.write();
        if templates.contains_key(&template.name) {
            return Err(TemplateError::Conflict(template.name));
        }
        self.store.append(&Mutation::PutTemplate(template.clone()))?;
        templates.insert(template.name.clone(), template.clone());
        Ok(template)
    }

    pub fn get(&self, name: &str) -> Result<TemplateSpec, TemplateError> {
        self.templates.read().get(name).cloned().ok_or_else(|| TemplateError::NotFound(name.to_string()))
    }

    pub fn list(&self) -> Vec<TemplateSummary> {
        self.templates
            .read()
            .values()
            .map(|t| TemplateSummary {
                name: t.name.clone(),
                author: t.author.clone(),
                description: t.description.clone(),
            })
            .collect()
    }

    pub fn delete(&self, name: &str) -> Result<(), TemplateError> {
        let mut templates = self.templates.write();
        if !templates.contains_key(name) {
            return Err(TemplateError::NotFound(name.to_string()));
        }
        self.store.append(&Mutation::DeleteTemplate { name: name.to_string() })?;
        templates.remove(name);
        Ok(())
    }

    pub fn instantiate(&self, name: &str, params: &BTreeMap<String, String>) -> Result<ExperimentSpec, TemplateError> {
        let template = self.get(name)?;
        instantiate(&template, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EnvironmentRef, ResourceSpec};
    use serde_json::json;

    const MNIST_TEMPLATE: &str = include_str!("../tests/fixtures/tf-mnist-template.json");

    fn mnist() -> TemplateSpec {
        parse_template_file(MNIST_TEMPLATE).unwrap()
    }

    fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn template_file_parses_leniently() {
        let t = mnist();
        assert_eq!(t.name, "tf-mnist-template");
        assert_eq!(t.parameters.len(), 2);
        assert_eq!(t.parameters[0].value.as_ref().unwrap().to_string(), "0.001");
        assert_eq!(t.parameters[1].value.as_ref().unwrap().to_string(), "256");
        assert!(t.parameters.iter().all(|p| p.required));
        assert_eq!(
            t.experiment_spec["meta"]["cmd"],
            "python mnist.py --log_dir=/train/log --learning_rate={{learning_rate}} --batch_size={{batch_size}}"
        );
        assert!(serde_json::from_str::<TemplateSpec>(MNIST_TEMPLATE).is_err(), "template file is not strict JSON");
    }

    #[test]
    fn template_file_validates() {
        assert_eq!(validate_template(&mnist()), vec![]);
    }

    #[test]
    fn token_declaration_mismatch() {
        let mut t = mnist();
        t.experiment_spec["meta"]["cmd"] = json!("python mnist.py --learning_rate={{learning_rate}} --batch_size={{batchsize}}");
        assert_eq!(
            validate_template(&t),
            vec![
                TemplateViolation::UndeclaredToken { token: "batchsize".into() },
                TemplateViolation::UnusedParameter { name: "batch_size".into() },
            ]
        );
    }

    #[test]
    fn parameterless_template() {
        let t = TemplateSpec {
            name: "plain".into(),
            author: String::new(),
            description: String::new(),
            parameters: vec![],
            experiment_spec: json!({
                "meta": {"name": "plain", "cmd": "true"},
                "environment": {"image": "busybox"},
                "spec": {"Worker": {"replicas": 1, "resources": "cpu=1"}}
            }),
        };
        assert_eq!(validate_template(&t), vec![]);
        let spec = instantiate(&t, &BTreeMap::new()).unwrap();
        assert_eq!(spec.to_canonical_json(), serde_json::from_value::<ExperimentSpec>(t.experiment_spec.clone()).unwrap().to_canonical_json());
    }

    #[test]
    fn malformed_and_bad_names() {
        let mut t = mnist();
        t.experiment_spec["meta"]["framework"] = json!("{{ learning_rate }}");
        t.parameters.push(TemplateParameter { name: "9lives".into(), value: None, required: false });
        let v = validate_template(&t);
        assert!(v.contains(&TemplateViolation::MalformedToken { path: "meta.framework".into() }));
        assert!(v.contains(&TemplateViolation::InvalidParameterName { name: "9lives".into() }));
    }

    #[test]
    fn body_checked_with_defaults() {
        let mut t = mnist();
        t.parameters.push(TemplateParameter { name: "workers".into(), value: None, required: true });
        t.experiment_spec["spec"]["Worker"]["resources"] = json!("cpu=4,gpu=4,memory=4G,replicas={{workers}}");
        t.experiment_spec["spec"]["Worker"].as_object_mut().unwrap().remove("replicas");
        // "0" stands in for a missing default, and zero replicas is invalid.
        let v = validate_template(&t);
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], TemplateViolation::InvalidBody { violation } if violation.path == "tasks.Worker.replicas"));
    }

    #[test]
    fn instantiate_mnist_template() {
        let spec = instantiate(&mnist(), &params(&[("learning_rate", "0.001"), ("batch_size", "256")])).unwrap();
        assert_eq!(spec.meta.cmd, "python mnist.py --log_dir=/train/log --learning_rate=0.001 --batch_size=256");
        assert_eq!(spec.meta.name, "tf-mnist-template");
        assert_eq!(spec.environment, EnvironmentRef::Image("submarine:tf-mnist".into()));
        assert_eq!(spec.tasks["Ps"].replicas, 1);
        assert_eq!(spec.tasks["Ps"].resources, ResourceSpec::new(2, 0, 2048));
        assert_eq!(spec.tasks["Worker"].replicas, 4);
        assert_eq!(spec.tasks["Worker"].resources, ResourceSpec::new(4, 4, 4096));
    }

    #[test]
    fn instantiate_errors() {
        let t = mnist();
        assert!(matches!(
            instantiate(&t, &params(&[("learning_rate", "0.001")])),
            Err(TemplateError::MissingRequiredParameter(p)) if p == "batch_size"
        ));
        assert!(matches!(
            instantiate(&t, &params(&[("learning_rate", "0.001"), ("batch_size", "256"), ("extra", "1")])),
            Err(TemplateError::UnknownParameter(p)) if p == "extra"
        ));
    }

    #[test]
    fn no_recursive_expansion() {
        let spec = instantiate(&mnist(), &params(&[("learning_rate", "{{batch_size}}"), ("batch_size", "8")])).unwrap();
        assert!(spec.meta.cmd.contains("--learning_rate={{batch_size}} --batch_size=8"));
    }

    #[test]
    fn optional_parameters_fall_back() {
        let mut t = mnist();
        t.parameters[1].required = false;
        let spec = instantiate(&t, &params(&[("learning_rate", "0.1")])).unwrap();
        assert!(spec.meta.cmd.ends_with("--batch_size=256"));
    }

    #[test]
    fn tokenizer_edges() {
        assert_eq!(tokenize("a{{b}}c"), Ok(vec![Segment::Text("a"), Segment::Token("b"), Segment::Text("c")]));
        assert_eq!(tokenize("{{x}}{{y}}"), Ok(vec![Segment::Token("x"), Segment::Token("y")]));
        assert_eq!(tokenize("{single} }}"), Ok(vec![Segment::Text("{single} }}")]));
        assert_eq!(tokenize("x {{open"), Err(2));
        assert_eq!(tokenize("{{a b}}"), Err(0));
    }

    #[test]
    fn relaxed_json_keeps_escapes() {
        let t = relax_json("{\"a\": \"x\\\"y,\n  z\", \"b\": [1, 2,],}");
        assert_eq!(t, "{\"a\": \"x\\\"y, z\", \"b\": [1, 2]}");
    }
}
