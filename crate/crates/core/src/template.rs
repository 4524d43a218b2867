//! Placeholder substitution and the adapter configuration (`comet.toml`).
//!
//! Placeholders are written `{{name}}` with `name` matching
//! `[A-Za-z_][A-Za-z0-9_]*`; `\{\{` produces a literal `{{`. Substitution is
//! single pass: text inserted for a placeholder is never scanned again.
//!
//! Hook commands in the configuration are templates themselves. When a
//! built-in script references a hook, the hook is first rendered against
//! the runtime variables, and the result is inserted verbatim.
//!
//! `comet.toml` layout:
//!
//! ```toml
//! schema_version = 1
//! name = "refnode"
//! launch = "./bin/refnode"      # or: image = "registry/impl:tag"
//! readiness_timeout_s = 30      # optional
//!
//! [hooks]
//! start_node = "{{launch}} start --listen {{LOCAL_ADDR}}"
//! # ... all seven required hooks
//!
//! [timing_log]                  # optional
//! path = "timing.log"
//! format = "v1"
//!
//! [env]                         # optional
//! RUST_LOG = "info"
//! ```

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::NodeRole;
use crate::timing::TimingDialect;

pub const SCHEMA_VERSION: i64 = 1;

pub const REQUIRED_HOOKS: [&str; 7] = [
    "start_node",
    "configure_contact",
    "ping_app",
    "send_fixed_app",
    "recv_goodput_app",
    "exchange_variable_app",
    "shutdown",
];

pub const RESERVED_VARS: [&str; 6] = [
    "PEER_ADDR",
    "LOCAL_ADDR",
    "PAYLOAD_SIZE",
    "BUNDLE_COUNT",
    "RESULT_PATH",
    "ROLE",
];

pub const DEFAULT_READINESS_TIMEOUT_S: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment<'a> {
    Text(&'a str),
    OpenBraces,
    Placeholder(&'a str),
}

fn is_name_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_name_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Length of a `{{name}}` token at the start of `s`, and the name.
fn placeholder_at(s: &str) -> Option<(usize, &str)> {
    let bytes = s.as_bytes();
    if !s.starts_with("{{") || bytes.len() < 5 || !is_name_start(bytes[2]) {
        return None;
    }
    let mut end = 3;
    while end < bytes.len() && is_name_char(bytes[end]) {
        end += 1;
    }
    if s[end..].starts_with("}}") {
        Some((end + 2, &s[2..end]))
    } else {
        None
    }
}

fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if rest.starts_with("\\{\\{") {
            out.push(Segment::Text(&text[literal_start..i]));
            out.push(Segment::OpenBraces);
            i += 4;
            literal_start = i;
        } else if let Some((len, name)) = placeholder_at(rest) {
            out.push(Segment::Text(&text[literal_start..i]));
            out.push(Segment::Placeholder(name));
            i += len;
            literal_start = i;
        } else {
            i += rest.chars().next().map_or(1, char::len_utf8);
        }
    }
    out.push(Segment::Text(&text[literal_start..]));
    out.retain(|s| !matches!(s, Segment::Text("")));
    out
}

/// Distinct placeholder names in order of first appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for seg in segments(text) {
        if let Segment::Placeholder(n) = seg {
            if !names.iter().any(|x| x == n) {
                names.push(n.to_string());
            }
        }
    }
    names
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unresolved placeholder(s): {}", .0.iter().map(|n| format!("{{{{{n}}}}}")).collect::<Vec<_>>().join(", "))]
    Unresolved(Vec<String>),
}

/// Single-pass substitution with an arbitrary lookup.
pub fn render_with<'v, F>(template: &str, lookup: F) -> Result<String, TemplateError>
where
    F: Fn(&str) -> Option<Cow<'v, str>>,
{
    let mut out = String::with_capacity(template.len());
    let mut missing: Vec<String> = Vec::new();
    for seg in segments(template) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::OpenBraces => out.push_str("{{"),
            Segment::Placeholder(name) => match lookup(name) {
                Some(v) => out.push_str(&v),
                None => {
                    if !missing.iter().any(|m| m == name) {
                        missing.push(name.to_string());
                    }
                }
            },
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(TemplateError::Unresolved(missing))
    }
}

/// Values for the reserved runtime placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeVars {
    pub role: NodeRole,
    pub local_addr: String,
    pub peer_addr: String,
    pub payload_size: u64,
    pub bundle_count: u64,
    pub result_path: String,
}

impl RuntimeVars {
    pub fn new(role: NodeRole) -> Self {
        Self {
            role,
            local_addr: String::new(),
            peer_addr: String::new(),
            payload_size: 0,
            bundle_count: 0,
            result_path: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<String> {
        Some(match name {
            "PEER_ADDR" => self.peer_addr.clone(),
            "LOCAL_ADDR" => self.local_addr.clone(),
            "PAYLOAD_SIZE" => self.payload_size.to_string(),
            "BUNDLE_COUNT" => self.bundle_count.to_string(),
            "RESULT_PATH" => self.result_path.clone(),
            "ROLE" => self.role.as_str().to_string(),
            _ => return None,
        })
    }

    /// `(name, value)` pairs, also exported to hook processes' environment.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        RESERVED_VARS
            .iter()
            .map(|&n| (n, self.get(n).expect("reserved name")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Launch {
    /// Container image reference.
    Image(String),
    /// Raw launch command, available to hooks as `{{launch}}`.
    Command(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingLogConfig {
    pub path: String,
    pub format: TimingDialect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterConfig {
    pub name: String,
    pub launch: Launch,
    pub hooks: BTreeMap<String, String>,
    pub timing_log: Option<TimingLogConfig>,
    pub env: BTreeMap<String, String>,
    pub readiness_timeout_s: u64,
}

impl AdapterConfig {
    /// Non-hook configuration keys usable as placeholders.
    pub fn scalar(&self, key: &str) -> Option<&str> {
        match (key, &self.launch) {
            ("name", _) => Some(&self.name),
            ("launch", Launch::Command(c)) => Some(c),
            ("image", Launch::Image(i)) => Some(i),
            _ => None,
        }
    }

    pub fn has_key(&self, key: &str) -> bool {
        self.hooks.contains_key(key) || self.scalar(key).is_some()
    }

    pub fn image(&self) -> Option<&str> {
        match &self.launch {
            Launch::Image(i) => Some(i),
            Launch::Command(_) => None,
        }
    }

    fn lookup_raw<'a>(&'a self, name: &str, vars: &RuntimeVars) -> Option<Cow<'a, str>> {
        if let Some(v) = vars.get(name) {
            return Some(Cow::Owned(v));
        }
        if let Some(h) = self.hooks.get(name) {
            return Some(Cow::Borrowed(h.as_str()));
        }
        self.scalar(name).map(Cow::Borrowed)
    }

    /// Renders hook `name` against the runtime variables.
    pub fn render_hook(&self, name: &str, vars: &RuntimeVars) -> Result<String, TemplateError> {
        let template = self
            .hooks
            .get(name)
            .ok_or_else(|| TemplateError::Unresolved(vec![name.to_string()]))?;
        render_with(template, |n| self.lookup_raw(n, vars))
    }

    /// Serializes the configuration with every default made explicit.
    pub fn to_resolved_toml(&self) -> String {
        let mut root = toml::Table::new();
        root.insert("schema_version".into(), toml::Value::Integer(SCHEMA_VERSION));
        root.insert("name".into(), toml::Value::String(self.name.clone()));
        match &self.launch {
            Launch::Image(i) => root.insert("image".into(), toml::Value::String(i.clone())),
            Launch::Command(c) => root.insert("launch".into(), toml::Value::String(c.clone())),
        };
        root.insert(
            "readiness_timeout_s".into(),
            toml::Value::Integer(self.readiness_timeout_s as i64),
        );
        let hooks: toml::Table = self
            .hooks
            .iter()
            .map(|(k, v)| (k.clone(), toml::Value::String(v.clone())))
            .collect();
        root.insert("hooks".into(), toml::Value::Table(hooks));
        if let Some(t) = &self.timing_log {
            let mut tl = toml::Table::new();
            tl.insert("path".into(), toml::Value::String(t.path.clone()));
            tl.insert("format".into(), toml::Value::String("v1".into()));
            root.insert("timing_log".into(), toml::Value::Table(tl));
        }
        let env: toml::Table = self
            .env
            .iter()
            .map(|(k, v)| (k.clone(), toml::Value::String(v.clone())))
            .collect();
        root.insert("env".into(), toml::Value::Table(env));
        toml::to_string(&root).expect("toml table serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// A validated configuration plus non-fatal findings (unknown keys).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedConfig {
    pub config: AdapterConfig,
    pub warnings: Vec<String>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn string_table(
    table: Option<&toml::Value>,
    what: &str,
    issues: &mut Vec<String>,
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    match table {
        None => {}
        Some(toml::Value::Table(t)) => {
            for (k, v) in t {
                match v {
                    toml::Value::String(s) => {
                        out.insert(k.clone(), s.clone());
                    }
                    _ => issues.push(format!("{what}.{k} must be a string")),
                }
            }
        }
        Some(_) => issues.push(format!("{what} must be a table")),
    }
    out
}

/// Parses and checks a `comet.toml` text.
pub fn validate_config(text: &str) -> Result<ValidatedConfig, ConfigError> {
    let root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;

    let mut issues = Vec::new();
    let mut warnings = Vec::new();

    match root.get("schema_version") {
        Some(toml::Value::Integer(SCHEMA_VERSION)) => {}
        Some(v) => issues.push(format!("unsupported schema_version {v}")),
        None => issues.push("missing schema_version".to_string()),
    }
    let name = match root.get("name") {
        Some(toml::Value::String(s)) if !s.is_empty() => s.clone(),
        _ => {
            issues.push("missing name".to_string());
            String::new()
        }
    };
    let launch = match (root.get("image"), root.get("launch")) {
        (Some(toml::Value::String(i)), None) => Some(Launch::Image(i.clone())),
        (None, Some(toml::Value::String(c))) => Some(Launch::Command(c.clone())),
        (Some(_), Some(_)) => {
            issues.push("set either image or launch, not both".to_string());
            None
        }
        (None, None) => {
            issues.push("missing image or launch".to_string());
            None
        }
        _ => {
            issues.push("image/launch must be a string".to_string());
            None
        }
    };
    let readiness_timeout_s = match root.get("readiness_timeout_s") {
        None => DEFAULT_READINESS_TIMEOUT_S,
        Some(toml::Value::Integer(n)) if *n > 0 => *n as u64,
        Some(_) => {
            issues.push("readiness_timeout_s must be a positive integer".to_string());
            DEFAULT_READINESS_TIMEOUT_S
        }
    };

    let hooks = string_table(root.get("hooks"), "hooks", &mut issues);
    for h in REQUIRED_HOOKS {
        match hooks.get(h) {
            None => issues.push(format!("missing hook: {h}")),
            Some(cmd) if cmd.trim().is_empty() => issues.push(format!("empty hook: {h}")),
            Some(_) => {}
        }
    }

    let timing_log = match root.get("timing_log") {
        None => None,
        Some(toml::Value::Table(t)) => {
            let path = match t.get("path") {
                Some(toml::Value::String(p)) if !p.is_empty() => Some(p.clone()),
                _ => {
                    issues.push("timing_log.path must be a non-empty string".to_string());
                    None
                }
            };
            let format = match t.get("format") {
                None => Some(TimingDialect::V1),
                Some(toml::Value::String(f)) => match f.parse::<TimingDialect>() {
                    Ok(d) => Some(d),
                    Err(e) => {
                        issues.push(format!("timing_log.format: {e}"));
                        None
                    }
                },
                Some(_) => {
                    issues.push("timing_log.format must be a string".to_string());
                    None
                }
            };
            for k in t.keys().filter(|k| !["path", "format"].contains(&k.as_str())) {
                warnings.push(format!("unknown key timing_log.{k}"));
            }
            path.zip(format).map(|(path, format)| TimingLogConfig { path, format })
        }
        Some(_) => {
            issues.push("timing_log must be a table".to_string());
            None
        }
    };
    let env = string_table(root.get("env"), "env", &mut issues);

    const KNOWN: [&str; 8] = [
        "schema_version",
        "name",
        "image",
        "launch",
        "readiness_timeout_s",
        "hooks",
        "timing_log",
        "env",
    ];
    for k in root.keys().filter(|k| !KNOWN.contains(&k.as_str())) {
        warnings.push(format!("unknown key {k}"));
    }

    let Some(launch) = launch else {
        return Err(ConfigError::Invalid(issues));
    };
    let config = AdapterConfig {
        name,
        launch,
        hooks,
        timing_log,
        env,
        readiness_timeout_s,
    };

    for (hook, cmd) in &config.hooks {
        let unknown: Vec<String> = placeholders(cmd)
            .into_iter()
            .filter(|p| !RESERVED_VARS.contains(&p.as_str()) && !config.has_key(p))
            .map(|p| format!("{{{{{p}}}}}"))
            .collect();
        if !unknown.is_empty() {
            issues.push(format!(
                "hook {hook} references unresolvable placeholder(s) {}",
                unknown.join(", ")
            ));
        }
    }

    if issues.is_empty() {
        Ok(ValidatedConfig { config, warnings })
    } else {
        Err(ConfigError::Invalid(issues))
    }
}

/// A script template shipped with the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuiltinTemplate {
    pub id: &'static str,
    pub hook: &'static str,
    pub text: &'static str,
}

macro_rules! builtin {
    ($id:literal, $hook:literal) => {
        BuiltinTemplate {
            id: $id,
            hook: $hook,
            text: concat!(
                "#!/bin/sh\n",
                "# ", $id, " for role {{ROLE}} (local {{LOCAL_ADDR}}, peer {{PEER_ADDR}})\n",
                "# payload {{PAYLOAD_SIZE}} B x {{BUNDLE_COUNT}}, results to {{RESULT_PATH}}\n",
                "{{", $hook, "}}\n"
            ),
        }
    };
}

/// Test-runner script templates; one per hook.
pub const BUILTIN_TEMPLATES: [BuiltinTemplate; 7] = [
    builtin!("start_node", "start_node"),
    builtin!("configure_contact", "configure_contact"),
    builtin!("ping", "ping_app"),
    builtin!("send_fixed", "send_fixed_app"),
    builtin!("recv_goodput", "recv_goodput_app"),
    builtin!("exchange", "exchange_variable_app"),
    builtin!("shutdown", "shutdown"),
];

pub fn builtin_template(id: &str) -> Option<&'static BuiltinTemplate> {
    BUILTIN_TEMPLATES.iter().find(|t| t.id == id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedScript {
    pub role: NodeRole,
    pub text: String,
    pub source_template: String,
}

/// Renders `template` for one invocation.
///
/// Placeholders resolve to runtime variables first, then to hooks (each
/// rendered against the same variables), then to scalar config keys.
pub fn render(
    template_id: &str,
    template: &str,
    config: &AdapterConfig,
    vars: &RuntimeVars,
) -> Result<RenderedScript, TemplateError> {
    let text = render_with(template, |name| {
        if let Some(v) = vars.get(name) {
            return Some(Cow::Owned(v));
        }
        if config.hooks.contains_key(name) {
            return config.render_hook(name, vars).ok().map(Cow::Owned);
        }
        config.scalar(name).map(Cow::Borrowed)
    })?;
    Ok(RenderedScript {
        role: vars.role,
        text,
        source_template: template_id.to_string(),
    })
}
