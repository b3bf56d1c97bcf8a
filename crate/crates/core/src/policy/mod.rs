//! Security policy documents.
//!
//! A policy names the code that may run (`mrenclaves`), where it may run
//! (`platforms`), how it is configured (`command`, `environment`, injected
//! files), which file-system keys and tags it is bound to, which secrets it
//! receives, what it shares with other policies, and which board governs it.
//!
//! Documents are YAML. Scalar values of the form `$NAME` are kept as
//! symbolic [`Value::Var`] references until [`PolicyDocument::resolve`]
//! substitutes them; a stored policy must be fully resolved. Secrets are
//! referenced from `command`, `environment` and injected files as
//! `$$name$$`.

pub mod board;
pub mod combos;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crypto::{KeyMaterial, PublicKey};
use crate::fs_shield::{referenced_variables, VolumeTag};
use crate::tee::{Measurement, PlatformId};

pub use board::{evaluate_board, BoardDecision, Outcome, Vote};
pub use combos::{intersect, permits, permitted_combinations, resolve_exports, ExportBindings};

pub const DEFAULT_BOARD_TIMEOUT_MS: u64 = 30_000;
pub const MAX_GENERATED_SECRET_LEN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid policy at {path}: {message}")]
    Invariant { path: String, message: String },
    #[error("unresolved variables: {}", .0.iter().cloned().collect::<Vec<_>>().join(", "))]
    Unresolved(BTreeSet<String>),
    #[error("policy {source_policy} does not export {item} to {target}")]
    ExportNotGranted {
        source_policy: String,
        item: String,
        target: String,
    },
    #[error("missing export: {0}")]
    MissingExport(String),
}

fn invariant(path: impl Into<String>, message: impl Into<String>) -> PolicyError {
    PolicyError::Invariant {
        path: path.into(),
        message: message.into(),
    }
}

fn is_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// A scalar that is either a literal or a `$NAME` reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value<T> {
    Var(String),
    Lit(T),
}

impl<T> Value<T> {
    pub fn lit(&self) -> Option<&T> {
        match self {
            Value::Lit(v) => Some(v),
            Value::Var(_) => None,
        }
    }

    pub fn var(&self) -> Option<&str> {
        match self {
            Value::Var(v) => Some(v),
            Value::Lit(_) => None,
        }
    }
}

impl<T: FromStr> Value<T>
where
    T::Err: fmt::Display,
{
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(name) = s.strip_prefix('$') {
            if is_var_name(name) {
                return Ok(Value::Var(name.to_string()));
            }
            return Err(format!("invalid variable reference {s:?}"));
        }
        s.parse().map(Value::Lit).map_err(|e| format!("{s:?}: {e}"))
    }

    fn resolve(&mut self, vars: &BTreeMap<String, String>, path: &str) -> Result<(), PolicyError> {
        if let Value::Var(name) = self {
            if let Some(raw) = vars.get(name.as_str()) {
                let v: T = raw
                    .trim()
                    .parse()
                    .map_err(|e: T::Err| invariant(path, format!("${name}: {e}")))?;
                *self = Value::Lit(v);
            }
        }
        Ok(())
    }
}

impl<T: fmt::Display> fmt::Display for Value<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Var(v) => write!(f, "${v}"),
            Value::Lit(v) => v.fmt(f),
        }
    }
}

impl<T: fmt::Display> Serialize for Value<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de, T: FromStr> Deserialize<'de> for Value<T>
where
    T::Err: fmt::Display,
{
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Value::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// `command` accepts a whitespace-separated string or a list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Command(pub Vec<String>);

impl Serialize for Command {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Command {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Line(String),
            Argv(Vec<String>),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Line(s) => Command(s.split_whitespace().map(str::to_string).collect()),
            Raw::Argv(v) => Command(v),
        })
    }
}

/// Export targets: one policy name or a list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Exports(pub Vec<String>);

impl Exports {
    pub fn contains(&self, policy: &str) -> bool {
        self.0.iter().any(|p| p == policy)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for Exports {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Exports {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(String),
            Many(Vec<String>),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::One(s) => Exports(vec![s]),
            Raw::Many(v) => Exports(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Combination {
    pub mrenclave: Value<Measurement>,
    pub fspf_tag: Value<VolumeTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_name: Option<String>,
    pub command: Command,
    #[serde(default, alias = "env", skip_serializing_if = "BTreeMap::is_empty")]
    pub environment: BTreeMap<String, String>,
    pub mrenclaves: Vec<Value<Measurement>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub platforms: Vec<Value<PlatformId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pwd: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fspf_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fspf_key: Option<Value<KeyMaterial>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fspf_tag: Option<Value<VolumeTag>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injection_files: Vec<String>,
    /// Restart requires the previous run to have pushed its tags at exit.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub strict: bool,
    /// Permitted (mrenclave, root tag) pairs when running an imported image.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub combinations: Vec<Combination>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMount {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volumes: Vec<VolumeMount>,
    /// Key of the image's root file system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fspf_key: Option<Value<KeyMaterial>>,
    /// (mrenclave, root tag) pairs this image vouches for.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub combinations: Vec<Combination>,
    #[serde(default, skip_serializing_if = "Exports::is_empty")]
    pub export: Exports,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSpec {
    pub name: String,
    /// Generated at activation when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fspf_key: Option<Value<KeyMaterial>>,
    /// Setting or changing this resets the expected tag of the volume.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fspf_tag: Option<Value<VolumeTag>>,
    #[serde(default, skip_serializing_if = "Exports::is_empty")]
    pub export: Exports,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecretKind {
    Explicit,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretSpec {
    pub name: String,
    pub kind: SecretKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    /// Length in bytes of a generated secret; delivered hex-encoded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Exports::is_empty")]
    pub export: Exports,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportSpec {
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ImportKind {
    Secret,
    Volume,
    Image,
}

impl ImportSpec {
    pub fn item(&self) -> Option<(ImportKind, &str)> {
        match (&self.secret, &self.volume, &self.image) {
            (Some(s), None, None) => Some((ImportKind::Secret, s)),
            (None, Some(v), None) => Some((ImportKind::Volume, v)),
            (None, None, Some(i)) => Some((ImportKind::Image, i)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardMember {
    pub name: String,
    /// The member's Ed25519 verification key, hex.
    pub certificate: PublicKey,
    #[serde(alias = "approval_url")]
    pub url: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub veto: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBoard {
    pub members: Vec<BoardMember>,
    /// Number of approvals required (f + 1 for f faulty members).
    pub threshold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

impl PolicyBoard {
    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_millis(self.timeout_ms.unwrap_or(DEFAULT_BOARD_TIMEOUT_MS))
    }

    pub fn member(&self, name: &str) -> Option<&BoardMember> {
        self.members.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub services: Vec<ServiceSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volumes: Vec<VolumeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub secrets: Vec<SecretSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub imports: Vec<ImportSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub board: Option<PolicyBoard>,
}

/// Parses and validates a YAML policy. `$NAME` references are retained.
pub fn parse_policy(text: &str) -> Result<PolicyDocument, PolicyError> {
    let meaningful = text
        .lines()
        .any(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#') && l.trim() != "---");
    if !meaningful {
        return Err(PolicyError::Syntax {
            line: 1,
            message: "empty document".into(),
        });
    }
    let doc: PolicyDocument = serde_yaml::from_str(text).map_err(|e| PolicyError::Syntax {
        line: e.location().map_or(1, |l| l.line()),
        message: e.to_string(),
    })?;
    doc.validate()?;
    Ok(doc)
}

impl PolicyDocument {
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("policy serializes")
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn image(&self, name: &str) -> Option<&ImageSpec> {
        self.images.iter().find(|i| i.name == name)
    }

    pub fn volume(&self, name: &str) -> Option<&VolumeSpec> {
        self.volumes.iter().find(|v| v.name == name)
    }

    pub fn secret(&self, name: &str) -> Option<&SecretSpec> {
        self.secrets.iter().find(|s| s.name == name)
    }

    pub fn imports_of(&self, kind: ImportKind) -> impl Iterator<Item = (&str, &str)> {
        self.imports.iter().filter_map(move |i| match i.item() {
            Some((k, item)) if k == kind => Some((i.policy.as_str(), item)),
            _ => None,
        })
    }

    /// Policies this document imports from.
    pub fn import_sources(&self) -> BTreeSet<&str> {
        self.imports.iter().map(|i| i.policy.as_str()).collect()
    }

    /// Names of secrets visible to services: own and imported.
    pub fn visible_secret_names(&self) -> BTreeSet<&str> {
        self.secrets
            .iter()
            .map(|s| s.name.as_str())
            .chain(self.imports_of(ImportKind::Secret).map(|(_, n)| n))
            .collect()
    }

    /// Checks structural invariants. Variable references are allowed.
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !is_identifier(&self.name) {
            return Err(invariant("name", "must be a non-empty identifier [A-Za-z0-9_.-]"));
        }

        check_unique("services", self.services.iter().map(|s| s.name.as_str()))?;
        check_unique("images", self.images.iter().map(|s| s.name.as_str()))?;
        check_unique(
            "volumes",
            self.volumes
                .iter()
                .map(|s| s.name.as_str())
                .chain(self.imports_of(ImportKind::Volume).map(|(_, n)| n)),
        )?;
        check_unique(
            "secrets",
            self.secrets
                .iter()
                .map(|s| s.name.as_str())
                .chain(self.imports_of(ImportKind::Secret).map(|(_, n)| n)),
        )?;

        for (i, imp) in self.imports.iter().enumerate() {
            let path = format!("imports[{i}]");
            if imp.item().is_none() {
                return Err(invariant(path, "exactly one of secret, volume or image is required"));
            }
            if imp.policy == self.name {
                return Err(invariant(path, "a policy cannot import from itself"));
            }
            if !is_identifier(&imp.policy) {
                return Err(invariant(format!("{path}.policy"), "invalid policy name"));
            }
        }

        let local_volumes: BTreeSet<&str> = self
            .volumes
            .iter()
            .map(|v| v.name.as_str())
            .chain(self.imports_of(ImportKind::Volume).map(|(_, n)| n))
            .collect();
        for (i, img) in self.images.iter().enumerate() {
            for (j, m) in img.volumes.iter().enumerate() {
                let path = format!("images[{i}].volumes[{j}]");
                if !local_volumes.contains(m.name.as_str()) {
                    return Err(invariant(path, format!("unknown volume {:?}", m.name)));
                }
                if !m.path.starts_with('/') {
                    return Err(invariant(format!("{path}.path"), "mount path must be absolute"));
                }
            }
            check_targets(&format!("images[{i}].export"), &img.export, &self.name)?;
        }
        for (i, v) in self.volumes.iter().enumerate() {
            check_targets(&format!("volumes[{i}].export"), &v.export, &self.name)?;
        }

        for (i, s) in self.secrets.iter().enumerate() {
            let path = format!("secrets[{i}]");
            if !is_identifier(&s.name) {
                return Err(invariant(format!("{path}.name"), "invalid secret name"));
            }
            match (s.kind, &s.value, s.size) {
                (SecretKind::Explicit, Some(_), None) => {}
                (SecretKind::Explicit, _, _) => {
                    return Err(invariant(path, "explicit secrets need a value and no size"))
                }
                (SecretKind::Generated, None, Some(n)) if (1..=MAX_GENERATED_SECRET_LEN).contains(&n) => {}
                (SecretKind::Generated, _, _) => {
                    return Err(invariant(
                        path,
                        format!("generated secrets need a size in 1..={MAX_GENERATED_SECRET_LEN} and no value"),
                    ))
                }
            }
            check_targets(&format!("{path}.export"), &s.export, &self.name)?;
        }

        let images: BTreeSet<&str> = self
            .images
            .iter()
            .map(|i| i.name.as_str())
            .chain(self.imports_of(ImportKind::Image).map(|(_, n)| n))
            .collect();
        let secrets = self.visible_secret_names();
        for (i, svc) in self.services.iter().enumerate() {
            let path = format!("services[{i}]");
            if !is_identifier(&svc.name) {
                return Err(invariant(format!("{path}.name"), "invalid service name"));
            }
            if svc.command.0.is_empty() {
                return Err(invariant(format!("{path}.command"), "must not be empty"));
            }
            if svc.mrenclaves.is_empty() {
                return Err(invariant(format!("{path}.mrenclaves"), "must not be empty"));
            }
            if let Some(img) = &svc.image_name {
                if !images.contains(img.as_str()) {
                    return Err(invariant(format!("{path}.image_name"), format!("unknown image {img:?}")));
                }
            }
            if svc.fspf_tag.is_some() && svc.fspf_key.is_none() {
                return Err(invariant(format!("{path}.fspf_tag"), "requires fspf_key"));
            }
            let referenced = svc
                .command
                .0
                .iter()
                .chain(svc.environment.values())
                .flat_map(|s| referenced_variables(s.as_bytes()));
            for name in referenced {
                if !secrets.contains(name.as_str()) {
                    return Err(invariant(path.clone(), format!("references undefined secret {name:?}")));
                }
            }
            for (j, f) in svc.injection_files.iter().enumerate() {
                if !f.starts_with('/') {
                    return Err(invariant(format!("{path}.injection_files[{j}]"), "path must be absolute"));
                }
            }
        }

        if let Some(board) = &self.board {
            if board.members.is_empty() {
                return Err(invariant("board.members", "a board needs at least one member"));
            }
            if board.threshold < 1 || board.threshold > board.members.len() {
                return Err(invariant(
                    "board.threshold",
                    format!("must satisfy 1 <= threshold <= {}", board.members.len()),
                ));
            }
            check_unique("board.members", board.members.iter().map(|m| m.name.as_str()))?;
            let keys: BTreeSet<_> = board.members.iter().map(|m| m.certificate).collect();
            if keys.len() != board.members.len() {
                return Err(invariant("board.members", "duplicate member certificate"));
            }
        }
        Ok(())
    }

    /// Names of all `$NAME` references still unresolved.
    pub fn unresolved_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut add = |v: Option<&str>| {
            if let Some(v) = v {
                out.insert(v.to_string());
            }
        };
        for s in &self.services {
            s.mrenclaves.iter().for_each(|m| add(m.var()));
            s.platforms.iter().for_each(|p| add(p.var()));
            add(s.fspf_key.as_ref().and_then(Value::var));
            add(s.fspf_tag.as_ref().and_then(Value::var));
            for c in &s.combinations {
                add(c.mrenclave.var());
                add(c.fspf_tag.var());
            }
        }
        for i in &self.images {
            add(i.fspf_key.as_ref().and_then(Value::var));
            for c in &i.combinations {
                add(c.mrenclave.var());
                add(c.fspf_tag.var());
            }
        }
        for v in &self.volumes {
            add(v.fspf_key.as_ref().and_then(Value::var));
            add(v.fspf_tag.as_ref().and_then(Value::var));
        }
        out
    }

    pub fn is_resolved(&self) -> bool {
        self.unresolved_vars().is_empty()
    }

    /// Substitutes `$NAME` references from `vars`. References without a
    /// binding stay symbolic.
    pub fn resolve(&self, vars: &BTreeMap<String, String>) -> Result<PolicyDocument, PolicyError> {
        let mut doc = self.clone();
        for (i, s) in doc.services.iter_mut().enumerate() {
            let p = format!("services[{i}]");
            for m in &mut s.mrenclaves {
                m.resolve(vars, &format!("{p}.mrenclaves"))?;
            }
            for pl in &mut s.platforms {
                pl.resolve(vars, &format!("{p}.platforms"))?;
            }
            if let Some(k) = &mut s.fspf_key {
                k.resolve(vars, &format!("{p}.fspf_key"))?;
            }
            if let Some(t) = &mut s.fspf_tag {
                t.resolve(vars, &format!("{p}.fspf_tag"))?;
            }
            for c in &mut s.combinations {
                c.mrenclave.resolve(vars, &format!("{p}.combinations"))?;
                c.fspf_tag.resolve(vars, &format!("{p}.combinations"))?;
            }
        }
        for (i, img) in doc.images.iter_mut().enumerate() {
            let p = format!("images[{i}]");
            if let Some(k) = &mut img.fspf_key {
                k.resolve(vars, &format!("{p}.fspf_key"))?;
            }
            for c in &mut img.combinations {
                c.mrenclave.resolve(vars, &format!("{p}.combinations"))?;
                c.fspf_tag.resolve(vars, &format!("{p}.combinations"))?;
            }
        }
        for (i, v) in doc.volumes.iter_mut().enumerate() {
            let p = format!("volumes[{i}]");
            if let Some(k) = &mut v.fspf_key {
                k.resolve(vars, &format!("{p}.fspf_key"))?;
            }
            if let Some(t) = &mut v.fspf_tag {
                t.resolve(vars, &format!("{p}.fspf_tag"))?;
            }
        }
        Ok(doc)
    }

    /// Like [`resolve`](Self::resolve) but fails if any reference remains.
    pub fn resolve_all(&self, vars: &BTreeMap<String, String>) -> Result<PolicyDocument, PolicyError> {
        let doc = self.resolve(vars)?;
        let missing = doc.unresolved_vars();
        if missing.is_empty() {
            Ok(doc)
        } else {
            Err(PolicyError::Unresolved(missing))
        }
    }

    /// Copy with explicit secret values removed.
    pub fn redacted(&self) -> PolicyDocument {
        let mut doc = self.clone();
        for s in &mut doc.secrets {
            if s.value.is_some() {
                s.value = Some("<redacted>".into());
            }
        }
        for s in &mut doc.services {
            if s.fspf_key.is_some() {
                s.fspf_key = Some(Value::Var("REDACTED".into()));
            }
        }
        for i in &mut doc.images {
            if i.fspf_key.is_some() {
                i.fspf_key = Some(Value::Var("REDACTED".into()));
            }
        }
        for v in &mut doc.volumes {
            if v.fspf_key.is_some() {
                v.fspf_key = Some(Value::Var("REDACTED".into()));
            }
        }
        doc
    }
}

fn check_unique<'a>(path: &str, names: impl Iterator<Item = &'a str>) -> Result<(), PolicyError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(invariant(path, format!("duplicate name {n:?}")));
        }
    }
    Ok(())
}

fn check_targets(path: &str, exports: &Exports, own: &str) -> Result<(), PolicyError> {
    for t in &exports.0 {
        if !is_identifier(t) {
            return Err(invariant(path, format!("invalid export target {t:?}")));
        }
        if t == own {
            return Err(invariant(path, "a policy cannot export to itself"));
        }
    }
    Ok(())
}

impl ServiceSpec {
    pub fn mrenclaves_resolved(&self) -> impl Iterator<Item = &Measurement> {
        self.mrenclaves.iter().filter_map(Value::lit)
    }

    /// Empty means any platform.
    pub fn platform_permitted(&self, platform: &PlatformId) -> bool {
        self.platforms.is_empty() || self.platforms.iter().any(|p| p.lit() == Some(platform))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const PYTHON_POLICY: &str = include_str!("../../../../fixtures/python_policy.yaml");

    #[test]
    fn python_policy_example_parses() {
        let doc = parse_policy(PYTHON_POLICY).unwrap();
        assert_eq!(doc.name, "python_policy");
        let svc = doc.service("python_app").unwrap();
        assert_eq!(svc.command.0, ["python", "/app.py", "-o", "/encrypted-output"]);
        assert_eq!(svc.image_name.as_deref(), Some("python_image"));
        assert_eq!(svc.mrenclaves, vec![Value::Var("PYTHON_MRENCLAVE".into())]);
        assert_eq!(svc.pwd.as_deref(), Some("/"));
        assert_eq!(svc.fspf_path.as_deref(), Some("/fspf.pb"));
        let vol = doc.volume("encrypted_output_volume").unwrap();
        assert_eq!(vol.export.0, ["output_policy"]);
        let img = doc.image("python_image").unwrap();
        assert_eq!(img.volumes[0].path, "/encrypted-output");
        assert_eq!(
            doc.unresolved_vars().into_iter().collect::<Vec<_>>(),
            ["FSPF_KEY", "FSPF_TAG", "PLATFORM_ID", "PYTHON_MRENCLAVE"]
        );
    }

    #[test]
    fn resolution_substitutes_and_reports_missing() {
        let doc = parse_policy(PYTHON_POLICY).unwrap();
        let mre = crate::tee::measure(b"python");
        let vars: BTreeMap<String, String> = [("PYTHON_MRENCLAVE".to_string(), mre.to_string())].into();
        let partial = doc.resolve(&vars).unwrap();
        assert_eq!(partial.services[0].mrenclaves, vec![Value::Lit(mre)]);
        match doc.resolve_all(&vars) {
            Err(PolicyError::Unresolved(m)) => assert_eq!(m.len(), 3),
            other => panic!("{other:?}"),
        }
        let bad: BTreeMap<String, String> = [("PYTHON_MRENCLAVE".to_string(), "zz".to_string())].into();
        assert!(matches!(doc.resolve(&bad), Err(PolicyError::Invariant { .. })));
    }

    #[test]
    fn empty_document_is_syntax_error() {
        for text in ["", "   \n", "# only a comment\n", "---\n"] {
            assert!(matches!(parse_policy(text), Err(PolicyError::Syntax { line: 1, .. })), "{text:?}");
        }
    }

    #[test]
    fn syntax_error_carries_line() {
        let text = "name: p\nservices:\n  - name: a\n    command: [unclosed\n";
        match parse_policy(text) {
            Err(PolicyError::Syntax { line, .. }) => assert!(line >= 4, "line {line}"),
            other => panic!("{other:?}"),
        }
    }

    fn board_yaml(threshold: usize) -> String {
        let k = crate::crypto::SigningKeyPair::generate(&crate::crypto::SeededEntropy::new(1)).public_key();
        format!(
            "name: p\nboard:\n  threshold: {threshold}\n  members:\n    - name: m1\n      certificate: {k}\n      url: http://localhost:1/approve\n"
        )
    }

    #[test]
    fn threshold_bounds() {
        assert!(parse_policy(&board_yaml(1)).is_ok());
        for t in [0, 2] {
            match parse_policy(&board_yaml(t)) {
                Err(PolicyError::Invariant { path, .. }) => assert_eq!(path, "board.threshold"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn service_invariants() {
        let base = "name: p\nservices:\n  - name: s\n    command: run\n    mrenclaves: []\n";
        assert!(matches!(parse_policy(base), Err(PolicyError::Invariant { path, .. }) if path == "services[0].mrenclaves"));
        let undefined = "name: p\nservices:\n  - name: s\n    command: run --pw $$pw$$\n    mrenclaves: [$M]\n";
        assert!(matches!(parse_policy(undefined), Err(PolicyError::Invariant { .. })));
        let defined = format!("{undefined}secrets:\n  - name: pw\n    kind: generated\n    size: 16\n");
        assert!(parse_policy(&defined).is_ok());
        let unknown = "name: p\nbogus: 1\n";
        assert!(matches!(parse_policy(unknown), Err(PolicyError::Syntax { .. })));
    }

    #[test]
    fn yaml_round_trip() {
        let doc = parse_policy(PYTHON_POLICY).unwrap();
        assert_eq!(parse_policy(&doc.to_yaml()).unwrap(), doc);
    }
}
