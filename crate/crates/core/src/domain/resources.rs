//! Resource request strings such as `memory=4G,gpu=4,vcores=4`.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Compute resources of one task instance or one node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ResourceSpec {
    pub vcores: u32,
    pub gpu: u32,
    pub memory_mib: u64,
}

/// Result of parsing a resource string: the resources plus an optional
/// inline `replicas=` count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceRequest {
    pub resources: ResourceSpec,
    pub replicas: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("resource string is empty")]
    EmptySpec,
    #[error("unknown resource key `{0}`")]
    UnknownKey(String),
    #[error("malformed pair `{0}`, expected key=value")]
    MalformedPair(String),
    #[error("unknown memory unit in `{0}`, expected K, M or G")]
    UnknownUnit(String),
    #[error("negative value for `{0}`")]
    NegativeValue(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("invalid number `{value}` for `{key}`")]
    InvalidNumber { key: String, value: String },
}

impl ResourceError {
    /// Variant name, used as a machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ResourceError::EmptySpec => "EmptySpec",
            ResourceError::UnknownKey(_) => "UnknownKey",
            ResourceError::MalformedPair(_) => "MalformedPair",
            ResourceError::UnknownUnit(_) => "UnknownUnit",
            ResourceError::NegativeValue(_) => "NegativeValue",
            ResourceError::DuplicateKey(_) => "DuplicateKey",
            ResourceError::InvalidNumber { .. } => "InvalidNumber",
        }
    }
}

impl ResourceSpec {
    pub const ZERO: ResourceSpec = ResourceSpec { vcores: 0, gpu: 0, memory_mib: 0 };

    pub fn new(vcores: u32, gpu: u32, memory_mib: u64) -> Self {
        ResourceSpec { vcores, gpu, memory_mib }
    }

    /// Field-wise `self <= other`.
    pub fn fits_within(&self, other: &ResourceSpec) -> bool {
        self.vcores <= other.vcores && self.gpu <= other.gpu && self.memory_mib <= other.memory_mib
    }

    pub fn checked_add(&self, other: &ResourceSpec) -> Option<ResourceSpec> {
        Some(ResourceSpec {
            vcores: self.vcores.checked_add(other.vcores)?,
            gpu: self.gpu.checked_add(other.gpu)?,
            memory_mib: self.memory_mib.checked_add(other.memory_mib)?,
        })
    }

    pub fn checked_sub(&self, other: &ResourceSpec) -> Option<ResourceSpec> {
        Some(ResourceSpec {
            vcores: self.vcores.checked_sub(other.vcores)?,
            gpu: self.gpu.checked_sub(other.gpu)?,
            memory_mib: self.memory_mib.checked_sub(other.memory_mib)?,
        })
    }

    pub fn checked_mul(&self, factor: u32) -> Option<ResourceSpec> {
        Some(ResourceSpec {
            vcores: self.vcores.checked_mul(factor)?,
            gpu: self.gpu.checked_mul(factor)?,
            memory_mib: self.memory_mib.checked_mul(u64::from(factor))?,
        })
    }

    pub fn is_zero(&self) -> bool {
        *self == ResourceSpec::ZERO
    }
}

impl Add for ResourceSpec {
    type Output = ResourceSpec;

    fn add(self, rhs: ResourceSpec) -> ResourceSpec {
        self.checked_add(&rhs).expect("resource addition overflowed")
    }
}

impl Sub for ResourceSpec {
    type Output = ResourceSpec;

    fn sub(self, rhs: ResourceSpec) -> ResourceSpec {
        self.checked_sub(&rhs).expect("resource subtraction underflowed")
    }
}

/// Canonical form: `cpu=<n>,gpu=<n>,memory=<m>M`.
impl fmt::Display for ResourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cpu={},gpu={},memory={}M", self.vcores, self.gpu, self.memory_mib)
    }
}

pub fn format_resource_string(r: &ResourceSpec) -> String {
    r.to_string()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Key {
    Cpu,
    Gpu,
    Memory,
    Replicas,
}

/// Parses a comma separated `key=value` list.
///
/// `cpu` and `vcores` are aliases. Memory takes an optional `K`, `M` or `G`
/// suffix (binary units); a bare number is MiB and KiB amounts round up to
/// whole MiB. Whitespace around keys and values is ignored, so multi-line
/// strings like `"cpu=2,\n memory=2G"` are accepted.
pub fn parse_resource_string(s: &str) -> Result<ResourceRequest, ResourceError> {
    if s.trim().is_empty() {
        return Err(ResourceError::EmptySpec);
    }
    let mut resources = ResourceSpec::ZERO;
    let mut replicas = None;
    let mut seen: Vec<Key> = Vec::with_capacity(4);

    for pair in s.split(',') {
        let Some((raw_key, raw_value)) = pair.split_once('=') else {
            return Err(ResourceError::MalformedPair(pair.trim().to_string()));
        };
        let key_name = raw_key.trim();
        let value = raw_value.trim();
        if key_name.is_empty() {
            return Err(ResourceError::MalformedPair(pair.trim().to_string()));
        }
        let key = match key_name {
            "cpu" | "vcores" => Key::Cpu,
            "gpu" => Key::Gpu,
            "memory" => Key::Memory,
            "replicas" => Key::Replicas,
            other => return Err(ResourceError::UnknownKey(other.to_string())),
        };
        if seen.contains(&key) {
            return Err(ResourceError::DuplicateKey(key_name.to_string()));
        }
        seen.push(key);
        if value.starts_with('-') {
            return Err(ResourceError::NegativeValue(key_name.to_string()));
        }
        match key {
            Key::Cpu => resources.vcores = parse_count(key_name, value)?,
            Key::Gpu => resources.gpu = parse_count(key_name, value)?,
            Key::Replicas => replicas = Some(parse_count(key_name, value)?),
            Key::Memory => resources.memory_mib = parse_memory(value)?,
        }
    }
    Ok(ResourceRequest { resources, replicas })
}

fn invalid(key: &str, value: &str) -> ResourceError {
    ResourceError::InvalidNumber { key: key.to_string(), value: value.to_string() }
}

fn parse_count(key: &str, value: &str) -> Result<u32, ResourceError> {
    if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
        return Err(invalid(key, value));
    }
    value.parse().map_err(|_| invalid(key, value))
}

fn parse_memory(value: &str) -> Result<u64, ResourceError> {
    let split = value.find(|c: char| !c.is_ascii_digit()).unwrap_or(value.len());
    let (digits, unit) = value.split_at(split);
    if digits.is_empty() {
        return Err(invalid("memory", value));
    }
    let amount: u64 = digits.parse().map_err(|_| invalid("memory", value))?;
    let mib = match unit {
        "" | "M" | "m" => Some(amount),
        "G" | "g" => amount.checked_mul(1024),
        "K" | "k" => Some(amount.div_ceil(1024)),
        _ => return Err(ResourceError::UnknownUnit(value.to_string())),
    };
    mib.ok_or_else(|| invalid("memory", value))
}

impl Serialize for ResourceSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Deserializes from a resource string; an inline `replicas=` is rejected
/// here because a bare `ResourceSpec` has nowhere to put it.
impl<'de> Deserialize<'de> for ResourceSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        let req = parse_resource_string(&raw).map_err(serde::de::Error::custom)?;
        if req.replicas.is_some() {
            return Err(serde::de::Error::custom(ResourceError::UnknownKey("replicas".into())));
        }
        Ok(req.resources)
    }
}
