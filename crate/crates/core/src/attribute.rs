//! Continuous attributes: their domains, concrete settings and the registry
//! that ties attribute names to everything else (templates, mappers, data).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named continuous control, e.g. `wing` over `[0, 90]` degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(rename = "min")]
    pub domain_min: f64,
    #[serde(rename = "max")]
    pub domain_max: f64,
    #[serde(default)]
    pub periodic: bool,
    #[serde(rename = "grid_size", default = "default_grid_size")]
    pub default_grid_size: usize,
}

fn default_grid_size() -> usize {
    18
}

/// Attribute names share the placeholder grammar `<attr:NAME>`.
pub fn is_valid_attribute_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, domain_min: f64, domain_max: f64) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            domain_min,
            domain_max,
            periodic: false,
            default_grid_size: default_grid_size(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn periodic(mut self, periodic: bool) -> Self {
        self.periodic = periodic;
        self
    }

    pub fn with_grid_size(mut self, n: usize) -> Self {
        self.default_grid_size = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !is_valid_attribute_name(&self.name) {
            return Err(Error::Config(format!(
                "attribute name `{}` must match [A-Za-z_][A-Za-z0-9_-]*",
                self.name
            )));
        }
        if !(self.domain_min.is_finite() && self.domain_max.is_finite())
            || self.domain_min >= self.domain_max
        {
            return Err(Error::Config(format!(
                "attribute `{}` needs finite min < max, got [{}, {}]",
                self.name, self.domain_min, self.domain_max
            )));
        }
        if self.default_grid_size < 2 {
            return Err(Error::Config(format!(
                "attribute `{}` grid size must be at least 2",
                self.name
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.domain_max - self.domain_min
    }

    /// Wraps periodic values into `[min, max)`; checks non-periodic values
    /// against the closed domain.
    pub fn resolve(&self, value: f64) -> Result<f64> {
        if !value.is_finite() {
            return Err(self.violation(value));
        }
        if self.periodic {
            let wrapped = self.domain_min + (value - self.domain_min).rem_euclid(self.range());
            // rem_euclid can round up to exactly `range` for tiny negative offsets
            Ok(if wrapped >= self.domain_max {
                self.domain_min
            } else {
                wrapped
            })
        } else if value < self.domain_min || value > self.domain_max {
            Err(self.violation(value))
        } else {
            Ok(value)
        }
    }

    fn violation(&self, value: f64) -> Error {
        Error::DomainViolation {
            name: self.name.clone(),
            value,
            min: self.domain_min,
            max: self.domain_max,
        }
    }
}

/// Maps an attribute value to `[0, 1]`.
pub fn normalize(spec: &AttributeSpec, value: f64) -> Result<f64> {
    let v = spec.resolve(value)?;
    Ok(((v - spec.domain_min) / spec.range()).clamp(0.0, 1.0))
}

pub fn denormalize(spec: &AttributeSpec, unit: f64) -> f64 {
    spec.domain_min + unit * spec.range()
}

/// A concrete setting of some attributes, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeValue {
    pub assignments: BTreeMap<String, f64>,
}

impl AttributeValue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: f64) -> Self {
        self.assignments.insert(name.into(), value);
        self
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) {
        self.assignments.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.assignments.get(name).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.assignments.keys().map(String::as_str)
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for AttributeValue {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        Self {
            assignments: iter.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

/// Ordered set of attribute specs with unique names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeRegistry {
    specs: Vec<AttributeSpec>,
}

impl AttributeRegistry {
    pub fn new(specs: Vec<AttributeSpec>) -> Result<Self> {
        let mut registry = Self::default();
        for spec in specs {
            registry.register(spec)?;
        }
        Ok(registry)
    }

    pub fn register(&mut self, spec: AttributeSpec) -> Result<()> {
        spec.validate()?;
        if self.get(&spec.name).is_some() {
            return Err(Error::Config(format!(
                "attribute `{}` registered twice",
                spec.name
            )));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AttributeSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&AttributeSpec> {
        self.get(name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Checks every assignment is registered and in-domain, returning the
    /// values with periodic attributes wrapped.
    pub fn resolve(&self, values: &AttributeValue) -> Result<AttributeValue> {
        values
            .assignments
            .iter()
            .map(|(name, &v)| Ok((name.clone(), self.require(name)?.resolve(v)?)))
            .collect::<Result<BTreeMap<_, _>>>()
            .map(|assignments| AttributeValue { assignments })
    }
}
