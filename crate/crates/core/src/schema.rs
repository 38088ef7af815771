//! Attribute schema: the named values available in each attribute dimension.
//!
//! Value names live in a text document so cardinalities are data. The
//! reference layout (six dimensions with 8/6/12/31/4/3 values, the first two
//! mandatory) is enforced by [`AttributeSchema::validate_reference`].

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DIMENSION_NAMES: [&str; 6] = ["orientation", "truncation", "sport", "motion", "viewpoint", "state"];
pub const REFERENCE_CARDINALITIES: [usize; 6] = [8, 6, 12, 31, 4, 3];
const MANDATORY: [bool; 6] = [true, true, false, false, false, false];

const DEFAULT_SCHEMA: &str = include_str!("../data/person_attributes.schema");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dimension {
    pub name: String,
    pub mandatory: bool,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    dims: Vec<Dimension>,
    source: String,
}

impl AttributeSchema {
    /// Parses and validates a schema document.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dims = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, values) = line
                .split_once(':')
                .ok_or_else(|| Error::Schema(format!("line {}: missing ':'", lineno + 1)))?;
            let mut head = head.split_whitespace();
            let name = head
                .next()
                .ok_or_else(|| Error::Schema(format!("line {}: missing dimension name", lineno + 1)))?;
            let mandatory = match head.next() {
                Some("mandatory") => true,
                Some("optional") => false,
                other => {
                    return Err(Error::Schema(format!(
                        "line {}: expected mandatory|optional, got {other:?}",
                        lineno + 1
                    )))
                }
            };
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            let mut seen = std::collections::HashSet::new();
            for v in &values {
                if v == "unspecified" {
                    return Err(Error::Schema(format!("{name}: 'unspecified' is implicit")));
                }
                if !seen.insert(v) {
                    return Err(Error::Schema(format!("{name}: duplicate value '{v}'")));
                }
            }
            dims.push(Dimension {
                name: name.to_string(),
                mandatory,
                values,
            });
        }
        let schema = Self {
            dims,
            source: text.to_string(),
        };
        schema.validate_reference()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The bundled `person` schema.
    pub fn person() -> Self {
        Self::parse(DEFAULT_SCHEMA).expect("bundled schema is valid")
    }

    pub fn validate_reference(&self) -> Result<()> {
        if self.dims.len() != DIMENSION_NAMES.len() {
            return Err(Error::Schema(format!(
                "expected {} dimensions, found {}",
                DIMENSION_NAMES.len(),
                self.dims.len()
            )));
        }
        for (i, dim) in self.dims.iter().enumerate() {
            if dim.name != DIMENSION_NAMES[i] {
                return Err(Error::Schema(format!(
                    "dimension {i} should be '{}', found '{}'",
                    DIMENSION_NAMES[i], dim.name
                )));
            }
            if dim.values.len() != REFERENCE_CARDINALITIES[i] {
                return Err(Error::Schema(format!(
                    "dimension '{}' has {} values, expected {}",
                    dim.name,
                    dim.values.len(),
                    REFERENCE_CARDINALITIES[i]
                )));
            }
            if dim.mandatory != MANDATORY[i] {
                return Err(Error::Schema(format!(
                    "dimension '{}' mandatory flag should be {}",
                    dim.name, MANDATORY[i]
                )));
            }
        }
        Ok(())
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn cardinality(&self, dim: usize) -> usize {
        self.dims[dim].values.len()
    }

    pub fn value_name(&self, dim: usize, value: Option<u8>) -> &str {
        match value {
            Some(v) => &self.dims[dim].values[v as usize],
            None => "unspecified",
        }
    }

    /// Hex SHA-256 of the schema document; recorded in manifests and checkpoints.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }
}
