//! Small deterministic datasets with precomputed oracle values.
//!
//! Fixtures live as versioned JSON files under `fixtures/` and are compiled
//! into the crate. Each oracle carries a provenance note naming the
//! independent computation (closed form, exact rational arithmetic or
//! enumeration) it came from.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Sample, SpdMatrix};

/// Fixture file format understood by [`load`].
pub const FORMAT_VERSION: u32 = 1;

const SOURCES: &[(&str, &str)] = &[
    ("cross4", include_str!("../fixtures/cross4.json")),
    ("outlier1d", include_str!("../fixtures/outlier1d.json")),
    ("six2d", include_str!("../fixtures/six2d.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleValue {
    Matrix { value: Vec<Vec<f64>> },
    Scalar { value: f64 },
    Subset { value: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    #[serde(flatten)]
    pub value: OracleValue,
    pub provenance: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    format_version: u32,
    name: String,
    description: String,
    rows: Vec<Vec<f64>>,
    oracles: BTreeMap<String, Oracle>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub description: String,
    pub sample: Sample,
    pub oracles: BTreeMap<String, Oracle>,
}

impl Fixture {
    fn oracle(&self, key: &str) -> Result<&OracleValue> {
        self.oracles
            .get(key)
            .map(|o| &o.value)
            .ok_or_else(|| Error::InvalidInput(format!("fixture {:?} has no oracle {key:?}", self.name)))
    }

    pub fn matrix(&self, key: &str) -> Result<SpdMatrix> {
        match self.oracle(key)? {
            OracleValue::Matrix { value } => {
                let p = value.len();
                if value.iter().any(|r| r.len() != p) {
                    return Err(Error::InvalidInput(format!("oracle {key:?} is not square")));
                }
                SpdMatrix::new(DMatrix::from_fn(p, p, |i, j| value[i][j]))
            }
            _ => Err(Error::InvalidInput(format!("oracle {key:?} is not a matrix"))),
        }
    }

    pub fn scalar(&self, key: &str) -> Result<f64> {
        match self.oracle(key)? {
            OracleValue::Scalar { value } => Ok(*value),
            _ => Err(Error::InvalidInput(format!("oracle {key:?} is not a scalar"))),
        }
    }

    pub fn subset(&self, key: &str) -> Result<Vec<usize>> {
        match self.oracle(key)? {
            OracleValue::Subset { value } => Ok(value.clone()),
            _ => Err(Error::InvalidInput(format!("oracle {key:?} is not a subset"))),
        }
    }
}

/// Names of all registered fixtures.
pub fn names() -> Vec<&'static str> {
    SOURCES.iter().map(|(n, _)| *n).collect()
}

pub fn load(name: &str) -> Result<Fixture> {
    let (_, text) =
        SOURCES.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::UnknownFixture(name.to_string()))?;
    let file: FixtureFile = serde_json::from_str(text)
        .map_err(|e| Error::InvalidInput(format!("fixture {name:?} is malformed: {e}")))?;
    if file.format_version != FORMAT_VERSION || file.name != name {
        return Err(Error::InvalidInput(format!("fixture {name:?} has an unexpected header")));
    }
    Ok(Fixture {
        name: file.name,
        description: file.description,
        sample: Sample::from_rows(&file.rows)?,
        oracles: file.oracles,
    })
}
