//! Covariate datasets: schema, typed unit records, CSV ingestion and the
//! per-unit description block used inside prompts.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNIT_ID_COLUMN: &str = "unit_id";
pub const OUTCOME_COLUMN: &str = "outcome";
pub const TREATMENT_COLUMN: &str = "treatment";

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{raw}`")]
    TypeMismatch { row: usize, column: String, raw: String },
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("duplicate unit id `{0}`")]
    DuplicateUnitId(String),
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("row {row}: outcome and treatment must be present together")]
    IncompleteObservation { row: usize },
    #[error("row {row}, column `{column}`: text has {len} characters, limit is {limit}")]
    TextTooLong { row: usize, column: String, len: usize, limit: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{0}` is free text and cannot enter a numeric design")]
    TextCovariate(String),
    #[error("unit `{unit}` has no value for `{variable}`")]
    MissingUnitValue { unit: String, variable: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Categorical,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

/// Ordered covariate definitions. Order fixes prompt layout and feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub variables: Vec<Variable>,
    /// Upper bound on the character length of text covariates. Longer values
    /// are rejected at ingestion; no truncation policy is applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_max_chars: Option<usize>,
}

impl CovariateSchema {
    pub fn new(variables: Vec<Variable>) -> Result<Self, DataError> {
        let schema = CovariateSchema { variables, text_max_chars: None };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for v in &self.variables {
            if v.name.trim().is_empty() {
                return Err(DataError::InvalidSchema("variable names must be nonempty".into()));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(DataError::InvalidSchema(format!("duplicate variable `{}`", v.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    /// Names of all numeric and categorical variables, in schema order.
    pub fn design_variables(&self) -> Vec<String> {
        self.variables
            .iter()
            .filter(|v| v.kind != VariableKind::Text)
            .map(|v| v.name.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Label(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            Value::Label(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(x) => write!(f, "{x}"),
            Value::Label(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub outcome: f64,
    pub treated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    pub values: HashMap<String, Value>,
    pub observed: Option<Observation>,
}

impl UnitRecord {
    pub fn value(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: CovariateSchema,
    pub units: Vec<UnitRecord>,
}

impl Dataset {
    /// Builds a dataset after checking ids and that every unit covers the schema.
    pub fn new(schema: CovariateSchema, units: Vec<UnitRecord>) -> Result<Self, DataError> {
        schema.validate()?;
        if units.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut ids = HashSet::new();
        for u in &units {
            if !ids.insert(u.unit_id.as_str()) {
                return Err(DataError::DuplicateUnitId(u.unit_id.clone()));
            }
            for v in &schema.variables {
                if !u.values.contains_key(&v.name) {
                    return Err(DataError::MissingUnitValue {
                        unit: u.unit_id.clone(),
                        variable: v.name.clone(),
                    });
                }
            }
        }
        Ok(Dataset { schema, units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn has_observations(&self) -> bool {
        self.units.iter().all(|u| u.observed.is_some())
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.units.iter().map(|u| u.unit_id.clone()).collect()
    }

    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>, DataError> {
        let var = self.schema.get(name).ok_or_else(|| DataError::UnknownVariable(name.into()))?;
        if var.kind != VariableKind::Numeric {
            return Err(DataError::InvalidSchema(format!("`{name}` is not numeric")));
        }
        Ok(self
            .units
            .iter()
            .map(|u| u.values[name].as_f64().unwrap_or(f64::NAN))
            .collect())
    }

    /// Writes the dataset in the same layout `load_dataset` reads.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let with_obs = self.units.iter().any(|u| u.observed.is_some());
        let mut header = vec![UNIT_ID_COLUMN.to_string()];
        header.extend(self.schema.variables.iter().map(|v| v.name.clone()));
        if with_obs {
            header.push(OUTCOME_COLUMN.into());
            header.push(TREATMENT_COLUMN.into());
        }
        w.write_record(&header)?;
        for u in &self.units {
            let mut row = vec![u.unit_id.clone()];
            row.extend(self.schema.variables.iter().map(|v| u.values[&v.name].to_string()));
            if with_obs {
                match &u.observed {
                    Some(o) => {
                        row.push(o.outcome.to_string());
                        row.push(if o.treated { "1" } else { "0" }.into());
                    }
                    None => {
                        row.push(String::new());
                        row.push(String::new());
                    }
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_dataset(path: &Path, schema: &CovariateSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

/// Parses RFC 4180 CSV with a header row into a typed dataset.
pub fn read_dataset<R: Read>(reader: R, schema: &CovariateSchema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);

    let mut columns = Vec::with_capacity(schema.len());
    for v in &schema.variables {
        let idx = position(&v.name).ok_or_else(|| DataError::MissingColumn(v.name.clone()))?;
        columns.push((v, idx));
    }
    let id_col = position(UNIT_ID_COLUMN);
    let outcome_col = position(OUTCOME_COLUMN);
    let treatment_col = position(TREATMENT_COLUMN);
    match (outcome_col, treatment_col) {
        (Some(_), None) => return Err(DataError::MissingColumn(TREATMENT_COLUMN.into())),
        (None, Some(_)) => return Err(DataError::MissingColumn(OUTCOME_COLUMN.into())),
        _ => {}
    }

    let mut raw_rows = Vec::new();
    for record in rdr.records() {
        raw_rows.push(record?);
    }
    if raw_rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let width = (raw_rows.len() - 1).to_string().len();

    let mut units = Vec::with_capacity(raw_rows.len());
    for (i, record) in raw_rows.iter().enumerate() {
        let row = i + 1;
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        let unit_id = match id_col {
            Some(c) => cell(c).to_string(),
            None => format!("{i:0width$}"),
        };
        let mut values = HashMap::with_capacity(columns.len());
        for (var, idx) in &columns {
            let raw = cell(*idx);
            let value = match var.kind {
                VariableKind::Numeric => Value::Number(parse_number(raw, row, &var.name)?),
                VariableKind::Categorical => Value::Label(raw.to_string()),
                VariableKind::Text => {
                    if let Some(limit) = schema.text_max_chars {
                        let len = raw.chars().count();
                        if len > limit {
                            return Err(DataError::TextTooLong {
                                row,
                                column: var.name.clone(),
                                len,
                                limit,
                            });
                        }
                    }
                    Value::Label(raw.to_string())
                }
            };
            values.insert(var.name.clone(), value);
        }
        let observed = match (outcome_col, treatment_col) {
            (Some(oc), Some(tc)) => {
                let (o, t) = (cell(oc).trim(), cell(tc).trim());
                match (o.is_empty(), t.is_empty()) {
                    (true, true) => None,
                    (false, false) => {
                        let outcome = parse_number(o, row, OUTCOME_COLUMN)?;
                        let treated = match t {
                            "1" => true,
                            "0" => false,
                            other => {
                                return Err(DataError::TypeMismatch {
                                    row,
                                    column: TREATMENT_COLUMN.into(),
                                    raw: other.into(),
                                })
                            }
                        };
                        Some(Observation { outcome, treated })
                    }
                    _ => return Err(DataError::IncompleteObservation { row }),
                }
            }
            _ => None,
        };
        units.push(UnitRecord { unit_id, values, observed });
    }
    Dataset::new(schema.clone(), units)
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let t = raw.trim();
    if t.is_empty() {
        return Err(DataError::MissingValue { row, column: column.into() });
    }
    match t.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(DataError::TypeMismatch { row, column: column.into(), raw: raw.into() }),
    }
}

/// One `- name: value` line per schema variable, newlines inside values
/// flattened to single spaces.
pub fn render_unit_description(unit: &UnitRecord, schema: &CovariateSchema) -> String {
    schema
        .variables
        .iter()
        .map(|v| {
            let value = unit.values.get(&v.name).map(ToString::to_string).unwrap_or_default();
            format!("- {}: {}", v.name, flatten_newlines(&value))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn flatten_newlines(s: &str) -> String {
    if !s.contains(['\n', '\r']) {
        return s.to_string();
    }
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

/// Numeric design matrix built from a covariate subset. Categorical variables
/// are one-hot encoded with the lexicographically first level dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub n_rows: usize,
    /// Row-major, `n_rows * names.len()`.
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix { names, n_rows: rows.len(), data }
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_cols();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i)[j]).collect()
    }

    /// Rows picked by index, duplicates allowed.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.n_cols());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix { names: self.names.clone(), n_rows: indices.len(), data }
    }

    pub fn select_columns(&self, keep: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(self.n_rows * keep.len());
        for i in 0..self.n_rows {
            let row = self.row(i);
            data.extend(keep.iter().map(|&j| row[j]));
        }
        FeatureMatrix {
            names: keep.iter().map(|&j| self.names[j].clone()).collect(),
            n_rows: self.n_rows,
            data,
        }
    }
}

pub fn feature_matrix(dataset: &Dataset, subset: &[String]) -> Result<FeatureMatrix, DataError> {
    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for name in subset {
        let var = dataset.schema.get(name).ok_or_else(|| DataError::UnknownVariable(name.clone()))?;
        match var.kind {
            VariableKind::Numeric => {
                names.push(name.clone());
                columns.push(dataset.numeric_column(name)?);
            }
            VariableKind::Categorical => {
                let labels: Vec<&str> = dataset
                    .units
                    .iter()
                    .map(|u| match &u.values[name] {
                        Value::Label(s) => s.as_str(),
                        Value::Number(_) => "",
                    })
                    .collect();
                let levels: BTreeSet<&str> = labels.iter().copied().collect();
                for level in levels.into_iter().skip(1) {
                    names.push(format!("{name}={level}"));
                    columns.push(labels.iter().map(|l| f64::from(u8::from(*l == level))).collect());
                }
            }
            VariableKind::Text => return Err(DataError::TextCovariate(name.clone())),
        }
    }
    let n = dataset.len();
    let k = names.len();
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        data.extend(columns.iter().map(|c| c[i]));
    }
    Ok(FeatureMatrix { names, n_rows: n, data })
}

/// Joined category labels of `variables`, one key per unit.
pub fn strata_keys(dataset: &Dataset, variables: &[String]) -> Result<Vec<String>, DataError> {
    for name in variables {
        dataset.schema.get(name).ok_or_else(|| DataError::UnknownVariable(name.clone()))?;
    }
    Ok(dataset
        .units
        .iter()
        .map(|u| {
            variables
                .iter()
                .map(|v| u.values[v].to_string())
                .collect::<Vec<_>>()
                .join("\u{1f}")
        })
        .collect())
}
