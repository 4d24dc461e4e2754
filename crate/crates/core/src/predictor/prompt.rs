//! Prompt rendering and response parsing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{render_unit_description, CovariateSchema, UnitRecord};

/// Default template. `{{...}}` names are either reserved context slots or
/// schema variable names.
pub const DEFAULT_TEMPLATE: &str = "\
You are an AI assistant tasked with predicting outcomes for individuals in an experiment based on their characteristics and treatment conditions.

<experiment_background>
{{experiment_background}}
</experiment_background>

<outcome_definition>
The outcome to predict is: {{outcome_definition}}
</outcome_definition>

<variable_descriptions>
{{variable_descriptions}}
</variable_descriptions>

<individual_characteristics>
{{individual_characteristics}}
</individual_characteristics>

<treatment_condition>
{{treatment_status}}
</treatment_condition>

Based on the information provided, predict the outcome for this individual under both the control condition (does not receive treatment) and the treatment condition (receives treatment).

Your response should contain only two numbers:
1. The predicted {{outcome_type}} under the control condition
2. The predicted {{outcome_type}} under the treatment condition

Format your response EXACTLY as follows:
<prediction>
[Control prediction]
[Treatment prediction]
</prediction>

Example response:
<prediction>
{{example_value_control}}
{{example_value_treatment}}
</prediction>

Do not provide any explanation or commentary.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("placeholder `{{{{{0}}}}}` matches neither a context slot nor a schema variable")]
    UnboundPlaceholder(String),
    #[error("unterminated placeholder starting at byte {0}")]
    UnterminatedPlaceholder(usize),
    #[error("invalid experiment context: {0}")]
    InvalidContext(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("response has no <prediction>...</prediction> block")]
    MissingPredictionBlock,
    #[error("cannot parse `{0}` as a number")]
    MalformedNumber(String),
    #[error("prediction block has {0} nonempty lines, expected 2")]
    WrongLineCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawContext")]
pub struct ExperimentContext {
    background: String,
    outcome_definition: String,
    outcome_type_label: String,
    control_description: String,
    treatment_description: String,
    example_control_value: String,
    example_treatment_value: String,
}

#[derive(Deserialize)]
struct RawContext {
    background: String,
    outcome_definition: String,
    outcome_type_label: String,
    control_description: String,
    treatment_description: String,
    example_control_value: String,
    example_treatment_value: String,
}

impl TryFrom<RawContext> for ExperimentContext {
    type Error = PromptError;

    fn try_from(r: RawContext) -> Result<Self, Self::Error> {
        ExperimentContext::new(
            r.background,
            r.outcome_definition,
            r.outcome_type_label,
            r.control_description,
            r.treatment_description,
            r.example_control_value,
            r.example_treatment_value,
        )
    }
}

impl ExperimentContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        background: impl Into<String>,
        outcome_definition: impl Into<String>,
        outcome_type_label: impl Into<String>,
        control_description: impl Into<String>,
        treatment_description: impl Into<String>,
        example_control_value: impl Into<String>,
        example_treatment_value: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let ctx = ExperimentContext {
            background: background.into(),
            outcome_definition: outcome_definition.into(),
            outcome_type_label: outcome_type_label.into(),
            control_description: control_description.into(),
            treatment_description: treatment_description.into(),
            example_control_value: example_control_value.into(),
            example_treatment_value: example_treatment_value.into(),
        };
        let fields = [
            ("background", &ctx.background),
            ("outcome_definition", &ctx.outcome_definition),
            ("outcome_type_label", &ctx.outcome_type_label),
            ("control_description", &ctx.control_description),
            ("treatment_description", &ctx.treatment_description),
            ("example_control_value", &ctx.example_control_value),
            ("example_treatment_value", &ctx.example_treatment_value),
        ];
        for (name, value) in fields {
            if value.trim().is_empty() {
                return Err(PromptError::InvalidContext(format!("`{name}` is empty")));
            }
        }
        if ctx.control_description.trim() == ctx.treatment_description.trim() {
            return Err(PromptError::InvalidContext(
                "treatment and control descriptions are identical".into(),
            ));
        }
        Ok(ctx)
    }

    pub fn background(&self) -> &str {
        &self.background
    }

    pub fn outcome_type_label(&self) -> &str {
        &self.outcome_type_label
    }

    /// Canonical serialization, part of the cache key.
    pub fn fingerprint_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("context serializes")
    }

    fn treatment_status(&self) -> String {
        format!(
            "Control condition (does not receive treatment): {}\nTreatment condition (receives treatment): {}",
            self.control_description, self.treatment_description
        )
    }
}

fn variable_descriptions(schema: &CovariateSchema) -> String {
    schema
        .variables
        .iter()
        .map(|v| match &v.units {
            Some(u) => format!("- {}: {} ({u})", v.name, v.description),
            None => format!("- {}: {}", v.name, v.description),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(
    unit: &UnitRecord,
    schema: &CovariateSchema,
    ctx: &ExperimentContext,
) -> Result<String, PromptError> {
    render_with_template(DEFAULT_TEMPLATE, unit, schema, ctx)
}

pub fn render_with_template(
    template: &str,
    unit: &UnitRecord,
    schema: &CovariateSchema,
    ctx: &ExperimentContext,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 512);
    let mut rest = template;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or(PromptError::UnterminatedPlaceholder(offset + start))?;
        let name = after[..end].trim();
        let value = match name {
            "experiment_background" => ctx.background.clone(),
            "outcome_definition" => ctx.outcome_definition.clone(),
            "outcome_type" => ctx.outcome_type_label.clone(),
            "variable_descriptions" => variable_descriptions(schema),
            "individual_characteristics" => render_unit_description(unit, schema),
            "treatment_status" => ctx.treatment_status(),
            "control_description" => ctx.control_description.clone(),
            "treatment_description" => ctx.treatment_description.clone(),
            "example_value_control" => ctx.example_control_value.clone(),
            "example_value_treatment" => ctx.example_treatment_value.clone(),
            var => match (schema.get(var), unit.value(var)) {
                (Some(_), Some(v)) => v.to_string().replace(['\n', '\r'], " "),
                _ => return Err(PromptError::UnboundPlaceholder(var.to_string())),
            },
        };
        out.push_str(&value);
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Extracts `(control, treatment)` from the first `<prediction>` block.
pub fn parse_prediction(response: &str) -> Result<(f64, f64), ParseError> {
    const OPEN: &str = "<prediction>";
    const CLOSE: &str = "</prediction>";
    let start = response.find(OPEN).ok_or(ParseError::MissingPredictionBlock)? + OPEN.len();
    let len = response[start..].find(CLOSE).ok_or(ParseError::MissingPredictionBlock)?;
    let lines: Vec<&str> = response[start..start + len]
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.len() != 2 {
        return Err(ParseError::WrongLineCount(lines.len()));
    }
    Ok((parse_number(lines[0])?, parse_number(lines[1])?))
}

fn parse_number(line: &str) -> Result<f64, ParseError> {
    let inner = line
        .strip_prefix('[')
        .and_then(|l| l.strip_suffix(']'))
        .unwrap_or(line)
        .trim();
    match inner.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(ParseError::MalformedNumber(line.to_string())),
    }
}

/// A response in the format the template asks for.
pub fn format_prediction(y0: f64, y1: f64) -> String {
    format!("<prediction>\n{y0}\n{y1}\n</prediction>")
}
