mod common;

use std::fs;

use stratkit::data::load_dataset;
use stratkit::predictor::{parse_prediction, render_prompt, ParseError};

#[test]
fn rendered_prompt_matches_golden_bytes() {
    let dir = common::golden_dir();
    let ds = load_dataset(&dir.join("unit.csv"), &common::savings_schema()).unwrap();
    let rendered = render_prompt(&ds.units[0], &ds.schema, &common::savings_context()).unwrap();
    let golden = fs::read_to_string(dir.join("prompt.txt")).unwrap();
    assert_eq!(rendered, golden);
    // rendering is a pure function
    assert_eq!(rendered, render_prompt(&ds.units[0], &ds.schema, &common::savings_context()).unwrap());
}

#[test]
fn parses_the_documented_response_format() {
    assert_eq!(parse_prediction("<prediction>\n120\n150\n</prediction>").unwrap(), (120.0, 150.0));
    assert_eq!(parse_prediction("Sure.\n<prediction>\n[-3.5]\n[1e2]\n</prediction>\n").unwrap(), (-3.5, 100.0));
}

#[test]
fn parse_errors_are_distinguished() {
    assert_eq!(parse_prediction("120\n150"), Err(ParseError::MissingPredictionBlock));
    assert!(matches!(parse_prediction("<prediction>\nabout 120\n150\n</prediction>"), Err(ParseError::MalformedNumber(_))));
    assert_eq!(parse_prediction("<prediction>\n120\n</prediction>"), Err(ParseError::WrongLineCount(1)));
}
