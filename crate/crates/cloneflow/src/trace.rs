//! Executable schemas, typed runtime values, and the trace file format.
//!
//! A trace file is line-delimited JSON: the first line holds the executable
//! schema, every following line is one invocation event, a JSON array with
//! one value per schema element, in element order.
//!
//! ```text
//! {"id":"demo.fa","name":"fa","owner":null,"elements":[
//!   {"name":"n","role":"param_in","dtype":"int"},
//!   {"name":"fa","role":"result_out","dtype":"int"}]}
//! [4, 24]
//! [5, 120]
//! ```
//!
//! Missing values do not exist at this layer: every event carries every
//! element, and files that violate that are rejected at parse time.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value kind of a trace column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataType {
    #[serde(rename = "int")]
    Integer,
    #[serde(rename = "float")]
    Float,
    #[serde(rename = "text")]
    Text,
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataType::Integer => write!(f, "int"),
            DataType::Float => write!(f, "float"),
            DataType::Text => write!(f, "text"),
        }
    }
}

/// Dataflow direction of a schema element relative to the executable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementRole {
    /// Formal parameter value entering the executable.
    #[serde(rename = "param_in")]
    ParameterIn,
    /// Object property read by the executable.
    #[serde(rename = "prop_read")]
    PropertyRead,
    /// Return value of an invocation made by the executable.
    #[serde(rename = "result_in")]
    InvocationResultIn,
    /// Return value of the executable itself.
    #[serde(rename = "result_out")]
    ResultOut,
    /// Object property written by the executable.
    #[serde(rename = "prop_write")]
    PropertyWrite,
    /// Parameter mutated for the caller.
    #[serde(rename = "param_out")]
    ParameterOut,
}

impl ElementRole {
    /// True when the element carries data into the executable.
    pub fn is_input(self) -> bool {
        matches!(
            self,
            ElementRole::ParameterIn | ElementRole::PropertyRead | ElementRole::InvocationResultIn
        )
    }

    /// True when the element carries data out of the executable.
    pub fn is_output(self) -> bool {
        !self.is_input()
    }
}

/// One observed slot of an executable: a named, typed, directed value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicElement {
    pub name: String,
    pub role: ElementRole,
    pub dtype: DataType,
}

/// Static description of one executable under observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutableSchema {
    /// Corpus-unique identifier, e.g. `"factorial.fa"`.
    pub id: String,
    /// Short human-readable name.
    #[serde(rename = "name")]
    pub display_name: String,
    /// Owning type, if the executable is a member of one.
    #[serde(rename = "owner")]
    pub owner_type: Option<String>,
    pub elements: Vec<AtomicElement>,
}

impl ExecutableSchema {
    /// Indices of input elements, in element order.
    pub fn input_indices(&self) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role.is_input())
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of output elements, in element order.
    pub fn output_indices(&self) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role.is_output())
            .map(|(i, _)| i)
            .collect()
    }

    /// Cartesian product of input and output element indices.
    ///
    /// Every (input, output) pair is one comparable behavior slice of the
    /// executable; the pipeline tests links between such pairs.
    pub fn io_pairs(&self) -> Vec<IoPair> {
        let inputs = self.input_indices();
        let outputs = self.output_indices();
        let mut pairs = Vec::with_capacity(inputs.len() * outputs.len());
        for &i in &inputs {
            for &o in &outputs {
                pairs.push(IoPair { input: i, output: o });
            }
        }
        pairs
    }

    /// Rejects duplicate (name, role) element claims.
    pub fn validate(&self) -> Result<(), TraceError> {
        for (i, a) in self.elements.iter().enumerate() {
            for b in &self.elements[i + 1..] {
                if a.name == b.name && a.role == b.role {
                    return Err(TraceError::InvalidSchema {
                        id: self.id.clone(),
                        detail: format!("duplicate element ({}, {:?})", a.name, a.role),
                    });
                }
            }
        }
        Ok(())
    }
}

/// An (input element, output element) index pair within one schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IoPair {
    pub input: usize,
    pub output: usize,
}

/// A single observed value. Kinds never coerce into each other: an integer
/// literal in a float column is a type error, not a conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Text(_) => "text",
        }
    }

    /// Whether this value is admissible in a column of the given dtype.
    pub fn matches(&self, dtype: DataType) -> bool {
        matches!(
            (self, dtype),
            (Value::Int(_), DataType::Integer)
                | (Value::Float(_), DataType::Float)
                | (Value::Text(_), DataType::Text)
        )
    }
}

/// A parsed trace: schema plus one row per invocation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDataset {
    pub schema: ExecutableSchema,
    pub rows: Vec<Vec<Value>>,
}

impl TraceDataset {
    /// Values of one column, in event order.
    pub fn column(&self, index: usize) -> Vec<Value> {
        self.rows.iter().map(|r| r[index].clone()).collect()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("line 1 is not an executable schema object: {detail}")]
    MalformedHeader { detail: String },
    #[error("schema '{id}' is invalid: {detail}")]
    InvalidSchema { id: String, detail: String },
    #[error("line {line}: expected JSON array of values: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("line {line}: event has {got} values, schema has {expected} elements")]
    RowArityMismatch { line: usize, expected: usize, got: usize },
    #[error("line {line}, column {column} ('{element}'): {got} value in a {expected} column")]
    TypeMismatch {
        line: usize,
        column: usize,
        element: String,
        expected: DataType,
        got: &'static str,
    },
    #[error("trace has a schema but no events")]
    EmptyTrace,
}

/// Parses a trace from any buffered reader. Line numbers in errors are
/// 1-based file lines, so the first event is line 2.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<TraceDataset, TraceError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(TraceError::MalformedHeader { detail: "empty file".into() }),
    };
    let schema: ExecutableSchema = serde_json::from_str(&header)
        .map_err(|e| TraceError::MalformedHeader { detail: e.to_string() })?;
    schema.validate()?;

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<Value> = serde_json::from_str(&line)
            .map_err(|e| TraceError::MalformedRow { line: line_no, detail: e.to_string() })?;
        if values.len() != schema.elements.len() {
            return Err(TraceError::RowArityMismatch {
                line: line_no,
                expected: schema.elements.len(),
                got: values.len(),
            });
        }
        for (c, (value, element)) in values.iter().zip(&schema.elements).enumerate() {
            if !value.matches(element.dtype) {
                return Err(TraceError::TypeMismatch {
                    line: line_no,
                    column: c,
                    element: element.name.clone(),
                    expected: element.dtype,
                    got: value.kind(),
                });
            }
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(TraceDataset { schema, rows })
}

/// Reads a trace file from disk.
pub fn read_trace_file(path: &Path) -> Result<TraceDataset, TraceError> {
    let file = std::fs::File::open(path)?;
    parse_trace(std::io::BufReader::new(file))
}

/// Serializes a dataset in the trace file format.
pub fn write_trace<W: Write>(dataset: &TraceDataset, mut out: W) -> Result<(), TraceError> {
    let header = serde_json::to_string(&dataset.schema).expect("schema serializes");
    writeln!(out, "{header}")?;
    for row in &dataset.rows {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Writes a trace file to disk.
pub fn write_trace_file(dataset: &TraceDataset, path: &Path) -> Result<(), TraceError> {
    let mut buf = Vec::new();
    write_trace(dataset, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn element(name: &str, role: ElementRole, dtype: DataType) -> AtomicElement {
        AtomicElement { name: name.into(), role, dtype }
    }

    fn fa_schema() -> ExecutableSchema {
        ExecutableSchema {
            id: "demo.fa".into(),
            display_name: "fa".into(),
            owner_type: None,
            elements: vec![
                element("n", ElementRole::ParameterIn, DataType::Integer),
                element("fa", ElementRole::ResultOut, DataType::Integer),
            ],
        }
    }

    fn fd_schema() -> ExecutableSchema {
        ExecutableSchema {
            id: "demo.fd".into(),
            display_name: "fd".into(),
            owner_type: None,
            elements: vec![
                element("n", ElementRole::ParameterIn, DataType::Integer),
                element("guard", ElementRole::ParameterIn, DataType::Text),
                element("fd", ElementRole::ResultOut, DataType::Integer),
            ],
        }
    }

    fn fa_file() -> String {
        let header = serde_json::to_string(&fa_schema()).unwrap();
        format!("{header}\n[4, 24]\n[5, 120]\n")
    }

    #[test]
    fn parses_schema_and_rows() {
        let parsed = parse_trace(fa_file().as_bytes()).unwrap();
        assert_eq!(parsed.schema.id, "demo.fa");
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.rows[0], vec![Value::Int(4), Value::Int(24)]);
        assert_eq!(parsed.rows[1], vec![Value::Int(5), Value::Int(120)]);
    }

    #[test]
    fn arity_mismatch_reports_line() {
        let header = serde_json::to_string(&fa_schema()).unwrap();
        let text = format!("{header}\n[4, 24]\n[5]\n");
        match parse_trace(text.as_bytes()) {
            Err(TraceError::RowArityMismatch { line, expected, got }) => {
                assert_eq!((line, expected, got), (3, 2, 1));
            }
            other => panic!("expected arity error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_is_empty_trace() {
        let header = serde_json::to_string(&fa_schema()).unwrap();
        let text = format!("{header}\n");
        assert!(matches!(parse_trace(text.as_bytes()), Err(TraceError::EmptyTrace)));
    }

    #[test]
    fn row_first_is_malformed_header() {
        let text = "[4, 24]\n[5, 120]\n";
        assert!(matches!(parse_trace(text.as_bytes()), Err(TraceError::MalformedHeader { .. })));
    }

    #[test]
    fn text_in_int_column_is_type_error() {
        let header = serde_json::to_string(&fa_schema()).unwrap();
        let text = format!("{header}\n[\"4\", 24]\n");
        match parse_trace(text.as_bytes()) {
            Err(TraceError::TypeMismatch { line, column, expected, got, .. }) => {
                assert_eq!((line, column), (2, 0));
                assert_eq!(expected, DataType::Integer);
                assert_eq!(got, "text");
            }
            other => panic!("expected type error, got {other:?}"),
        }
    }

    #[test]
    fn float_literal_in_int_column_is_type_error() {
        let header = serde_json::to_string(&fa_schema()).unwrap();
        let text = format!("{header}\n[4.5, 24]\n");
        assert!(matches!(parse_trace(text.as_bytes()), Err(TraceError::TypeMismatch { .. })));
    }

    #[test]
    fn int_literal_in_float_column_is_type_error() {
        let schema = ExecutableSchema {
            id: "demo.h".into(),
            display_name: "h".into(),
            owner_type: None,
            elements: vec![
                element("x", ElementRole::ParameterIn, DataType::Float),
                element("h", ElementRole::ResultOut, DataType::Float),
            ],
        };
        let header = serde_json::to_string(&schema).unwrap();
        let ok = format!("{header}\n[4.0, 2.0]\n");
        assert!(parse_trace(ok.as_bytes()).is_ok());
        let bad = format!("{header}\n[4, 2.0]\n");
        assert!(matches!(parse_trace(bad.as_bytes()), Err(TraceError::TypeMismatch { .. })));
    }

    #[test]
    fn duplicate_name_role_is_invalid_schema() {
        let mut schema = fa_schema();
        schema.elements.push(element("n", ElementRole::ParameterIn, DataType::Float));
        let header = serde_json::to_string(&schema).unwrap();
        let text = format!("{header}\n[4, 24, 1.0]\n");
        assert!(matches!(parse_trace(text.as_bytes()), Err(TraceError::InvalidSchema { .. })));
    }

    #[test]
    fn same_name_different_role_is_fine() {
        let schema = ExecutableSchema {
            id: "demo.inc".into(),
            display_name: "inc".into(),
            owner_type: Some("Counter".into()),
            elements: vec![
                element("count", ElementRole::PropertyRead, DataType::Integer),
                element("count", ElementRole::PropertyWrite, DataType::Integer),
            ],
        };
        assert!(schema.validate().is_ok());
    }

    #[test]
    fn io_indices_split_by_role() {
        let schema = fd_schema();
        assert_eq!(schema.input_indices(), vec![0, 1]);
        assert_eq!(schema.output_indices(), vec![2]);
    }

    #[test]
    fn io_indices_empty_schema() {
        let schema = ExecutableSchema {
            id: "demo.empty".into(),
            display_name: "empty".into(),
            owner_type: None,
            elements: vec![],
        };
        assert!(schema.input_indices().is_empty());
        assert!(schema.output_indices().is_empty());
        assert!(schema.io_pairs().is_empty());
    }

    #[test]
    fn io_pairs_are_the_cartesian_product() {
        let fd = fd_schema();
        assert_eq!(
            fd.io_pairs(),
            vec![IoPair { input: 0, output: 2 }, IoPair { input: 1, output: 2 }]
        );
        let fa = fa_schema();
        assert_eq!(fa.io_pairs(), vec![IoPair { input: 0, output: 1 }]);
    }

    #[test]
    fn inputs_only_schema_has_no_pairs() {
        let schema = ExecutableSchema {
            id: "demo.sink".into(),
            display_name: "sink".into(),
            owner_type: None,
            elements: vec![element("x", ElementRole::ParameterIn, DataType::Integer)],
        };
        assert!(schema.io_pairs().is_empty());
    }

    #[test]
    fn round_trip_is_identity() {
        let parsed = parse_trace(fa_file().as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_trace(&parsed, &mut buf).unwrap();
        let reparsed = parse_trace(buf.as_slice()).unwrap();
        assert_eq!(parsed, reparsed);
    }

    #[test]
    fn round_trip_preserves_floats_and_text() {
        let schema = ExecutableSchema {
            id: "demo.mix".into(),
            display_name: "mix".into(),
            owner_type: None,
            elements: vec![
                element("x", ElementRole::ParameterIn, DataType::Float),
                element("tag", ElementRole::ParameterIn, DataType::Text),
                element("y", ElementRole::ResultOut, DataType::Float),
            ],
        };
        let rows = vec![
            vec![Value::Float(0.1), Value::Text("a b".into()), Value::Float(-1.5e300)],
            vec![Value::Float(f64::MIN_POSITIVE), Value::Text(String::new()), Value::Float(3.0)],
        ];
        let dataset = TraceDataset { schema, rows };
        let mut buf = Vec::new();
        write_trace(&dataset, &mut buf).unwrap();
        let reparsed = parse_trace(buf.as_slice()).unwrap();
        assert_eq!(dataset, reparsed);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_role() -> impl Strategy<Value = ElementRole> {
            prop_oneof![
                Just(ElementRole::ParameterIn),
                Just(ElementRole::PropertyRead),
                Just(ElementRole::InvocationResultIn),
                Just(ElementRole::ResultOut),
                Just(ElementRole::PropertyWrite),
                Just(ElementRole::ParameterOut),
            ]
        }

        proptest! {
            #[test]
            fn io_pair_count_is_product(roles in proptest::collection::vec(arb_role(), 0..12)) {
                let elements = roles
                    .iter()
                    .enumerate()
                    .map(|(i, &role)| AtomicElement {
                        name: format!("e{i}"),
                        role,
                        dtype: DataType::Integer,
                    })
                    .collect();
                let schema = ExecutableSchema {
                    id: "p".into(),
                    display_name: "p".into(),
                    owner_type: None,
                    elements,
                };
                let inputs = schema.input_indices().len();
                let outputs = schema.output_indices().len();
                prop_assert_eq!(schema.io_pairs().len(), inputs * outputs);
            }
        }
    }
}
