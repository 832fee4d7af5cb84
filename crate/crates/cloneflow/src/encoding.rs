//! Column encoders: typed trace values to model-space floats and back.
//!
//! The density models operate on real vectors, so every trace column is
//! mapped through a fitted [`ColumnEncoder`]:
//!
//! * Float columns are standardized, `(v - center) / scale`.
//! * Integer columns are dequantized with uniform noise in `[0, 1)` and then
//!   standardized. The noise turns a discrete column into a continuous one
//!   with the same ordering, which keeps density estimation well posed.
//! * Text columns are mapped to an ordinal index over a vocabulary ordered
//!   by descending frequency (ties broken lexicographically), then treated
//!   like integers: dequantized and standardized.
//!
//! `center` is the sample mean and `scale` the sample standard deviation of
//! the fitted data (for text, of the dequantized index sequence). A column
//! with standard deviation below `1e-12` gets `scale = 1`, so constant
//! columns stay finite instead of exploding.
//!
//! Decoding inverts the affine map and rounds back to the source domain:
//! floats pass through, integers floor, text clamps the floored index into
//! the vocabulary. Dequantization noise is discarded by construction, so
//! `decode(encode(v, u)) == v` for every integer `v` and every `u` in
//! `[0, 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trace::{DataType, TraceDataset, Value};

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("cannot fit an encoder on an empty column")]
    EmptyColumn,
    #[error("value kind {got} does not match encoder dtype {expected}")]
    KindMismatch { expected: DataType, got: &'static str },
    #[error("text category '{0}' is not in the encoder vocabulary")]
    UnknownCategory(String),
}

/// Fitted bijection (up to quantization) between one trace column and model
/// space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnEncoder {
    pub dtype: DataType,
    pub center: f64,
    pub scale: f64,
    /// Category list for text columns, most frequent first. Empty otherwise.
    pub vocabulary: Vec<String>,
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn guarded_scale(sd: f64) -> f64 {
    if sd < 1e-12 {
        1.0
    } else {
        sd
    }
}

impl ColumnEncoder {
    /// Fits an encoder on a column. `seed` drives the dequantization noise
    /// used while fitting integer and text statistics, so fitting is
    /// deterministic.
    pub fn fit(values: &[Value], dtype: DataType, seed: u64) -> Result<Self, EncodingError> {
        if values.is_empty() {
            return Err(EncodingError::EmptyColumn);
        }
        for v in values {
            if !v.matches(dtype) {
                return Err(EncodingError::KindMismatch { expected: dtype, got: v.kind() });
            }
        }
        match dtype {
            DataType::Float => {
                let raw: Vec<f64> = values
                    .iter()
                    .map(|v| match v {
                        Value::Float(f) => *f,
                        _ => unreachable!(),
                    })
                    .collect();
                let (mean, sd) = mean_and_sd(&raw);
                Ok(ColumnEncoder {
                    dtype,
                    center: mean,
                    scale: guarded_scale(sd),
                    vocabulary: vec![],
                })
            }
            DataType::Integer => {
                let raw: Vec<f64> = values
                    .iter()
                    .map(|v| match v {
                        Value::Int(i) => *i as f64,
                        _ => unreachable!(),
                    })
                    .collect();
                let (mean, sd) = mean_and_sd(&raw);
                Ok(ColumnEncoder {
                    dtype,
                    center: mean,
                    scale: guarded_scale(sd),
                    vocabulary: vec![],
                })
            }
            DataType::Text => {
                let vocabulary = build_vocabulary(values);
                let mut rng = seed::rng(seed, &["encoder-fit"]);
                let indices: Vec<f64> = values
                    .iter()
                    .map(|v| match v {
                        Value::Text(t) => {
                            let idx = vocabulary.iter().position(|c| c == t).unwrap();
                            idx as f64 + rng.gen::<f64>()
                        }
                        _ => unreachable!(),
                    })
                    .collect();
                let (mean, sd) = mean_and_sd(&indices);
                Ok(ColumnEncoder { dtype, center: mean, scale: guarded_scale(sd), vocabulary })
            }
        }
    }

    /// Encodes one value. `noise` must lie in `[0, 1)`; it is ignored for
    /// float columns.
    pub fn encode(&self, value: &Value, noise: f64) -> Result<f64, EncodingError> {
        let raw = self.raw_position(value)?;
        let dequantized = match self.dtype {
            DataType::Float => raw,
            DataType::Integer | DataType::Text => raw + noise,
        };
        Ok((dequantized - self.center) / self.scale)
    }

    /// Raw numeric position of a value before dequantization: the float
    /// itself, the integer as a float, or the vocabulary index.
    fn raw_position(&self, value: &Value) -> Result<f64, EncodingError> {
        if !value.matches(self.dtype) {
            return Err(EncodingError::KindMismatch { expected: self.dtype, got: value.kind() });
        }
        Ok(match value {
            Value::Float(f) => *f,
            Value::Int(i) => *i as f64,
            Value::Text(t) => self
                .vocabulary
                .iter()
                .position(|c| c == t)
                .ok_or_else(|| EncodingError::UnknownCategory(t.clone()))?
                as f64,
        })
    }

    /// Like [`encode`](Self::encode), but maps a text category that is not
    /// in the vocabulary to the index just past its end instead of erroring.
    /// Used when transferring values between models fitted on different
    /// executables: a category the target never produced should land outside
    /// its learned support, not abort the comparison.
    pub fn encode_for_transfer(&self, value: &Value, noise: f64) -> Result<f64, EncodingError> {
        match self.encode(value, noise) {
            Err(EncodingError::UnknownCategory(_)) => {
                let raw = self.vocabulary.len() as f64 + noise;
                Ok((raw - self.center) / self.scale)
            }
            other => other,
        }
    }

    /// Carries an encoded coordinate from this encoder's space into
    /// another's, preserving the exact position on the shared raw axis.
    ///
    /// Float and integer columns share a numeric axis, so the move is a pure
    /// affine re-map; the dequantization fraction of an integer coordinate
    /// travels with it rather than being redrawn. Text goes through the
    /// category itself, since the two vocabularies may order categories
    /// differently; a category missing from the target vocabulary lands at
    /// the index just past its end, outside the target's learned support.
    /// Identical encoders make this the identity.
    pub fn transfer_to(&self, target: &ColumnEncoder, encoded: f64) -> Result<f64, EncodingError> {
        if self.dtype != target.dtype {
            return Err(EncodingError::KindMismatch {
                expected: target.dtype,
                got: match self.dtype {
                    DataType::Integer => "int",
                    DataType::Float => "float",
                    DataType::Text => "text",
                },
            });
        }
        let raw = encoded * self.scale + self.center;
        let raw = match self.dtype {
            DataType::Float | DataType::Integer => raw,
            DataType::Text => {
                let last = self.vocabulary.len().saturating_sub(1) as f64;
                let index = raw.floor().clamp(0.0, last);
                let fraction = (raw - raw.floor()).clamp(0.0, 1.0);
                let category = &self.vocabulary[index as usize];
                let target_index = target
                    .vocabulary
                    .iter()
                    .position(|c| c == category)
                    .unwrap_or(target.vocabulary.len());
                target_index as f64 + fraction
            }
        };
        Ok((raw - target.center) / target.scale)
    }

    /// Decodes a model-space float back to the column domain.
    pub fn decode(&self, encoded: f64) -> Value {
        let raw = encoded * self.scale + self.center;
        match self.dtype {
            DataType::Float => Value::Float(raw),
            DataType::Integer => Value::Int(raw.floor() as i64),
            DataType::Text => {
                let last = self.vocabulary.len().saturating_sub(1) as f64;
                let idx = raw.floor().clamp(0.0, last) as usize;
                Value::Text(self.vocabulary.get(idx).cloned().unwrap_or_default())
            }
        }
    }
}

/// Vocabulary ordered by descending frequency, ties lexicographic.
fn build_vocabulary(values: &[Value]) -> Vec<String> {
    let mut counts: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for v in values {
        if let Value::Text(t) = v {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    entries.into_iter().map(|(t, _)| t.to_string()).collect()
}

/// Encoders fitted per column of a dataset, in element order.
pub fn fit_encoders(
    dataset: &TraceDataset,
    seed: u64,
) -> Result<Vec<ColumnEncoder>, EncodingError> {
    dataset
        .schema
        .elements
        .iter()
        .enumerate()
        .map(|(c, element)| {
            let column = dataset.column(c);
            ColumnEncoder::fit(
                &column,
                element.dtype,
                seed::derive(seed, &["fit-col", &c.to_string()]),
            )
        })
        .collect()
}

/// Encodes a whole dataset into a row-major matrix, fitting fresh encoders.
///
/// Returns the matrix together with the encoders used. Deterministic for a
/// fixed dataset and seed.
pub fn encode_matrix(
    dataset: &TraceDataset,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<ColumnEncoder>), EncodingError> {
    let encoders = fit_encoders(dataset, seed)?;
    let matrix = encode_with(dataset, &encoders, seed)?;
    Ok((matrix, encoders))
}

/// Encodes a dataset with already-fitted encoders. Noise streams are keyed
/// by column index, so two datasets with identical raw columns encode to
/// identical matrices under the same seed.
pub fn encode_with(
    dataset: &TraceDataset,
    encoders: &[ColumnEncoder],
    seed: u64,
) -> Result<Vec<Vec<f64>>, EncodingError> {
    let noise: Vec<Vec<f64>> = (0..encoders.len())
        .map(|c| {
            let mut rng = seed::rng(seed, &["enc-col", &c.to_string()]);
            (0..dataset.rows.len()).map(|_| rng.gen::<f64>()).collect()
        })
        .collect();
    let mut matrix = Vec::with_capacity(dataset.rows.len());
    for (r, row) in dataset.rows.iter().enumerate() {
        let mut encoded = Vec::with_capacity(row.len());
        for (c, value) in row.iter().enumerate() {
            encoded.push(encoders[c].encode(value, noise[c][r])?);
        }
        matrix.push(encoded);
    }
    Ok(matrix)
}

/// Encodes one column of a foreign dataset with this encoder, with the same
/// noise keying as [`encode_with`]. Unlike [`encode_column`], a text
/// category the encoder has never seen maps to the index just past its
/// vocabulary instead of erroring, so two executables' columns can be
/// compared in one encoder's frame.
pub fn encode_column_for_transfer(
    dataset: &TraceDataset,
    encoder: &ColumnEncoder,
    column: usize,
    seed: u64,
) -> Result<Vec<f64>, EncodingError> {
    let mut rng = seed::rng(seed, &["enc-col", &column.to_string()]);
    dataset
        .rows
        .iter()
        .map(|row| encoder.encode_for_transfer(&row[column], rng.gen::<f64>()))
        .collect()
}

/// Encodes one column of a dataset with a given encoder. Same noise keying
/// as [`encode_with`].
pub fn encode_column(
    dataset: &TraceDataset,
    encoder: &ColumnEncoder,
    column: usize,
    seed: u64,
) -> Result<Vec<f64>, EncodingError> {
    let mut rng = seed::rng(seed, &["enc-col", &column.to_string()]);
    dataset.rows.iter().map(|row| encoder.encode(&row[column], rng.gen::<f64>())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn floats(vals: &[f64]) -> Vec<Value> {
        vals.iter().map(|&v| Value::Float(v)).collect()
    }

    fn ints(vals: &[i64]) -> Vec<Value> {
        vals.iter().map(|&v| Value::Int(v)).collect()
    }

    fn texts(vals: &[&str]) -> Vec<Value> {
        vals.iter().map(|&v| Value::Text(v.into())).collect()
    }

    #[test]
    fn float_fit_is_mean_and_sd() {
        let enc = ColumnEncoder::fit(&floats(&[2.0, 4.0]), DataType::Float, 0).unwrap();
        assert_relative_eq!(enc.center, 3.0);
        assert_relative_eq!(enc.scale, 1.0);
    }

    #[test]
    fn constant_int_column_gets_unit_scale() {
        let enc = ColumnEncoder::fit(&ints(&[5, 5, 5]), DataType::Integer, 0).unwrap();
        assert_relative_eq!(enc.center, 5.0);
        assert_relative_eq!(enc.scale, 1.0);
    }

    #[test]
    fn text_vocabulary_orders_by_frequency_then_name() {
        let enc =
            ColumnEncoder::fit(&texts(&["b", "a", "b", "c", "a", "b"]), DataType::Text, 0).unwrap();
        assert_eq!(enc.vocabulary, vec!["b", "a", "c"]);
    }

    #[test]
    fn tied_frequencies_break_lexicographically() {
        let enc = ColumnEncoder::fit(&texts(&["z", "m", "a"]), DataType::Text, 0).unwrap();
        assert_eq!(enc.vocabulary, vec!["a", "m", "z"]);
    }

    #[test]
    fn float_encode_is_affine() {
        let enc =
            ColumnEncoder { dtype: DataType::Float, center: 3.0, scale: 2.0, vocabulary: vec![] };
        assert_relative_eq!(enc.encode(&Value::Float(7.0), 0.0).unwrap(), 2.0);
    }

    #[test]
    fn int_encode_adds_noise_before_standardizing() {
        let enc =
            ColumnEncoder { dtype: DataType::Integer, center: 0.0, scale: 2.0, vocabulary: vec![] };
        assert_relative_eq!(enc.encode(&Value::Int(4), 0.5).unwrap(), 2.25);
    }

    #[test]
    fn text_encode_uses_vocabulary_index() {
        let enc = ColumnEncoder {
            dtype: DataType::Text,
            center: 0.0,
            scale: 1.0,
            vocabulary: vec!["yes".into(), "no".into()],
        };
        assert_relative_eq!(enc.encode(&Value::Text("no".into()), 0.25).unwrap(), 1.25);
        assert_eq!(
            enc.encode(&Value::Text("maybe".into()), 0.0),
            Err(EncodingError::UnknownCategory("maybe".into()))
        );
    }

    #[test]
    fn transfer_encoding_maps_unknown_past_the_vocabulary() {
        let enc = ColumnEncoder {
            dtype: DataType::Text,
            center: 0.0,
            scale: 1.0,
            vocabulary: vec!["yes".into(), "no".into()],
        };
        let e = enc.encode_for_transfer(&Value::Text("maybe".into()), 0.25).unwrap();
        assert_relative_eq!(e, 2.25);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let enc =
            ColumnEncoder { dtype: DataType::Integer, center: 0.0, scale: 1.0, vocabulary: vec![] };
        assert_eq!(
            enc.encode(&Value::Float(1.0), 0.0),
            Err(EncodingError::KindMismatch { expected: DataType::Integer, got: "float" })
        );
    }

    #[test]
    fn transfer_between_identical_encoders_is_the_identity() {
        let enc = ColumnEncoder::fit(&ints(&[1, 4, 9, 16]), DataType::Integer, 5).unwrap();
        for &e in &[-1.3, 0.0, 0.42, 2.7] {
            assert_relative_eq!(enc.transfer_to(&enc, e).unwrap(), e);
        }
    }

    #[test]
    fn numeric_transfer_is_affine_through_the_raw_axis() {
        let from =
            ColumnEncoder { dtype: DataType::Float, center: 1.0, scale: 2.0, vocabulary: vec![] };
        let to =
            ColumnEncoder { dtype: DataType::Float, center: 0.0, scale: 4.0, vocabulary: vec![] };
        // Encoded 1.5 in `from` space is raw 4.0, which is 1.0 in `to` space.
        assert_relative_eq!(from.transfer_to(&to, 1.5).unwrap(), 1.0);
    }

    #[test]
    fn integer_transfer_preserves_the_dequantization_fraction() {
        let from =
            ColumnEncoder { dtype: DataType::Integer, center: 2.0, scale: 1.0, vocabulary: vec![] };
        let to =
            ColumnEncoder { dtype: DataType::Integer, center: 0.0, scale: 2.0, vocabulary: vec![] };
        // Encoded 1.25 is raw 3.25: integer 3 carrying fraction 0.25.
        assert_relative_eq!(from.transfer_to(&to, 1.25).unwrap(), 1.625);
    }

    #[test]
    fn text_transfer_follows_the_category_across_vocabularies() {
        let from = ColumnEncoder {
            dtype: DataType::Text,
            center: 0.0,
            scale: 1.0,
            vocabulary: vec!["red".into(), "blue".into()],
        };
        let to = ColumnEncoder {
            dtype: DataType::Text,
            center: 0.0,
            scale: 1.0,
            vocabulary: vec!["blue".into(), "green".into(), "red".into()],
        };
        // Encoded 0.25 names "red" with fraction 0.25; "red" is index 2 there.
        assert_relative_eq!(from.transfer_to(&to, 0.25).unwrap(), 2.25);
        // "blue" maps from index 1 to index 0.
        assert_relative_eq!(from.transfer_to(&to, 1.5).unwrap(), 0.5);
    }

    #[test]
    fn text_transfer_sends_unknown_categories_past_the_vocabulary() {
        let from = ColumnEncoder {
            dtype: DataType::Text,
            center: 0.0,
            scale: 1.0,
            vocabulary: vec!["only_here".into()],
        };
        let to = ColumnEncoder {
            dtype: DataType::Text,
            center: 0.0,
            scale: 1.0,
            vocabulary: vec!["a".into(), "b".into()],
        };
        assert_relative_eq!(from.transfer_to(&to, 0.75).unwrap(), 2.75);
    }

    #[test]
    fn transfer_rejects_mismatched_dtypes() {
        let from =
            ColumnEncoder { dtype: DataType::Integer, center: 0.0, scale: 1.0, vocabulary: vec![] };
        let to =
            ColumnEncoder { dtype: DataType::Float, center: 0.0, scale: 1.0, vocabulary: vec![] };
        assert!(from.transfer_to(&to, 0.0).is_err());
    }

    #[test]
    fn decode_floors_integers() {
        let enc =
            ColumnEncoder { dtype: DataType::Integer, center: 0.0, scale: 1.0, vocabulary: vec![] };
        assert_eq!(enc.decode(4.7), Value::Int(4));
        assert_eq!(enc.decode(-0.2), Value::Int(-1));
    }

    #[test]
    fn decode_clamps_text_indices() {
        let enc = ColumnEncoder {
            dtype: DataType::Text,
            center: 0.0,
            scale: 1.0,
            vocabulary: vec!["a".into(), "b".into()],
        };
        assert_eq!(enc.decode(-3.0), Value::Text("a".into()));
        assert_eq!(enc.decode(0.4), Value::Text("a".into()));
        assert_eq!(enc.decode(1.9), Value::Text("b".into()));
        assert_eq!(enc.decode(57.0), Value::Text("b".into()));
    }

    #[test]
    fn float_round_trip_holds_to_rounding() {
        let enc = ColumnEncoder::fit(&floats(&[2.0, 4.0, 5.5]), DataType::Float, 3).unwrap();
        for &v in &[2.0, 4.0, 5.5] {
            let e = enc.encode(&Value::Float(v), 0.0).unwrap();
            match enc.decode(e) {
                Value::Float(back) => assert_relative_eq!(back, v, max_relative = 1e-14),
                other => panic!("decoded to {other:?}"),
            }
        }
    }

    #[test]
    fn empty_column_is_rejected() {
        assert_eq!(ColumnEncoder::fit(&[], DataType::Float, 0), Err(EncodingError::EmptyColumn));
    }

    #[test]
    fn matrix_encoding_is_deterministic() {
        let dataset = demo_dataset();
        let (a, enc_a) = encode_matrix(&dataset, 11).unwrap();
        let (b, enc_b) = encode_matrix(&dataset, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(enc_a, enc_b);
        let (c, _) = encode_matrix(&dataset, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn encoded_float_columns_are_standardized() {
        use crate::trace::{AtomicElement, ElementRole, ExecutableSchema};
        let schema = ExecutableSchema {
            id: "t".into(),
            display_name: "t".into(),
            owner_type: None,
            elements: vec![AtomicElement {
                name: "x".into(),
                role: ElementRole::ParameterIn,
                dtype: DataType::Float,
            }],
        };
        let rows: Vec<Vec<Value>> =
            (0..100).map(|i| vec![Value::Float(i as f64 * 0.7 - 3.0)]).collect();
        let dataset = TraceDataset { schema, rows };
        let (matrix, _) = encode_matrix(&dataset, 5).unwrap();
        let col: Vec<f64> = matrix.iter().map(|r| r[0]).collect();
        let (mean, sd) = super::mean_and_sd(&col);
        assert!(mean.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }

    fn demo_dataset() -> TraceDataset {
        use crate::trace::{AtomicElement, ElementRole, ExecutableSchema};
        let schema = ExecutableSchema {
            id: "demo".into(),
            display_name: "demo".into(),
            owner_type: None,
            elements: vec![
                AtomicElement {
                    name: "n".into(),
                    role: ElementRole::ParameterIn,
                    dtype: DataType::Integer,
                },
                AtomicElement {
                    name: "tag".into(),
                    role: ElementRole::ParameterIn,
                    dtype: DataType::Text,
                },
                AtomicElement {
                    name: "out".into(),
                    role: ElementRole::ResultOut,
                    dtype: DataType::Float,
                },
            ],
        };
        let rows = vec![
            vec![Value::Int(1), Value::Text("a".into()), Value::Float(0.5)],
            vec![Value::Int(2), Value::Text("b".into()), Value::Float(1.5)],
            vec![Value::Int(3), Value::Text("a".into()), Value::Float(2.5)],
        ];
        TraceDataset { schema, rows }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn int_round_trip(v in -1_000_000i64..1_000_000, u in 0.0f64..1.0) {
                let enc = ColumnEncoder::fit(
                    &ints(&[v - 3, v, v + 11]),
                    DataType::Integer,
                    0,
                ).unwrap();
                let e = enc.encode(&Value::Int(v), u).unwrap();
                prop_assert_eq!(enc.decode(e), Value::Int(v));
            }

            #[test]
            fn encoding_preserves_order(a in -1000i64..1000, b in -1000i64..1000) {
                prop_assume!(a < b);
                let enc = ColumnEncoder::fit(&ints(&[a, b]), DataType::Integer, 0).unwrap();
                // Max dequantization noise on the smaller value still sorts
                // below the larger value with zero noise.
                let ea = enc.encode(&Value::Int(a), 0.999_999).unwrap();
                let eb = enc.encode(&Value::Int(b), 0.0).unwrap();
                prop_assert!(ea <= eb);
            }
        }
    }
}
