//! Dense encoding of records: one-hot blocks for categoricals, standardized
//! slots for numerics, and a target-condition one-hot appended at the end.
//!
//! The diffusion backbone and all distance computations operate in this
//! space. `decode(encode(r)) == r` bit-exactly for in-schema records; see
//! `standardize_exact` for how the numeric coordinate is chosen.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::table::{ColumnKind, Record, Schema, TargetCondition, TaskKind, Value};

/// Coordinate layout of an encoded row: one block per schema column (in
/// schema order, label included), then the condition one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingLayout {
    pub blocks: Vec<Range<usize>>,
    /// Total width of the column blocks.
    pub feature_dim: usize,
    /// Width of the trailing condition one-hot.
    pub condition_dim: usize,
}

impl EncodingLayout {
    pub fn new(schema: &Schema, num_conditions: usize) -> Self {
        let mut blocks = Vec::with_capacity(schema.columns.len());
        let mut offset = 0usize;
        for spec in &schema.columns {
            let width = match spec.kind {
                ColumnKind::Numeric => 1,
                ColumnKind::Categorical => spec.vocabulary.len(),
            };
            blocks.push(offset..offset + width);
            offset += width;
        }
        EncodingLayout { blocks, feature_dim: offset, condition_dim: num_conditions }
    }

    pub fn total_dim(&self) -> usize {
        self.feature_dim + self.condition_dim
    }

    pub fn condition_range(&self) -> Range<usize> {
        self.feature_dim..self.total_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub values: Vec<f64>,
}

/// Picks the f64 coordinate e minimizing |e - (x-mean)/std| such that
/// `e * std + mean` returns x's exact bits, searching a few ulps around the
/// rounded quotient. Realistic column statistics always admit such an e; if
/// none exists within the search window the rounded quotient is returned.
fn standardize_exact(x: f64, mean: f64, std: f64) -> f64 {
    let e0 = (x - mean) / std;
    if e0 * std + mean == x {
        return e0;
    }
    let mut up = e0;
    let mut down = e0;
    for _ in 0..8 {
        up = f64::from_bits(next_up_bits(up));
        down = f64::from_bits(next_down_bits(down));
        if up * std + mean == x {
            return up;
        }
        if down * std + mean == x {
            return down;
        }
    }
    e0
}

fn next_up_bits(x: f64) -> u64 {
    let bits = x.to_bits();
    if x >= 0.0 {
        bits + 1
    } else if bits == (1u64 << 63) {
        // -0.0 → smallest positive
        1
    } else {
        bits - 1
    }
}

fn next_down_bits(x: f64) -> u64 {
    let bits = x.to_bits();
    if x > 0.0 {
        bits - 1
    } else if bits == 0 {
        // +0.0 → smallest negative
        (1u64 << 63) | 1
    } else {
        bits + 1
    }
}

fn destandardize(e: f64, mean: f64, std: f64) -> f64 {
    e * std + mean
}

/// Encodes a record against a fitted schema and a target condition.
/// Out-of-vocabulary categories are an error; the gates handle any synthetic
/// drift at decode time via argmax instead.
pub fn encode(
    record: &Record,
    schema: &Schema,
    layout: &EncodingLayout,
    condition: &TargetCondition,
) -> Result<EncodedVector> {
    if record.len() != schema.columns.len() {
        return Err(TapError::Shape(format!(
            "record has {} values, schema has {} columns",
            record.len(),
            schema.columns.len()
        )));
    }
    let mut values = vec![0.0; layout.total_dim()];
    for (ci, spec) in schema.columns.iter().enumerate() {
        let block = layout.blocks[ci].clone();
        match spec.kind {
            ColumnKind::Numeric => {
                let x = record[ci].as_num().ok_or_else(|| {
                    TapError::Shape(format!("column '{}' expected numeric", spec.name))
                })?;
                let stats = spec.stats.clone().unwrap_or_default();
                values[block.start] = standardize_exact(x, stats.mean, stats.std);
            }
            ColumnKind::Categorical => {
                let token = record[ci].as_cat().ok_or_else(|| {
                    TapError::Shape(format!("column '{}' expected categorical", spec.name))
                })?;
                let idx = spec.token_index(token).ok_or_else(|| {
                    TapError::InvalidArgument(format!(
                        "token '{token}' not in vocabulary of column '{}'",
                        spec.name
                    ))
                })?;
                values[block.start + idx] = 1.0;
            }
        }
    }
    if condition.index >= layout.condition_dim {
        return Err(TapError::InvalidArgument(format!(
            "condition index {} out of range {}",
            condition.index, layout.condition_dim
        )));
    }
    values[layout.feature_dim + condition.index] = 1.0;
    Ok(EncodedVector { values })
}

/// Decodes the column blocks of an encoded vector back into a record:
/// argmax per one-hot block (ties to the lowest index), de-standardization
/// for numerics. The condition block is not a column and is ignored.
pub fn decode(vector: &EncodedVector, schema: &Schema, layout: &EncodingLayout) -> Record {
    let mut record = Vec::with_capacity(schema.columns.len());
    for (ci, spec) in schema.columns.iter().enumerate() {
        let block = &vector.values[layout.blocks[ci].clone()];
        match spec.kind {
            ColumnKind::Numeric => {
                let stats = spec.stats.clone().unwrap_or_default();
                record.push(Value::Num(destandardize(block[0], stats.mean, stats.std)));
            }
            ColumnKind::Categorical => {
                let mut best = 0usize;
                for (i, &v) in block.iter().enumerate() {
                    if v > block[best] {
                        best = i;
                    }
                }
                record.push(Value::Cat(spec.vocabulary[best].clone()));
            }
        }
    }
    record
}

/// Feature-only encoding used by evaluators: all non-label column blocks,
/// in schema order. No condition block.
pub fn encode_features(record: &Record, schema: &Schema) -> Vec<f64> {
    let mut out = Vec::new();
    for (ci, spec) in schema.columns.iter().enumerate() {
        if ci == schema.label {
            continue;
        }
        match spec.kind {
            ColumnKind::Numeric => {
                let x = record[ci].as_num().expect("numeric column");
                let stats = spec.stats.clone().unwrap_or_default();
                out.push((x - stats.mean) / stats.std);
            }
            ColumnKind::Categorical => {
                let token = record[ci].as_cat().expect("categorical column");
                for t in &spec.vocabulary {
                    out.push(if t == token { 1.0 } else { 0.0 });
                }
            }
        }
    }
    out
}

/// Euclidean distance between two encoded rows restricted to column blocks
/// (the condition block is excluded).
pub fn encoded_distance(a: &EncodedVector, b: &EncodedVector, layout: &EncodingLayout) -> f64 {
    let mut acc = 0.0;
    for i in 0..layout.feature_dim {
        let d = a.values[i] - b.values[i];
        acc += d * d;
    }
    acc.sqrt()
}

/// Raw numeric label implied by an encoded row (regression only).
pub fn decoded_label_num(vector: &EncodedVector, schema: &Schema, layout: &EncodingLayout) -> f64 {
    debug_assert_eq!(schema.task, TaskKind::Regression);
    let block = layout.blocks[schema.label].clone();
    let stats = schema.label_spec().stats.clone().unwrap_or_default();
    destandardize(vector.values[block.start], stats.mean, stats.std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{fit_encoder, load_table, ColumnSpec, ConditionKind, NumericStats};

    fn fitted_schema() -> Schema {
        let decl = r#"{"columns":[{"name":"x","kind":"numeric"},{"name":"c","kind":"categorical"},{"name":"y","kind":"categorical"}],"label":"y","task":"classification"}"#;
        let t = load_table("x,c,y\n10,a,p\n12,b,q\n", decl).unwrap();
        fit_encoder(&t).unwrap()
    }

    fn cond(i: usize) -> TargetCondition {
        TargetCondition { kind: ConditionKind::ClassLabel, index: i, bin_edges: vec![] }
    }

    #[test]
    fn one_hot_block_definition() {
        let schema = fitted_schema();
        let layout = EncodingLayout::new(&schema, 2);
        let record = vec![Value::Num(12.0), Value::Cat("b".into()), Value::Cat("q".into())];
        let enc = encode(&record, &schema, &layout, &cond(1)).unwrap();
        // vocabulary {a,b}, value b → block [0,1]
        assert_eq!(&enc.values[layout.blocks[1].clone()], &[0.0, 1.0]);
        // numeric mean 11 std 1, raw 12 → 1.0
        assert_eq!(enc.values[layout.blocks[0].start], 1.0);
        // condition one-hot appended
        assert_eq!(&enc.values[layout.condition_range()], &[0.0, 1.0]);
    }

    #[test]
    fn standardization_example() {
        let mut schema = fitted_schema();
        schema.columns[0].stats =
            Some(NumericStats { mean: 10.0, std: 2.0, clip_lo: 0.0, clip_hi: 20.0 });
        let layout = EncodingLayout::new(&schema, 2);
        let record = vec![Value::Num(12.0), Value::Cat("a".into()), Value::Cat("p".into())];
        let enc = encode(&record, &schema, &layout, &cond(0)).unwrap();
        assert_eq!(enc.values[0], 1.0);
    }

    #[test]
    fn round_trip_exact() {
        let schema = fitted_schema();
        let layout = EncodingLayout::new(&schema, 2);
        let record = vec![Value::Num(10.0), Value::Cat("b".into()), Value::Cat("p".into())];
        let enc = encode(&record, &schema, &layout, &cond(0)).unwrap();
        assert_eq!(decode(&enc, &schema, &layout), record);
    }

    #[test]
    fn out_of_vocabulary_encode_is_error() {
        let schema = fitted_schema();
        let layout = EncodingLayout::new(&schema, 2);
        let record = vec![Value::Num(10.0), Value::Cat("zzz".into()), Value::Cat("p".into())];
        assert!(encode(&record, &schema, &layout, &cond(0)).is_err());
    }

    #[test]
    fn standardize_exact_awkward_stats() {
        // stats that do not divide cleanly still round-trip bit-exactly
        let cases = [
            (12.3456789, 3.14159265, 0.7071067811865476),
            (1.0e-7, 0.333333333333, 7.77e-3),
            (-5.5, 1.2345e4, 9.876e2),
            (1234567.89, -0.1, 17.0),
        ];
        for &(x, mean, std) in &cases {
            let e = standardize_exact(x, mean, std);
            assertic(e * std + mean, x);
        }
        fn assertic(a: f64, b: f64) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} != {b}");
        }
    }

    #[test]
    fn decode_argmax_tie_lowest_index() {
        let spec = ColumnSpec {
            name: "c".into(),
            kind: ColumnKind::Categorical,
            vocabulary: vec!["a".into(), "b".into()],
            stats: None,
        };
        let schema = Schema::new(
            vec![spec, ColumnSpec { name: "y".into(), kind: ColumnKind::Categorical, vocabulary: vec!["p".into()], stats: None }],
            "y",
            TaskKind::Classification,
        )
        .unwrap();
        let layout = EncodingLayout::new(&schema, 1);
        let vector = EncodedVector { values: vec![0.5, 0.5, 1.0, 1.0] };
        let rec = decode(&vector, &schema, &layout);
        assert_eq!(rec[0], Value::Cat("a".into()));
    }
}
