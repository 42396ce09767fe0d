//! Typed tabular data model: schemas, tables, target conditions, and the
//! scarcity-split protocol.
//!
//! A [`Table`] owns rows of typed values aligned with its [`Schema`]. Rows are
//! tagged with provenance (real vs synthetic) and carry stable ids so
//! cross-validation folds and traces can refer to them.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Fitted standardization and clipping statistics for a numeric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub mean: f64,
    /// Population (1/N) standard deviation; degenerate columns get 1.0 so the
    /// encoding stays total.
    pub std: f64,
    /// Empirical quantile bounds in raw units (q = 0.01 and q = 0.99).
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for NumericStats {
    fn default() -> Self {
        NumericStats {
            mean: 0.0,
            std: 1.0,
            clip_lo: f64::NEG_INFINITY,
            clip_hi: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Observed category tokens, in order of first appearance (categorical only).
    #[serde(default)]
    pub vocabulary: Vec<String>,
    /// Present after `fit_encoder` (numeric only).
    #[serde(default)]
    pub stats: Option<NumericStats>,
}

impl ColumnSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Numeric,
            vocabulary: Vec::new(),
            stats: None,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical,
            vocabulary: Vec::new(),
            stats: None,
        }
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.vocabulary.iter().position(|t| t == token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    /// Index of the label column within `columns`.
    pub label: usize,
    pub task: TaskKind,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>, label_name: &str, task: TaskKind) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.clone()) {
                return Err(TapError::Schema(format!("duplicate column name '{}'", c.name)));
            }
        }
        let label = columns
            .iter()
            .position(|c| c.name == label_name)
            .ok_or_else(|| TapError::Schema(format!("label column '{label_name}' not found")))?;
        match (task, columns[label].kind) {
            (TaskKind::Classification, ColumnKind::Numeric) => {
                return Err(TapError::Schema(
                    "classification label must be categorical".into(),
                ))
            }
            (TaskKind::Regression, ColumnKind::Categorical) => {
                return Err(TapError::Schema("regression label must be numeric".into()))
            }
            _ => {}
        }
        Ok(Schema { columns, label, task })
    }

    pub fn label_spec(&self) -> &ColumnSpec {
        &self.columns[self.label]
    }

    pub fn column(&self, name: &str) -> Option<(usize, &ColumnSpec)> {
        self.columns
            .iter()
            .enumerate()
            .find(|(_, c)| c.name == name)
    }

    /// Indices of all non-label columns, in schema order.
    pub fn feature_indices(&self) -> Vec<usize> {
        (0..self.columns.len()).filter(|&i| i != self.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(t) => Some(t),
            Value::Num(_) => None,
        }
    }
}

/// One row, values aligned with the schema's column order.
pub type Record = Vec<Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// A row together with its stable id and provenance tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: u64,
    pub provenance: Provenance,
    pub values: Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<Row>,
    /// Next id handed out by `push`.
    next_id: u64,
}

impl Table {
    pub fn new(schema: Schema) -> Self {
        Table { schema, rows: Vec::new(), next_id: 0 }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row, assigning the next id.
    pub fn push(&mut self, values: Record, provenance: Provenance) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.rows.push(Row { id, provenance, values });
        id
    }

    pub fn real_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.provenance == Provenance::Real)
    }

    pub fn label_value<'a>(&self, row: &'a Row) -> &'a Value {
        &row.values[self.schema.label]
    }

    /// Raw numeric label (regression tables).
    pub fn label_num(&self, row: &Row) -> f64 {
        row.values[self.schema.label]
            .as_num()
            .expect("regression label must be numeric")
    }

    /// Class index of a classification row's label.
    pub fn label_class(&self, row: &Row) -> usize {
        let token = row.values[self.schema.label]
            .as_cat()
            .expect("classification label must be categorical");
        self.schema
            .label_spec()
            .token_index(token)
            .expect("label token must be in vocabulary")
    }

    /// New table with the same schema containing clones of the given rows.
    /// Row ids are preserved.
    pub fn subset(&self, rows: Vec<Row>) -> Table {
        let next_id = rows.iter().map(|r| r.id + 1).max().unwrap_or(0).max(self.next_id);
        Table { schema: self.schema.clone(), rows, next_id }
    }
}

/// A generation target: one class label, or one quantile bin of a regression
/// target. `bin_edges` holds the full shared list of interior edges so a bin
/// can place arbitrary values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCondition {
    pub kind: ConditionKind,
    pub index: usize,
    #[serde(default)]
    pub bin_edges: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionKind {
    ClassLabel,
    QuantileBin,
}

/// Lower empirical quantile: the order statistic at position ⌈qN⌉ (1-indexed),
/// clamped into [1, N].
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let pos = (q * n as f64).ceil() as usize;
    sorted[pos.clamp(1, n) - 1]
}

/// Schema declaration as it appears in run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaDecl {
    pub columns: Vec<ColumnDecl>,
    pub label: String,
    pub task: TaskKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: ColumnKind,
}

impl SchemaDecl {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_schema(&self) -> Result<Schema> {
        let columns = self
            .columns
            .iter()
            .map(|c| ColumnSpec { name: c.name.clone(), kind: c.kind, vocabulary: Vec::new(), stats: None })
            .collect();
        Schema::new(columns, &self.label, self.task)
    }
}

/// Parses CSV text against a schema declaration. The header row must name
/// every declared column; rows with missing labels or unparsable numerics are
/// rejected with their location.
pub fn load_table(csv_text: &str, schema_decl: &str) -> Result<Table> {
    let decl = SchemaDecl::parse(schema_decl)?;
    let mut schema = decl.to_schema()?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(csv_text.as_bytes());

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| TapError::Parse { row: 0, column: "<header>".into(), message: e.to_string() })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    // column index in csv for each schema column
    let mut csv_pos = Vec::with_capacity(schema.columns.len());
    for spec in &schema.columns {
        let pos = headers.iter().position(|h| h == &spec.name).ok_or_else(|| TapError::Parse {
            row: 0,
            column: spec.name.clone(),
            message: "column missing from csv header".into(),
        })?;
        csv_pos.push(pos);
    }

    let mut rows: Vec<Record> = Vec::new();
    for (row_idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| TapError::Parse {
            row: row_idx + 1,
            column: "<row>".into(),
            message: e.to_string(),
        })?;
        let mut values = Vec::with_capacity(schema.columns.len());
        for (ci, spec) in schema.columns.iter().enumerate() {
            let raw = rec.get(csv_pos[ci]).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(TapError::Parse {
                    row: row_idx + 1,
                    column: spec.name.clone(),
                    message: if ci == schema.label {
                        "missing label".into()
                    } else {
                        "missing value".into()
                    },
                });
            }
            match spec.kind {
                ColumnKind::Numeric => {
                    let x: f64 = raw.parse().map_err(|_| TapError::Parse {
                        row: row_idx + 1,
                        column: spec.name.clone(),
                        message: format!("unparsable numeric '{raw}'"),
                    })?;
                    if !x.is_finite() {
                        return Err(TapError::Parse {
                            row: row_idx + 1,
                            column: spec.name.clone(),
                            message: format!("non-finite numeric '{raw}'"),
                        });
                    }
                    values.push(Value::Num(x));
                }
                ColumnKind::Categorical => values.push(Value::Cat(raw.to_string())),
            }
        }
        rows.push(values);
    }

    // collect vocabularies in order of first appearance
    for (ci, spec) in schema.columns.iter_mut().enumerate() {
        if spec.kind == ColumnKind::Categorical {
            for row in &rows {
                let token = row[ci].as_cat().unwrap();
                if !spec.vocabulary.iter().any(|t| t == token) {
                    spec.vocabulary.push(token.to_string());
                }
            }
        }
    }

    let mut table = Table::new(schema);
    for values in rows {
        table.push(values, Provenance::Real);
    }
    Ok(table)
}

/// Fits per-column statistics over the table's real rows: mean and population
/// std plus [q0.01, q0.99] clip bounds for numerics, observed vocabulary for
/// categoricals. Constant columns get std 1 so the encoding stays total.
pub fn fit_encoder(table: &Table) -> Result<Schema> {
    if table.is_empty() {
        return Err(TapError::InvalidArgument("fit_encoder on empty table".into()));
    }
    let mut schema = table.schema.clone();
    for (ci, spec) in schema.columns.iter_mut().enumerate() {
        match spec.kind {
            ColumnKind::Numeric => {
                let mut vals: Vec<f64> = table
                    .real_rows()
                    .map(|r| r.values[ci].as_num().expect("numeric column"))
                    .collect();
                if vals.is_empty() {
                    return Err(TapError::InvalidArgument("fit_encoder: no real rows".into()));
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let clip_lo = lower_quantile(&vals, 0.01);
                let clip_hi = lower_quantile(&vals, 0.99);
                spec.stats = Some(NumericStats { mean, std, clip_lo, clip_hi });
            }
            ColumnKind::Categorical => {
                let mut vocab: Vec<String> = Vec::new();
                for row in table.real_rows() {
                    let token = row.values[ci].as_cat().expect("categorical column");
                    if !vocab.iter().any(|t| t == token) {
                        vocab.push(token.to_string());
                    }
                }
                spec.vocabulary = vocab;
            }
        }
    }
    Ok(schema)
}

/// Target conditions for a fitted schema: one per class for classification,
/// or `num_bins` quantile bins of the training labels for regression.
pub fn target_conditions(schema: &Schema, train: &Table, num_bins: usize) -> Vec<TargetCondition> {
    match schema.task {
        TaskKind::Classification => (0..schema.label_spec().vocabulary.len())
            .map(|i| TargetCondition { kind: ConditionKind::ClassLabel, index: i, bin_edges: Vec::new() })
            .collect(),
        TaskKind::Regression => {
            let labels: Vec<f64> = train.rows.iter().map(|r| train.label_num(r)).collect();
            make_target_bins(&labels, num_bins)
        }
    }
}

/// Quantile bins over raw labels. Interior edges sit at the lower empirical
/// quantiles i/num_bins; duplicate edges merge, reducing the bin count. A
/// value x belongs to bin `#{edges strictly below x}`, so the bins partition
/// the real line.
pub fn make_target_bins(labels: &[f64], num_bins: usize) -> Vec<TargetCondition> {
    assert!(!labels.is_empty(), "make_target_bins on empty labels");
    assert!(num_bins >= 1);
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut edges: Vec<f64> = Vec::new();
    for i in 1..num_bins {
        let e = lower_quantile(&sorted, i as f64 / num_bins as f64);
        if edges.last().map_or(true, |&last| e > last) {
            edges.push(e);
        }
    }
    let bins = edges.len() + 1;
    (0..bins)
        .map(|i| TargetCondition { kind: ConditionKind::QuantileBin, index: i, bin_edges: edges.clone() })
        .collect()
}

/// Bin index of a raw label value under the shared interior edges.
pub fn bin_of(edges: &[f64], value: f64) -> usize {
    edges.iter().filter(|&&e| e < value).count()
}

/// Condition index of a row: its class for classification, its label's bin
/// for regression.
pub fn condition_of_row(table: &Table, row: &Row, conditions: &[TargetCondition]) -> usize {
    match table.schema.task {
        TaskKind::Classification => table.label_class(row),
        TaskKind::Regression => {
            let edges = &conditions[0].bin_edges;
            bin_of(edges, table.label_num(row))
        }
    }
}

/// Scarcity-split protocol: a test set of size min(⌊N/2⌋, 500) is drawn
/// first, then `n_real` rows are sampled from the remainder and split 4:1
/// into train and validation. Deterministic given the seed.
pub fn scarcity_split(table: &Table, n_real: usize, seed: u64) -> Result<(Table, Table, Table)> {
    let n = table.len();
    let n_test = (n / 2).min(500);
    if n_real > n - n_test {
        return Err(TapError::InvalidArgument(format!(
            "n_real = {n_real} exceeds available {} rows after the test split",
            n - n_test
        )));
    }
    let mut rng = Rng::seed(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut indices);

    let test_idx = &indices[..n_test];
    let mut rest: Vec<usize> = indices[n_test..].to_vec();
    rng.shuffle(&mut rest);
    let real_idx = &rest[..n_real];

    let n_train = n_real * 4 / 5;
    let train_idx = &real_idx[..n_train];
    let val_idx = &real_idx[n_train..];

    let collect = |idx: &[usize]| -> Table {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        table.subset(sorted.iter().map(|&i| table.rows[i].clone()).collect())
    };
    Ok((collect(train_idx), collect(val_idx), collect(test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_col_decl() -> &'static str {
        r#"{"columns":[{"name":"x","kind":"numeric"},{"name":"y","kind":"categorical"}],"label":"y","task":"classification"}"#
    }

    #[test]
    fn load_two_column_csv() {
        let t = load_table("x,y\n1,a\n2,b\n", two_col_decl()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.rows[0].values[0], Value::Num(1.0));
        assert_eq!(t.rows[1].values[1], Value::Cat("b".into()));
        assert_eq!(t.schema.columns[1].vocabulary, vec!["a", "b"]);
    }

    #[test]
    fn nan_numeric_rejected_with_location() {
        let err = load_table("x,y\nNaN,a\n", two_col_decl()).unwrap_err();
        match err {
            TapError::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_body_gives_empty_table() {
        let t = load_table("x,y\n", two_col_decl()).unwrap();
        assert_eq!(t.len(), 0);
        assert_eq!(t.schema.columns.len(), 2);
    }

    #[test]
    fn missing_header_column_rejected() {
        let err = load_table("x\n1\n", two_col_decl()).unwrap_err();
        assert!(matches!(err, TapError::Parse { .. }));
    }

    #[test]
    fn missing_label_rejected() {
        let err = load_table("x,y\n1,\n", two_col_decl()).unwrap_err();
        match err {
            TapError::Parse { row, column, message } => {
                assert_eq!(row, 1);
                assert_eq!(column, "y");
                assert!(message.contains("label"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fit_encoder_two_point_stats() {
        let t = load_table("x,y\n10,a\n12,a\n", two_col_decl()).unwrap();
        let schema = fit_encoder(&t).unwrap();
        let s = schema.columns[0].stats.as_ref().unwrap();
        assert_eq!(s.mean, 11.0);
        assert_eq!(s.std, 1.0); // population convention
    }

    #[test]
    fn fit_encoder_constant_column() {
        let t = load_table("x,y\n5,a\n5,a\n5,a\n", two_col_decl()).unwrap();
        let schema = fit_encoder(&t).unwrap();
        let s = schema.columns[0].stats.as_ref().unwrap();
        assert_eq!(s.std, 1.0);
        assert_eq!(s.clip_lo, 5.0);
        assert_eq!(s.clip_hi, 5.0);
    }

    #[test]
    fn fit_encoder_uniform_quantiles() {
        // 200 evenly spaced points on [0,1]: an oracle by sort + index.
        let mut csv = String::from("x,y\n");
        let vals: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        for v in &vals {
            csv.push_str(&format!("{v},a\n"));
        }
        let t = load_table(&csv, two_col_decl()).unwrap();
        let schema = fit_encoder(&t).unwrap();
        let s = schema.columns[0].stats.as_ref().unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(s.clip_lo, sorted[1]); // ⌈0.01·200⌉ = 2 → index 1
        assert_eq!(s.clip_hi, sorted[197]); // ⌈0.99·200⌉ = 198 → index 197
        assert!((s.clip_lo - 0.01).abs() < 0.02);
        assert!((s.clip_hi - 0.99).abs() < 0.02);
        assert!(s.clip_lo >= sorted[0] && s.clip_hi <= sorted[199]);
    }

    #[test]
    fn target_bins_median_split() {
        let labels: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let bins = make_target_bins(&labels, 2);
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].bin_edges, vec![4.0]);
        for v in 1..=4 {
            assert_eq!(bin_of(&bins[0].bin_edges, v as f64), 0);
        }
        for v in 5..=8 {
            assert_eq!(bin_of(&bins[0].bin_edges, v as f64), 1);
        }
    }

    #[test]
    fn target_bins_constant_labels_merge() {
        let bins = make_target_bins(&[3.0, 3.0, 3.0], 7);
        assert_eq!(bins.len(), 1);
        assert_eq!(bin_of(&bins[0].bin_edges, 3.0), 0);
        assert_eq!(bin_of(&bins[0].bin_edges, -100.0), 0);
    }

    #[test]
    fn bins_partition_labels() {
        let labels: Vec<f64> = (0..100).map(|i| (i as f64 * 17.3) % 11.0).collect();
        let bins = make_target_bins(&labels, 7);
        for &l in &labels {
            let b = bin_of(&bins[0].bin_edges, l);
            assert!(b < bins.len());
        }
    }

    fn synth_table(n: usize) -> Table {
        let mut csv = String::from("x,y\n");
        for i in 0..n {
            csv.push_str(&format!("{i},a\n"));
        }
        load_table(&csv, two_col_decl()).unwrap()
    }

    #[test]
    fn scarcity_split_sizes() {
        // N = 1338 → N_test = min(669, 500) = 500
        let t = synth_table(1338);
        let (train, val, test) = scarcity_split(&t, 20, 0).unwrap();
        assert_eq!(test.len(), 500);
        assert_eq!(train.len(), 16);
        assert_eq!(val.len(), 4);
    }

    #[test]
    fn scarcity_split_small() {
        let t = synth_table(10);
        let (train, val, test) = scarcity_split(&t, 4, 1).unwrap();
        assert_eq!(test.len(), 5);
        assert_eq!(train.len(), 3);
        assert_eq!(val.len(), 1);
    }

    #[test]
    fn scarcity_split_partition_and_determinism() {
        let t = synth_table(50);
        let (tr1, va1, te1) = scarcity_split(&t, 20, 42).unwrap();
        let (tr2, va2, te2) = scarcity_split(&t, 20, 42).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert_eq!(te1, te2);
        let mut ids: Vec<u64> = tr1
            .rows
            .iter()
            .chain(va1.rows.iter())
            .chain(te1.rows.iter())
            .map(|r| r.id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), tr1.len() + va1.len() + te1.len()); // disjoint
    }

    #[test]
    fn scarcity_split_n_real_too_large() {
        let t = synth_table(10);
        assert!(scarcity_split(&t, 6, 0).is_err());
    }
}
