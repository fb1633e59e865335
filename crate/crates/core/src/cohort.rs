//! Cohort tables: typed CSV ingestion, listwise deletion, and the derived
//! child-abuse exposure indicators (dichotomized Likert items combined across
//! raters and periods).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{MegaError, Result};

/// Reserved name of the subject identifier column.
pub const SUBJECT_ID: &str = "subject_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnKind {
    Continuous,
    Binary,
    Categorical,
    /// Integer responses 1..=5, Never..Very often.
    Likert,
}

impl ColumnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnKind::Continuous => "continuous",
            ColumnKind::Binary => "binary",
            ColumnKind::Categorical => "categorical",
            ColumnKind::Likert => "likert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" | "numeric" => Ok(ColumnKind::Continuous),
            "binary" => Ok(ColumnKind::Binary),
            "categorical" => Ok(ColumnKind::Categorical),
            "likert" | "ordinal" => Ok(ColumnKind::Likert),
            other => Err(MegaError::Config(format!("unknown column kind `{other}`"))),
        }
    }
}

/// Likert labels accepted at load time, case-insensitively.
const LIKERT_LABELS: [(&str, u8); 5] = [
    ("never", 1),
    ("rarely", 2),
    ("sometimes", 3),
    ("often", 4),
    ("very often", 5),
];

/// One typed column. Categorical cells hold indices into `levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    name: String,
    kind: ColumnKind,
    values: Vec<Option<f64>>,
    levels: Vec<String>,
    hidden: bool,
}

impl Column {
    pub fn continuous(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Continuous,
            values,
            levels: Vec::new(),
            hidden: false,
        }
    }

    /// Continuous column without missing cells.
    pub fn from_f64(name: impl Into<String>, values: &[f64]) -> Self {
        Self::continuous(name, values.iter().map(|&v| Some(v)).collect())
    }

    pub fn binary(name: impl Into<String>, values: Vec<Option<bool>>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Binary,
            values: values.into_iter().map(|v| v.map(|b| if b { 1.0 } else { 0.0 })).collect(),
            levels: Vec::new(),
            hidden: false,
        }
    }

    pub fn likert(name: impl Into<String>, values: Vec<Option<u8>>) -> Result<Self> {
        let name = name.into();
        if let Some(bad) = values.iter().flatten().find(|v| !(1..=5).contains(*v)) {
            return Err(MegaError::InvalidArgument(format!(
                "likert column `{name}` holds {bad}, outside 1..=5"
            )));
        }
        Ok(Column {
            name,
            kind: ColumnKind::Likert,
            values: values.into_iter().map(|v| v.map(f64::from)).collect(),
            levels: Vec::new(),
            hidden: false,
        })
    }

    pub fn categorical(name: impl Into<String>, values: Vec<Option<String>>) -> Self {
        let levels = sorted_levels(values.iter().flatten().cloned().collect());
        let index: HashMap<&str, usize> =
            levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let codes = values
            .iter()
            .map(|v| v.as_ref().map(|s| index[s.as_str()] as f64))
            .collect();
        Column {
            name: name.into(),
            kind: ColumnKind::Categorical,
            values: codes,
            levels,
            hidden: false,
        }
    }

    /// Marks the column as oracle-only; it is skipped by CSV export.
    pub fn into_hidden(mut self) -> Self {
        self.hidden = true;
        self
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ColumnKind {
        self.kind
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn is_hidden(&self) -> bool {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Binary view of the column; errors unless the kind is binary.
    pub fn as_bool(&self) -> Result<Vec<Option<bool>>> {
        if self.kind != ColumnKind::Binary {
            return Err(self.wrong_kind("binary"));
        }
        Ok(self.values.iter().map(|v| v.map(|x| x != 0.0)).collect())
    }

    /// Level label for categorical cells, plain number otherwise.
    pub fn display_cell(&self, row: usize) -> String {
        match self.values[row] {
            None => String::new(),
            Some(v) if self.kind == ColumnKind::Categorical => self.levels[v as usize].clone(),
            Some(v) => format!("{v}"),
        }
    }

    fn take_rows(&self, rows: &[usize]) -> Column {
        Column {
            values: rows.iter().map(|&r| self.values[r]).collect(),
            ..self.clone()
        }
    }

    fn wrong_kind(&self, expected: &'static str) -> MegaError {
        MegaError::WrongKind {
            column: self.name.clone(),
            expected,
            found: self.kind.as_str(),
        }
    }
}

/// Numeric levels sort numerically, anything else lexicographically.
fn sorted_levels(raw: Vec<String>) -> Vec<String> {
    let mut uniq: Vec<String> = raw.into_iter().collect::<HashSet<_>>().into_iter().collect();
    if uniq.iter().all(|s| s.parse::<f64>().is_ok()) {
        uniq.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    } else {
        uniq.sort();
    }
    uniq
}

/// Design matrix with expanded dummy columns.
#[derive(Debug, Clone)]
pub struct Design {
    pub names: Vec<String>,
    pub matrix: DMatrix<f64>,
}

/// Rectangular subjects x variables table. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    ids: Vec<String>,
    columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionReport {
    pub before: usize,
    pub retained: usize,
}

impl CohortTable {
    pub fn new(ids: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(MegaError::DuplicateSubject(id.clone()));
            }
        }
        let mut names = HashSet::new();
        for c in &columns {
            if c.len() != ids.len() {
                return Err(MegaError::DimensionMismatch(format!(
                    "column `{}` has {} rows, table has {}",
                    c.name,
                    c.len(),
                    ids.len()
                )));
            }
            if !names.insert(c.name.as_str()) || c.name == SUBJECT_ID {
                return Err(MegaError::SchemaMismatch(c.name.clone()));
            }
        }
        Ok(CohortTable { ids, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| MegaError::UnknownColumn(name.to_string()))
    }

    /// Adds `col`, replacing any column with the same name.
    pub fn with_column(mut self, col: Column) -> Result<Self> {
        if col.len() != self.n_rows() {
            return Err(MegaError::DimensionMismatch(format!(
                "column `{}` has {} rows, table has {}",
                col.name,
                col.len(),
                self.n_rows()
            )));
        }
        match self.columns.iter_mut().find(|c| c.name == col.name) {
            Some(slot) => *slot = col,
            None => self.columns.push(col),
        }
        Ok(self)
    }

    /// Listwise deletion on `vars`, preserving row order.
    pub fn select_complete(&self, vars: &[&str]) -> Result<(CohortTable, SelectionReport)> {
        let cols = vars.iter().map(|v| self.column(v)).collect::<Result<Vec<_>>>()?;
        let keep: Vec<bool> = (0..self.n_rows())
            .map(|r| cols.iter().all(|c| c.values[r].is_some()))
            .collect();
        let table = self.filter_rows(&keep);
        let report = SelectionReport {
            before: self.n_rows(),
            retained: table.n_rows(),
        };
        if report.retained == 0 && report.before > 0 {
            log::warn!("listwise deletion on {vars:?} removed every row");
        }
        Ok((table, report))
    }

    pub fn filter_rows(&self, keep: &[bool]) -> CohortTable {
        let rows: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        self.take_rows(&rows)
    }

    /// Rows in the given order; indices may not repeat.
    pub fn take_rows(&self, rows: &[usize]) -> CohortTable {
        CohortTable {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            columns: self.columns.iter().map(|c| c.take_rows(rows)).collect(),
        }
    }

    /// Inner join on subject id, keeping this table's row order.
    pub fn join(&self, other: &CohortTable) -> Result<CohortTable> {
        let pos: HashMap<&str, usize> =
            other.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            if let Some(&j) = pos.get(id.as_str()) {
                left.push(i);
                right.push(j);
            }
        }
        let mut out = self.take_rows(&left);
        for c in &other.columns {
            out = out.with_column(c.take_rows(&right))?;
        }
        Ok(out)
    }

    /// Values of a numeric column that must be fully observed.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let col = self.column(name)?;
        if col.kind == ColumnKind::Categorical {
            return Err(col.wrong_kind("numeric"));
        }
        col.values
            .iter()
            .map(|v| v.ok_or_else(|| MegaError::InsufficientData(format!("column `{name}` has missing cells"))))
            .collect()
    }

    /// Numeric design for `names`; categorical columns expand to dummies for
    /// every level but the first. All cells must be observed.
    pub fn design(&self, names: &[&str]) -> Result<Design> {
        let mut out_names = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for &name in names {
            let col = self.column(name)?;
            if col.n_missing() > 0 {
                return Err(MegaError::InsufficientData(format!(
                    "column `{name}` has {} missing cells",
                    col.n_missing()
                )));
            }
            if col.kind == ColumnKind::Categorical {
                for (code, level) in col.levels.iter().enumerate().skip(1) {
                    out_names.push(format!("{name}={level}"));
                    cols.push(
                        col.values
                            .iter()
                            .map(|v| if v.unwrap() as usize == code { 1.0 } else { 0.0 })
                            .collect(),
                    );
                }
            } else {
                out_names.push(name.to_string());
                cols.push(col.values.iter().map(|v| v.unwrap()).collect());
            }
        }
        let n = self.n_rows();
        let matrix = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
        Ok(Design {
            names: out_names,
            matrix,
        })
    }

    /// RFC-4180 CSV; hidden (truth) columns only when `include_hidden`.
    pub fn to_csv(&self, include_hidden: bool) -> Result<Vec<u8>> {
        let cols: Vec<&Column> = self
            .columns
            .iter()
            .filter(|c| include_hidden || !c.hidden)
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![SUBJECT_ID.to_string()];
        header.extend(cols.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![self.ids[r].clone()];
            rec.extend(cols.iter().map(|c| c.display_cell(r)));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| MegaError::Csv(e.to_string()))
    }

    /// Schema describing this table's visible columns.
    pub fn schema(&self) -> Schema {
        let mut s = Schema::new();
        for c in self.columns.iter().filter(|c| !c.hidden) {
            s = s.with(c.name.clone(), c.kind);
        }
        s
    }
}

/// Column-type map used at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub id_column: String,
    pub columns: Vec<(String, ColumnKind)>,
    pub missing_tokens: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self::new()
    }
}

impl Schema {
    pub fn new() -> Self {
        Schema {
            id_column: SUBJECT_ID.to_string(),
            columns: Vec::new(),
            missing_tokens: vec![String::new()],
        }
    }

    pub fn with(mut self, name: impl Into<String>, kind: ColumnKind) -> Self {
        self.columns.push((name.into(), kind));
        self
    }

    /// Adds alternate missing tokens such as `NA` or `.`.
    pub fn with_missing_tokens<I, S>(mut self, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.missing_tokens.extend(tokens.into_iter().map(Into::into));
        self
    }

    pub fn kind_of(&self, name: &str) -> Option<ColumnKind> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, k)| *k)
    }

    /// Parses `name=kind` lines; `missing=NA,.` adds missing tokens.
    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = Schema::new();
        for (key, value) in crate::config::parse_key_values(text)? {
            match key.as_str() {
                "missing" => {
                    schema = schema.with_missing_tokens(value.split(',').map(|s| s.trim().to_string()))
                }
                "id" => schema.id_column = value,
                _ => schema = schema.with(key, ColumnKind::parse(&value)?),
            }
        }
        Ok(schema)
    }

    /// Guesses a schema from the data: `subject_id` is the key, `clock_*` and
    /// `age*` are continuous, all-0/1 columns binary, other numeric columns
    /// continuous, anything else categorical.
    pub fn infer<R: Read>(reader: R, missing_tokens: &[&str]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut all_numeric = vec![true; header.len()];
        let mut all_binary = vec![true; header.len()];
        let is_missing =
            |s: &str| s.is_empty() || missing_tokens.iter().any(|t| t.eq_ignore_ascii_case(s));
        for rec in rdr.records() {
            let rec = rec?;
            for (j, cell) in rec.iter().enumerate().take(header.len()) {
                if is_missing(cell) {
                    continue;
                }
                match cell.parse::<f64>() {
                    Ok(v) => {
                        if v != 0.0 && v != 1.0 {
                            all_binary[j] = false;
                        }
                    }
                    Err(_) => {
                        all_numeric[j] = false;
                        all_binary[j] = false;
                    }
                }
            }
        }
        let mut schema = Schema::new().with_missing_tokens(missing_tokens.iter().map(|s| s.to_string()));
        for (j, name) in header.iter().enumerate() {
            if name == SUBJECT_ID {
                continue;
            }
            let kind = if name.starts_with("clock_") || name.starts_with("age") {
                ColumnKind::Continuous
            } else if all_binary[j] {
                ColumnKind::Binary
            } else if all_numeric[j] {
                ColumnKind::Continuous
            } else {
                ColumnKind::Categorical
            };
            schema = schema.with(name.clone(), kind);
        }
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvalidCell {
    pub column: String,
    pub row: usize,
    pub raw: String,
}

/// Plain-text account of what the loader did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows: usize,
    /// Blank or missing-token cells plus cells that failed their type.
    pub missing_cells: usize,
    pub invalid: Vec<InvalidCell>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows={}", self.rows)?;
        writeln!(f, "missing_cells={}", self.missing_cells)?;
        writeln!(f, "invalid_cells={}", self.invalid.len())?;
        for cell in &self.invalid {
            writeln!(
                f,
                "warning: column `{}` row {}: value `{}` fails type, marked missing",
                cell.column, cell.row, cell.raw
            )?;
        }
        Ok(())
    }
}

pub fn load_cohort(path: impl AsRef<Path>, schema: &Schema) -> Result<(CohortTable, LoadReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| MegaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_cohort(file, schema)
}

pub fn read_cohort<R: Read>(reader: R, schema: &Schema) -> Result<(CohortTable, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(_) => return Err(MegaError::NoData),
    };
    if header.iter().all(|h| h.is_empty()) {
        return Err(MegaError::NoData);
    }
    let id_pos = header
        .iter()
        .position(|h| *h == schema.id_column)
        .ok_or_else(|| MegaError::SchemaMismatch(schema.id_column.clone()))?;
    for h in header.iter().filter(|h| **h != schema.id_column) {
        if schema.kind_of(h).is_none() {
            return Err(MegaError::SchemaMismatch(h.clone()));
        }
    }
    for (name, _) in &schema.columns {
        if !header.contains(name) {
            return Err(MegaError::SchemaMismatch(name.clone()));
        }
    }

    let mut ids = Vec::new();
    let mut raw: Vec<Vec<Option<String>>> = vec![Vec::new(); header.len()];
    let is_missing = |s: &str| schema.missing_tokens.iter().any(|t| t.eq_ignore_ascii_case(s));
    for rec in rdr.records() {
        let rec = rec?;
        ids.push(rec.get(id_pos).unwrap_or("").to_string());
        for (j, cell) in rec.iter().enumerate() {
            raw[j].push((!is_missing(cell)).then(|| cell.to_string()));
        }
    }
    if ids.is_empty() {
        return Err(MegaError::NoData);
    }

    let mut report = LoadReport {
        rows: ids.len(),
        ..Default::default()
    };
    let mut columns = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if j == id_pos {
            continue;
        }
        let kind = schema.kind_of(name).expect("checked above");
        let cells = std::mem::take(&mut raw[j]);
        report.missing_cells += cells.iter().filter(|c| c.is_none()).count();
        let mut parsed: Vec<Option<String>> = Vec::with_capacity(cells.len());
        for (row, cell) in cells.into_iter().enumerate() {
            let ok = match (&cell, kind) {
                (None, _) => None,
                (Some(s), ColumnKind::Categorical) => Some(s.clone()),
                (Some(s), k) => match parse_typed(s, k) {
                    Some(v) => Some(v.to_string()),
                    None => {
                        log::warn!("column `{name}` row {row}: `{s}` fails {} type", k.as_str());
                        report.invalid.push(InvalidCell {
                            column: name.clone(),
                            row,
                            raw: s.clone(),
                        });
                        report.missing_cells += 1;
                        None
                    }
                },
            };
            parsed.push(ok);
        }
        let column = match kind {
            ColumnKind::Categorical => Column::categorical(name.clone(), parsed),
            _ => Column {
                name: name.clone(),
                kind,
                values: parsed.iter().map(|c| c.as_ref().map(|s| s.parse().unwrap())).collect(),
                levels: Vec::new(),
                hidden: false,
            },
        };
        columns.push(column);
    }
    let table = CohortTable::new(ids, columns)?;
    Ok((table, report))
}

fn parse_typed(s: &str, kind: ColumnKind) -> Option<f64> {
    match kind {
        ColumnKind::Continuous => s.parse::<f64>().ok().filter(|v| v.is_finite()),
        ColumnKind::Binary => s.parse::<f64>().ok().filter(|v| *v == 0.0 || *v == 1.0),
        ColumnKind::Likert => {
            if let Some((_, code)) = LIKERT_LABELS.iter().find(|(l, _)| l.eq_ignore_ascii_case(s)) {
                return Some(f64::from(*code));
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && (1.0..=5.0).contains(v))
        }
        ColumnKind::Categorical => None,
    }
}

// ---------------------------------------------------------------------------
// Abuse exposure indicators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rater {
    Mother,
    Partner,
    Child,
}

impl Rater {
    pub const ALL: [Rater; 3] = [Rater::Mother, Rater::Partner, Rater::Child];

    fn bit(self) -> u8 {
        match self {
            Rater::Mother => 1,
            Rater::Partner => 2,
            Rater::Child => 4,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Rater::Mother => 'M',
            Rater::Partner => 'P',
            Rater::Child => 'C',
        }
    }

    /// Short name used in column naming conventions (`mother`, `partner`, `child`).
    pub fn key(self) -> &'static str {
        match self {
            Rater::Mother => "mother",
            Rater::Partner => "partner",
            Rater::Child => "child",
        }
    }
}

/// Nonempty subset of {Mother, Partner, Child}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RaterSet(u8);

impl RaterSet {
    pub fn new(raters: &[Rater]) -> Result<Self> {
        let bits = raters.iter().fold(0, |acc, r| acc | r.bit());
        if bits == 0 {
            return Err(MegaError::InvalidArgument("empty rater set".into()));
        }
        Ok(RaterSet(bits))
    }

    pub fn single(r: Rater) -> Self {
        RaterSet(r.bit())
    }

    pub fn all() -> Self {
        RaterSet(7)
    }

    pub fn contains(self, r: Rater) -> bool {
        self.0 & r.bit() != 0
    }

    pub fn is_subset_of(self, other: RaterSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn raters(self) -> Vec<Rater> {
        Rater::ALL.into_iter().filter(|r| self.contains(*r)).collect()
    }

    /// Column label in the M, P, C, MP, CM, CP, CMP convention.
    pub fn label(self) -> String {
        let mut s = String::new();
        if self.contains(Rater::Child) {
            s.push('C');
        }
        if self.contains(Rater::Mother) {
            s.push('M');
        }
        if self.contains(Rater::Partner) {
            s.push('P');
        }
        s
    }

    /// Position in the canonical column order M, P, C, MP, CM, CP, CMP.
    pub fn canonical_rank(self) -> usize {
        [1u8, 2, 4, 3, 5, 6, 7].iter().position(|&b| b == self.0).unwrap()
    }

    /// Every nonempty rater set in canonical order.
    pub fn every() -> Vec<RaterSet> {
        [1u8, 2, 4, 3, 5, 6, 7].into_iter().map(RaterSet).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Period {
    /// Birth to age 10.
    Early,
    /// Ages 11 to 18.
    Late,
}

impl Period {
    pub fn label(self) -> &'static str {
        match self {
            Period::Early => "0-10",
            Period::Late => "11-18",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Period::Early => "0_10",
            Period::Late => "11_18",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AbuseKind {
    Cruelty,
    SexAbuse,
    Any,
}

impl AbuseKind {
    pub fn label(self) -> &'static str {
        match self {
            AbuseKind::Cruelty => "Child cruelty",
            AbuseKind::SexAbuse => "Sex abuse",
            AbuseKind::Any => "Any child abuse",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            AbuseKind::Cruelty => "cruelty",
            AbuseKind::SexAbuse => "sex",
            AbuseKind::Any => "any",
        }
    }
}

/// "Happened at least <threshold>" on a 1..=5 Likert item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbuseRule {
    pub item: String,
    pub threshold: u8,
}

impl AbuseRule {
    pub fn new(item: impl Into<String>, threshold: u8) -> Result<Self> {
        if !(1..=5).contains(&threshold) {
            return Err(MegaError::InvalidArgument(format!(
                "threshold {threshold} outside 1..=5"
            )));
        }
        Ok(AbuseRule {
            item: item.into(),
            threshold,
        })
    }

    pub fn at_least_rarely(item: impl Into<String>) -> Self {
        AbuseRule {
            item: item.into(),
            threshold: 2,
        }
    }

    pub fn at_least_sometimes(item: impl Into<String>) -> Self {
        AbuseRule {
            item: item.into(),
            threshold: 3,
        }
    }
}

/// Binary column `response >= threshold`, missing stays missing.
pub fn dichotomize(table: &CohortTable, rule: &AbuseRule) -> Result<Column> {
    let col = table.column(&rule.item)?;
    if col.kind != ColumnKind::Likert {
        return Err(col.wrong_kind("likert"));
    }
    let t = f64::from(rule.threshold);
    Ok(Column::binary(
        format!("{}_ge{}", rule.item, rule.threshold),
        col.values.iter().map(|v| v.map(|x| x >= t)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbuseIndicator {
    pub raters: RaterSet,
    pub period: Period,
    pub kind: AbuseKind,
    pub values: Vec<Option<bool>>,
}

/// OR over the observed inputs; missing only when every input is missing.
fn or_observed<'a>(inputs: impl Iterator<Item = &'a [Option<bool>]>, n: usize) -> Vec<Option<bool>> {
    let mut out: Vec<Option<bool>> = vec![None; n];
    for values in inputs {
        for (slot, v) in out.iter_mut().zip(values) {
            if let Some(b) = v {
                *slot = Some(slot.unwrap_or(false) || *b);
            }
        }
    }
    out
}

impl AbuseIndicator {
    /// ORs several binary item columns reported by the same rater(s).
    pub fn from_items(raters: RaterSet, period: Period, kind: AbuseKind, items: &[&Column]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| MegaError::InvalidArgument("no items".into()))?;
        let bools = items.iter().map(|c| c.as_bool()).collect::<Result<Vec<_>>>()?;
        Ok(AbuseIndicator {
            raters,
            period,
            kind,
            values: or_observed(bools.iter().map(|v| v.as_slice()), first.len()),
        })
    }

    /// Share of ones among observed subjects, `None` if nobody is observed.
    pub fn prevalence(&self) -> Option<f64> {
        let observed: Vec<bool> = self.values.iter().flatten().copied().collect();
        (!observed.is_empty())
            .then(|| observed.iter().filter(|b| **b).count() as f64 / observed.len() as f64)
    }

    pub fn default_name(&self) -> String {
        format!(
            "{}_{}_{}",
            self.kind.key(),
            self.raters.label().to_ascii_lowercase(),
            self.period.key()
        )
    }

    pub fn to_column(&self, name: impl Into<String>) -> Column {
        Column::binary(name, self.values.clone())
    }
}

/// Per-subject OR across the indicators whose raters fall inside `raters`.
pub fn combine_raters(indicators: &[AbuseIndicator], raters: RaterSet, period: Period) -> Result<AbuseIndicator> {
    if indicators.iter().any(|i| i.period != period) {
        return Err(MegaError::MixedPeriods);
    }
    let chosen: Vec<&AbuseIndicator> = indicators
        .iter()
        .filter(|i| i.raters.is_subset_of(raters))
        .collect();
    let first = chosen
        .first()
        .ok_or_else(|| MegaError::InvalidArgument(format!("no indicator for raters {}", raters.label())))?;
    if chosen.iter().any(|i| i.kind != first.kind) {
        return Err(MegaError::InvalidArgument("mixed abuse kinds".into()));
    }
    if chosen.iter().any(|i| i.values.len() != first.values.len()) {
        return Err(MegaError::DimensionMismatch("indicator lengths differ".into()));
    }
    Ok(AbuseIndicator {
        raters,
        period,
        kind: first.kind,
        values: or_observed(chosen.iter().map(|i| i.values.as_slice()), first.values.len()),
    })
}

/// "Any abuse": cruelty from the cruelty raters OR child-reported sex abuse.
pub fn any_abuse(cruelty: &AbuseIndicator, sex: &AbuseIndicator) -> Result<AbuseIndicator> {
    if cruelty.period != sex.period {
        return Err(MegaError::MixedPeriods);
    }
    if cruelty.values.len() != sex.values.len() {
        return Err(MegaError::DimensionMismatch("indicator lengths differ".into()));
    }
    Ok(AbuseIndicator {
        raters: cruelty.raters,
        period: cruelty.period,
        kind: AbuseKind::Any,
        values: or_observed(
            [cruelty.values.as_slice(), sex.values.as_slice()].into_iter(),
            cruelty.values.len(),
        ),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrevalenceCell {
    pub raters: RaterSet,
    pub period: Period,
    pub kind: AbuseKind,
    pub observed: usize,
    pub positive: usize,
}

impl PrevalenceCell {
    pub fn percent(&self) -> f64 {
        if self.observed == 0 {
            0.0
        } else {
            100.0 * self.positive as f64 / self.observed as f64
        }
    }
}

/// Prevalence of abuse by rater set, period and kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrevalenceTable {
    pub cells: Vec<PrevalenceCell>,
    /// Share (percent) exposed to any abuse in both periods, per rater set.
    pub persistence: Vec<(RaterSet, f64)>,
}

pub fn prevalence_table(indicators: &[AbuseIndicator]) -> PrevalenceTable {
    let mut cells: Vec<PrevalenceCell> = indicators
        .iter()
        .map(|i| {
            let observed = i.values.iter().flatten().count();
            let positive = i.values.iter().flatten().filter(|b| **b).count();
            PrevalenceCell {
                raters: i.raters,
                period: i.period,
                kind: i.kind,
                observed,
                positive,
            }
        })
        .collect();
    cells.sort_by_key(|c| (c.period, c.kind, c.raters.canonical_rank()));

    let mut persistence = Vec::new();
    for set in RaterSet::every() {
        let find = |p: Period| {
            indicators
                .iter()
                .find(|i| i.raters == set && i.period == p && i.kind == AbuseKind::Any)
        };
        if let (Some(early), Some(late)) = (find(Period::Early), find(Period::Late)) {
            let both: Vec<bool> = early
                .values
                .iter()
                .zip(&late.values)
                .filter_map(|(a, b)| Some(a.as_ref()? & b.as_ref()?))
                .collect();
            if !both.is_empty() {
                let share = 100.0 * both.iter().filter(|b| **b).count() as f64 / both.len() as f64;
                persistence.push((set, share));
            }
        }
    }
    PrevalenceTable { cells, persistence }
}

impl PrevalenceTable {
    fn rater_columns(&self) -> Vec<RaterSet> {
        let mut sets: Vec<RaterSet> = self.cells.iter().map(|c| c.raters).collect();
        sets.sort_by_key(|s| s.canonical_rank());
        sets.dedup();
        sets
    }

    fn cell(&self, raters: RaterSet, period: Period, kind: AbuseKind) -> Option<&PrevalenceCell> {
        self.cells
            .iter()
            .find(|c| c.raters == raters && c.period == period && c.kind == kind)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["period", "kind", "raters", "observed", "positive", "percent"])?;
        for c in &self.cells {
            w.write_record([
                c.period.label().to_string(),
                c.kind.label().to_string(),
                c.raters.label(),
                c.observed.to_string(),
                c.positive.to_string(),
                format!("{:.1}", c.percent()),
            ])?;
        }
        for (set, share) in &self.persistence {
            w.write_record([
                "both".to_string(),
                "Persistence (any abuse)".to_string(),
                set.label(),
                String::new(),
                String::new(),
                format!("{share:.1}"),
            ])?;
        }
        w.into_inner().map_err(|e| MegaError::Csv(e.to_string()))
    }
}

impl fmt::Display for PrevalenceTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sets = self.rater_columns();
        write!(f, "{:<20}", "")?;
        for (i, s) in sets.iter().enumerate() {
            write!(f, "{:>10}", format!("{} ({})", s.label(), i + 1))?;
        }
        writeln!(f)?;
        let periods: BTreeMap<Period, ()> = self.cells.iter().map(|c| (c.period, ())).collect();
        for period in periods.keys() {
            writeln!(f, "Age {}", period.label())?;
            for kind in [AbuseKind::Cruelty, AbuseKind::SexAbuse, AbuseKind::Any] {
                if !self.cells.iter().any(|c| c.period == *period && c.kind == kind) {
                    continue;
                }
                write!(f, "{:<20}", kind.label())?;
                for s in &sets {
                    match self.cell(*s, *period, kind) {
                        Some(c) => write!(f, "{:>10}", format!("{:.1}%", c.percent()))?,
                        None => write!(f, "{:>10}", "")?,
                    }
                }
                writeln!(f)?;
            }
        }
        if !self.persistence.is_empty() {
            write!(f, "{:<20}", "Both periods")?;
            for s in &sets {
                match self.persistence.iter().find(|(p, _)| p == s) {
                    Some((_, v)) => write!(f, "{:>10}", format!("{v:.1}%"))?,
                    None => write!(f, "{:>10}", "")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Column name convention for a rater's Likert cruelty item.
pub fn cruelty_item_name(rater: Rater, period: Period) -> String {
    format!("cruelty_{}_{}", rater.key(), period.key())
}

/// Column name convention for the child-reported sex-abuse item.
pub fn sex_item_name(period: Period) -> String {
    format!("sex_child_{}", period.key())
}

/// Every abuse indicator derivable from the conventional item columns:
/// cruelty and any-abuse for each rater set present and each period, plus
/// child sex abuse. Cruelty items use "at least sometimes", sex-abuse items
/// "at least once" (threshold 2).
pub fn derive_abuse_indicators(table: &CohortTable) -> Result<Vec<AbuseIndicator>> {
    let mut out = Vec::new();
    for period in [Period::Early, Period::Late] {
        let mut singles = Vec::new();
        for rater in Rater::ALL {
            let name = cruelty_item_name(rater, period);
            if table.has_column(&name) {
                let col = dichotomize(table, &AbuseRule::at_least_sometimes(name))?;
                singles.push(AbuseIndicator::from_items(
                    RaterSet::single(rater),
                    period,
                    AbuseKind::Cruelty,
                    &[&col],
                )?);
            }
        }
        let sex_name = sex_item_name(period);
        let sex = if table.has_column(&sex_name) {
            let col = dichotomize(table, &AbuseRule::at_least_rarely(sex_name))?;
            Some(AbuseIndicator::from_items(
                RaterSet::single(Rater::Child),
                period,
                AbuseKind::SexAbuse,
                &[&col],
            )?)
        } else {
            None
        };
        let available = singles.iter().fold(0u8, |acc, i| acc | i.raters.0);
        for set in RaterSet::every() {
            if !set.is_subset_of(RaterSet(available)) || available == 0 {
                continue;
            }
            let cruelty = combine_raters(&singles, set, period)?;
            if let Some(sex) = &sex {
                out.push(any_abuse(&cruelty, sex)?);
            }
            out.push(cruelty);
        }
        if let Some(sex) = sex {
            out.push(sex);
        }
    }
    Ok(out)
}
