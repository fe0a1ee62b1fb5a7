//! Tabular CSV ingestion with one-hot encoding and a binary sensitive column.

use std::collections::BTreeSet;
use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{one_hot, Dataset, TargetKind};
use crate::error::{Result, SfpError};

/// How the sensitive column becomes 0/1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SensitiveRule {
    /// The column must have exactly two levels; the larger one (sorted) maps to 1.
    Binary,
    /// 1 when the value equals this level.
    Level(String),
    /// 1 when the numeric value is at least this threshold.
    AtLeast(f64),
}

/// Column roles and parsing options for one CSV source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    /// Files concatenated in order.
    pub paths: Vec<PathBuf>,
    /// Column names for files without a header row. When given, a first row
    /// equal to these names is skipped.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub target: String,
    /// Target values mapped to class 1; when empty every level is its own class.
    #[serde(default)]
    pub positive: Vec<String>,
    /// Treat the target as a continuous response instead of classes.
    #[serde(default)]
    pub continuous_target: bool,
    pub sensitive: String,
    #[serde(default = "default_rule")]
    pub sensitive_rule: SensitiveRule,
    /// Keep the sensitive column among the features.
    #[serde(default)]
    pub include_sensitive: bool,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub drop: Vec<String>,
    /// Field values treated as missing (row dropped).
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
}

fn default_delimiter() -> char {
    ','
}

fn default_rule() -> SensitiveRule {
    SensitiveRule::Binary
}

fn default_missing() -> Vec<String> {
    vec!["?".into(), String::new()]
}

const ADULT_COLUMNS: [&str; 15] = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
];

impl CsvSpec {
    /// UCI Adult (`adult.data`, optionally `adult.test`): income above 50K is
    /// the positive class and sex is the sensitive attribute.
    pub fn adult(paths: Vec<PathBuf>) -> Self {
        Self {
            paths,
            columns: Some(ADULT_COLUMNS.iter().map(|s| s.to_string()).collect()),
            delimiter: ',',
            target: "income".into(),
            positive: vec![">50K".into(), ">50K.".into()],
            continuous_target: false,
            sensitive: "sex".into(),
            sensitive_rule: SensitiveRule::Level("Male".into()),
            include_sensitive: false,
            categorical: [
                "workclass",
                "education",
                "marital-status",
                "occupation",
                "relationship",
                "race",
                "native-country",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            drop: Vec::new(),
            missing: default_missing(),
        }
    }

    /// UCI Bank Marketing (`bank-full.csv`, `;`-separated): subscription is
    /// the positive class; the sensitive attribute is age of at least 25.
    pub fn bank(path: PathBuf) -> Self {
        Self {
            paths: vec![path],
            columns: None,
            delimiter: ';',
            target: "y".into(),
            positive: vec!["yes".into()],
            continuous_target: false,
            sensitive: "age".into(),
            sensitive_rule: SensitiveRule::AtLeast(25.0),
            include_sensitive: false,
            categorical: [
                "job", "marital", "education", "default", "housing", "loan", "contact", "month",
                "poutcome",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            drop: Vec::new(),
            missing: vec![String::new()],
        }
    }
}

struct Raw {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
    dropped: usize,
}

fn read_raw(spec: &CsvSpec) -> Result<Raw> {
    if spec.paths.is_empty() {
        return Err(SfpError::Input("no CSV paths given".into()));
    }
    let delim = u8::try_from(spec.delimiter as u32)
        .map_err(|_| SfpError::Input(format!("delimiter {:?} is not ASCII", spec.delimiter)))?;
    let mut header: Option<Vec<String>> = spec.columns.clone();
    let mut rows = Vec::new();
    let mut dropped = 0;
    for path in &spec.paths {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delim)
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'|'))
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => SfpError::Input(format!("cannot open {}: {e}", path.display())),
                _ => e.into(),
            })?;
        let mut first = true;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
            if fields.len() == 1 && fields[0].is_empty() {
                continue;
            }
            if first {
                first = false;
                match &header {
                    None => {
                        header = Some(fields);
                        continue;
                    }
                    Some(h) if *h == fields => continue,
                    Some(_) => {}
                }
            }
            let width = header.as_ref().map(|h| h.len()).unwrap_or(0);
            if fields.len() != width {
                return Err(SfpError::Csv {
                    line,
                    message: format!("expected {width} fields, found {}", fields.len()),
                });
            }
            if fields.iter().any(|f| spec.missing.contains(f)) {
                dropped += 1;
                continue;
            }
            rows.push((line, fields));
        }
    }
    Ok(Raw {
        header: header.unwrap_or_default(),
        rows,
        dropped,
    })
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| SfpError::Input(format!("column '{name}' not found")))
}

fn parse_num(v: &str, line: u64, col: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| SfpError::Csv {
            line,
            message: format!("column '{col}': cannot parse '{v}' as a number"),
        })
}

/// Loads and encodes a CSV dataset. Rows with missing fields are dropped and
/// counted in the dataset notes. Features are not standardized here.
pub fn load_csv(spec: &CsvSpec) -> Result<Dataset> {
    let raw = read_raw(spec)?;
    let h = &raw.header;
    let t_idx = column_index(h, &spec.target)?;
    let s_idx = column_index(h, &spec.sensitive)?;
    for c in spec.categorical.iter().chain(&spec.drop) {
        column_index(h, c)?;
    }
    if raw.rows.is_empty() {
        return Err(SfpError::Input("no complete rows in CSV input".into()));
    }

    // feature layout
    enum Col {
        Numeric(usize),
        OneHot(usize, Vec<String>),
    }
    let mut layout = Vec::new();
    let mut names = Vec::new();
    for (j, name) in h.iter().enumerate() {
        if j == t_idx || spec.drop.contains(name) || (j == s_idx && !spec.include_sensitive) {
            continue;
        }
        if spec.categorical.contains(name) {
            let levels: BTreeSet<&str> = raw.rows.iter().map(|(_, r)| r[j].as_str()).collect();
            let levels: Vec<String> = levels.into_iter().map(String::from).collect();
            for l in &levels {
                names.push(format!("{name}={l}"));
            }
            layout.push(Col::OneHot(j, levels));
        } else {
            names.push(name.clone());
            layout.push(Col::Numeric(j));
        }
    }

    let n = raw.rows.len();
    let p = names.len();
    let mut x = DMatrix::zeros(n, p);
    for (i, (line, r)) in raw.rows.iter().enumerate() {
        let mut c = 0;
        for col in &layout {
            match col {
                Col::Numeric(j) => {
                    x[(i, c)] = parse_num(&r[*j], *line, &h[*j])?;
                    c += 1;
                }
                Col::OneHot(j, levels) => {
                    let pos = levels.binary_search(&r[*j]).expect("level collected");
                    x[(i, c + pos)] = 1.0;
                    c += levels.len();
                }
            }
        }
    }

    let z: Vec<usize> = match &spec.sensitive_rule {
        SensitiveRule::Binary => {
            let levels: BTreeSet<&str> = raw.rows.iter().map(|(_, r)| r[s_idx].as_str()).collect();
            if levels.len() != 2 {
                return Err(SfpError::Input(format!(
                    "sensitive column '{}' has {} levels, expected 2",
                    spec.sensitive,
                    levels.len()
                )));
            }
            let hi = levels.iter().next_back().expect("two levels").to_string();
            raw.rows.iter().map(|(_, r)| (r[s_idx] == hi) as usize).collect()
        }
        SensitiveRule::Level(level) => raw.rows.iter().map(|(_, r)| (r[s_idx] == *level) as usize).collect(),
        SensitiveRule::AtLeast(t) => raw
            .rows
            .iter()
            .map(|(line, r)| parse_num(&r[s_idx], *line, &spec.sensitive).map(|v| (v >= *t) as usize))
            .collect::<Result<_>>()?,
    };
    let ones = z.iter().sum::<usize>();
    if ones == 0 || ones == n {
        return Err(SfpError::Input(format!(
            "sensitive column '{}' is constant after encoding",
            spec.sensitive
        )));
    }

    let (y, target) = if spec.continuous_target {
        let y = raw
            .rows
            .iter()
            .map(|(line, r)| parse_num(&r[t_idx], *line, &spec.target))
            .collect::<Result<Vec<f64>>>()?;
        (DMatrix::from_column_slice(n, 1, &y), TargetKind::Continuous)
    } else if !spec.positive.is_empty() {
        let labels: Vec<usize> = raw
            .rows
            .iter()
            .map(|(_, r)| spec.positive.contains(&r[t_idx]) as usize)
            .collect();
        (one_hot(&labels, 2), TargetKind::Classes(2))
    } else {
        let levels: BTreeSet<&str> = raw.rows.iter().map(|(_, r)| r[t_idx].as_str()).collect();
        let levels: Vec<&str> = levels.into_iter().collect();
        if levels.len() < 2 {
            return Err(SfpError::Input("target has fewer than two classes".into()));
        }
        let labels: Vec<usize> = raw
            .rows
            .iter()
            .map(|(_, r)| levels.binary_search(&r[t_idx].as_str()).expect("level collected"))
            .collect();
        (one_hot(&labels, levels.len()), TargetKind::Classes(levels.len()))
    };

    let mut ds = Dataset::new(x, y, z, target)?;
    ds.feature_names = names;
    ds.notes.push(format!("dropped {} rows with missing values", raw.dropped));
    Ok(ds)
}
