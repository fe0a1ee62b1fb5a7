//! Datasets, synthetic generators, CSV loading, configuration and reports.

pub mod config;
pub mod csv;
pub mod report;
pub mod synth;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SfpError};
use crate::rng;

/// Which part of the data a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Regression targets or one-hot class indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "classes")]
pub enum TargetKind {
    Continuous,
    Classes(usize),
}

/// Ground truth carried by synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Orthonormal `p × (q + r − s)` direction matrix.
    pub a: DMatrix<f64>,
    pub q: usize,
    pub r: usize,
    pub s: usize,
    /// `p × K` coefficients.
    pub theta: DMatrix<f64>,
}

impl Truth {
    pub fn a_y(&self) -> DMatrix<f64> {
        self.a.columns(0, self.q).into_owned()
    }

    pub fn a_z(&self) -> DMatrix<f64> {
        self.a.columns(self.q - self.s, self.r).into_owned()
    }

    /// The shared columns of `A_Y` and `A_Z`.
    pub fn shared(&self) -> DMatrix<f64> {
        self.a.columns(self.q - self.s, self.s).into_owned()
    }

    /// Columns of `A_Y` not shared with `A_Z`.
    pub fn unshared(&self) -> DMatrix<f64> {
        self.a.columns(0, self.q - self.s).into_owned()
    }
}

/// Per-split row counts, plus counts per class and sensitive group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub tag: SplitTag,
    pub rows: usize,
    pub group_counts: [usize; 2],
    pub class_counts: Vec<usize>,
}

/// Features, target and binary sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    /// `n × K` targets; one-hot when `target` is [`TargetKind::Classes`].
    pub y: DMatrix<f64>,
    pub z: Vec<usize>,
    pub target: TargetKind,
    pub feature_names: Vec<String>,
    pub truth: Option<Truth>,
    pub split: Option<Vec<SplitTag>>,
    pub notes: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, z: Vec<usize>, target: TargetKind) -> Result<Self> {
        let n = x.nrows();
        if y.nrows() != n || z.len() != n {
            return Err(SfpError::Dimension(format!(
                "x has {n} rows, y {}, z {}",
                y.nrows(),
                z.len()
            )));
        }
        if z.iter().any(|&v| v > 1) {
            return Err(SfpError::Input("sensitive attribute must be 0/1".into()));
        }
        let feature_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            x,
            y,
            z,
            target,
            feature_names,
            truth: None,
            split: None,
            notes: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Class index per row (argmax of the one-hot target).
    pub fn labels(&self) -> Vec<usize> {
        argmax_rows(&self.y)
    }

    pub fn n_classes(&self) -> usize {
        match self.target {
            TargetKind::Classes(k) => k,
            TargetKind::Continuous => self.y.ncols(),
        }
    }

    /// Rows in the given order (repetition allowed). Split tags are dropped.
    pub fn rows(&self, idx: &[usize]) -> Dataset {
        let p = self.p();
        let k = self.y.ncols();
        Dataset {
            x: DMatrix::from_fn(idx.len(), p, |i, j| self.x[(idx[i], j)]),
            y: DMatrix::from_fn(idx.len(), k, |i, j| self.y[(idx[i], j)]),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            target: self.target,
            feature_names: self.feature_names.clone(),
            truth: self.truth.clone(),
            split: None,
            notes: self.notes.clone(),
        }
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        match &self.split {
            Some(tags) => (0..self.n()).filter(|&i| tags[i] == tag).collect(),
            None => Vec::new(),
        }
    }

    /// Rows carrying `tag`.
    pub fn part(&self, tag: SplitTag) -> Dataset {
        self.rows(&self.indices(tag))
    }

    /// SHA-256 over the raw bytes of x, y and z.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.x, &self.y] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for &v in &self.z {
            h.update([v as u8]);
        }
        hex(&h.finalize())
    }

    pub fn summary(&self, tag: SplitTag) -> SplitSummary {
        let idx = self.indices(tag);
        let mut group_counts = [0; 2];
        let labels = self.labels();
        let mut class_counts = match self.target {
            TargetKind::Classes(k) => vec![0; k],
            TargetKind::Continuous => Vec::new(),
        };
        for &i in &idx {
            group_counts[self.z[i]] += 1;
            if let Some(c) = class_counts.get_mut(labels[i]) {
                *c += 1;
            }
        }
        SplitSummary {
            tag,
            rows: idx.len(),
            group_counts,
            class_counts,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One-hot encoding of class labels.
pub fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    y
}

/// Shuffles rows with `seed` and cuts them into train/val/test at
/// `round(f_train·n)` and `round((f_train + f_val)·n)`.
pub fn split(mut ds: Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(SfpError::Input(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = ds.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let cut1 = (fractions[0] * n as f64).round() as usize;
    let cut2 = (((fractions[0] + fractions[1]) * n as f64).round() as usize).max(cut1);
    let mut tags = vec![SplitTag::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        tags[i] = if pos < cut1 {
            SplitTag::Train
        } else if pos < cut2 {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    ds.split = Some(tags);
    for (tag, f) in [(SplitTag::Val, fractions[1]), (SplitTag::Test, fractions[2])] {
        if f > 0.0 {
            let s = ds.summary(tag);
            if s.group_counts.contains(&0) {
                ds.notes
                    .push(format!("{tag:?} split has an empty sensitive group"));
            }
        }
    }
    Ok(ds)
}

/// Column means and standard deviations learned on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Statistics from the given rows; zero-variance columns get sd 1.
    pub fn fit(x: &DMatrix<f64>, rows: &[usize]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(SfpError::Input("standardization needs at least two rows".into()));
        }
        let p = x.ncols();
        let mut mean = vec![0.0; p];
        let mut sd = vec![0.0; p];
        for j in 0..p {
            let m = rows.iter().map(|&i| x[(i, j)]).sum::<f64>() / n as f64;
            let v = rows.iter().map(|&i| (x[(i, j)] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            mean[j] = m;
            sd[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: &mut DMatrix<f64>) {
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                x[(i, j)] = (x[(i, j)] - self.mean[j]) / self.sd[j];
            }
        }
    }
}

/// Z-scores every feature using statistics from the train split only.
pub fn standardize(ds: &mut Dataset) -> Result<Standardizer> {
    let rows = if ds.split.is_some() {
        ds.indices(SplitTag::Train)
    } else {
        (0..ds.n()).collect()
    };
    let st = Standardizer::fit(&ds.x, &rows)?;
    st.apply(&mut ds.x);
    Ok(st)
}

/// Column means of a matrix.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).mean())
}
