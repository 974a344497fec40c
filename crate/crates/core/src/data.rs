//! LETOR-style ranking datasets: parsing, grouping by query, feature
//! projection and the nested split plan used by the experiment grid.
//!
//! Feature ids are 1-based in files and 0-based in memory.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest relevance grade accepted by the parser.
pub const MAX_LABEL: u8 = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("parse error: {reason} in line {content:?}")]
    Parse { reason: String, content: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<DataError>,
    },
    #[error("empty dataset")]
    Empty,
    #[error("split plan needs {required} queries but only {available} are available")]
    Sizing { required: usize, available: usize },
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error("feature id {id} out of range 1..={dim}")]
    FeatureOutOfRange { id: usize, dim: usize },
    #[error("invalid feature subset: {0}")]
    InvalidSubset(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One judged document of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDocumentInstance {
    pub query_id: String,
    /// Position within the query's documents in file order.
    pub doc_ordinal: usize,
    pub label: u8,
    /// Dense features; index 0 holds feature id 1.
    pub features: Vec<f64>,
}

impl QueryDocumentInstance {
    /// Serializes back to a LETOR line, writing every feature.
    pub fn to_letor_line(&self) -> String {
        let mut line = format!("{} qid:{}", self.label, self.query_id);
        for (index, value) in self.features.iter().enumerate() {
            let _ = write!(line, " {}:{}", index + 1, value);
        }
        line
    }
}

/// Parses one `<label> qid:<id> <fid>:<value> ... [# comment]` line.
///
/// Without a dimension hint the vector is as long as the largest fid on
/// the line. With a hint it is padded to `D` and larger fids are rejected.
/// `doc_ordinal` is left at 0; [`load_dataset`] assigns it.
pub fn parse_letor_line(text: &str, feature_dim_hint: Option<usize>) -> Result<QueryDocumentInstance> {
    let parse_err = |reason: String| DataError::Parse {
        reason,
        content: text.to_string(),
    };

    let body = match text.find('#') {
        Some(pos) => &text[..pos],
        None => text,
    };
    let mut tokens = body.split_whitespace();

    let label_token = tokens.next().ok_or_else(|| parse_err("missing label".into()))?;
    let label: u8 = label_token
        .parse::<u8>()
        .ok()
        .or_else(|| {
            // tolerate "2.0"-style integral labels
            label_token
                .parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && *v >= 0.0 && *v <= 255.0)
                .map(|v| v as u8)
        })
        .ok_or_else(|| parse_err(format!("non-integer label {label_token:?}")))?;
    if label > MAX_LABEL {
        return Err(parse_err(format!("label {label} outside [0, {MAX_LABEL}]")));
    }

    let qid_token = tokens.next().ok_or_else(|| parse_err("missing qid".into()))?;
    let query_id = qid_token
        .strip_prefix("qid:")
        .filter(|q| !q.is_empty())
        .ok_or_else(|| parse_err(format!("malformed qid token {qid_token:?}")))?
        .to_string();

    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for token in tokens {
        let (fid, value) = token
            .split_once(':')
            .ok_or_else(|| parse_err(format!("malformed feature token {token:?}")))?;
        let fid: usize = fid
            .parse()
            .ok()
            .filter(|f| *f >= 1)
            .ok_or_else(|| parse_err(format!("malformed feature id in {token:?}")))?;
        let value: f64 = value
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| parse_err(format!("malformed feature value in {token:?}")))?;
        if let Some(&(prev, _)) = pairs.last() {
            if fid == prev {
                return Err(parse_err(format!("duplicate feature id {fid}")));
            }
            if fid < prev {
                return Err(parse_err(format!("feature ids not ascending at {fid}")));
            }
        }
        pairs.push((fid, value));
    }

    let max_fid = pairs.last().map_or(0, |&(fid, _)| fid);
    let dim = match feature_dim_hint {
        Some(d) if max_fid > d => {
            return Err(parse_err(format!("feature id {max_fid} exceeds dimension {d}")));
        }
        Some(d) => d,
        None => max_fid,
    };
    let mut features = vec![0.0; dim];
    for (fid, value) in pairs {
        features[fid - 1] = value;
    }

    Ok(QueryDocumentInstance {
        query_id,
        doc_ordinal: 0,
        label,
        features,
    })
}

/// One query's judged documents in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub query_id: String,
    pub instances: Vec<QueryDocumentInstance>,
}

impl QueryGroup {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub groups: Vec<QueryGroup>,
    pub feature_dim: usize,
}

impl Dataset {
    /// Builds a dataset after checking the structural invariants.
    pub fn new(groups: Vec<QueryGroup>, feature_dim: usize) -> Result<Self> {
        let dataset = Dataset { groups, feature_dim };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for group in &self.groups {
            if !seen.insert(group.query_id.as_str()) {
                return Err(DataError::Inconsistent(format!("duplicate query id {}", group.query_id)));
            }
            if group.instances.is_empty() {
                return Err(DataError::Inconsistent(format!("query {} has no documents", group.query_id)));
            }
            for (ordinal, inst) in group.instances.iter().enumerate() {
                if inst.query_id != group.query_id || inst.doc_ordinal != ordinal {
                    return Err(DataError::Inconsistent(format!(
                        "query {} document {} is misfiled",
                        group.query_id, ordinal
                    )));
                }
                if inst.features.len() != self.feature_dim {
                    return Err(DataError::Inconsistent(format!(
                        "query {} document {} has {} features, expected {}",
                        group.query_id,
                        ordinal,
                        inst.features.len(),
                        self.feature_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.groups.len()
    }

    pub fn num_instances(&self) -> usize {
        self.groups.iter().map(QueryGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn query_ids(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.query_id.as_str()).collect()
    }

    /// Writes the dataset as LETOR text, one instance per line.
    pub fn write_letor<W: Write>(&self, mut out: W) -> io::Result<()> {
        for group in &self.groups {
            for inst in &group.instances {
                writeln!(out, "{}", inst.to_letor_line())?;
            }
        }
        out.flush()
    }

    pub fn save_letor(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        self.write_letor(io::BufWriter::new(file)).map_err(io_err(path))
    }
}

/// Reads LETOR text, grouping instances by query id.
///
/// Blank lines and comment-only lines are skipped. The feature dimension is
/// the largest feature id seen anywhere in the input.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut groups: Vec<QueryGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut feature_dim = 0;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: "<input>".into(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut inst = parse_letor_line(trimmed, None).map_err(|e| DataError::AtLine {
            line: lineno + 1,
            source: Box::new(e),
        })?;
        feature_dim = feature_dim.max(inst.features.len());
        let slot = match index.get(&inst.query_id) {
            Some(&slot) => slot,
            None => {
                index.insert(inst.query_id.clone(), groups.len());
                groups.push(QueryGroup {
                    query_id: inst.query_id.clone(),
                    instances: Vec::new(),
                });
                groups.len() - 1
            }
        };
        inst.doc_ordinal = groups[slot].instances.len();
        groups[slot].instances.push(inst);
    }

    if groups.is_empty() {
        return Err(DataError::Empty);
    }
    for group in &mut groups {
        for inst in &mut group.instances {
            inst.features.resize(feature_dim, 0.0);
        }
    }
    Ok(Dataset { groups, feature_dim })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_dataset(BufReader::new(file))
}

/// Query counts for each region of the experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub base_train_size: usize,
    pub interpreter_split_sizes: Vec<usize>,
    pub validation_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if self.interpreter_split_sizes.is_empty() {
            return Err(DataError::InvalidPlan("no interpreter split sizes".into()));
        }
        if self.interpreter_split_sizes[0] == 0 {
            return Err(DataError::InvalidPlan("interpreter split sizes must be positive".into()));
        }
        if self.interpreter_split_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::InvalidPlan(
                "interpreter split sizes must be strictly ascending".into(),
            ));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.interpreter_split_sizes.last().copied().unwrap_or(0)
    }

    pub fn required_queries(&self) -> usize {
        self.base_train_size + self.pool_size() + self.validation_size + self.test_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub base_train: Dataset,
    /// Nested: each split is a strict prefix of the next.
    pub interpreter_splits: Vec<Dataset>,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Region name and query ids, in manifest order.
    pub fn regions(&self, plan: &SplitPlan) -> Vec<(String, Vec<&str>)> {
        let mut regions = vec![("base_train".to_string(), self.base_train.query_ids())];
        for (size, split) in plan.interpreter_split_sizes.iter().zip(&self.interpreter_splits) {
            regions.push((format!("split_{size}"), split.query_ids()));
        }
        regions.push(("validation".to_string(), self.validation.query_ids()));
        regions.push(("test".to_string(), self.test.query_ids()));
        regions
    }
}

/// Writes `<region>\t<query_id>` lines.
pub fn write_split_manifest<W: Write>(regions: &[(String, Vec<&str>)], mut out: W) -> io::Result<()> {
    for (name, ids) in regions {
        for id in ids {
            writeln!(out, "{name}\t{id}")?;
        }
    }
    out.flush()
}

/// Shuffles query order and carves out the experiment regions.
///
/// The permutation is a Fisher-Yates shuffle (`rand::seq::SliceRandom`)
/// driven by `ChaCha8Rng::seed_from_u64(plan.seed)`.
pub fn make_splits(dataset: &Dataset, plan: &SplitPlan) -> Result<Splits> {
    plan.validate()?;
    let available = dataset.num_queries();
    let required = plan.required_queries();
    if required > available {
        return Err(DataError::Sizing { required, available });
    }

    let mut order: Vec<usize> = (0..available).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    order.shuffle(&mut rng);

    let take = |range: &[usize]| Dataset {
        groups: range.iter().map(|&i| dataset.groups[i].clone()).collect(),
        feature_dim: dataset.feature_dim,
    };

    let mut cursor = 0;
    let mut region = |len: usize| {
        let slice = &order[cursor..cursor + len];
        cursor += len;
        slice
    };
    let base_train = take(region(plan.base_train_size));
    let pool = region(plan.pool_size());
    let interpreter_splits = plan
        .interpreter_split_sizes
        .iter()
        .map(|&size| take(&pool[..size]))
        .collect();
    let validation = take(region(plan.validation_size));
    let test = take(region(plan.test_size));

    Ok(Splits {
        base_train,
        interpreter_splits,
        validation,
        test,
    })
}

/// A set of 1-based feature ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSubset {
    ids: BTreeSet<usize>,
}

impl FeatureSubset {
    pub fn new<I: IntoIterator<Item = usize>>(ids: I) -> Result<Self> {
        let ids: BTreeSet<usize> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(DataError::InvalidSubset("feature subset is empty".into()));
        }
        if ids.contains(&0) {
            return Err(DataError::InvalidSubset("feature ids are 1-based".into()));
        }
        Ok(FeatureSubset { ids })
    }

    /// The full range `1..=dim`.
    pub fn all(dim: usize) -> Result<Self> {
        Self::new(1..=dim)
    }

    /// Reads one feature id per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        for line in text.lines() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let id = body
                .parse::<usize>()
                .map_err(|_| DataError::InvalidSubset(format!("bad feature id {body:?}")))?;
            ids.push(id);
        }
        Self::new(ids)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn validate_for(&self, dim: usize) -> Result<()> {
        match self.ids.iter().next_back() {
            Some(&max) if max > dim => Err(DataError::FeatureOutOfRange { id: max, dim }),
            _ => Ok(()),
        }
    }

    /// 0-based column indices in ascending order.
    pub fn columns(&self) -> Vec<usize> {
        self.ids.iter().map(|id| id - 1).collect()
    }
}

/// Keeps only the subset's columns, in ascending id order.
pub fn project_features(dataset: &Dataset, subset: &FeatureSubset) -> Result<Dataset> {
    subset.validate_for(dataset.feature_dim)?;
    let columns = subset.columns();
    let groups = dataset
        .groups
        .iter()
        .map(|group| QueryGroup {
            query_id: group.query_id.clone(),
            instances: group
                .instances
                .iter()
                .map(|inst| QueryDocumentInstance {
                    features: columns.iter().map(|&c| inst.features[c]).collect(),
                    ..inst.clone()
                })
                .collect(),
        })
        .collect();
    Ok(Dataset {
        groups,
        feature_dim: columns.len(),
    })
}
