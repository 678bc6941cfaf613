//! Feature matrices, sample manifests and persisted mode trees.
//!
//! Binary feature layout (all integers little-endian):
//!
//! ```text
//! magic   b"BMMF"
//! version u16 = 1
//! n       u64
//! d       u32
//! values  n*d f32, row-major
//! ids     n times { u32 len, utf-8 sample_id, u32 len, utf-8 dataset_label }
//! ```
//!
//! CSV layout: one header row, then `sample_id,dataset_label,f0,...,f{d-1}`.
//!
//! Manifest layout: `#`-prefixed metadata lines (`# key=value`), then one
//! `sample_id,dataset_label` line per entry.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{Linkage, ModeTree, TreeNode};
use crate::domain_gap::ModeStats;
use crate::error::{BmmError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"BMMF";
pub const FEATURE_VERSION: u16 = 1;
pub const TREE_VERSION: u32 = 1;
const MANIFEST_BANNER: &str = "# bmm-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// `.csv` selects CSV, anything else the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

/// `n` feature vectors of dimension `d` with their sample ids and
/// dataset-of-origin labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    d: usize,
    values: Vec<f32>,
    sample_ids: Vec<String>,
    dataset_labels: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(
        d: usize,
        values: Vec<f32>,
        sample_ids: Vec<String>,
        dataset_labels: Vec<String>,
    ) -> Result<Self> {
        let n = sample_ids.len();
        if n == 0 {
            return Err(BmmError::Validation("feature matrix has no rows".into()));
        }
        if d == 0 {
            return Err(BmmError::Validation("feature dimension is zero".into()));
        }
        if dataset_labels.len() != n {
            return Err(BmmError::Validation(format!(
                "{} sample ids but {} dataset labels",
                n,
                dataset_labels.len()
            )));
        }
        if values.len() != n * d {
            return Err(BmmError::Validation(format!(
                "expected {}x{} = {} values, got {}",
                n,
                d,
                n * d,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(BmmError::Validation(format!(
                "non-finite value {} at row {} column {}",
                values[pos],
                pos / d,
                pos % d
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(BmmError::Validation(format!("duplicate sample_id {id:?}")));
            }
        }
        Ok(FeatureMatrix {
            d,
            values,
            sample_ids,
            dataset_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn dataset_labels(&self) -> &[String] {
        &self.dataset_labels
    }

    /// Map from sample id to row index.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// Sub-matrix over `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<FeatureMatrix> {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix::new(
            self.d,
            values,
            rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            rows.iter().map(|&r| self.dataset_labels[r].clone()).collect(),
        )
    }
}

pub fn read_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| BmmError::io(path, e))?;
    match format {
        FeatureFormat::Binary => decode_features(&bytes),
        FeatureFormat::Csv => decode_features_csv(&bytes),
    }
}

pub fn write_features(m: &FeatureMatrix, path: &Path, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::Binary => encode_features(m),
        FeatureFormat::Csv => encode_features_csv(m)?,
    };
    fs::write(path, bytes).map_err(|e| BmmError::io(path, e))
}

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + m.values.len() * 4 + m.n() * 24);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n() as u64).to_le_bytes());
    out.extend_from_slice(&(m.d as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (id, label) in m.sample_ids.iter().zip(&m.dataset_labels) {
        for s in [id, label] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                BmmError::Format(format!("truncated file while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u32::from_le_bytes(self.array(what)?) as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| BmmError::Format(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != FEATURE_MAGIC {
        return Err(BmmError::Format("bad magic, expected \"BMMF\"".into()));
    }
    let version = u16::from_le_bytes(cur.array("version")?);
    if version != FEATURE_VERSION {
        return Err(BmmError::Incompatible {
            found: version as u32,
            supported: FEATURE_VERSION as u32,
        });
    }
    let n = u64::from_le_bytes(cur.array("n")?);
    let d = u32::from_le_bytes(cur.array("d")?) as usize;
    let n = usize::try_from(n).map_err(|_| BmmError::Format(format!("row count {n} too large")))?;
    let count = n
        .checked_mul(d)
        .filter(|c| c.checked_mul(4).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| BmmError::Format(format!("header claims {n}x{d} values, file too short")))?;
    let raw = cur.take(count * 4, "values")?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let mut sample_ids = Vec::with_capacity(n);
    let mut dataset_labels = Vec::with_capacity(n);
    for _ in 0..n {
        sample_ids.push(cur.string("sample_id")?);
        dataset_labels.push(cur.string("dataset_label")?);
    }
    if cur.pos != bytes.len() {
        return Err(BmmError::Format(format!(
            "{} trailing bytes after id block",
            bytes.len() - cur.pos
        )));
    }
    FeatureMatrix::new(d, values, sample_ids, dataset_labels)
}

fn decode_features_csv(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header_len = reader
        .headers()
        .map_err(|e| BmmError::Format(format!("csv header: {e}")))?
        .len();
    if header_len < 3 {
        return Err(BmmError::Format(
            "csv header needs sample_id, dataset_label and at least one feature column".into(),
        ));
    }
    let d = header_len - 2;
    let mut values = Vec::new();
    let mut sample_ids = Vec::new();
    let mut dataset_labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| BmmError::Format(format!("csv: {e}")))?;
        for (col, field) in record.iter().skip(2).enumerate() {
            let v: f32 = field.parse().map_err(|_| {
                BmmError::Format(format!("data row {}: column {} is not a number: {field:?}", line + 1, col))
            })?;
            values.push(v);
        }
        sample_ids.push(record[0].to_string());
        dataset_labels.push(record[1].to_string());
    }
    FeatureMatrix::new(d, values, sample_ids, dataset_labels)
}

fn encode_features_csv(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "dataset_label".to_string()];
    header.extend((0..m.d).map(|j| format!("f{j}")));
    let csv_err = |e: csv::Error| BmmError::Format(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..m.n() {
        let mut rec = vec![m.sample_ids[i].clone(), m.dataset_labels[i].clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| BmmError::Format(format!("csv: {e}")))
}

/// Ordered list of selected samples plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (id, _) in &self.entries {
            if !seen.insert(id.as_str()) {
                return Err(BmmError::Validation(format!("duplicate sample_id {id:?} in manifest")));
            }
        }
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n', '\r']) || v.contains(['\n', '\r']) {
                return Err(BmmError::Validation(format!(
                    "metadata entry {k:?} cannot be written on one line"
                )));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let bytes = encode_manifest(m)?;
    fs::write(path, bytes).map_err(|e| BmmError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| BmmError::io(path, e))?;
    decode_manifest(&text)
}

pub fn encode_manifest(m: &Manifest) -> Result<Vec<u8>> {
    m.validate()?;
    let mut out = Vec::new();
    writeln!(out, "{MANIFEST_BANNER}").expect("write to vec");
    for (k, v) in &m.metadata {
        writeln!(out, "# {k}={v}").expect("write to vec");
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for (id, label) in &m.entries {
        w.write_record([id, label])
            .map_err(|e| BmmError::Format(format!("csv: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| BmmError::Format(format!("csv: {e}")))
}

pub fn decode_manifest(text: &str) -> Result<Manifest> {
    let mut metadata = BTreeMap::new();
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        if !line.starts_with('#') {
            break;
        }
        body_start += line.len();
        let content = line.trim_end_matches(['\n', '\r']);
        if content == MANIFEST_BANNER {
            continue;
        }
        let kv = content.trim_start_matches('#').trim_start();
        if kv.is_empty() {
            continue;
        }
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| BmmError::Format(format!("metadata line without '=': {content:?}")))?;
        metadata.insert(k.to_string(), v.to_string());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(&text.as_bytes()[body_start..]);
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| BmmError::Format(format!("manifest: {e}")))?;
        if record.len() != 2 {
            return Err(BmmError::Format(format!(
                "manifest line has {} fields, expected sample_id,dataset_label",
                record.len()
            )));
        }
        entries.push((record[0].to_string(), record[1].to_string()));
    }
    let m = Manifest { entries, metadata };
    m.validate()?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    format: String,
    version: u32,
    linkage: Linkage,
    dim: usize,
    leaf_count: usize,
    node_count: usize,
    sample_ids: Vec<String>,
    dataset_labels: Vec<String>,
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    node_id: usize,
    parent_id: Option<usize>,
    child_ids: Vec<usize>,
    height: f64,
    member_indices: Vec<usize>,
    count: usize,
    mean: Vec<f64>,
    /// Row-major d*d.
    covariance: Vec<f64>,
}

pub fn encode_tree(tree: &ModeTree) -> Result<Vec<u8>> {
    let file = TreeFile {
        format: "bmm-tree".into(),
        version: TREE_VERSION,
        linkage: tree.linkage(),
        dim: tree.dim(),
        leaf_count: tree.leaf_count(),
        node_count: tree.node_count(),
        sample_ids: tree.sample_ids().to_vec(),
        dataset_labels: tree.dataset_labels().to_vec(),
        nodes: tree
            .nodes()
            .iter()
            .map(|n| NodeRecord {
                node_id: n.id,
                parent_id: n.parent,
                child_ids: n.children.map(|c| c.to_vec()).unwrap_or_default(),
                height: n.height,
                member_indices: n.members.clone(),
                count: n.stats.count(),
                mean: n.stats.mean().to_vec(),
                covariance: n.stats.cov_row_major(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&file)
        .map_err(|e| BmmError::Format(format!("tree encode: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_tree(bytes: &[u8]) -> Result<ModeTree> {
    let probe: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| BmmError::Format(format!("tree file: {e}")))?;
    if probe.get("format").and_then(|f| f.as_str()) != Some("bmm-tree") {
        return Err(BmmError::Format("not a bmm-tree file".into()));
    }
    let version = probe
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| BmmError::Format("tree file has no version".into()))?;
    if version != TREE_VERSION as u64 {
        return Err(BmmError::Incompatible {
            found: version.min(u32::MAX as u64) as u32,
            supported: TREE_VERSION,
        });
    }
    let file: TreeFile =
        serde_json::from_value(probe).map_err(|e| BmmError::Format(format!("tree file: {e}")))?;
    let d = file.dim;
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for rec in file.nodes {
        let children = match rec.child_ids.as_slice() {
            [] => None,
            [a, b] => Some([*a, *b]),
            other => {
                return Err(BmmError::Validation(format!(
                    "node {} has {} children",
                    rec.node_id,
                    other.len()
                )))
            }
        };
        let stats = ModeStats::from_parts(rec.mean, rec.covariance, rec.count, d)?;
        nodes.push(TreeNode {
            id: rec.node_id,
            parent: rec.parent_id,
            children,
            height: rec.height,
            members: rec.member_indices,
            stats,
        });
    }
    let tree = ModeTree::from_parts(nodes, file.leaf_count, d, file.linkage, file.sample_ids, file.dataset_labels)?;
    if tree.node_count() != file.node_count {
        return Err(BmmError::Validation(format!(
            "node_count field {} disagrees with {} nodes",
            file.node_count,
            tree.node_count()
        )));
    }
    Ok(tree)
}

pub fn persist_tree(tree: &ModeTree, path: &Path) -> Result<()> {
    let bytes = encode_tree(tree)?;
    fs::write(path, bytes).map_err(|e| BmmError::io(path, e))
}

pub fn load_tree(path: &Path) -> Result<ModeTree> {
    let bytes = fs::read(path).map_err(|e| BmmError::io(path, e))?;
    decode_tree(&bytes)
}
