//! C ABI over `bmm-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style calls and released with the matching `*_free`. Every fallible call
//! returns a [`BmmStatus`]; on failure `bmm_last_error_message` describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bmm_core::clustering::{Linkage, ModeTree};
use bmm_core::dataset_io::{self, FeatureFormat, FeatureMatrix, Manifest};
use bmm_core::domain_gap::{fid_with_eps, gaussian_stats, DEFAULT_EPS_COV};
use bmm_core::pipeline::{self, PipelineConfig};
use bmm_core::BmmError;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Parameter = 6,
    InsufficientSamples = 7,
    Numerical = 8,
    Infeasible = 9,
    Incompatible = 10,
    Refused = 11,
    Panic = 12,
}

/// Linkage used when merging leaves.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmmLinkage {
    Centroid = 0,
    Ward = 1,
}

/// Feature matrix handle.
pub struct BmmFeatures(FeatureMatrix);

/// Mode tree handle.
pub struct BmmTree(ModeTree);

/// Result of a match: the selected server rows and the manifest they form.
pub struct BmmSelection {
    rows: Vec<usize>,
    nodes: Vec<usize>,
    manifest: Manifest,
    ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &BmmError) -> BmmStatus {
    match e {
        BmmError::Io { .. } => BmmStatus::Io,
        BmmError::Format(_) => BmmStatus::Format,
        BmmError::Validation(_) => BmmStatus::Validation,
        BmmError::Parameter(_) => BmmStatus::Parameter,
        BmmError::InsufficientSamples(_) => BmmStatus::InsufficientSamples,
        BmmError::Numerical(_) => BmmStatus::Numerical,
        BmmError::Infeasible(_) => BmmStatus::Infeasible,
        BmmError::Incompatible { .. } => BmmStatus::Incompatible,
        BmmError::Refused(_) => BmmStatus::Refused,
    }
}

enum Failure {
    Status(BmmStatus, String),
    Core(BmmError),
}

impl From<BmmError> for Failure {
    fn from(e: BmmError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BmmStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            BmmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(BmmStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(BmmStatus::InvalidUtf8, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bmm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn bmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a feature file; `.csv` paths are parsed as CSV, anything else as
/// the binary format.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bmm_features_load(path: *const c_char, out: *mut *mut BmmFeatures) -> BmmStatus {
    guard(|| {
        let path = path_arg(path)?;
        let m = dataset_io::read_features(&path, FeatureFormat::from_path(&path))?;
        store(out, BmmFeatures(m))
    })
}

/// Wraps `n x d` row-major values. Rows get ids `row0..` and the label
/// given in `label` (or `"default"` when null).
///
/// # Safety
/// `values` must point to `n * d` floats; `label` is null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bmm_features_from_values(
    values: *const f32,
    n: usize,
    d: usize,
    label: *const c_char,
    out: *mut *mut BmmFeatures,
) -> BmmStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Failure::Core(BmmError::Parameter("n * d overflows".into())))?;
        let label = if label.is_null() {
            "default".to_string()
        } else {
            CStr::from_ptr(label)
                .to_str()
                .map_err(|_| Failure::Status(BmmStatus::InvalidUtf8, "label is not valid UTF-8".into()))?
                .to_string()
        };
        let data = std::slice::from_raw_parts(values, len).to_vec();
        let m = FeatureMatrix::new(d, data, (0..n).map(|i| format!("row{i}")).collect(), vec![label; n])?;
        store(out, BmmFeatures(m))
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `f` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmm_features_rows(f: *const BmmFeatures) -> usize {
    f.as_ref().map_or(0, |f| f.0.n())
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `f` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmm_features_dim(f: *const BmmFeatures) -> usize {
    f.as_ref().map_or(0, |f| f.0.d())
}

/// # Safety
/// `f` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bmm_features_free(f: *mut BmmFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Balanced k-means into `leaves` clusters, then the agglomerative merge.
///
/// # Safety
/// `server` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bmm_tree_build(
    server: *const BmmFeatures,
    leaves: usize,
    seed: u64,
    linkage: BmmLinkage,
    out: *mut *mut BmmTree,
) -> BmmStatus {
    guard(|| {
        let server = handle(server, "server")?;
        let linkage = match linkage {
            BmmLinkage::Centroid => Linkage::Centroid,
            BmmLinkage::Ward => Linkage::Ward,
        };
        let tree = pipeline::build_server(&server.0, leaves, seed, linkage)?;
        store(out, BmmTree(tree))
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bmm_tree_load(path: *const c_char, out: *mut *mut BmmTree) -> BmmStatus {
    guard(|| {
        let path = path_arg(path)?;
        store(out, BmmTree(dataset_io::load_tree(&path)?))
    })
}

/// # Safety
/// `tree` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bmm_tree_save(tree: *const BmmTree, path: *const c_char) -> BmmStatus {
    guard(|| {
        let tree = handle(tree, "tree")?;
        let path = path_arg(path)?;
        dataset_io::persist_tree(&tree.0, &path)?;
        Ok(())
    })
}

/// # Safety
/// `tree` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmm_tree_leaf_count(tree: *const BmmTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.leaf_count())
}

/// # Safety
/// `tree` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmm_tree_node_count(tree: *const BmmTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.node_count())
}

/// # Safety
/// `tree` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bmm_tree_free(tree: *mut BmmTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Clusters the target into `target_clusters` modes and matches them
/// one-to-one to tree nodes. `eps_cov <= 0` selects the default.
///
/// # Safety
/// `tree` and `target` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bmm_match(
    tree: *const BmmTree,
    target: *const BmmFeatures,
    target_clusters: usize,
    seed: u64,
    eps_cov: f64,
    out: *mut *mut BmmSelection,
) -> BmmStatus {
    guard(|| {
        let tree = &handle(tree, "tree")?.0;
        let target = &handle(target, "target")?.0;
        let cfg = PipelineConfig {
            leaves: tree.leaf_count(),
            target_clusters,
            seed,
            linkage: tree.linkage(),
            eps_cov: if eps_cov > 0.0 { eps_cov } else { DEFAULT_EPS_COV },
            ..PipelineConfig::default()
        };
        let outcome = pipeline::run_match(tree, target, &cfg)?;
        let rows = outcome.selection.sample_rows.clone();
        let manifest = pipeline::selection_manifest(tree, &rows, cfg.metadata());
        let ids = manifest
            .entries
            .iter()
            .map(|(id, _)| CString::new(id.as_str()).unwrap_or_default())
            .collect();
        store(
            out,
            BmmSelection {
                rows,
                nodes: outcome.selection.selected_nodes.clone(),
                manifest,
                ids,
            },
        )
    })
}

/// Number of selected server rows.
///
/// # Safety
/// `sel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmm_selection_len(sel: *const BmmSelection) -> usize {
    sel.as_ref().map_or(0, |s| s.rows.len())
}

/// Number of distinct matched nodes.
///
/// # Safety
/// `sel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmm_selection_node_count(sel: *const BmmSelection) -> usize {
    sel.as_ref().map_or(0, |s| s.nodes.len())
}

/// Copies up to `cap` selected row indices (ascending) into `buf` and
/// returns the full count.
///
/// # Safety
/// `sel` must be a live handle; `buf` must hold `cap` elements or be null
/// with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn bmm_selection_rows(sel: *const BmmSelection, buf: *mut usize, cap: usize) -> usize {
    let Some(sel) = sel.as_ref() else { return 0 };
    if !buf.is_null() {
        let k = cap.min(sel.rows.len());
        ptr::copy_nonoverlapping(sel.rows.as_ptr(), buf, k);
    }
    sel.rows.len()
}

/// Sample id of the `i`-th selected row, or null when out of range. Owned
/// by the selection.
///
/// # Safety
/// `sel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmm_selection_sample_id(sel: *const BmmSelection, i: usize) -> *const c_char {
    sel.as_ref()
        .and_then(|s| s.ids.get(i))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Writes the selection as a manifest file.
///
/// # Safety
/// `sel` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bmm_selection_write_manifest(sel: *const BmmSelection, path: *const c_char) -> BmmStatus {
    guard(|| {
        let sel = handle(sel, "selection")?;
        let path = path_arg(path)?;
        dataset_io::write_manifest(&sel.manifest, &path)?;
        Ok(())
    })
}

/// # Safety
/// `sel` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bmm_selection_free(sel: *mut BmmSelection) {
    if !sel.is_null() {
        drop(Box::from_raw(sel));
    }
}

/// FID between the Gaussian fits of `server[rows]` and the whole target.
/// With `rows` null and `nrows == 0` the whole server is used.
///
/// # Safety
/// Handles must be live; `rows` must hold `nrows` indices; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bmm_gap(
    server: *const BmmFeatures,
    target: *const BmmFeatures,
    rows: *const usize,
    nrows: usize,
    eps_cov: f64,
    out: *mut f64,
) -> BmmStatus {
    guard(|| {
        let server = &handle(server, "server")?.0;
        let target = &handle(target, "target")?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let rows: Vec<usize> = if rows.is_null() {
            if nrows != 0 {
                return Err(null("rows"));
            }
            (0..server.n()).collect()
        } else {
            std::slice::from_raw_parts(rows, nrows).to_vec()
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= server.n()) {
            return Err(BmmError::Validation(format!("row {bad} out of range for {} rows", server.n())).into());
        }
        let eps = if eps_cov > 0.0 { eps_cov } else { DEFAULT_EPS_COV };
        let t = gaussian_stats(target, &(0..target.n()).collect::<Vec<_>>())?;
        *out = fid_with_eps(&gaussian_stats(server, &rows)?, &t, eps)?;
        Ok(())
    })
}
