use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bmm_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Two tight blobs in 2-D, `n` rows each.
fn blobs(n: usize, offset: f32) -> Vec<f32> {
    let mut v = Vec::new();
    for i in 0..2 * n {
        let c = if i < n { 0.0 } else { 20.0 };
        let jitter = ((i * 37 % 11) as f32 - 5.0) * 0.1;
        v.push(c + offset + jitter);
        v.push(((i * 13 % 7) as f32 - 3.0) * 0.2);
    }
    v
}

fn last_error() -> String {
    let p = bmm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn round_trip_through_handles() {
    unsafe {
        let dir = tempfile::tempdir().unwrap();
        let server_vals = blobs(40, 0.0);
        let mut server = ptr::null_mut();
        assert_eq!(
            bmm_features_from_values(server_vals.as_ptr(), 80, 2, ptr::null(), &mut server),
            BmmStatus::Ok
        );
        assert_eq!((bmm_features_rows(server), bmm_features_dim(server)), (80, 2));

        let mut tree = ptr::null_mut();
        assert_eq!(bmm_tree_build(server, 8, 1, BmmLinkage::Centroid, &mut tree), BmmStatus::Ok);
        assert_eq!((bmm_tree_leaf_count(tree), bmm_tree_node_count(tree)), (8, 15));

        let tree_path = cstr(&dir.path().join("tree.json"));
        assert_eq!(bmm_tree_save(tree, tree_path.as_ptr()), BmmStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(bmm_tree_load(tree_path.as_ptr(), &mut loaded), BmmStatus::Ok);
        assert_eq!(bmm_tree_node_count(loaded), 15);

        let target_vals: Vec<f32> = blobs(40, 0.1)[..80].to_vec();
        let mut target = ptr::null_mut();
        assert_eq!(
            bmm_features_from_values(target_vals.as_ptr(), 40, 2, ptr::null(), &mut target),
            BmmStatus::Ok
        );
        let mut sel = ptr::null_mut();
        assert_eq!(bmm_match(loaded, target, 1, 0, 0.0, &mut sel), BmmStatus::Ok);
        let n = bmm_selection_len(sel);
        assert!(n > 0 && n <= 40, "{n}");
        let mut rows = vec![0usize; n];
        assert_eq!(bmm_selection_rows(sel, rows.as_mut_ptr(), n), n);
        assert!(rows.iter().all(|&r| r < 40), "{rows:?}");
        let id = CStr::from_ptr(bmm_selection_sample_id(sel, 0)).to_str().unwrap();
        assert_eq!(id, format!("row{}", rows[0]));
        assert!(bmm_selection_sample_id(sel, n).is_null());

        let (mut selected, mut full) = (0.0, 0.0);
        assert_eq!(bmm_gap(server, target, rows.as_ptr(), n, 0.0, &mut selected), BmmStatus::Ok);
        assert_eq!(bmm_gap(server, target, ptr::null(), 0, 0.0, &mut full), BmmStatus::Ok);
        assert!(selected < full, "{selected} vs {full}");

        let manifest = cstr(&dir.path().join("m.txt"));
        assert_eq!(bmm_selection_write_manifest(sel, manifest.as_ptr()), BmmStatus::Ok);
        let text = std::fs::read_to_string(dir.path().join("m.txt")).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), n);

        bmm_selection_free(sel);
        bmm_tree_free(loaded);
        bmm_tree_free(tree);
        bmm_features_free(target);
        bmm_features_free(server);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(bmm_features_load(ptr::null(), &mut f), BmmStatus::NullArgument);
        let missing = CString::new("/nonexistent/x.bmmf").unwrap();
        assert_eq!(bmm_features_load(missing.as_ptr(), &mut f), BmmStatus::Io);
        assert!(last_error().contains("/nonexistent/x.bmmf"));

        let vals = [0.0f32, 1.0, 2.0, 3.0];
        assert_eq!(bmm_features_from_values(vals.as_ptr(), 4, 1, ptr::null(), &mut f), BmmStatus::Ok);
        let mut tree = ptr::null_mut();
        assert_eq!(bmm_tree_build(f, 9, 0, BmmLinkage::Ward, &mut tree), BmmStatus::Parameter);
        assert!(tree.is_null());
        assert_eq!(bmm_features_rows(ptr::null()), 0);
        bmm_features_free(f);
        bmm_tree_free(ptr::null_mut());
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/bmm.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in ["bmm_features_load", "bmm_tree_build", "bmm_match", "bmm_gap", "bmm_selection_free", "BMM_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"bmm.h\"\nint main(void) { BmmFeatures *f = 0; return bmm_features_load(\"x\", &f) == BMM_STATUS_OK; }\n",
    )
    .unwrap();
    let inc = header().parent().unwrap().to_path_buf();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&inc)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
