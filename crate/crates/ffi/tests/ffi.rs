use std::ffi::{CStr, CString};
use std::ptr;

use r2q_ffi::*;

fn matrix(rows: usize, cols: usize, data: &[f64]) -> *mut R2qMatrix {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { r2q_matrix_new(rows, cols, data.as_ptr(), &mut m) }, R2qStatus::Ok);
    m
}

fn contents(m: *const R2qMatrix) -> Vec<f64> {
    let n = unsafe { r2q_matrix_rows(m) * r2q_matrix_cols(m) };
    let mut v = vec![0.0; n];
    assert_eq!(unsafe { r2q_matrix_copy_data(m, v.as_mut_ptr(), n) }, R2qStatus::Ok);
    v
}

fn last_error() -> String {
    let p = r2q_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn worked_vector_through_the_c_api() {
    let w = matrix(1, 4, &[0.5, -1.0, 2.0, 0.1]);
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(r2q_quantize(w, -1, &mut t), R2qStatus::Ok);
        assert_eq!(r2q_tensor_num_groups(t), 1);
        let (mut a1, mut a2) = (0.0, 0.0);
        assert_eq!(r2q_tensor_alphas(t, &mut a1, &mut a2, 1), R2qStatus::Ok);
        assert!((a1 - 0.9).abs() < 1e-15 && (a2 - 0.6).abs() < 1e-15);

        let mut d = ptr::null_mut();
        assert_eq!(r2q_tensor_dequantize(t, &mut d), R2qStatus::Ok);
        let expected = r2q::r2q::dequantize(&r2q::r2q::quantize(
            &r2q::Matrix::new(1, 4, vec![0.5, -1.0, 2.0, 0.1]).unwrap(),
            r2q::GroupScheme::PerChannel,
        ).unwrap());
        assert_eq!(contents(d), expected.as_slice());

        let mut mse = -1.0;
        let orig = [w as *const R2qMatrix];
        let quant = [d as *const R2qMatrix];
        assert_eq!(r2q_layer_mse(orig.as_ptr(), quant.as_ptr(), 1, &mut mse), R2qStatus::Ok);
        assert!((mse - 0.58 / 4.0).abs() < 1e-15);

        r2q_matrix_free(d);
        r2q_tensor_free(t);
        r2q_matrix_free(w);
    }
}

#[test]
fn matmul_matches_dequantized_product() {
    let w_data: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let x_data: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    let w = matrix(3, 4, &w_data);
    let x = matrix(4, 2, &x_data);
    unsafe {
        for gs in [-1i64, 2] {
            let mut t = ptr::null_mut();
            assert_eq!(r2q_quantize(w, gs, &mut t), R2qStatus::Ok);
            let mut y = ptr::null_mut();
            assert_eq!(r2q_tensor_matmul(t, x, &mut y), R2qStatus::Ok);
            let mut d = ptr::null_mut();
            assert_eq!(r2q_tensor_dequantize(t, &mut d), R2qStatus::Ok);
            let dq = contents(d);
            let got = contents(y);
            for r in 0..3 {
                for c in 0..2 {
                    let want: f64 = (0..4).map(|k| dq[r * 4 + k] * x_data[k * 2 + c]).sum();
                    assert!((got[r * 2 + c] - want).abs() < 1e-12);
                }
            }
            r2q_matrix_free(y);
            r2q_matrix_free(d);
            r2q_tensor_free(t);
        }
        r2q_matrix_free(x);
        r2q_matrix_free(w);
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| CString::new(dir.path().join(n).to_str().unwrap()).unwrap();
    let w = matrix(2, 4, &[-1.0, 0.0, 1.0, 2.0, 3.0, -0.5, 0.25, 8.0]);
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(r2q_quantize(w, 2, &mut t), R2qStatus::Ok);
        assert_eq!(r2q_tensor_save(t, path("a.r2q").as_ptr()), R2qStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(r2q_tensor_load(path("a.r2q").as_ptr(), &mut back), R2qStatus::Ok);
        let (mut d1, mut d2) = (ptr::null_mut(), ptr::null_mut());
        r2q_tensor_dequantize(t, &mut d1);
        r2q_tensor_dequantize(back, &mut d2);
        assert_eq!(contents(d1), contents(d2));
        r2q_matrix_free(d1);
        r2q_matrix_free(d2);
        r2q_tensor_free(t);
        r2q_tensor_free(back);

        let mut q = ptr::null_mut();
        assert_eq!(r2q_rtn_quantize(w, -1, 3, &mut q), R2qStatus::Ok);
        assert_eq!(r2q_rtn_save(q, path("a.rtn").as_ptr()), R2qStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(r2q_rtn_load(path("a.rtn").as_ptr(), &mut back), R2qStatus::Ok);
        let (mut d1, mut d2) = (ptr::null_mut(), ptr::null_mut());
        r2q_rtn_dequantize(q, &mut d1);
        r2q_rtn_dequantize(back, &mut d2);
        assert_eq!(contents(d1), contents(d2));
        r2q_matrix_free(d1);
        r2q_matrix_free(d2);
        r2q_rtn_free(q);
        r2q_rtn_free(back);

        assert_eq!(r2q_matrix_save(w, path("w.r2qm").as_ptr()), R2qStatus::Ok);
        let mut m = ptr::null_mut();
        assert_eq!(r2q_matrix_load(path("w.r2qm").as_ptr(), &mut m), R2qStatus::Ok);
        assert_eq!(contents(m), contents(w));
        r2q_matrix_free(m);
        r2q_matrix_free(w);
    }
}

#[test]
fn failures_report_status_and_message() {
    let w = matrix(2, 4, &[1.0; 8]);
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(r2q_quantize(w, 3, &mut t), R2qStatus::SchemeMismatch);
        assert!(t.is_null());
        assert!(last_error().contains("does not divide"));

        assert_eq!(r2q_quantize(ptr::null(), -1, &mut t), R2qStatus::NullPointer);
        assert_eq!(r2q_quantize(w, -1, ptr::null_mut()), R2qStatus::NullPointer);

        let mut q = ptr::null_mut();
        assert_eq!(r2q_rtn_quantize(w, -1, 1, &mut q), R2qStatus::InvalidArgument);

        let missing = CString::new("/nonexistent/dir/x.r2q").unwrap();
        assert_eq!(r2q_tensor_load(missing.as_ptr(), &mut t), R2qStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.r2q");
        std::fs::write(&junk, b"R2QMxxxxxxxx").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(r2q_tensor_load(junk.as_ptr(), &mut t), R2qStatus::Format);

        let mut buf = [0.0; 3];
        assert_eq!(r2q_matrix_copy_data(w, buf.as_mut_ptr(), 3), R2qStatus::ShapeMismatch);

        let nan = [f64::NAN];
        let mut m = ptr::null_mut();
        assert_eq!(r2q_matrix_new(1, 1, nan.as_ptr(), &mut m), R2qStatus::NonFinite);

        let orig = [w as *const R2qMatrix];
        let other = matrix(1, 2, &[0.0, 0.0]);
        let quant = [other as *const R2qMatrix];
        let mut mse = 0.0;
        assert_eq!(r2q_layer_mse(orig.as_ptr(), quant.as_ptr(), 1, &mut mse), R2qStatus::ShapeMismatch);

        r2q_matrix_free(other);
        r2q_matrix_free(w);
        r2q_matrix_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/r2q.h")).unwrap();
    for name in [
        "r2q_last_error",
        "r2q_matrix_new",
        "r2q_matrix_free",
        "r2q_matrix_copy_data",
        "r2q_quantize",
        "r2q_tensor_alphas",
        "r2q_tensor_matmul",
        "r2q_rtn_quantize",
        "r2q_layer_mse",
        "R2Q_STATUS_SCHEME_MISMATCH",
        "typedef struct R2qTensor R2qTensor",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
