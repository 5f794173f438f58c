//! C ABI over the `r2q` library.
//!
//! Objects cross the boundary as opaque handles that must be released with
//! the matching `*_free` function. Every fallible call returns an
//! [`R2qStatus`]; on failure [`r2q_last_error`] describes what went wrong on
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use r2q::analysis::layer_mse;
use r2q::gemm::matmul_r2q_or_fallback;
use r2q::io::{load_matrix, save_matrix};
use r2q::rtn::{dequantize_rtn, quantize_rtn};
use r2q::{Error, GroupScheme, Matrix, R2QTensor, RtnTensor};

/// Dense row-major matrix of doubles.
pub struct R2qMatrix(Matrix);

/// Two-kernel residual quantized matrix.
pub struct R2qTensor(R2QTensor);

/// Round-to-nearest quantized matrix.
pub struct R2qRtnTensor(RtnTensor);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum R2qStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SchemeMismatch = 3,
    ShapeMismatch = 4,
    Io = 5,
    Format = 6,
    Parse = 7,
    NonFinite = 8,
    Panic = 9,
    Other = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> R2qStatus {
    match e {
        Error::SchemeMismatch { .. } | Error::UnsupportedScheme(_) => R2qStatus::SchemeMismatch,
        Error::ShapeMismatch(_) => R2qStatus::ShapeMismatch,
        Error::Io(_) => R2qStatus::Io,
        Error::Format(_) => R2qStatus::Format,
        Error::Parse { .. } => R2qStatus::Parse,
        Error::NonFinite(_) => R2qStatus::NonFinite,
        Error::InvalidArgument(_) | Error::EmptyGroup => R2qStatus::InvalidArgument,
        _ => R2qStatus::Other,
    }
}

struct Fail(R2qStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(R2qStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> R2qStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => R2qStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            R2qStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(R2qStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

fn scheme_arg(group_size: i64) -> Result<GroupScheme, Fail> {
    Ok(GroupScheme::from_signed(group_size)?)
}

/// Message for the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn r2q_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copy `rows * cols` doubles from `data` into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut R2qMatrix,
) -> R2qStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(R2qStatus::InvalidArgument, "size overflow".into()))?;
        let v = if n == 0 {
            Vec::new()
        } else {
            if data.is_null() {
                return Err(null("data"));
            }
            std::slice::from_raw_parts(data, n).to_vec()
        };
        put(out, R2qMatrix(Matrix::new(rows, cols, v)?))
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn r2q_matrix_free(m: *mut R2qMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn r2q_matrix_rows(m: *const R2qMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn r2q_matrix_cols(m: *const R2qMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Copy the matrix, row-major, into `dst` which holds `len` doubles.
///
/// # Safety
/// `m` must be a live handle and `dst` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn r2q_matrix_copy_data(m: *const R2qMatrix, dst: *mut f64, len: usize) -> R2qStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        let src = m.0.as_slice();
        if len != src.len() {
            return Err(Fail(
                R2qStatus::ShapeMismatch,
                format!("buffer holds {len}, matrix has {}", src.len()),
            ));
        }
        if !src.is_empty() {
            if dst.is_null() {
                return Err(null("dst"));
            }
            ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_matrix_load(path: *const c_char, out: *mut *mut R2qMatrix) -> R2qStatus {
    guard(|| put(out, R2qMatrix(load_matrix(path_arg(path)?)?)))
}

/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn r2q_matrix_save(m: *const R2qMatrix, path: *const c_char) -> R2qStatus {
    guard(|| Ok(save_matrix(path_arg(path)?, &deref(m, "matrix")?.0)?))
}

/// Residual 2-bit quantization. `group_size` -1 means one group per row.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_quantize(m: *const R2qMatrix, group_size: i64, out: *mut *mut R2qTensor) -> R2qStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        put(out, R2qTensor(r2q::r2q::quantize(&m.0, scheme_arg(group_size)?)?))
    })
}

/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn r2q_tensor_free(t: *mut R2qTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn r2q_tensor_num_groups(t: *const R2qTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.num_groups())
}

/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_tensor_dequantize(t: *const R2qTensor, out: *mut *mut R2qMatrix) -> R2qStatus {
    guard(|| put(out, R2qMatrix(r2q::r2q::dequantize(&deref(t, "tensor")?.0))))
}

/// Copy the per-group coarse and refinement scales. Both buffers hold `len`
/// doubles, which must equal the group count.
///
/// # Safety
/// `t` must be a live handle; both buffers must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn r2q_tensor_alphas(
    t: *const R2qTensor,
    coarse: *mut f64,
    refine: *mut f64,
    len: usize,
) -> R2qStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        if len != t.0.num_groups() {
            return Err(Fail(
                R2qStatus::ShapeMismatch,
                format!("buffers hold {len}, tensor has {} groups", t.0.num_groups()),
            ));
        }
        if coarse.is_null() || refine.is_null() {
            return Err(null("alpha buffer"));
        }
        ptr::copy_nonoverlapping(t.0.coarse().alphas().as_ptr(), coarse, len);
        ptr::copy_nonoverlapping(t.0.refine().alphas().as_ptr(), refine, len);
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn r2q_tensor_save(t: *const R2qTensor, path: *const c_char) -> R2qStatus {
    guard(|| Ok(deref(t, "tensor")?.0.save(path_arg(path)?)?))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_tensor_load(path: *const c_char, out: *mut *mut R2qTensor) -> R2qStatus {
    guard(|| put(out, R2qTensor(R2QTensor::load(path_arg(path)?)?)))
}

/// `W x` with `W` given in quantized form. Uses the addition-only kernel for
/// one group per row and the dequantized product otherwise.
///
/// # Safety
/// `t` and `x` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_tensor_matmul(
    t: *const R2qTensor,
    x: *const R2qMatrix,
    out: *mut *mut R2qMatrix,
) -> R2qStatus {
    guard(|| {
        let (y, _) = matmul_r2q_or_fallback(&deref(t, "tensor")?.0, &deref(x, "x")?.0)?;
        put(out, R2qMatrix(y))
    })
}

/// Round-to-nearest quantization with `bits` bits per weight.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_rtn_quantize(
    m: *const R2qMatrix,
    group_size: i64,
    bits: u8,
    out: *mut *mut R2qRtnTensor,
) -> R2qStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        put(out, R2qRtnTensor(quantize_rtn(&m.0, scheme_arg(group_size)?, bits)?))
    })
}

/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn r2q_rtn_free(t: *mut R2qRtnTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_rtn_dequantize(t: *const R2qRtnTensor, out: *mut *mut R2qMatrix) -> R2qStatus {
    guard(|| put(out, R2qMatrix(dequantize_rtn(&deref(t, "tensor")?.0))))
}

/// # Safety
/// `t` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn r2q_rtn_save(t: *const R2qRtnTensor, path: *const c_char) -> R2qStatus {
    guard(|| Ok(deref(t, "tensor")?.0.save(path_arg(path)?)?))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_rtn_load(path: *const c_char, out: *mut *mut R2qRtnTensor) -> R2qStatus {
    guard(|| put(out, R2qRtnTensor(RtnTensor::load(path_arg(path)?)?)))
}

/// Mean over `n` layer pairs of the per-element squared error.
///
/// # Safety
/// `originals` and `quantized` must each point to `n` live matrix handles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2q_layer_mse(
    originals: *const *const R2qMatrix,
    quantized: *const *const R2qMatrix,
    n: usize,
    out: *mut f64,
) -> R2qStatus {
    guard(|| {
        if originals.is_null() || quantized.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let collect = |p: *const *const R2qMatrix| -> Result<Vec<Matrix>, Fail> {
            std::slice::from_raw_parts(p, n)
                .iter()
                .map(|&h| deref(h, "layer").map(|m| m.0.clone()))
                .collect()
        };
        let report = layer_mse(&collect(originals)?, &collect(quantized)?)?;
        *out = report.mean;
        Ok(())
    })
}
