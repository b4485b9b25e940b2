//! C ABI over `fol-core`.
//!
//! Every function returns a `FolStatus`; `FOL_OK` is zero. On failure a
//! message is stored per thread and can be read with
//! `fol_last_error_message`. Handles are opaque and owned by the caller,
//! who releases them with the matching `*_free` function. Matrices are
//! dense row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fol_core::aggregation::{global_descriptor, sinkhorn, SinkhornConfig};
use fol_core::model::{DiscriminativeMask, GlobalDescriptor, MaskKind};
use fol_core::regions::binarize_topk;
use fol_core::rerank::mutual_nn;
use fol_core::retrieval::DescriptorIndex;
use fol_core::tensor::{read_tensor, Tensor};
use fol_core::FolError;
use ndarray::{Array2, ArrayView2};

pub type FolStatus = i32;

pub const FOL_OK: FolStatus = 0;
pub const FOL_ERR_NULL_POINTER: FolStatus = 1;
pub const FOL_ERR_IO: FolStatus = 2;
pub const FOL_ERR_LOAD: FolStatus = 3;
pub const FOL_ERR_DIMENSION: FolStatus = 4;
pub const FOL_ERR_DEGENERATE: FolStatus = 5;
pub const FOL_ERR_INVALID_ARGUMENT: FolStatus = 6;
pub const FOL_ERR_DUPLICATE_ID: FolStatus = 7;
pub const FOL_ERR_PARSE: FolStatus = 8;
pub const FOL_ERR_UTF8: FolStatus = 9;
pub const FOL_ERR_BUFFER_TOO_SMALL: FolStatus = 10;
pub const FOL_ERR_PANIC: FolStatus = 11;

/// A FOLT tensor read from disk.
pub struct FolTensor(Tensor);

/// An immutable descriptor index.
pub struct FolIndex {
    index: DescriptorIndex,
    ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FolStatus, String);

impl From<FolError> for Failure {
    fn from(e: FolError) -> Self {
        let code = match &e {
            FolError::Io { .. } => FOL_ERR_IO,
            FolError::Load { .. } => FOL_ERR_LOAD,
            FolError::Dimension(_) => FOL_ERR_DIMENSION,
            FolError::Degenerate(_) => FOL_ERR_DEGENERATE,
            FolError::InvalidArgument(_) => FOL_ERR_INVALID_ARGUMENT,
            FolError::DuplicateId(_) => FOL_ERR_DUPLICATE_ID,
            FolError::Parse(_) => FOL_ERR_PARSE,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FOL_ERR_NULL_POINTER, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FolStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FOL_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            FOL_ERR_PANIC
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FOL_ERR_UTF8, format!("`{what}` is not valid UTF-8")))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<ArrayView2<'_, f64>, Failure> {
    ArrayView2::from_shape((rows, cols), data).map_err(|e| Failure(FOL_ERR_DIMENSION, e.to_string()))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fol_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a FOLT file into a new tensor handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fol_tensor_read(path: *const c_char, out: *mut *mut FolTensor) -> FolStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let t = read_tensor(c_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(FolTensor(t)));
        Ok(())
    })
}

/// # Safety
/// `tensor` must come from `fol_tensor_read` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn fol_tensor_rank(tensor: *const FolTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.rank())
}

/// Copies up to `capacity` dimensions into `dims`.
///
/// # Safety
/// `tensor` must be a live handle and `dims` valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn fol_tensor_shape(tensor: *const FolTensor, dims: *mut usize, capacity: usize) -> FolStatus {
    guard(|| {
        let t = tensor.as_ref().ok_or_else(|| null("tensor"))?;
        let shape = t.0.shape();
        if capacity < shape.len() {
            return Err(Failure(
                FOL_ERR_BUFFER_TOO_SMALL,
                format!("shape has {} dims, capacity {capacity}", shape.len()),
            ));
        }
        output(dims, shape.len(), "dims")?.copy_from_slice(shape);
        Ok(())
    })
}

/// # Safety
/// `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fol_tensor_numel(tensor: *const FolTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.numel())
}

/// Row-major payload, valid while the handle lives.
///
/// # Safety
/// `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fol_tensor_data(tensor: *const FolTensor) -> *const f32 {
    tensor.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `tensor` must come from `fol_tensor_read` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn fol_tensor_free(tensor: *mut FolTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Log-domain Sinkhorn on `n x cols` logits (last column is the dustbin).
/// Writes the plan to `out_plan` (`n * cols` values) and 1 or 0 to
/// `out_converged`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fol_sinkhorn(
    logits: *const f64,
    n: usize,
    cols: usize,
    max_iterations: usize,
    tolerance: f64,
    out_plan: *mut f64,
    out_converged: *mut i32,
) -> FolStatus {
    guard(|| {
        let z = matrix(input(logits, n * cols, "logits")?, n, cols)?.to_owned();
        let cfg = SinkhornConfig {
            max_iterations,
            tolerance,
            ..Default::default()
        };
        let plan = sinkhorn(&z, &cfg)?;
        let converged = out_ref(out_converged, "out_converged")?;
        output(out_plan, n * cols, "out_plan")?
            .iter_mut()
            .zip(plan.plan().iter())
            .for_each(|(o, v)| *o = *v);
        *converged = i32::from(plan.converged());
        Ok(())
    })
}

/// `L2Norm([scene ; L2Norm(flatten(clusters))])` for an `m x d` cluster
/// block. `out` receives `scene_len + m * d` values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fol_global_descriptor(
    scene: *const f64,
    scene_len: usize,
    clusters: *const f64,
    m: usize,
    d: usize,
    out: *mut f64,
    out_len: usize,
) -> FolStatus {
    guard(|| {
        let g = input(scene, scene_len, "scene")?;
        let v: Array2<f64> = matrix(input(clusters, m * d, "clusters")?, m, d)?.to_owned();
        let desc = global_descriptor(g, &v)?;
        if out_len != desc.dim() {
            return Err(Failure(
                FOL_ERR_BUFFER_TOO_SMALL,
                format!("descriptor has {} values, out_len is {out_len}", desc.dim()),
            ));
        }
        output(out, out_len, "out")?.copy_from_slice(desc.as_slice());
        Ok(())
    })
}

/// Top-`fraction` binarization of an `h x w` grid of nonnegative weights
/// (normalized internally). `out` receives `h * w` zeros and ones.
///
/// # Safety
/// Buffers must hold `h * w` elements.
#[no_mangle]
pub unsafe extern "C" fn fol_binarize_topk(
    weights: *const f64,
    h: usize,
    w: usize,
    fraction: f64,
    out: *mut f64,
) -> FolStatus {
    guard(|| {
        let values = input(weights, h * w, "weights")?.to_vec();
        let mask = DiscriminativeMask::from_weights(h, w, values, MaskKind::Fused)?;
        let bin = binarize_topk(&mask, fraction)?;
        output(out, h * w, "out")?.copy_from_slice(bin.values());
        Ok(())
    })
}

/// Builds an index from `n` unit-norm descriptors of dimension `d`.
///
/// # Safety
/// `ids` must hold `n` NUL-terminated strings and `descriptors` `n * d`
/// values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fol_index_build(
    ids: *const *const c_char,
    descriptors: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut FolIndex,
) -> FolStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let id_ptrs = input(ids, n, "ids")?;
        let rows = matrix(input(descriptors, n * d, "descriptors")?, n, d)?;
        let mut entries = Vec::with_capacity(n);
        for (r, &p) in id_ptrs.iter().enumerate() {
            let id = c_str(p, "ids[i]")?.to_string();
            entries.push((id, GlobalDescriptor::new(rows.row(r).to_vec())?));
        }
        let index = DescriptorIndex::build(entries)?;
        let ids = index
            .ids()
            .iter()
            .map(|s| CString::new(s.as_str()).expect("ids came from C strings"))
            .collect();
        *out = Box::into_raw(Box::new(FolIndex { index, ids }));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fol_index_len(index: *const FolIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Id of row `row`, valid while the handle lives; NULL when out of range.
///
/// # Safety
/// `index` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fol_index_id(index: *const FolIndex, row: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|i| i.ids.get(row))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Top-`k` search. Writes up to `k` row numbers and similarities, best
/// first, and the number written to `out_count`.
///
/// # Safety
/// `query` must hold `d` values; `out_rows` and `out_sims` `k` elements.
#[no_mangle]
pub unsafe extern "C" fn fol_index_query(
    index: *const FolIndex,
    query: *const f64,
    d: usize,
    k: usize,
    out_rows: *mut usize,
    out_sims: *mut f64,
    out_count: *mut usize,
) -> FolStatus {
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        let q = GlobalDescriptor::new(input(query, d, "query")?.to_vec())?;
        let hits = idx.index.query_topk(&q, k)?;
        let count = out_ref(out_count, "out_count")?;
        let rows = output(out_rows, k, "out_rows")?;
        let sims = output(out_sims, k, "out_sims")?;
        for (slot, hit) in hits.iter().enumerate() {
            rows[slot] = idx.index.ids().iter().position(|s| *s == hit.id).expect("hit comes from the index");
            sims[slot] = hit.sim;
        }
        *count = hits.len();
        Ok(())
    })
}

/// # Safety
/// `index` must come from `fol_index_build` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn fol_index_free(index: *mut FolIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Mutual nearest-neighbour matching between `na x d` and `nb x d` sets of
/// unit rows. Writes the sum of matched similarities, the match count and
/// the number of pairwise comparisons performed.
///
/// # Safety
/// `a` must hold `na * d` values, `b` `nb * d`; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn fol_mnn_score(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    d: usize,
    out_score: *mut f64,
    out_matches: *mut usize,
    out_comparisons: *mut u64,
) -> FolStatus {
    guard(|| {
        let a = matrix(input(a, na * d, "a")?, na, d)?.to_owned();
        let b = matrix(input(b, nb * d, "b")?, nb, d)?.to_owned();
        let (matches, stats) = mutual_nn(&a, &b)?;
        *out_ref(out_score, "out_score")? = matches.iter().map(|m| m.sim).sum();
        *out_ref(out_matches, "out_matches")? = matches.len();
        *out_ref(out_comparisons, "out_comparisons")? = stats.comparisons;
        Ok(())
    })
}
