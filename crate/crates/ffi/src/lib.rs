//! C interface to the routing library. Objects are opaque handles created
//! and released by the library; every call returns an [`NcoStatus`] and the
//! message of the last failure on the calling thread is available through
//! [`nco_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nco_core::instances::{
    cvrp_cost_scaled, generate_cvrp, generate_tsp, objective, parse_library_file, tour_length, CvrpInstance, Instance,
    InstanceError, ScaledCoordinates, TspInstance,
};
use nco_core::model::{Model, ModelConfig, ModelError};
use nco_core::reconstruction::{prc, PrcConfig, PrcError};
use nco_core::training::random_insertion;
use nco_core::{ProblemKind, Solution};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Infeasible = 5,
    Model = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcoProblem {
    Tsp = 0,
    Cvrp = 1,
}

/// A trained or freshly initialized model.
pub struct NcoModel(Model);

/// A TSP or CVRP instance, with the scaling back to file units when it was
/// read from a library file.
pub struct NcoInstance {
    inner: Instance,
    scaling: Option<ScaledCoordinates>,
}

/// A solution together with its objective.
pub struct NcoSolution {
    inner: Solution,
    objective: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: NcoStatus, msg: impl ToString) -> NcoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
    status
}

fn instance_status(e: &InstanceError) -> NcoStatus {
    match e {
        InstanceError::Io(_) => NcoStatus::Io,
        InstanceError::Parse { .. } | InstanceError::UnsupportedFormat(_) => NcoStatus::Parse,
        InstanceError::Infeasible(_) => NcoStatus::Infeasible,
        _ => NcoStatus::InvalidArgument,
    }
}

fn model_status(e: &ModelError) -> NcoStatus {
    match e {
        ModelError::Instance(ie) => instance_status(ie),
        ModelError::Tensor(nco_core::tensor::TensorError::Io(_)) => NcoStatus::Io,
        ModelError::InvalidConfig(_) => NcoStatus::InvalidArgument,
        _ => NcoStatus::Model,
    }
}

fn prc_status(e: &PrcError) -> NcoStatus {
    match e {
        PrcError::Model(m) => model_status(m),
        PrcError::Instance(i) => instance_status(i),
        _ => NcoStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> NcoStatus) -> NcoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NcoStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<String, NcoStatus> {
    if path.is_null() {
        return Err(fail(NcoStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path).to_str().map(String::from).map_err(|_| fail(NcoStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nco_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Fresh model with random parameters.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn nco_model_new(
    problem: NcoProblem,
    d: usize,
    layers: usize,
    heads: usize,
    ff_hidden: usize,
    seed: u64,
    out: *mut *mut NcoModel,
) -> NcoStatus {
    guard(|| {
        if out.is_null() {
            return fail(NcoStatus::NullPointer, "out is null");
        }
        let kind = match problem {
            NcoProblem::Tsp => ProblemKind::Tsp,
            NcoProblem::Cvrp => ProblemKind::Cvrp,
        };
        match Model::new(ModelConfig { kind, d, layers, heads, ff_hidden }, seed) {
            Ok(m) => {
                put(out, NcoModel(m));
                NcoStatus::Ok
            }
            Err(e) => fail(model_status(&e), e),
        }
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn nco_model_load(path: *const c_char, out: *mut *mut NcoModel) -> NcoStatus {
    guard(|| {
        if out.is_null() {
            return fail(NcoStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Model::load(&path) {
            Ok((m, _)) => {
                put(out, NcoModel(m));
                NcoStatus::Ok
            }
            Err(e) => fail(model_status(&e), e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nco_model_free(model: *mut NcoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Uniform random TSP instance of `n` nodes.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn nco_instance_generate_tsp(n: usize, seed: u64, out: *mut *mut NcoInstance) -> NcoStatus {
    guard(|| {
        if out.is_null() {
            return fail(NcoStatus::NullPointer, "out is null");
        }
        match generate_tsp(n, seed) {
            Ok(t) => {
                put(out, NcoInstance { inner: Instance::Tsp(t), scaling: None });
                NcoStatus::Ok
            }
            Err(e) => fail(instance_status(&e), e),
        }
    })
}

/// Uniform random CVRP instance of `n` customers.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn nco_instance_generate_cvrp(n: usize, capacity: u32, seed: u64, out: *mut *mut NcoInstance) -> NcoStatus {
    guard(|| {
        if out.is_null() {
            return fail(NcoStatus::NullPointer, "out is null");
        }
        match generate_cvrp(n, capacity, seed) {
            Ok(c) => {
                put(out, NcoInstance { inner: Instance::Cvrp(c), scaling: None });
                NcoStatus::Ok
            }
            Err(e) => fail(instance_status(&e), e),
        }
    })
}

/// TSP instance from `n` points in the unit square, `xy` holding `2n` values.
///
/// # Safety
/// `xy` must be valid for reading `2 * n` doubles and `out` for writing.
#[no_mangle]
pub unsafe extern "C" fn nco_instance_tsp_from_coords(xy: *const f64, n: usize, out: *mut *mut NcoInstance) -> NcoStatus {
    guard(|| {
        if xy.is_null() || out.is_null() {
            return fail(NcoStatus::NullPointer, "null argument");
        }
        let v = std::slice::from_raw_parts(xy, 2 * n);
        match TspInstance::new(v.chunks(2).map(|p| [p[0], p[1]]).collect()) {
            Ok(t) => {
                put(out, NcoInstance { inner: Instance::Tsp(t), scaling: None });
                NcoStatus::Ok
            }
            Err(e) => fail(instance_status(&e), e),
        }
    })
}

/// CVRP instance from a depot, `n` customers (`xy` holds `2n` values) and demands.
///
/// # Safety
/// `depot` must point to two doubles, `xy` to `2 * n` doubles, `demands` to `n`
/// values, and `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn nco_instance_cvrp_from_coords(
    depot: *const f64,
    xy: *const f64,
    demands: *const u32,
    n: usize,
    capacity: u32,
    out: *mut *mut NcoInstance,
) -> NcoStatus {
    guard(|| {
        if depot.is_null() || xy.is_null() || demands.is_null() || out.is_null() {
            return fail(NcoStatus::NullPointer, "null argument");
        }
        let dp = std::slice::from_raw_parts(depot, 2);
        let v = std::slice::from_raw_parts(xy, 2 * n);
        let dem = std::slice::from_raw_parts(demands, n).to_vec();
        match CvrpInstance::new([dp[0], dp[1]], v.chunks(2).map(|p| [p[0], p[1]]).collect(), dem, capacity) {
            Ok(c) => {
                put(out, NcoInstance { inner: Instance::Cvrp(c), scaling: None });
                NcoStatus::Ok
            }
            Err(e) => fail(instance_status(&e), e),
        }
    })
}

/// Reads an EUC_2D TSPLIB or CVRPLIB file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn nco_instance_load(path: *const c_char, out: *mut *mut NcoInstance) -> NcoStatus {
    guard(|| {
        if out.is_null() {
            return fail(NcoStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match parse_library_file(&path) {
            Ok(lib) => {
                put(out, NcoInstance { inner: lib.instance, scaling: Some(lib.scaling) });
                NcoStatus::Ok
            }
            Err(e) => fail(instance_status(&e), format!("{path}: {e}")),
        }
    })
}

/// Number of nodes (TSP) or customers (CVRP), or 0 for a null handle.
///
/// # Safety
/// `inst` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nco_instance_size(inst: *const NcoInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.inner.n())
}

/// # Safety
/// `inst` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nco_instance_free(inst: *mut NcoInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

fn reported(inst: &NcoInstance, sol: &Solution) -> Result<f64, InstanceError> {
    match (&inst.inner, sol, &inst.scaling) {
        (Instance::Tsp(t), Solution::Tsp(s), Some(sc)) => tour_length(t, s, Some(sc)),
        (Instance::Cvrp(c), Solution::Cvrp(s), Some(sc)) => cvrp_cost_scaled(c, s, Some(sc)),
        _ => objective(&inst.inner, sol),
    }
}

/// Random-insertion solution.
///
/// # Safety
/// `inst` must be a live handle and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn nco_random_insertion(inst: *const NcoInstance, seed: u64, out: *mut *mut NcoSolution) -> NcoStatus {
    guard(|| {
        let (Some(inst), false) = (inst.as_ref(), out.is_null()) else {
            return fail(NcoStatus::NullPointer, "null argument");
        };
        let sol = random_insertion(&inst.inner, seed);
        match reported(inst, &sol) {
            Ok(objective) => {
                put(out, NcoSolution { inner: sol, objective });
                NcoStatus::Ok
            }
            Err(e) => fail(instance_status(&e), e),
        }
    })
}

/// Random insertion followed by `iterations` rounds of parallel local
/// reconstruction with windows of at most `l_max` nodes.
///
/// # Safety
/// `model` and `inst` must be live handles and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn nco_solve(
    model: *const NcoModel,
    inst: *const NcoInstance,
    iterations: usize,
    l_max: usize,
    seed: u64,
    out: *mut *mut NcoSolution,
) -> NcoStatus {
    guard(|| {
        let (Some(model), Some(inst), false) = (model.as_ref(), inst.as_ref(), out.is_null()) else {
            return fail(NcoStatus::NullPointer, "null argument");
        };
        let init = random_insertion(&inst.inner, seed);
        let cfg = PrcConfig { l_max, iterations, seed };
        let outcome = match prc(&model.0, &inst.inner, &init, &cfg) {
            Ok(o) => o,
            Err(e) => return fail(prc_status(&e), e),
        };
        match reported(inst, &outcome.solution) {
            Ok(objective) => {
                put(out, NcoSolution { inner: outcome.solution, objective });
                NcoStatus::Ok
            }
            Err(e) => fail(instance_status(&e), e),
        }
    })
}

/// Objective in the instance's units (file units for library instances).
///
/// # Safety
/// `sol` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nco_solution_objective(sol: *const NcoSolution) -> f64 {
    sol.as_ref().map_or(f64::NAN, |s| s.objective)
}

/// Number of entries in the visiting order.
///
/// # Safety
/// `sol` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nco_solution_len(sol: *const NcoSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.inner.order().len())
}

/// Copies the visiting order (0-based node ids; customer indices for the
/// CVRP) and, when `via_depot` is not null, the CVRP route-start flags.
///
/// # Safety
/// `order` must be valid for `len` values and `via_depot` null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nco_solution_copy(sol: *const NcoSolution, order: *mut usize, via_depot: *mut u8, len: usize) -> NcoStatus {
    guard(|| {
        let (Some(sol), false) = (sol.as_ref(), order.is_null()) else {
            return fail(NcoStatus::NullPointer, "null argument");
        };
        let o = sol.inner.order();
        if len < o.len() {
            return fail(NcoStatus::InvalidArgument, format!("buffer holds {len} entries, need {}", o.len()));
        }
        std::ptr::copy_nonoverlapping(o.as_ptr(), order, o.len());
        if !via_depot.is_null() {
            let flags = std::slice::from_raw_parts_mut(via_depot, o.len());
            match &sol.inner {
                Solution::Cvrp(c) => {
                    for (f, &v) in flags.iter_mut().zip(&c.via_depot) {
                        *f = u8::from(v);
                    }
                }
                Solution::Tsp(_) => flags.fill(0),
            }
        }
        NcoStatus::Ok
    })
}

/// # Safety
/// `sol` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nco_solution_free(sol: *mut NcoSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}
