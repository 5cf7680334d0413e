//! C ABI over `aergia-core`.
//!
//! Every entry point returns an [`AergiaStatus`]; results go through out
//! parameters. Objects cross the boundary as opaque handles that the caller
//! releases with the matching `*_free`. After a non-OK status,
//! [`aergia_last_error`] describes the failure on the calling thread.
//! Panics never unwind into C: they become [`AergiaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use aergia_core::config::{ConfigError, ExperimentConfig};
use aergia_core::scheduler::calc_op;
use aergia_core::sim::{run_experiment, ExperimentResult, SimError};
use aergia_core::similarity::{ClassCountSubmission, SimilarityOracle};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AergiaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The configuration parsed but failed validation.
    Validation = 3,
    Runtime = 4,
    Panic = 5,
}

/// Parsed experiment configuration.
pub struct AergiaConfig {
    inner: ExperimentConfig,
}

/// Results of every (strategy, seed) pair of one experiment run.
pub struct AergiaRun {
    results: Vec<ExperimentResult>,
    labels: Vec<CString>,
}

/// Label-distribution oracle; see `aergia_oracle_submit`.
pub struct AergiaOracle {
    inner: SimilarityOracle,
}

/// One round of one run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AergiaRoundRecord {
    pub round: usize,
    pub start_time: f64,
    pub duration: f64,
    pub accuracy: f64,
    pub num_selected: usize,
    pub num_dropped: usize,
    pub num_offloads: usize,
    pub aggregated_weight: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AergiaSummary {
    pub rounds: usize,
    pub total_time: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub mean_round_duration: f64,
    pub median_round_duration: f64,
    pub total_offloads: usize,
    pub total_dropped: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AergiaOffloadPoint {
    /// Estimated completion of the slower client of the pair.
    pub ct: f64,
    /// Batches offloaded.
    pub d: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(AergiaStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(AergiaStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(AergiaStatus::InvalidArgument, msg.into())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let status = match e {
            ConfigError::Parse(_) => AergiaStatus::InvalidArgument,
            ConfigError::Invalid(_) => AergiaStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let status = match e {
            SimError::Config(_) => AergiaStatus::Validation,
            _ => AergiaStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, records any failure for `aergia_last_error` and converts
/// panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AergiaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AergiaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AergiaStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

fn result_at(run: &AergiaRun, index: usize) -> Result<&ExperimentResult, Failure> {
    run.results
        .get(index)
        .ok_or_else(|| Failure::invalid(format!("result index {index} out of range (have {})", run.results.len())))
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn aergia_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aergia_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a TOML experiment configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_config_from_toml(toml: *const c_char, out: *mut *mut AergiaConfig) -> AergiaStatus {
    guard(|| {
        if toml.is_null() {
            return Err(Failure::null("toml"));
        }
        let out = as_mut(out, "out")?;
        let text = CStr::from_ptr(toml).to_str().map_err(|e| Failure::invalid(format!("toml is not UTF-8: {e}")))?;
        let inner = ExperimentConfig::from_toml_str(text)?;
        *out = Box::into_raw(Box::new(AergiaConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or a handle from `aergia_config_from_toml` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aergia_config_free(config: *mut AergiaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs every strategy over every replicate seed of `config`.
///
/// # Safety
/// `config` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_run(config: *const AergiaConfig, out: *mut *mut AergiaRun) -> AergiaStatus {
    guard(|| {
        let config = as_ref(config, "config")?;
        let out = as_mut(out, "out")?;
        let results = run_experiment(&config.inner)?;
        let labels = results
            .iter()
            .map(|r| CString::new(r.label.as_str()).map_err(|_| Failure::invalid("label contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(AergiaRun { results, labels }));
        Ok(())
    })
}

/// # Safety
/// `run` must be NULL or a handle from `aergia_run` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aergia_run_free(run: *mut AergiaRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of (strategy, seed) results, ordered by strategy then seed.
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_run_result_count(run: *const AergiaRun, out: *mut usize) -> AergiaStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(run, "run")?.results.len();
        Ok(())
    })
}

/// Strategy label and seed of result `index`. The label stays valid until
/// the run is freed.
///
/// # Safety
/// `run` must be a live run handle; `label` and `seed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_run_result_info(
    run: *const AergiaRun,
    index: usize,
    label: *mut *const c_char,
    seed: *mut u64,
) -> AergiaStatus {
    guard(|| {
        let run = as_ref(run, "run")?;
        let (label, seed) = (as_mut(label, "label")?, as_mut(seed, "seed")?);
        let r = result_at(run, index)?;
        *label = run.labels[index].as_ptr();
        *seed = r.seed;
        Ok(())
    })
}

/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_run_summary(run: *const AergiaRun, index: usize, out: *mut AergiaSummary) -> AergiaStatus {
    guard(|| {
        let s = &result_at(as_ref(run, "run")?, index)?.summary;
        *as_mut(out, "out")? = AergiaSummary {
            rounds: s.rounds,
            total_time: s.total_time,
            final_accuracy: s.final_accuracy,
            best_accuracy: s.best_accuracy,
            mean_round_duration: s.mean_round_duration,
            median_round_duration: s.median_round_duration,
            total_offloads: s.total_offloads,
            total_dropped: s.total_dropped,
        };
        Ok(())
    })
}

/// Round `round` of result `index`.
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_run_round(
    run: *const AergiaRun,
    index: usize,
    round: usize,
    out: *mut AergiaRoundRecord,
) -> AergiaStatus {
    guard(|| {
        let r = result_at(as_ref(run, "run")?, index)?;
        let t = r
            .traces
            .get(round)
            .ok_or_else(|| Failure::invalid(format!("round {round} out of range (have {})", r.traces.len())))?;
        *as_mut(out, "out")? = AergiaRoundRecord {
            round: t.round,
            start_time: t.start_time,
            duration: t.duration,
            accuracy: t.accuracy,
            num_selected: t.selected.len(),
            num_dropped: t.dropped.len(),
            num_offloads: t.num_offloads(),
            aggregated_weight: t.aggregated_weight,
        };
        Ok(())
    })
}

/// Best offload point for a weak client with per-batch time `t_a` and
/// `r_a` remaining batches paired with a strong client with per-batch time
/// `t_b`, feature-backward time `x_b` and `r_b` remaining batches.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_calc_op(
    t_a: f64,
    t_b: f64,
    x_b: f64,
    r_a: usize,
    r_b: usize,
    out: *mut AergiaOffloadPoint,
) -> AergiaStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let p = calc_op(t_a, t_b, x_b, r_a, r_b).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = AergiaOffloadPoint { ct: p.ct, d: p.d };
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aergia_oracle_new(num_classes: usize, out: *mut *mut AergiaOracle) -> AergiaStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        if num_classes == 0 {
            return Err(Failure::invalid("num_classes must be >= 1"));
        }
        *out = Box::into_raw(Box::new(AergiaOracle {
            inner: SimilarityOracle::new(num_classes),
        }));
        Ok(())
    })
}

/// # Safety
/// `oracle` must be NULL or a handle from `aergia_oracle_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aergia_oracle_free(oracle: *mut AergiaOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Submits one client's per-class sample counts. Each client may submit once.
///
/// # Safety
/// `oracle` must be a live oracle handle; `counts` must point to `len`
/// readable values.
#[no_mangle]
pub unsafe extern "C" fn aergia_oracle_submit(
    oracle: *const AergiaOracle,
    client_id: u32,
    counts: *const u64,
    len: usize,
) -> AergiaStatus {
    guard(|| {
        let oracle = as_ref(oracle, "oracle")?;
        if counts.is_null() {
            return Err(Failure::null("counts"));
        }
        let counts = std::slice::from_raw_parts(counts, len).to_vec();
        oracle
            .inner
            .submit(ClassCountSubmission { client_id, counts })
            .map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(())
    })
}

/// Writes the pairwise distance matrix over all submitted clients,
/// row-major in ascending client-id order, into `matrix` (capacity `cap`
/// values) and the client count into `n`. With `matrix` NULL only `n` is
/// written; a too-small buffer fails with `INVALID_ARGUMENT` after
/// writing `n`.
///
/// # Safety
/// `oracle` must be a live oracle handle; `n` must be writable; `matrix`
/// must be NULL or point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn aergia_oracle_compute(
    oracle: *const AergiaOracle,
    matrix: *mut f64,
    cap: usize,
    n: *mut usize,
) -> AergiaStatus {
    guard(|| {
        let oracle = as_ref(oracle, "oracle")?;
        let n = as_mut(n, "n")?;
        let s = oracle.inner.compute_matrix_all().map_err(|e| Failure::invalid(e.to_string()))?;
        *n = s.len();
        if matrix.is_null() {
            return Ok(());
        }
        let need = s.len() * s.len();
        if cap < need {
            return Err(Failure::invalid(format!("matrix buffer holds {cap} values, need {need}")));
        }
        let buf = std::slice::from_raw_parts_mut(matrix, need);
        for (k, v) in s.rows().into_iter().flatten().enumerate() {
            buf[k] = v;
        }
        Ok(())
    })
}
