//! C ABI over `proxq`.
//!
//! Every fallible function returns a [`ProxqStatus`]; on failure the message
//! is available from [`proxq_last_error`] on the same thread until the next
//! call. Datasets and trained agents are opaque handles released with their
//! `_free` functions. Q-rows are arrays of [`PROXQ_N_ACTIONS`] doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use proxq::agents::{train_agent, AgentKind, TrainConfig, TrainedAgent};
use proxq::constraint::{
    monotone_penalty, project_monotone_cone, prox_monotone_penalty, QRow, BIDS, N_ACTIONS,
};
use proxq::env::{self, Dataset, State};
use proxq::Error;

pub const PROXQ_N_ACTIONS: usize = 5;
const _: () = assert!(PROXQ_N_ACTIONS == N_ACTIONS);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxqStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Solver = 3,
    Config = 4,
    Training = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxqAgentKind {
    ConstraintAware = 0,
    Iql = 1,
    Cql = 2,
    Bc = 3,
}

/// Opaque dataset handle.
pub struct ProxqDataset(Dataset);

/// Opaque trained-agent handle.
pub struct ProxqAgent(TrainedAgent);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ProxqStatus {
    match e {
        Error::Domain(_) => ProxqStatus::Domain,
        Error::Solver { .. } => ProxqStatus::Solver,
        Error::Config(_) => ProxqStatus::Config,
        Error::Training { .. } => ProxqStatus::Training,
        Error::Io(_) => ProxqStatus::Io,
        Error::Json(_) | Error::Format(_) => ProxqStatus::Format,
    }
}

/// Runs `f`, converting errors and panics into a status and the last error.
fn guard(f: impl FnOnce() -> Result<(), ProxqStatusError>) -> ProxqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ProxqStatus::Ok,
        Ok(Err(ProxqStatusError(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ProxqStatus::Panic
        }
    }
}

struct ProxqStatusError(ProxqStatus, String);

impl From<Error> for ProxqStatusError {
    fn from(e: Error) -> Self {
        ProxqStatusError(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> ProxqStatusError {
    ProxqStatusError(ProxqStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_row<'a>(
    p: *const f64,
    what: &str,
) -> Result<&'a [f64; N_ACTIONS], ProxqStatusError> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(&*(p as *const [f64; N_ACTIONS]))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, ProxqStatusError> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, ProxqStatusError> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| ProxqStatusError(ProxqStatus::Domain, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn proxq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Euclidean projection of `q` onto nondecreasing rows.
///
/// # Safety
/// `q` and `out` must point to 5 readable / writable doubles.
#[no_mangle]
pub unsafe extern "C" fn proxq_project_monotone(q: *const f64, out: *mut f64) -> ProxqStatus {
    guard(|| {
        let row = QRow::new(*read_row(q, "q")?)?;
        let out = out_ref(out as *mut [f64; N_ACTIONS], "out")?;
        *out = project_monotone_cone(&row).0;
        Ok(())
    })
}

/// Proximal map of `lambda` times the monotone penalty at `y`.
///
/// # Safety
/// `y` and `out` must point to 5 readable / writable doubles.
#[no_mangle]
pub unsafe extern "C" fn proxq_prox_monotone(
    y: *const f64,
    lambda: f64,
    tol: f64,
    out: *mut f64,
) -> ProxqStatus {
    guard(|| {
        let row = QRow::new(*read_row(y, "y")?)?;
        let out = out_ref(out as *mut [f64; N_ACTIONS], "out")?;
        *out = prox_monotone_penalty(&row, lambda, tol)?.0;
        Ok(())
    })
}

/// Squared-hinge monotonicity penalty of `q`.
///
/// # Safety
/// `q` must point to 5 readable doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn proxq_monotone_penalty(q: *const f64, out: *mut f64) -> ProxqStatus {
    guard(|| {
        let row = QRow::new(*read_row(q, "q")?)?;
        *out_ref(out, "out")? = monotone_penalty(&row)?;
        Ok(())
    })
}

/// Click probability for bid fraction `bid` in state `(x, c)`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn proxq_click_prob(x: f64, c: f64, bid: f64, out: *mut f64) -> ProxqStatus {
    guard(|| {
        let s = State::new(x, c)?;
        if !(0.0..=1.0).contains(&bid) {
            return Err(Error::domain(format!("bid {bid} outside [0, 1]")).into());
        }
        *out_ref(out, "out")? = env::click_prob(&s, bid);
        Ok(())
    })
}

/// Best expected one-step reward over the 5 bids in state `(x, c)`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn proxq_optimal_value(x: f64, c: f64, out: *mut f64) -> ProxqStatus {
    guard(|| {
        let s = State::new(x, c)?;
        *out_ref(out, "out")? = env::optimal_value(&s);
        Ok(())
    })
}

/// Bid fraction for action index `a`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn proxq_bid(a: usize, out: *mut f64) -> ProxqStatus {
    guard(|| {
        let b = *BIDS
            .get(a)
            .ok_or_else(|| Error::domain(format!("action {a} out of range")))?;
        *out_ref(out, "out")? = b;
        Ok(())
    })
}

/// Generates a behavior dataset of `n` transitions.
///
/// # Safety
/// `out` must be a writable handle slot; free the result with
/// [`proxq_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn proxq_dataset_generate(
    n: usize,
    seed: u64,
    out: *mut *mut ProxqDataset,
) -> ProxqStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let d = env::generate_dataset(n, seed)?;
        *slot = Box::into_raw(Box::new(ProxqDataset(d)));
        Ok(())
    })
}

/// Loads a JSON Lines dataset.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn proxq_dataset_load(
    path: *const c_char,
    out: *mut *mut ProxqDataset,
) -> ProxqStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let d = Dataset::load(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(ProxqDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `data` must be a live dataset handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn proxq_dataset_save(
    data: *const ProxqDataset,
    path: *const c_char,
) -> ProxqStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        d.0.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `data` must be a live dataset handle and `out` one writable size.
#[no_mangle]
pub unsafe extern "C" fn proxq_dataset_len(
    data: *const ProxqDataset,
    out: *mut usize,
) -> ProxqStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        *out_ref(out, "out")? = d.0.len();
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proxq_dataset_free(data: *mut ProxqDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Trains an agent. `config_json` holds training options as a JSON object
/// (unknown keys rejected); null means defaults.
///
/// # Safety
/// `data` must be a live dataset handle, `config_json` null or a
/// nul-terminated string, `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn proxq_agent_train(
    kind: ProxqAgentKind,
    data: *const ProxqDataset,
    config_json: *const c_char,
    out: *mut *mut ProxqAgent,
) -> ProxqStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        let slot = out_ref(out, "out")?;
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| ProxqStatusError(ProxqStatus::Config, "config is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?
        };
        cfg.validate()?;
        let kind = match kind {
            ProxqAgentKind::ConstraintAware => AgentKind::ConstraintAware,
            ProxqAgentKind::Iql => AgentKind::Iql,
            ProxqAgentKind::Cql => AgentKind::Cql,
            ProxqAgentKind::Bc => AgentKind::Bc,
        };
        let agent =
            train_agent(kind, &d.0, &cfg).map_err(|abort| ProxqStatusError::from(abort.error))?;
        *slot = Box::into_raw(Box::new(ProxqAgent(agent)));
        Ok(())
    })
}

/// Critic Q-row at state `(x, c)`.
///
/// # Safety
/// `agent` must be a live handle and `out` point to 5 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn proxq_agent_q_row(
    agent: *const ProxqAgent,
    x: f64,
    c: f64,
    out: *mut f64,
) -> ProxqStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        let s = State::new(x, c)?;
        *out_ref(out as *mut [f64; N_ACTIONS], "out")? = a.0.q_row(&s);
        Ok(())
    })
}

/// Policy action probabilities at state `(x, c)`.
///
/// # Safety
/// `agent` must be a live handle and `out` point to 5 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn proxq_agent_policy(
    agent: *const ProxqAgent,
    x: f64,
    c: f64,
    out: *mut f64,
) -> ProxqStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        let s = State::new(x, c)?;
        *out_ref(out as *mut [f64; N_ACTIONS], "out")? = a.0.policy.probs(&s);
        Ok(())
    })
}

/// Monotonicity violations of the critic on the 50 x 20 evaluation grid.
///
/// # Safety
/// `agent` must be a live handle and `out` one writable size.
#[no_mangle]
pub unsafe extern "C" fn proxq_agent_monotonicity_errors(
    agent: *const ProxqAgent,
    out: *mut usize,
) -> ProxqStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        *out_ref(out, "out")? = a.0.monotonicity_errors();
        Ok(())
    })
}

/// Releases an agent; null is ignored.
///
/// # Safety
/// `agent` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proxq_agent_free(agent: *mut ProxqAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}
