//! C ABI over the lattice core.
//!
//! The surface is deliberately small: construct a probability grid (from
//! normalized probabilities or raw logits), score label sequences against it,
//! fetch the loss gradient, decode it, free it. Grids travel as opaque
//! handles; every entry point returns a status code from the `CTC2D_*` family
//! and writes results through out-pointers. Buffers are always caller-owned:
//! the only allocation that crosses the boundary is the grid handle itself,
//! which must be released with [`ctc2d_grid_free`].
//!
//! Conventions, mirrored in `include/ctc2d.h`:
//! - probabilities and gradients are dense `h*w*q` arrays in row-major
//!   `(i, j, k)` order, the same layout the core uses;
//! - label classes are `uint32_t` in `[1, q)`; class `0` is the blank and
//!   never appears in targets;
//! - functions never panic across the boundary: a bug that would have
//!   panicked surfaces as [`CTC2D_INTERNAL`].

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use ctc2d::lattice::{chain_through_softmax, grad_wrt_probs, sequence_log_prob, set_loss};
use ctc2d::{
    argmax_grid, decode_with_strategy, softmax_grid, Error, GroupingStrategy, LabelSequence,
    LambdaParams, LogitsGrid, LossMode, ProbGrid, TargetSet,
};

/// Success.
pub const CTC2D_OK: i32 = 0;
/// A required pointer argument was null.
pub const CTC2D_NULL_ARGUMENT: i32 = 1;
/// An argument failed validation (shape, normalization, label range, ...).
pub const CTC2D_INVALID_ARGUMENT: i32 = 2;
/// A caller-provided buffer cannot hold the result; required sizes were
/// written to the count out-parameters.
pub const CTC2D_BUFFER_TOO_SMALL: i32 = 3;
/// Every path for some target has zero probability; the gradient is undefined.
pub const CTC2D_NO_MASS: i32 = 4;
/// A non-finite value appeared where a finite one was required.
pub const CTC2D_NUMERIC: i32 = 5;
/// An internal invariant failed; this is a bug in the library, not the caller.
pub const CTC2D_INTERNAL: i32 = 6;

/// Reading directions accepted by [`ctc2d_decode`].
pub const CTC2D_STRATEGY_ROWS: i32 = 0;
pub const CTC2D_STRATEGY_COLUMNS: i32 = 1;
pub const CTC2D_STRATEGY_ROWS_AND_COLUMNS: i32 = 2;
pub const CTC2D_STRATEGY_MERGED_ROWS: i32 = 3;

/// Loss variants accepted by the loss and gradient entry points.
pub const CTC2D_LOSS_NEG_LOG_MEAN_PROB: i32 = 0;
pub const CTC2D_LOSS_SUM_NEG_LOG_PROBS: i32 = 1;

/// Opaque probability grid handle.
#[allow(non_camel_case_types)]
pub struct ctc2d_grid {
    inner: ProbGrid,
}

fn status_of(err: &Error) -> i32 {
    match err {
        Error::VanishingMass { .. } => CTC2D_NO_MASS,
        Error::NonFinite(_) | Error::Diverged { .. } => CTC2D_NUMERIC,
        _ => CTC2D_INVALID_ARGUMENT,
    }
}

/// Runs `body` with panics converted to [`CTC2D_INTERNAL`].
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => CTC2D_INTERNAL,
    }
}

/// Collects `num_sequences` label sequences from a flat class array.
///
/// # Safety
/// `labels_flat` must point to `sum(lens)` classes and `lens` to
/// `num_sequences` lengths.
unsafe fn collect_targets(
    labels_flat: *const u32,
    lens: *const usize,
    num_sequences: usize,
    q: usize,
) -> Result<TargetSet, i32> {
    let lens: &[usize] = if num_sequences == 0 {
        &[]
    } else if lens.is_null() {
        return Err(CTC2D_NULL_ARGUMENT);
    } else {
        unsafe { std::slice::from_raw_parts(lens, num_sequences) }
    };
    let total: usize = lens.iter().sum();
    let flat: &[u32] = if total == 0 {
        &[]
    } else if labels_flat.is_null() {
        return Err(CTC2D_NULL_ARGUMENT);
    } else {
        unsafe { std::slice::from_raw_parts(labels_flat, total) }
    };
    let mut sequences = Vec::with_capacity(num_sequences);
    let mut offset = 0;
    for &len in lens {
        let classes = flat[offset..offset + len]
            .iter()
            .map(|&c| c as usize)
            .collect();
        offset += len;
        sequences.push(LabelSequence::new(classes, q).map_err(|e| status_of(&e))?);
    }
    TargetSet::new(sequences).map_err(|e| status_of(&e))
}

fn lambda_of(lambda1: f64, lambda2: f64) -> Result<LambdaParams, i32> {
    LambdaParams::new(lambda1, lambda2).map_err(|e| status_of(&e))
}

fn mode_of(mode: i32) -> Result<LossMode, i32> {
    match mode {
        CTC2D_LOSS_NEG_LOG_MEAN_PROB => Ok(LossMode::NegLogMeanProb),
        CTC2D_LOSS_SUM_NEG_LOG_PROBS => Ok(LossMode::SumNegLogProbs),
        _ => Err(CTC2D_INVALID_ARGUMENT),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctc2d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Static description of a status code; unknown codes get a placeholder.
#[no_mangle]
pub extern "C" fn ctc2d_status_message(status: i32) -> *const c_char {
    let msg: &'static str = match status {
        CTC2D_OK => "ok\0",
        CTC2D_NULL_ARGUMENT => "a required pointer argument was null\0",
        CTC2D_INVALID_ARGUMENT => "an argument failed validation\0",
        CTC2D_BUFFER_TOO_SMALL => "a caller-provided buffer was too small\0",
        CTC2D_NO_MASS => "a target has zero probability mass\0",
        CTC2D_NUMERIC => "a non-finite value was encountered\0",
        CTC2D_INTERNAL => "internal error\0",
        _ => "unknown status code\0",
    };
    msg.as_ptr() as *const c_char
}

/// Builds a grid from `probs_len == h*w*q` normalized probabilities. On
/// success the new handle is written to `out` and owned by the caller.
///
/// # Safety
/// `probs` must point to `probs_len` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_grid_new(
    h: usize,
    w: usize,
    q: usize,
    probs: *const f64,
    probs_len: usize,
    out: *mut *mut ctc2d_grid,
) -> i32 {
    guarded(|| {
        if probs.is_null() || out.is_null() {
            return CTC2D_NULL_ARGUMENT;
        }
        if probs_len != h.saturating_mul(w).saturating_mul(q) {
            return CTC2D_INVALID_ARGUMENT;
        }
        let data = unsafe { std::slice::from_raw_parts(probs, probs_len) }.to_vec();
        match ProbGrid::from_vec(h, w, q, data) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(ctc2d_grid { inner })) };
                CTC2D_OK
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Builds a grid by applying a per-cell softmax to `logits_len == h*w*q` raw
/// logits; otherwise identical to [`ctc2d_grid_new`].
///
/// # Safety
/// `logits` must point to `logits_len` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_grid_from_logits(
    h: usize,
    w: usize,
    q: usize,
    logits: *const f64,
    logits_len: usize,
    out: *mut *mut ctc2d_grid,
) -> i32 {
    guarded(|| {
        if logits.is_null() || out.is_null() {
            return CTC2D_NULL_ARGUMENT;
        }
        if logits_len != h.saturating_mul(w).saturating_mul(q) {
            return CTC2D_INVALID_ARGUMENT;
        }
        let data = unsafe { std::slice::from_raw_parts(logits, logits_len) }.to_vec();
        match LogitsGrid::from_vec(h, w, q, data) {
            Ok(z) => {
                let inner = softmax_grid(&z);
                unsafe { *out = Box::into_raw(Box::new(ctc2d_grid { inner })) };
                CTC2D_OK
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Releases a grid handle; null is a no-op.
///
/// # Safety
/// `grid` must be null or a pointer obtained from a `ctc2d_grid_*`
/// constructor that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_grid_free(grid: *mut ctc2d_grid) {
    if !grid.is_null() {
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Reports the dimensions of a grid.
///
/// # Safety
/// All pointers must be valid; the grid must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_grid_dims(
    grid: *const ctc2d_grid,
    h: *mut usize,
    w: *mut usize,
    q: *mut usize,
) -> i32 {
    guarded(|| {
        if grid.is_null() || h.is_null() || w.is_null() || q.is_null() {
            return CTC2D_NULL_ARGUMENT;
        }
        let g = unsafe { &(*grid).inner };
        unsafe {
            *h = g.h();
            *w = g.w();
            *q = g.q();
        }
        CTC2D_OK
    })
}

/// Log-probability of one label sequence under the lattice. `labels` may be
/// empty (`len == 0`) for the all-blank sequence.
///
/// # Safety
/// `labels` must point to `len` classes (or be null when `len == 0`);
/// `out_log_prob` must be valid; the grid must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_sequence_log_prob(
    grid: *const ctc2d_grid,
    labels: *const u32,
    len: usize,
    lambda1: f64,
    lambda2: f64,
    out_log_prob: *mut f64,
) -> i32 {
    guarded(|| {
        if grid.is_null() || out_log_prob.is_null() || (labels.is_null() && len > 0) {
            return CTC2D_NULL_ARGUMENT;
        }
        let g = unsafe { &(*grid).inner };
        let raw: &[u32] = if len == 0 {
            &[]
        } else {
            unsafe { std::slice::from_raw_parts(labels, len) }
        };
        let classes: Vec<usize> = raw.iter().map(|&c| c as usize).collect();
        // The empty sequence (all blanks) is scorable but has no
        // `LabelSequence` form, so it skips that validation.
        if !classes.is_empty() {
            if let Err(e) = LabelSequence::new(classes.clone(), g.q()) {
                return status_of(&e);
            }
        }
        let lambda = match lambda_of(lambda1, lambda2) {
            Ok(l) => l,
            Err(s) => return s,
        };
        match sequence_log_prob(g, &classes, &lambda) {
            Ok(lp) => {
                unsafe { *out_log_prob = lp };
                CTC2D_OK
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Loss of a whole target set against the grid. Sequences arrive flattened:
/// `lens` holds `num_sequences` lengths and `labels_flat` their concatenated
/// classes. `out_per_sequence` may be null; when given it receives
/// `num_sequences` log-probabilities.
///
/// # Safety
/// Pointer/length contracts as described; the grid must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_set_loss(
    grid: *const ctc2d_grid,
    labels_flat: *const u32,
    lens: *const usize,
    num_sequences: usize,
    lambda1: f64,
    lambda2: f64,
    mode: i32,
    out_loss: *mut f64,
    out_per_sequence: *mut f64,
) -> i32 {
    guarded(|| {
        if grid.is_null() || out_loss.is_null() {
            return CTC2D_NULL_ARGUMENT;
        }
        let g = unsafe { &(*grid).inner };
        let targets = match unsafe { collect_targets(labels_flat, lens, num_sequences, g.q()) } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let lambda = match lambda_of(lambda1, lambda2) {
            Ok(l) => l,
            Err(s) => return s,
        };
        let mode = match mode_of(mode) {
            Ok(m) => m,
            Err(s) => return s,
        };
        match set_loss(g, &targets, &lambda, mode) {
            Ok(breakdown) => {
                unsafe { *out_loss = breakdown.loss };
                if !out_per_sequence.is_null() {
                    let dst =
                        unsafe { std::slice::from_raw_parts_mut(out_per_sequence, num_sequences) };
                    dst.copy_from_slice(&breakdown.per_seq_log_probs);
                }
                CTC2D_OK
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Loss plus its gradient. `out_grad_probs` (free-variable sense) and
/// `out_grad_logits` (through the per-cell softmax) may each be null; when
/// given they receive `h*w*q` entries.
///
/// # Safety
/// Pointer/length contracts as described; the grid must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_loss_gradient(
    grid: *const ctc2d_grid,
    labels_flat: *const u32,
    lens: *const usize,
    num_sequences: usize,
    lambda1: f64,
    lambda2: f64,
    mode: i32,
    out_loss: *mut f64,
    out_grad_probs: *mut f64,
    out_grad_logits: *mut f64,
) -> i32 {
    guarded(|| {
        if grid.is_null() || out_loss.is_null() {
            return CTC2D_NULL_ARGUMENT;
        }
        let g = unsafe { &(*grid).inner };
        let targets = match unsafe { collect_targets(labels_flat, lens, num_sequences, g.q()) } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let lambda = match lambda_of(lambda1, lambda2) {
            Ok(l) => l,
            Err(s) => return s,
        };
        let mode = match mode_of(mode) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let (breakdown, grad) = match grad_wrt_probs(g, &targets, &lambda, mode) {
            Ok(pair) => pair,
            Err(e) => return status_of(&e),
        };
        unsafe { *out_loss = breakdown.loss };
        if !out_grad_probs.is_null() {
            let dst = unsafe { std::slice::from_raw_parts_mut(out_grad_probs, grad.len()) };
            dst.copy_from_slice(&grad);
        }
        if !out_grad_logits.is_null() {
            match chain_through_softmax(g, &grad) {
                Ok(logit_grad) => {
                    let dst =
                        unsafe { std::slice::from_raw_parts_mut(out_grad_logits, logit_grad.len()) };
                    dst.copy_from_slice(&logit_grad);
                }
                Err(e) => return status_of(&e),
            }
        }
        CTC2D_OK
    })
}

/// Greedy argmax decode under one of the `CTC2D_STRATEGY_*` readings.
///
/// Decoded sequences come back flattened: `out_seq_lens` receives one length
/// per sequence and `out_classes` their concatenated classes. The required
/// sizes are always written to `out_num_sequences` and `out_total_classes`,
/// so a first call with zero capacities sizes the buffers for a second.
///
/// # Safety
/// Pointer/capacity contracts as described; the grid must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctc2d_decode(
    grid: *const ctc2d_grid,
    strategy: i32,
    out_classes: *mut u32,
    classes_cap: usize,
    out_seq_lens: *mut usize,
    seq_lens_cap: usize,
    out_num_sequences: *mut usize,
    out_total_classes: *mut usize,
) -> i32 {
    guarded(|| {
        if grid.is_null() || out_num_sequences.is_null() || out_total_classes.is_null() {
            return CTC2D_NULL_ARGUMENT;
        }
        let strategy = match strategy {
            CTC2D_STRATEGY_ROWS => GroupingStrategy::Rows,
            CTC2D_STRATEGY_COLUMNS => GroupingStrategy::Columns,
            CTC2D_STRATEGY_ROWS_AND_COLUMNS => GroupingStrategy::RowsAndColumns,
            CTC2D_STRATEGY_MERGED_ROWS => GroupingStrategy::MergedRows,
            _ => return CTC2D_INVALID_ARGUMENT,
        };
        let g = unsafe { &(*grid).inner };
        let result = decode_with_strategy(&argmax_grid(g), strategy);
        let num: usize = result.groups.len();
        let total: usize = result.groups.iter().map(|gr| gr.sequence.len()).sum();
        unsafe {
            *out_num_sequences = num;
            *out_total_classes = total;
        }
        if num > seq_lens_cap || total > classes_cap {
            return CTC2D_BUFFER_TOO_SMALL;
        }
        if (out_seq_lens.is_null() && num > 0) || (out_classes.is_null() && total > 0) {
            return CTC2D_NULL_ARGUMENT;
        }
        let mut offset = 0;
        for (idx, group) in result.groups.iter().enumerate() {
            unsafe { *out_seq_lens.add(idx) = group.sequence.len() };
            for &class in group.sequence.labels() {
                unsafe { *out_classes.add(offset) = class as u32 };
                offset += 1;
            }
        }
        CTC2D_OK
    })
}
