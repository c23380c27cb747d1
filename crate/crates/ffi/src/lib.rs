//! C ABI over the forge numerical kernels, for binding from other
//! languages.
//!
//! The exported surface mirrors `include/forge.h` (hand-maintained; keep
//! the two in sync). Conventions:
//!
//! - every fallible function returns a `ForgeStatus` and writes its result
//!   through an out-pointer;
//! - feature buffers are row-major `f64` matrices (`count * dim`);
//! - the channel scorer is an opaque handle created by
//!   `forge_affs_scorer_new` and released by `forge_affs_scorer_free`;
//!   its tensors are channel-major `f32` planes (`channels * height *
//!   width`) with a `height * width` mask.

use std::ffi::{c_char, c_int};

use forge::forgery_math::{
    bce, delta, icr_from_deltas, pcr_from_deltas, total_loss, FeatureMap, LossWeights,
};
use forge::raster::Plane;
use forge::ForgeError;

/// Status codes shared with the C header.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ZeroVector = 3,
    DimensionMismatch = 4,
    EmptyRegion = 5,
    InsufficientChannels = 6,
}

fn status_for(err: &ForgeError) -> ForgeStatus {
    match err {
        ForgeError::ZeroVector(_) => ForgeStatus::ZeroVector,
        ForgeError::DimensionMismatch(_) => ForgeStatus::DimensionMismatch,
        ForgeError::EmptyRegion(_) => ForgeStatus::EmptyRegion,
        ForgeError::InsufficientChannels { .. } => ForgeStatus::InsufficientChannels,
        _ => ForgeStatus::InvalidArgument,
    }
}

static VERSION: &[u8] = b"forge-ffi 0.1.0\0";

/// Static version string; do not free.
#[no_mangle]
pub extern "C" fn forge_version() -> *const c_char {
    VERSION.as_ptr() as *const c_char
}

/// Binary cross-entropy of a prediction in (0, 1) against label 0 or 1.
///
/// # Safety
/// `out` must be null or a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn forge_bce(prediction: f64, label: c_int, out: *mut f64) -> ForgeStatus {
    if out.is_null() {
        return ForgeStatus::NullPointer;
    }
    if !(label == 0 || label == 1) || !prediction.is_finite() {
        return ForgeStatus::InvalidArgument;
    }
    *out = bce(prediction, label as u8);
    ForgeStatus::Ok
}

/// Weighted total loss: `lambda1*bce + lambda2*l1 + lambda3*l2`.
///
/// # Safety
/// `out` must be null or a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn forge_total_loss(
    bce_term: f64,
    l1: f64,
    l2: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    out: *mut f64,
) -> ForgeStatus {
    if out.is_null() {
        return ForgeStatus::NullPointer;
    }
    let weights = LossWeights {
        lambda1,
        lambda2,
        lambda3,
        tau: 1.0,
    };
    *out = total_loss(bce_term, l1, l2, &weights);
    ForgeStatus::Ok
}

unsafe fn feature_set(ptr: *const f64, count: usize, dim: usize) -> Option<Vec<Vec<f64>>> {
    if ptr.is_null() || count == 0 || dim == 0 {
        return None;
    }
    let raw = std::slice::from_raw_parts(ptr, count * dim);
    Some(raw.chunks_exact(dim).map(|v| v.to_vec()).collect())
}

/// Cosine-aggregate similarity between two feature sets of `dim`-vectors.
///
/// # Safety
/// `f1` must point to `n1 * dim` doubles and `f2` to `n2 * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn forge_delta(
    f1: *const f64,
    n1: usize,
    f2: *const f64,
    n2: usize,
    dim: usize,
    out: *mut f64,
) -> ForgeStatus {
    if out.is_null() {
        return ForgeStatus::NullPointer;
    }
    let (Some(a), Some(b)) = (feature_set(f1, n1, dim), feature_set(f2, n2, dim)) else {
        return ForgeStatus::NullPointer;
    };
    match delta(&a, &b) {
        Ok(v) => {
            *out = v;
            ForgeStatus::Ok
        }
        Err(e) => status_for(&e),
    }
}

/// Patch-level contrastive term from per-sample similarity aggregates.
///
/// # Safety
/// `real` must point to `n_real` doubles and `fake` to `n_fake` doubles.
#[no_mangle]
pub unsafe extern "C" fn forge_pcr_from_deltas(
    real: *const f64,
    n_real: usize,
    fake: *const f64,
    n_fake: usize,
    tau: f64,
    out: *mut f64,
) -> ForgeStatus {
    if out.is_null() || real.is_null() || fake.is_null() {
        return ForgeStatus::NullPointer;
    }
    if tau <= 0.0 {
        return ForgeStatus::InvalidArgument;
    }
    let real = std::slice::from_raw_parts(real, n_real);
    let fake = std::slice::from_raw_parts(fake, n_fake);
    match pcr_from_deltas(real, fake, tau) {
        Ok(v) => {
            *out = v;
            ForgeStatus::Ok
        }
        Err(e) => status_for(&e),
    }
}

/// Image-level contrastive term from out-out and in-in similarities.
///
/// # Safety
/// `out_sims` must point to `n_out` doubles and `in_sims` to `n_in`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn forge_icr_from_deltas(
    out_sims: *const f64,
    n_out: usize,
    in_sims: *const f64,
    n_in: usize,
    tau: f64,
    out: *mut f64,
) -> ForgeStatus {
    if out.is_null() || out_sims.is_null() || in_sims.is_null() {
        return ForgeStatus::NullPointer;
    }
    if tau <= 0.0 {
        return ForgeStatus::InvalidArgument;
    }
    let out_sims = std::slice::from_raw_parts(out_sims, n_out);
    let in_sims = std::slice::from_raw_parts(in_sims, n_in);
    match icr_from_deltas(out_sims, in_sims, tau) {
        Ok(v) => {
            *out = v;
            ForgeStatus::Ok
        }
        Err(e) => status_for(&e),
    }
}

/// Accumulates per-channel scores over (real, fake, mask) triples.
pub struct ForgeAffsScorer {
    width: usize,
    height: usize,
    channels: usize,
    loss_sums: Vec<f64>,
    samples: usize,
}

/// Create a channel scorer for `channels` planes of `width * height`.
/// Returns null if any dimension is zero.
#[no_mangle]
pub extern "C" fn forge_affs_scorer_new(
    width: usize,
    height: usize,
    channels: usize,
) -> *mut ForgeAffsScorer {
    if width == 0 || height == 0 || channels == 0 {
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(ForgeAffsScorer {
        width,
        height,
        channels,
        loss_sums: vec![0.0; channels],
        samples: 0,
    }))
}

/// Add one sample. `real` and `fake` are channel-major
/// `channels * height * width` floats; `mask` is `height * width` floats
/// in [0, 1] at the same resolution.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes for a scorer
/// created by [`forge_affs_scorer_new`].
#[no_mangle]
pub unsafe extern "C" fn forge_affs_scorer_add_sample(
    scorer: *mut ForgeAffsScorer,
    real: *const f32,
    fake: *const f32,
    mask: *const f32,
) -> ForgeStatus {
    let Some(scorer) = scorer.as_mut() else {
        return ForgeStatus::NullPointer;
    };
    if real.is_null() || fake.is_null() || mask.is_null() {
        return ForgeStatus::NullPointer;
    }
    let n = scorer.width * scorer.height;
    let count = n * scorer.channels;
    let real = std::slice::from_raw_parts(real, count);
    let fake = std::slice::from_raw_parts(fake, count);
    let mask = std::slice::from_raw_parts(mask, n);
    let real = match FeatureMap::from_vec(scorer.width, scorer.height, scorer.channels, 0, real.to_vec()) {
        Ok(m) => m,
        Err(e) => return status_for(&e),
    };
    let fake = match FeatureMap::from_vec(scorer.width, scorer.height, scorer.channels, 0, fake.to_vec()) {
        Ok(m) => m,
        Err(e) => return status_for(&e),
    };
    if mask.iter().any(|v| !v.is_finite()) {
        return ForgeStatus::InvalidArgument;
    }
    let mask = Plane::from_vec(scorer.width, scorer.height, mask.to_vec());
    for k in 0..scorer.channels {
        match forge::forgery_math::affs_channel_loss(&real, &fake, &mask, k) {
            Ok(loss) => scorer.loss_sums[k] += loss,
            Err(e) => return status_for(&e),
        }
    }
    scorer.samples += 1;
    ForgeStatus::Ok
}

/// Mean per-channel scores so far. `out` must hold `channels` doubles.
///
/// # Safety
/// `scorer` must come from [`forge_affs_scorer_new`]; `out` must hold
/// `len >= channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn forge_affs_scorer_scores(
    scorer: *const ForgeAffsScorer,
    out: *mut f64,
    len: usize,
) -> ForgeStatus {
    let Some(scorer) = scorer.as_ref() else {
        return ForgeStatus::NullPointer;
    };
    if out.is_null() {
        return ForgeStatus::NullPointer;
    }
    if len < scorer.channels {
        return ForgeStatus::InvalidArgument;
    }
    if scorer.samples == 0 {
        return ForgeStatus::EmptyRegion;
    }
    let out = std::slice::from_raw_parts_mut(out, scorer.channels);
    for (o, &sum) in out.iter_mut().zip(&scorer.loss_sums) {
        *o = sum / scorer.samples as f64;
    }
    ForgeStatus::Ok
}

/// Select the `budget` best channels (lowest mean score, ties toward the
/// lower index). `out_indices` must hold `budget` entries; `out_scores`
/// may be null or hold `budget` doubles aligned with the indices.
///
/// # Safety
/// `scorer` must come from [`forge_affs_scorer_new`]; output buffers must
/// hold `budget` entries.
#[no_mangle]
pub unsafe extern "C" fn forge_affs_scorer_select(
    scorer: *const ForgeAffsScorer,
    budget: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
) -> ForgeStatus {
    let Some(scorer) = scorer.as_ref() else {
        return ForgeStatus::NullPointer;
    };
    if out_indices.is_null() {
        return ForgeStatus::NullPointer;
    }
    if budget > scorer.channels {
        return ForgeStatus::InsufficientChannels;
    }
    if scorer.samples == 0 {
        return ForgeStatus::EmptyRegion;
    }
    let mut order: Vec<usize> = (0..scorer.channels).collect();
    order.sort_by(|&a, &b| {
        scorer.loss_sums[a]
            .total_cmp(&scorer.loss_sums[b])
            .then(a.cmp(&b))
    });
    let indices = std::slice::from_raw_parts_mut(out_indices, budget);
    indices.copy_from_slice(&order[..budget]);
    if !out_scores.is_null() {
        let scores = std::slice::from_raw_parts_mut(out_scores, budget);
        for (slot, &idx) in scores.iter_mut().zip(&order[..budget]) {
            *slot = scorer.loss_sums[idx] / scorer.samples as f64;
        }
    }
    ForgeStatus::Ok
}

/// Release a scorer. Null is ignored.
///
/// # Safety
/// `scorer` must come from [`forge_affs_scorer_new`] and not already be
/// freed.
#[no_mangle]
pub unsafe extern "C" fn forge_affs_scorer_free(scorer: *mut ForgeAffsScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_nul_terminated() {
        let ptr = forge_version();
        let text = unsafe { std::ffi::CStr::from_ptr(ptr) }.to_str().unwrap();
        assert!(text.starts_with("forge-ffi"));
    }

    #[test]
    fn bce_and_total_loss_anchors() {
        let mut out = 0.0f64;
        unsafe {
            assert_eq!(forge_bce(0.5, 1, &mut out), ForgeStatus::Ok);
            assert!((out - std::f64::consts::LN_2).abs() < 1e-12);
            assert_eq!(
                forge_total_loss(1.0, 1.0, 1.0, 1.0, 2.5, 0.25, &mut out),
                ForgeStatus::Ok
            );
            assert!((out - 3.75).abs() < 1e-12);
            assert_eq!(forge_bce(0.5, 2, &mut out), ForgeStatus::InvalidArgument);
            assert_eq!(
                forge_bce(0.5, 1, std::ptr::null_mut()),
                ForgeStatus::NullPointer
            );
        }
    }

    #[test]
    fn delta_through_the_c_surface() {
        let f1 = [0.6f64, 0.8];
        let f2 = [0.6f64, 0.8];
        let mut out = 0.0f64;
        let status = unsafe { forge_delta(f1.as_ptr(), 1, f2.as_ptr(), 1, 2, &mut out) };
        assert_eq!(status, ForgeStatus::Ok);
        assert!((out - 1.0).abs() < 1e-12);

        let zeros = [0.0f64, 0.0];
        let status = unsafe { forge_delta(zeros.as_ptr(), 1, f2.as_ptr(), 1, 2, &mut out) };
        assert_eq!(status, ForgeStatus::ZeroVector);
    }

    #[test]
    fn contrastive_terms_match_closed_forms() {
        let mut out = 0.0f64;
        let real = [1.0f64];
        let fake = [-1.0f64];
        let status =
            unsafe { forge_pcr_from_deltas(real.as_ptr(), 1, fake.as_ptr(), 1, 0.7, &mut out) };
        assert_eq!(status, ForgeStatus::Ok);
        let expected = (1.0 + (-2.0 / 0.7f64).exp()).ln();
        assert!((out - expected).abs() < 1e-12);

        let sims = [0.3f64];
        let status =
            unsafe { forge_icr_from_deltas(sims.as_ptr(), 1, sims.as_ptr(), 1, 0.7, &mut out) };
        assert_eq!(status, ForgeStatus::Ok);
        assert!((out - std::f64::consts::LN_2).abs() < 1e-12);

        let status =
            unsafe { forge_pcr_from_deltas(real.as_ptr(), 1, fake.as_ptr(), 1, 0.0, &mut out) };
        assert_eq!(status, ForgeStatus::InvalidArgument);
    }

    #[test]
    fn scorer_recovers_planted_channel() {
        let (w, h, c) = (8, 8, 4);
        let scorer = forge_affs_scorer_new(w, h, c);
        assert!(!scorer.is_null());

        // Mask: left half manipulated.
        let mask: Vec<f32> = (0..w * h)
            .map(|i| if i % w < w / 2 { 1.0 } else { 0.0 })
            .collect();
        // Channel 2 tracks the mask; others are flat (score = mean(mask^2)).
        for _ in 0..3 {
            let mut real = vec![0.0f32; w * h * c];
            let fake = vec![0.0f32; w * h * c];
            for (i, &m) in mask.iter().enumerate() {
                real[2 * w * h + i] = m;
            }
            let status =
                unsafe { forge_affs_scorer_add_sample(scorer, real.as_ptr(), fake.as_ptr(), mask.as_ptr()) };
            assert_eq!(status, ForgeStatus::Ok);
        }

        let mut scores = vec![0.0f64; c];
        let status = unsafe { forge_affs_scorer_scores(scorer, scores.as_mut_ptr(), c) };
        assert_eq!(status, ForgeStatus::Ok);
        assert!(scores[2] < scores[0]);

        let mut indices = [0usize; 1];
        let mut top_scores = [0.0f64; 1];
        let status = unsafe {
            forge_affs_scorer_select(scorer, 1, indices.as_mut_ptr(), top_scores.as_mut_ptr())
        };
        assert_eq!(status, ForgeStatus::Ok);
        assert_eq!(indices[0], 2);
        assert!((top_scores[0] - scores[2]).abs() < 1e-15);

        let status = unsafe { forge_affs_scorer_select(scorer, c + 1, indices.as_mut_ptr(), std::ptr::null_mut()) };
        assert_eq!(status, ForgeStatus::InsufficientChannels);

        unsafe { forge_affs_scorer_free(scorer) };
    }

    #[test]
    fn empty_scorer_reports_empty_region() {
        let scorer = forge_affs_scorer_new(4, 4, 2);
        let mut scores = [0.0f64; 2];
        let status = unsafe { forge_affs_scorer_scores(scorer, scores.as_mut_ptr(), 2) };
        assert_eq!(status, ForgeStatus::EmptyRegion);
        unsafe { forge_affs_scorer_free(scorer) };
    }

    #[test]
    fn header_lists_every_exported_symbol() {
        let header = include_str!("../include/forge.h");
        for symbol in [
            "forge_version",
            "forge_bce",
            "forge_total_loss",
            "forge_delta",
            "forge_pcr_from_deltas",
            "forge_icr_from_deltas",
            "forge_affs_scorer_new",
            "forge_affs_scorer_add_sample",
            "forge_affs_scorer_scores",
            "forge_affs_scorer_select",
            "forge_affs_scorer_free",
        ] {
            assert!(header.contains(symbol), "header is missing {symbol}");
        }
    }
}
