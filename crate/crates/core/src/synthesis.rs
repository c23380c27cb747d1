//! Pseudo-fake synthesis: masked blending of a reconstructed source with
//! its original, plus provenance records and bit-exact replay.
//!
//! Per-sample draw order is fixed and documented on [`synthesize`]:
//! reconstruction draws, transform side, transform params, then mask
//! attempts (kind, micro subset, augmentation). A sample's rng stream is
//! derived from the master seed and its stream index, so results never
//! depend on worker scheduling.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ForgeError, Result};
use crate::face_geometry::{
    apply_mask_augment, convex_hull, macro_mask, micro_mask_for_groups, rasterize,
    sample_group_subset, FeatureGroups, LandmarkSet, MacroVariant, Mask, MaskAugmentConfig,
    MaskAugmentDraws, MaskKind,
};
use crate::pixel_transforms::{
    apply_to_side, side_for_draw, TransformParams, TransformRanges, TransformSide,
};
use crate::raster::{plane_to_png_bytes, Image, Plane};
use crate::reconstruction::{
    builtin_reconstruct, external_reconstruct, AdapterConfig, BranchProbs, BuiltinReconConfig,
    ReconBackend, ReconBranch, ReconDraws,
};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mask-kind mixture; must sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MaskKindProbs {
    pub p_macro81: f64,
    pub p_macro4: f64,
    pub p_micro: f64,
}

impl Default for MaskKindProbs {
    fn default() -> Self {
        MaskKindProbs {
            p_macro81: 0.4,
            p_macro4: 0.2,
            p_micro: 0.4,
        }
    }
}

impl MaskKindProbs {
    pub fn kind_for_draw(&self, u: f64) -> MaskKind {
        if u < self.p_macro81 {
            MaskKind::Macro81
        } else if u < self.p_macro81 + self.p_macro4 {
            MaskKind::Macro4
        } else {
            MaskKind::Micro
        }
    }

    pub fn sum(&self) -> f64 {
        self.p_macro81 + self.p_macro4 + self.p_micro
    }
}

/// Everything the per-sample pipeline needs besides the inputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisOptions {
    pub mask_probs: MaskKindProbs,
    pub macro4_margin: f64,
    pub micro_dilate_radius: u32,
    pub feature_groups: FeatureGroups,
    pub mask_augment: MaskAugmentConfig,
    pub transform: TransformRanges,
    pub branch_probs: BranchProbs,
    pub builtin_recon: BuiltinReconConfig,
    pub adapter: Option<AdapterConfig>,
    /// Additional mask attempts after the first empty one.
    pub mask_retries: u32,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            mask_probs: MaskKindProbs::default(),
            macro4_margin: 0.05,
            micro_dilate_radius: 3,
            feature_groups: FeatureGroups::standard_81(),
            mask_augment: MaskAugmentConfig::default(),
            transform: TransformRanges::default(),
            branch_probs: BranchProbs::default(),
            builtin_recon: BuiltinReconConfig::default(),
            adapter: None,
            mask_retries: 5,
        }
    }
}

/// Identity of one sample within a run.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub sample_id: String,
    pub source_image: String,
    pub master_seed: u64,
    pub stream_index: u64,
}

/// Independent rng stream for a sample, derived by hashing the master seed
/// with the stream index.
pub fn sample_rng(master_seed: u64, stream_index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"forge.sample.stream.v1");
    hasher.update(master_seed.to_le_bytes());
    hasher.update(stream_index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub branch: ReconBranch,
    pub backend: ReconBackend,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adapter_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fallback_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sr_factor: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub side: TransformSide,
    pub params: TransformParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub pseudo_fake: String,
    pub mask: String,
    pub pseudo_fake_sha256: String,
    pub mask_sha256: String,
}

/// Per-sample provenance; together with the run options it regenerates the
/// sample bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub sample_id: String,
    pub engine_version: String,
    pub source_image: String,
    pub mask_kind: MaskKind,
    pub recon: ReconRecord,
    pub transform: TransformRecord,
    pub mask_augment: MaskAugmentDraws,
    pub mask_attempts: u32,
    pub master_seed: u64,
    pub stream_index: u64,
    pub outputs: OutputRecord,
}

#[derive(Debug)]
pub struct SynthesisOutput {
    pub pseudo_fake: Image,
    pub mask: Mask,
    pub pseudo_fake_png: Vec<u8>,
    pub mask_png: Vec<u8>,
    pub record: SynthesisRecord,
}

/// Masked blend `m*source + (1-m)*target`: the source supplies manipulated
/// content inside the mask, the target everything else. Mask values 0 and 1
/// select the target and source samples bit-exactly; fractional values
/// interpolate as `t + m * (s - t)`, which also keeps `blend(x, x, m) == x`
/// exact.
pub fn blend(source: &Image, target: &Image, mask: &Mask) -> Result<Image> {
    if source.dims() != target.dims() {
        return Err(ForgeError::DimensionMismatch(format!(
            "blend source {}x{} vs target {}x{}",
            source.width(),
            source.height(),
            target.width(),
            target.height()
        )));
    }
    if (mask.data.width(), mask.data.height()) != source.dims() {
        return Err(ForgeError::DimensionMismatch(format!(
            "blend mask {}x{} vs image {}x{}",
            mask.data.width(),
            mask.data.height(),
            source.width(),
            source.height()
        )));
    }
    let mut out = target.clone();
    let (w, h) = source.dims();
    for y in 0..h {
        for x in 0..w {
            let m = mask.data.get(x, y);
            if m == 0.0 {
                continue;
            }
            if m == 1.0 {
                out.set(x, y, source.get(x, y));
                continue;
            }
            let s = source.get(x, y);
            let t = target.get(x, y);
            // Rounding of t + m*(s-t) can escape [0,1] by an ulp.
            out.set(
                x,
                y,
                [
                    (t[0] + m * (s[0] - t[0])).clamp(0.0, 1.0),
                    (t[1] + m * (s[1] - t[1])).clamp(0.0, 1.0),
                    (t[2] + m * (s[2] - t[2])).clamp(0.0, 1.0),
                ],
            );
        }
    }
    Ok(out)
}

/// Binary support of the convex hull of all landmarks.
pub fn landmark_hull_plane(landmarks: &LandmarkSet, width: usize, height: usize) -> Result<Plane> {
    let hull = convex_hull(landmarks.points())?;
    Ok(rasterize(&hull, width, height))
}

/// Run the full per-sample pipeline.
///
/// Draw order: (1) reconstruction branch and SR factor, (2) transform side,
/// (3) transform params, (4) per mask attempt: kind, micro subset if micro,
/// augmentation draws. Only `EmptyMask` triggers a mask retry; after
/// `mask_retries` extra attempts the sample fails with `SynthesisFailure`.
pub fn synthesize(
    image: &Image,
    landmarks: &LandmarkSet,
    ctx: &SampleContext,
    options: &SynthesisOptions,
) -> Result<SynthesisOutput> {
    landmarks.validate_bounds(image.width(), image.height())?;
    let mut rng = sample_rng(ctx.master_seed, ctx.stream_index);
    let (w, h) = image.dims();

    // 1. Reconstruction.
    let recon_draws = ReconDraws::sample(&mut rng, &options.branch_probs, &options.builtin_recon);
    let (source, recon_record) = reconstruct_with_backend(image, landmarks, &recon_draws, options)?;
    let target = image.clone();

    // 2-3. One-sided statistical divergence.
    let side = side_for_draw(rng.random::<f64>());
    let params = TransformParams::sample(&mut rng, &options.transform);
    let (source, target, side, params) = apply_to_side(&source, &target, side, &params);

    // 4. Mask generation with bounded retries on empty support.
    let max_attempts = options.mask_retries + 1;
    let mut attempt = 0u32;
    let (mask, augment_draws) = loop {
        attempt += 1;
        let kind = options.mask_probs.kind_for_draw(rng.random::<f64>());
        let base = match kind {
            MaskKind::Macro81 => macro_mask(landmarks, MacroVariant::Macro81, w, h, options.macro4_margin)?,
            MaskKind::Macro4 => macro_mask(landmarks, MacroVariant::Macro4, w, h, options.macro4_margin)?,
            MaskKind::Micro => {
                let chosen = sample_group_subset(&mut rng, &options.feature_groups);
                micro_mask_for_groups(
                    landmarks,
                    &options.feature_groups,
                    &chosen,
                    options.micro_dilate_radius,
                    w,
                    h,
                )?
            }
        };
        let draws = MaskAugmentDraws::sample(&mut rng, &options.mask_augment);
        match apply_mask_augment(&base, &draws) {
            Ok(mask) => break (mask, draws),
            Err(ForgeError::EmptyMask) if attempt < max_attempts => continue,
            Err(ForgeError::EmptyMask) => {
                return Err(ForgeError::SynthesisFailure { attempts: attempt })
            }
            Err(e) => return Err(e),
        }
    };

    // 5. Blend.
    let pseudo_fake = blend(&source, &target, &mask)?;

    let pseudo_fake_png = pseudo_fake.to_png_bytes()?;
    let mask_png = plane_to_png_bytes(&mask.data)?;
    let record = SynthesisRecord {
        sample_id: ctx.sample_id.clone(),
        engine_version: ENGINE_VERSION.to_string(),
        source_image: ctx.source_image.clone(),
        mask_kind: mask.kind,
        recon: recon_record,
        transform: TransformRecord { side, params },
        mask_augment: augment_draws,
        mask_attempts: attempt,
        master_seed: ctx.master_seed,
        stream_index: ctx.stream_index,
        outputs: OutputRecord {
            pseudo_fake: format!("samples/{}.png", ctx.sample_id),
            mask: format!("masks/{}.png", ctx.sample_id),
            pseudo_fake_sha256: sha256_hex(&pseudo_fake_png),
            mask_sha256: sha256_hex(&mask_png),
        },
    };
    Ok(SynthesisOutput {
        pseudo_fake,
        mask,
        pseudo_fake_png,
        mask_png,
        record,
    })
}

fn reconstruct_with_backend(
    image: &Image,
    landmarks: &LandmarkSet,
    draws: &ReconDraws,
    options: &SynthesisOptions,
) -> Result<(Image, ReconRecord)> {
    let needs_hull = draws.branch == ReconBranch::Sr;
    let hull = if needs_hull {
        landmark_hull_plane(landmarks, image.width(), image.height())?
    } else {
        Plane::new(0, 0)
    };

    let external = options
        .adapter
        .as_ref()
        .filter(|a| draws.branch != ReconBranch::Identity && a.serves(draws.branch));

    if let Some(adapter) = external {
        let workdir = tempfile::tempdir()
            .map_err(|e| ForgeError::AdapterFailure(format!("tempdir: {e}")))?;
        match external_reconstruct(image, draws.branch, adapter, workdir.path()) {
            Ok(out) => {
                return Ok((
                    out,
                    ReconRecord {
                        branch: draws.branch,
                        backend: ReconBackend::External,
                        adapter_id: Some(adapter.id.clone()),
                        fallback_error: None,
                        sr_factor: draws.sr_factor,
                    },
                ));
            }
            Err(ForgeError::AdapterFailure(msg)) => {
                let out = builtin_reconstruct(image, draws, &options.builtin_recon, &hull);
                return Ok((
                    out,
                    ReconRecord {
                        branch: draws.branch,
                        backend: ReconBackend::BuiltinFallback,
                        adapter_id: Some(adapter.id.clone()),
                        fallback_error: Some(msg),
                        sr_factor: draws.sr_factor,
                    },
                ));
            }
            Err(e) => return Err(e),
        }
    }

    let out = builtin_reconstruct(image, draws, &options.builtin_recon, &hull);
    Ok((
        out,
        ReconRecord {
            branch: draws.branch,
            backend: ReconBackend::BuiltinInterp,
            adapter_id: None,
            fallback_error: None,
            sr_factor: draws.sr_factor,
        },
    ))
}

/// Regenerate a recorded sample and check it against the recorded hashes.
///
/// The same options the run used must be supplied (the manifest header
/// carries them). Any byte difference is a `ReplayDivergence`.
pub fn replay(
    record: &SynthesisRecord,
    image: &Image,
    landmarks: &LandmarkSet,
    options: &SynthesisOptions,
) -> Result<(Image, Mask)> {
    if record.engine_version != ENGINE_VERSION {
        return Err(ForgeError::VersionMismatch {
            found: record.engine_version.clone(),
            expected: ENGINE_VERSION.to_string(),
        });
    }
    let ctx = SampleContext {
        sample_id: record.sample_id.clone(),
        source_image: record.source_image.clone(),
        master_seed: record.master_seed,
        stream_index: record.stream_index,
    };
    let out = synthesize(image, landmarks, &ctx, options)?;
    if out.record.outputs.pseudo_fake_sha256 != record.outputs.pseudo_fake_sha256 {
        return Err(ForgeError::ReplayDivergence {
            sample_id: record.sample_id.clone(),
            detail: "pseudo-fake bytes differ from record".to_string(),
        });
    }
    if out.record.outputs.mask_sha256 != record.outputs.mask_sha256 {
        return Err(ForgeError::ReplayDivergence {
            sample_id: record.sample_id.clone(),
            detail: "mask bytes differ from record".to_string(),
        });
    }
    Ok((out.pseudo_fake, out.mask))
}

// --- manifest ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub engine_version: String,
    pub master_seed: u64,
    pub input_root: String,
    pub landmark_file: String,
    pub options: SynthesisOptions,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SynthesisRecord>,
}

impl Manifest {
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(
            &serde_json::to_string(&self.header)
                .map_err(|e| ForgeError::Format(format!("header encode: {e}")))?,
        );
        out.push('\n');
        for record in &self.records {
            out.push_str(
                &serde_json::to_string(record)
                    .map_err(|e| ForgeError::Format(format!("record encode: {e}")))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| ForgeError::io(path, e))
    }

    pub fn read(path: &std::path::Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| ForgeError::Format(format!("{}: empty manifest", path.display())))?;
        let header: ManifestHeader = serde_json::from_str(header_line)
            .map_err(|e| ForgeError::Format(format!("{}: bad header: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let record: SynthesisRecord = serde_json::from_str(line).map_err(|e| {
                ForgeError::Format(format!("{}: record {}: {e}", path.display(), i + 1))
            })?;
            records.push(record);
        }
        Ok(Manifest { header, records })
    }
}
