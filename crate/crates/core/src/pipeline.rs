//! Batch front-end: dataset synthesis, verification, and the file-driven
//! loss-scoring harness.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{ForgeError, Result};
use crate::face_geometry::{read_landmark_file, LandmarkSet};
use crate::forgery_math::{
    affs_channel_loss, affs_select, delta, icr_from_deltas, icr_loss, partition_features,
    pcr_from_deltas, pcr_loss, AffsLayerBatch, AffsSample, FeatureMap, LossWeights,
    RegionedFeatures, SelectionPlan,
};
use crate::raster::{plane_load_png, Image};
use crate::spectral_diagnostics::{dataset_report, DatasetReport};
use crate::synthesis::{
    replay, sha256_hex, synthesize, Manifest, ManifestHeader, SampleContext, SynthesisRecord,
    ENGINE_VERSION,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub succeeded: usize,
    pub skipped: Vec<(String, String)>,
    pub failed: Vec<(String, String)>,
    pub manifest_path: PathBuf,
}

impl RunSummary {
    pub fn failure_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            (self.skipped.len() + self.failed.len()) as f64 / self.total as f64
        }
    }
}

fn sample_id_for(index: usize, image: &str) -> String {
    let stem = Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".to_string());
    let safe: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:06}_{safe}")
}

enum SampleOutcome {
    Done(Box<SynthesisRecord>),
    Skipped(String, String),
    Failed(String, String),
}

/// Synthesize one pseudo-fake per landmark record. Work parallelizes over
/// samples with one rng stream per sample, so the output bytes do not
/// depend on the worker count; the manifest keeps input order.
pub fn run_synthesis(config: &PipelineConfig) -> Result<RunSummary> {
    config.validate()?;
    config.validate_paths()?;
    let master_seed = config.seed.expect("validated");
    let options = config.synthesis_options();

    let records = read_landmark_file(&config.landmarks)?;
    let samples_dir = config.output_root.join("samples");
    let masks_dir = config.output_root.join("masks");
    std::fs::create_dir_all(&samples_dir).map_err(|e| ForgeError::io(&samples_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| ForgeError::io(&masks_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| ForgeError::Config(format!("worker pool: {e}")))?;

    let outcomes: Vec<SampleOutcome> = pool.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(index, lm_record)| {
                let sample_id = sample_id_for(index, &lm_record.image);
                let image_path = config.input_root.join(&lm_record.image);
                let image = match Image::load_png(&image_path) {
                    Ok(img) => img,
                    Err(e) => return SampleOutcome::Skipped(lm_record.image.clone(), e.to_string()),
                };
                let landmarks = match lm_record.to_landmarks() {
                    Ok(lm) => lm,
                    Err(e) => return SampleOutcome::Skipped(lm_record.image.clone(), e.to_string()),
                };
                let ctx = SampleContext {
                    sample_id: sample_id.clone(),
                    source_image: lm_record.image.clone(),
                    master_seed,
                    stream_index: index as u64,
                };
                let out = match synthesize(&image, &landmarks, &ctx, &options) {
                    Ok(out) => out,
                    Err(e) => return SampleOutcome::Failed(sample_id, e.to_string()),
                };
                let pf_path = config.output_root.join(&out.record.outputs.pseudo_fake);
                let mask_path = config.output_root.join(&out.record.outputs.mask);
                if let Err(e) =
                    std::fs::write(&pf_path, &out.pseudo_fake_png).map_err(|e| ForgeError::io(&pf_path, e))
                {
                    return SampleOutcome::Failed(sample_id, e.to_string());
                }
                if let Err(e) =
                    std::fs::write(&mask_path, &out.mask_png).map_err(|e| ForgeError::io(&mask_path, e))
                {
                    return SampleOutcome::Failed(sample_id, e.to_string());
                }
                SampleOutcome::Done(Box::new(out.record))
            })
            .collect()
    });

    let mut summary = RunSummary {
        total: records.len(),
        succeeded: 0,
        skipped: Vec::new(),
        failed: Vec::new(),
        manifest_path: config.output_root.join("manifest.jsonl"),
    };
    let mut manifest_records = Vec::new();
    for outcome in outcomes {
        match outcome {
            SampleOutcome::Done(record) => {
                summary.succeeded += 1;
                manifest_records.push(*record);
            }
            SampleOutcome::Skipped(image, reason) => summary.skipped.push((image, reason)),
            SampleOutcome::Failed(id, reason) => summary.failed.push((id, reason)),
        }
    }

    let manifest = Manifest {
        header: ManifestHeader {
            engine_version: ENGINE_VERSION.to_string(),
            master_seed,
            input_root: config.input_root.to_string_lossy().into_owned(),
            landmark_file: config.landmarks.to_string_lossy().into_owned(),
            options,
        },
        records: manifest_records,
    };
    manifest.write(&summary.manifest_path)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VerifyProblem {
    Tampered { path: String, detail: String },
    Divergence { sample_id: String, detail: String },
    Missing { path: String },
    VersionMismatch { found: String },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub replayed: usize,
    pub problems: Vec<VerifyProblem>,
    pub report: DatasetReport,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }

    /// True when the failure is an integrity breach (divergence or tamper)
    /// rather than a missing file.
    pub fn has_integrity_breach(&self) -> bool {
        self.problems.iter().any(|p| {
            matches!(
                p,
                VerifyProblem::Tampered { .. }
                    | VerifyProblem::Divergence { .. }
                    | VerifyProblem::VersionMismatch { .. }
            )
        })
    }
}

/// Evenly spaced replay subset: `max(floor, ceil(fraction * n))` indices.
fn verify_indices(total: usize, fraction: f64, floor: usize) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    let want = ((total as f64 * fraction).ceil() as usize)
        .max(floor)
        .min(total);
    let mut indices: Vec<usize> = (0..want).map(|i| i * total / want).collect();
    indices.dedup();
    indices
}

/// Replay a sampled subset of the manifest, check every recorded artifact
/// hash on disk, and aggregate the dataset report.
pub fn verify(
    manifest_path: &Path,
    output_root: &Path,
    input_root_override: Option<&Path>,
    landmarks_override: Option<&Path>,
    fraction_override: Option<f64>,
) -> Result<VerifyOutcome> {
    let manifest = Manifest::read(manifest_path)?;
    let input_root = input_root_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&manifest.header.input_root));
    let landmark_file = landmarks_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&manifest.header.landmark_file));
    let fraction = fraction_override.unwrap_or(0.05);

    let mut problems = Vec::new();

    // Integrity pass: every referenced artifact must exist and match its
    // recorded hash.
    for record in &manifest.records {
        for (rel, expected) in [
            (&record.outputs.pseudo_fake, &record.outputs.pseudo_fake_sha256),
            (&record.outputs.mask, &record.outputs.mask_sha256),
        ] {
            let path = output_root.join(rel);
            match std::fs::read(&path) {
                Ok(bytes) => {
                    if &sha256_hex(&bytes) != expected {
                        problems.push(VerifyProblem::Tampered {
                            path: rel.clone(),
                            detail: "sha256 does not match the manifest record".to_string(),
                        });
                    }
                }
                Err(_) => problems.push(VerifyProblem::Missing { path: rel.clone() }),
            }
        }
    }

    // Replay pass on the sampled subset.
    let landmark_records = read_landmark_file(&landmark_file)?;
    let by_image: std::collections::HashMap<&str, &crate::face_geometry::LandmarkRecord> =
        landmark_records
            .iter()
            .map(|r| (r.image.as_str(), r))
            .collect();

    let indices = verify_indices(manifest.records.len(), fraction, 10);
    let mut replayed = 0usize;
    for &i in &indices {
        let record = &manifest.records[i];
        let image_path = input_root.join(&record.source_image);
        let image = match Image::load_png(&image_path) {
            Ok(img) => img,
            Err(_) => {
                problems.push(VerifyProblem::Missing {
                    path: record.source_image.clone(),
                });
                continue;
            }
        };
        let landmarks: LandmarkSet = match by_image
            .get(record.source_image.as_str())
            .map(|r| r.to_landmarks())
        {
            Some(Ok(lm)) => lm,
            _ => {
                problems.push(VerifyProblem::Missing {
                    path: format!("landmarks for {}", record.source_image),
                });
                continue;
            }
        };
        match replay(record, &image, &landmarks, &manifest.header.options) {
            Ok(_) => replayed += 1,
            Err(ForgeError::ReplayDivergence { sample_id, detail }) => {
                problems.push(VerifyProblem::Divergence { sample_id, detail })
            }
            Err(ForgeError::VersionMismatch { found, .. }) => {
                problems.push(VerifyProblem::VersionMismatch { found })
            }
            Err(e) => problems.push(VerifyProblem::Divergence {
                sample_id: record.sample_id.clone(),
                detail: e.to_string(),
            }),
        }
    }

    let report = dataset_report(&manifest, output_root, &input_root);
    for missing in &report.missing {
        if !problems
            .iter()
            .any(|p| matches!(p, VerifyProblem::Missing { path } if path == missing))
        {
            problems.push(VerifyProblem::Missing {
                path: missing.clone(),
            });
        }
    }

    Ok(VerifyOutcome {
        replayed,
        problems,
        report,
    })
}

/// Regenerate a single recorded sample into `out_dir`.
pub fn replay_sample(
    manifest_path: &Path,
    sample_id: &str,
    output_root: &Path,
    out_dir: &Path,
) -> Result<()> {
    let manifest = Manifest::read(manifest_path)?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.sample_id == sample_id)
        .ok_or_else(|| {
            ForgeError::Format(format!("sample {sample_id} not present in manifest"))
        })?;
    let _ = output_root; // outputs are regenerated, not read back
    let input_root = PathBuf::from(&manifest.header.input_root);
    let landmark_records = read_landmark_file(Path::new(&manifest.header.landmark_file))?;
    let lm_record = landmark_records
        .iter()
        .find(|r| r.image == record.source_image)
        .ok_or_else(|| {
            ForgeError::Format(format!("no landmarks for {}", record.source_image))
        })?;
    let image = Image::load_png(&input_root.join(&record.source_image))?;
    let landmarks = lm_record.to_landmarks()?;
    let (pseudo_fake, mask) = replay(record, &image, &landmarks, &manifest.header.options)?;
    std::fs::create_dir_all(out_dir).map_err(|e| ForgeError::io(out_dir, e))?;
    pseudo_fake.save_png(&out_dir.join(format!("{sample_id}.png")))?;
    crate::raster::plane_save_png(&mask.data, &out_dir.join(format!("{sample_id}_mask.png")))?;
    Ok(())
}

// --- file-driven loss scoring ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub pcr: f64,
    pub icr: f64,
    /// Channel-score vector from this sample alone.
    pub affs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tau: f64,
    pub band_width: u32,
    pub samples: Vec<SampleScore>,
    pub batch_pcr: f64,
    pub batch_icr: f64,
    pub selection_plan: SelectionPlan,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score report serializes")
    }
}

/// Score paired feature tensors against their masks.
///
/// Layout: `<features_dir>/<id>.real.fmap` and `<id>.fake.fmap`, with the
/// mask at `<mask_dir>/<id>.png`. Every id needs all three files.
pub fn score(
    features_dir: &Path,
    mask_dir: &Path,
    weights: &LossWeights,
    band_width: u32,
    top_m: Option<usize>,
) -> Result<ScoreReport> {
    weights.validate()?;
    let mut ids: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(features_dir).map_err(|e| ForgeError::io(features_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| ForgeError::io(features_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".real.fmap") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(ForgeError::Format(format!(
            "no feature tensors found in {} (expected <id>.real.fmap files)",
            features_dir.display()
        )));
    }

    let mut samples = Vec::new();
    let mut real_fmaps = Vec::new();
    let mut fake_fmaps = Vec::new();
    let mut masks_full = Vec::new();
    let mut real_regions: Vec<RegionedFeatures> = Vec::new();
    let mut fake_regions: Vec<RegionedFeatures> = Vec::new();

    for id in &ids {
        let real_path = features_dir.join(format!("{id}.real.fmap"));
        let fake_path = features_dir.join(format!("{id}.fake.fmap"));
        if !fake_path.is_file() {
            return Err(ForgeError::Format(format!(
                "{id}: missing fake tensor {}",
                fake_path.display()
            )));
        }
        let mask_path = mask_dir.join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(ForgeError::Format(format!(
                "{id}: missing mask {}",
                mask_path.display()
            )));
        }
        let real = FeatureMap::read_from(&real_path, 0)?;
        let fake = FeatureMap::read_from(&fake_path, 0)?;
        let mask_plane = plane_load_png(&mask_path)?;
        let mask = crate::face_geometry::Mask {
            data: mask_plane,
            kind: crate::face_geometry::MaskKind::Macro81,
        };
        real_fmaps.push(real);
        fake_fmaps.push(fake);
        masks_full.push(mask);
    }

    for (i, id) in ids.iter().enumerate() {
        let real = &real_fmaps[i];
        let fake = &fake_fmaps[i];
        let mask = &masks_full[i];
        let real_part = partition_features(real, mask, band_width)?;
        let fake_part = partition_features(fake, mask, band_width)?;

        let d_real = delta(&real_part.in_features, &real_part.out_features)?;
        let d_fake = delta(&fake_part.in_features, &fake_part.out_features)?;
        let pcr = pcr_from_deltas(&[d_real], &[d_fake], weights.tau)?;
        let d_out = delta(&real_part.out_features, &fake_part.out_features)?;
        let d_in = delta(&real_part.in_features, &fake_part.in_features)?;
        let icr = icr_from_deltas(&[d_out], &[d_in], weights.tau)?;

        let feature_mask =
            crate::forgery_math::mask_to_feature_resolution(mask, real.width(), real.height());
        let affs: Vec<f64> = (0..real.channels())
            .map(|k| affs_channel_loss(real, fake, &feature_mask, k))
            .collect::<Result<_>>()?;

        samples.push(SampleScore {
            id: id.clone(),
            pcr,
            icr,
            affs,
        });
        real_regions.push(real_part);
        fake_regions.push(fake_part);
    }

    let batch_pcr = pcr_loss(&real_regions, &fake_regions, weights.tau)?;
    let batch_icr = icr_loss(&real_regions, &fake_regions, weights.tau)?;

    let channels = real_fmaps[0].channels();
    let budget = top_m.unwrap_or(channels);
    let feature_masks: Vec<_> = masks_full
        .iter()
        .map(|m| {
            crate::forgery_math::mask_to_feature_resolution(
                m,
                real_fmaps[0].width(),
                real_fmaps[0].height(),
            )
        })
        .collect();
    let batch = AffsLayerBatch {
        layer_index: 0,
        samples: ids
            .iter()
            .enumerate()
            .map(|(i, _)| AffsSample {
                real: &real_fmaps[i],
                fake: &fake_fmaps[i],
                mask: &feature_masks[i],
            })
            .collect(),
    };
    let selection_plan = affs_select(&[batch], &[budget])?;

    Ok(ScoreReport {
        tau: weights.tau,
        band_width,
        samples,
        batch_pcr,
        batch_icr,
        selection_plan,
    })
}
