//! Up-sampling artifact injection: image reconstruction with pluggable
//! backends.
//!
//! The built-in backend simulates reconstruction with interpolation
//! resampling: an autoencoder-style branch resamples the whole image down
//! and back up at factor 0.5 (bicubic) with an 8-bit quantization round
//! trip, and a super-resolution-style branch resamples and sharpens the
//! face region only. Real models plug in through the external adapter
//! protocol: `<adapter> <branch> <in.png> <out.png>`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::raster::{Image, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconBranch {
    Ae,
    Sr,
    Identity,
}

impl ReconBranch {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReconBranch::Ae => "ae",
            ReconBranch::Sr => "sr",
            ReconBranch::Identity => "identity",
        }
    }
}

/// Branch mixture. Defaults give AE 0.3, SR 0.2, identity 0.5.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BranchProbs {
    pub p_ae: f64,
    pub p_sr: f64,
}

impl Default for BranchProbs {
    fn default() -> Self {
        BranchProbs { p_ae: 0.3, p_sr: 0.2 }
    }
}

/// Map one uniform draw to a branch: `u <= p_ae` is AE, `u <= p_ae + p_sr`
/// is SR, anything above is identity.
pub fn branch_for_draw(u: f64, probs: &BranchProbs) -> ReconBranch {
    if u <= probs.p_ae {
        ReconBranch::Ae
    } else if u <= probs.p_ae + probs.p_sr {
        ReconBranch::Sr
    } else {
        ReconBranch::Identity
    }
}

pub fn choose_branch(rng: &mut impl Rng, probs: &BranchProbs) -> ReconBranch {
    branch_for_draw(rng.random::<f64>(), probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconBackend {
    BuiltinInterp,
    External,
    /// The external adapter failed and the built-in backend produced the
    /// sample instead.
    BuiltinFallback,
}

/// Built-in simulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BuiltinReconConfig {
    pub ae_factor: f32,
    pub ae_quantize: bool,
    pub sr_factor_min: f32,
    pub sr_factor_max: f32,
    pub sr_sharpen_amount: f32,
    pub sr_sharpen_sigma: f32,
}

impl Default for BuiltinReconConfig {
    fn default() -> Self {
        BuiltinReconConfig {
            ae_factor: 0.5,
            ae_quantize: true,
            sr_factor_min: 0.4,
            sr_factor_max: 0.6,
            sr_sharpen_amount: 0.5,
            sr_sharpen_sigma: 1.0,
        }
    }
}

/// External adapter binding: executable plus invocation limits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub id: String,
    pub command: PathBuf,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Which branches the adapter serves.
    #[serde(default = "default_adapter_branches")]
    pub branches: Vec<ReconBranch>,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_adapter_branches() -> Vec<ReconBranch> {
    vec![ReconBranch::Ae, ReconBranch::Sr]
}

impl AdapterConfig {
    pub fn serves(&self, branch: ReconBranch) -> bool {
        self.branches.contains(&branch)
    }

    /// The executable must exist before a batch run starts.
    pub fn validate(&self) -> Result<()> {
        if !self.command.exists() {
            return Err(ForgeError::Config(format!(
                "adapter {} executable not found: {}",
                self.id,
                self.command.display()
            )));
        }
        Ok(())
    }
}

/// The rng draws realized for one sample's reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconDraws {
    pub branch: ReconBranch,
    pub sr_factor: Option<f32>,
}

impl ReconDraws {
    /// Fixed draw order: branch, then the SR factor when that branch fired.
    pub fn sample(rng: &mut impl Rng, probs: &BranchProbs, builtin: &BuiltinReconConfig) -> Self {
        let branch = choose_branch(rng, probs);
        let sr_factor = if branch == ReconBranch::Sr {
            Some(rng.random_range(builtin.sr_factor_min..=builtin.sr_factor_max))
        } else {
            None
        };
        ReconDraws { branch, sr_factor }
    }
}

/// Built-in interpolation reconstruction. `face_hull` is the binary support
/// of the landmark hull; the SR branch touches pixels inside it only.
pub fn builtin_reconstruct(
    image: &Image,
    draws: &ReconDraws,
    cfg: &BuiltinReconConfig,
    face_hull: &Plane,
) -> Image {
    match draws.branch {
        ReconBranch::Identity => image.clone(),
        ReconBranch::Ae => {
            let (w, h) = image.dims();
            let dw = ((w as f32 * cfg.ae_factor).round() as usize).max(1);
            let dh = ((h as f32 * cfg.ae_factor).round() as usize).max(1);
            let mut out = image.resize_bicubic(dw, dh).resize_bicubic(w, h);
            out.clamp01();
            if cfg.ae_quantize {
                out = out.quantize_u8_roundtrip();
            }
            out
        }
        ReconBranch::Sr => {
            let factor = draws.sr_factor.unwrap_or(cfg.sr_factor_min);
            let (w, h) = image.dims();
            let dw = ((w as f32 * factor).round() as usize).max(1);
            let dh = ((h as f32 * factor).round() as usize).max(1);
            let mut processed = image.resize_bicubic(dw, dh).resize_bicubic(w, h);
            processed = crate::pixel_transforms::unsharp_mask(
                &processed,
                cfg.sr_sharpen_amount,
                cfg.sr_sharpen_sigma,
            );
            processed.clamp01();
            // Select per pixel so outside-hull content stays bit-identical.
            let mut out = image.clone();
            for y in 0..h {
                for x in 0..w {
                    if face_hull.get(x, y) >= 0.5 {
                        out.set(x, y, processed.get(x, y));
                    }
                }
            }
            out
        }
    }
}

/// Invoke an external reconstructor: write the input to a PNG, run
/// `<command> <branch> <in> <out>`, read the output back, and validate its
/// dimensions. Timeouts, nonzero exits, and contract violations surface as
/// `AdapterFailure` so the caller can fall back to the built-in backend.
pub fn external_reconstruct(
    image: &Image,
    branch: ReconBranch,
    adapter: &AdapterConfig,
    workdir: &Path,
) -> Result<Image> {
    if branch == ReconBranch::Identity {
        return Ok(image.clone());
    }
    let in_path = workdir.join("adapter_in.png");
    let out_path = workdir.join("adapter_out.png");
    image.save_png(&in_path)?;
    let _ = std::fs::remove_file(&out_path);

    let mut child = std::process::Command::new(&adapter.command)
        .arg(branch.as_str())
        .arg(&in_path)
        .arg(&out_path)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .map_err(|e| ForgeError::AdapterFailure(format!("{}: spawn: {e}", adapter.id)))?;

    let deadline = Instant::now() + Duration::from_secs(adapter.timeout_secs);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(ForgeError::AdapterFailure(format!(
                        "{}: timeout after {}s",
                        adapter.id, adapter.timeout_secs
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                return Err(ForgeError::AdapterFailure(format!(
                    "{}: wait: {e}",
                    adapter.id
                )))
            }
        }
    };

    if !status.success() {
        return Err(ForgeError::AdapterFailure(format!(
            "{}: exit status {status}",
            adapter.id
        )));
    }
    let out = Image::load_png(&out_path)
        .map_err(|e| ForgeError::AdapterFailure(format!("{}: bad output: {e}", adapter.id)))?;
    if out.dims() != image.dims() {
        return Err(ForgeError::AdapterFailure(format!(
            "{}: output {}x{} does not match input {}x{}",
            adapter.id,
            out.width(),
            out.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn branch_thresholds_match_contract() {
        let probs = BranchProbs::default();
        assert_eq!(branch_for_draw(0.25, &probs), ReconBranch::Ae);
        assert_eq!(branch_for_draw(0.31, &probs), ReconBranch::Sr);
        assert_eq!(branch_for_draw(0.3, &probs), ReconBranch::Ae);
        assert_eq!(branch_for_draw(0.5, &probs), ReconBranch::Sr);
        assert_eq!(branch_for_draw(0.51, &probs), ReconBranch::Identity);
        assert_eq!(branch_for_draw(0.0, &probs), ReconBranch::Ae);
        assert_eq!(branch_for_draw(0.99, &probs), ReconBranch::Identity);
    }

    #[test]
    fn branch_frequencies_within_binomial_band() {
        let probs = BranchProbs::default();
        let mut rng = ChaCha12Rng::seed_from_u64(20240612);
        let n = 10_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match choose_branch(&mut rng, &probs) {
                ReconBranch::Ae => counts[0] += 1,
                ReconBranch::Sr => counts[1] += 1,
                ReconBranch::Identity => counts[2] += 1,
            }
        }
        let freqs = counts.map(|c| c as f64 / n as f64);
        assert!((freqs[0] - 0.30).abs() <= 0.015, "AE freq {}", freqs[0]);
        assert!((freqs[1] - 0.20).abs() <= 0.015, "SR freq {}", freqs[1]);
        assert!((freqs[2] - 0.50).abs() <= 0.015, "identity freq {}", freqs[2]);

        // Chi-squared against (0.3, 0.2, 0.5); 9.21 is the 2-dof cutoff at
        // p = 0.01.
        let expected = [0.3 * n as f64, 0.2 * n as f64, 0.5 * n as f64];
        let chi2: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&obs, exp)| {
                let d = obs as f64 - exp;
                d * d / exp
            })
            .sum();
        assert!(chi2 < 9.21, "chi-squared {chi2} rejects the branch mixture");
    }

    fn full_hull(w: usize, h: usize) -> Plane {
        Plane::from_fn(w, h, |_, _| 1.0)
    }

    #[test]
    fn constant_image_survives_ae() {
        let img = Image::from_fn(32, 32, |_, _| [0.25, 0.5, 0.75]);
        let draws = ReconDraws {
            branch: ReconBranch::Ae,
            sr_factor: None,
        };
        let out = builtin_reconstruct(&img, &draws, &BuiltinReconConfig::default(), &full_hull(32, 32));
        // Resampling reproduces constants; quantization maps exactly onto
        // the 8-bit grid these values sit near.
        for px in out.data().chunks_exact(3) {
            assert!((px[0] - 0.25).abs() < 1.0 / 255.0);
            assert!((px[1] - 0.5).abs() < 1.0 / 255.0);
            assert!((px[2] - 0.75).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn identity_branch_is_bit_identical() {
        let img = Image::from_fn(16, 16, |x, y| [(x as f32) / 16.0, (y as f32) / 16.0, 0.3]);
        let draws = ReconDraws {
            branch: ReconBranch::Identity,
            sr_factor: None,
        };
        let out = builtin_reconstruct(&img, &draws, &BuiltinReconConfig::default(), &full_hull(16, 16));
        assert_eq!(out, img);
    }

    #[test]
    fn sr_touches_only_hull_interior() {
        let img = Image::from_fn(32, 32, |x, y| {
            [
                ((x * 7 + y * 3) % 11) as f32 / 11.0,
                ((x * 3 + y * 13) % 17) as f32 / 17.0,
                ((x + y * 5) % 7) as f32 / 7.0,
            ]
        });
        let hull = Plane::from_fn(32, 32, |x, y| {
            if (8..24).contains(&x) && (8..24).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        let draws = ReconDraws {
            branch: ReconBranch::Sr,
            sr_factor: Some(0.5),
        };
        let out = builtin_reconstruct(&img, &draws, &BuiltinReconConfig::default(), &hull);
        let mut changed_inside = false;
        for y in 0..32 {
            for x in 0..32 {
                if hull.get(x, y) >= 0.5 {
                    if out.get(x, y) != img.get(x, y) {
                        changed_inside = true;
                    }
                } else {
                    assert_eq!(out.get(x, y), img.get(x, y), "pixel ({x},{y}) outside hull changed");
                }
            }
        }
        assert!(changed_inside, "SR branch did nothing inside the hull");
    }

    #[test]
    fn draw_order_is_stable() {
        let probs = BranchProbs::default();
        let cfg = BuiltinReconConfig::default();
        let a = ReconDraws::sample(&mut ChaCha12Rng::seed_from_u64(5), &probs, &cfg);
        let b = ReconDraws::sample(&mut ChaCha12Rng::seed_from_u64(5), &probs, &cfg);
        assert_eq!(a, b);
        if let Some(f) = a.sr_factor {
            assert!((cfg.sr_factor_min..=cfg.sr_factor_max).contains(&f));
        }
    }
}
