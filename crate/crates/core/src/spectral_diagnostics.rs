//! Frequency-domain verification that reconstruction leaves measurable
//! up-sampling traces, plus dataset-level statistics.
//!
//! The radial spectrum averages 2-D DFT power into 64 bins of normalized
//! radial frequency, where 1.0 is the per-axis Nyquist rate. Diagonal
//! frequencies beyond 1.0 fold into the top bin, so the binned total obeys
//! Parseval's identity against the image variance.

use std::collections::BTreeMap;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::face_geometry::MASK_BINARIZE_THRESHOLD;
use crate::raster::{plane_load_png, Image};
use crate::synthesis::Manifest;

pub const RADIAL_BINS: usize = 64;

/// High-frequency band cutoff used by the up-sampling score.
pub const HIGH_BAND_CUTOFF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumWindow {
    None,
    Hann,
}

/// Radially averaged power spectrum.
#[derive(Debug, Clone)]
pub struct RadialSpectrum {
    bin_power: [f64; RADIAL_BINS],
    bin_count: [usize; RADIAL_BINS],
    dc_power: f64,
}

impl RadialSpectrum {
    /// `(upper bin edge, mean power in bin)` for each of the 64 bins
    /// covering `(0, 1]`.
    pub fn bins(&self) -> Vec<(f64, f64)> {
        (0..RADIAL_BINS)
            .map(|i| {
                let edge = (i + 1) as f64 / RADIAL_BINS as f64;
                let mean = if self.bin_count[i] > 0 {
                    self.bin_power[i] / self.bin_count[i] as f64
                } else {
                    0.0
                };
                (edge, mean)
            })
            .collect()
    }

    pub fn dc_power(&self) -> f64 {
        self.dc_power
    }

    /// Total power over bins whose interval lies within `[lo, hi]`; band
    /// edges snap to the 1/64 bin grid.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..RADIAL_BINS {
            let bin_lo = i as f64 / RADIAL_BINS as f64;
            let bin_hi = (i + 1) as f64 / RADIAL_BINS as f64;
            if bin_lo >= lo - 1e-9 && bin_hi <= hi + 1e-9 {
                acc += self.bin_power[i];
            }
        }
        acc
    }

    /// All non-DC power.
    pub fn total_power(&self) -> f64 {
        self.bin_power.iter().sum()
    }
}

/// Radially averaged DFT power of the luminance channel. Power is
/// `|X|^2 / N`, which makes the non-DC total equal `variance * N`.
pub fn radial_spectrum(image: &Image, window: SpectrumWindow) -> RadialSpectrum {
    let (w, h) = image.dims();
    let mut gray = image.luminance();
    if window == SpectrumWindow::Hann {
        apply_hann(&mut gray, w, h);
    }
    let spectrum = fft2d(&gray, w, h);

    let n = (w * h) as f64;
    let mut out = RadialSpectrum {
        bin_power: [0.0; RADIAL_BINS],
        bin_count: [0; RADIAL_BINS],
        dc_power: 0.0,
    };
    for ky in 0..h {
        for kx in 0..w {
            let power = spectrum[ky * w + kx].norm_sqr() / n;
            if kx == 0 && ky == 0 {
                out.dc_power = power;
                continue;
            }
            let fx = signed_frequency(kx, w) / (w as f64 / 2.0);
            let fy = signed_frequency(ky, h) / (h as f64 / 2.0);
            let r = (fx * fx + fy * fy).sqrt().min(1.0);
            let bin = ((r * RADIAL_BINS as f64).ceil() as usize)
                .clamp(1, RADIAL_BINS)
                - 1;
            out.bin_power[bin] += power;
            out.bin_count[bin] += 1;
        }
    }
    out
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn apply_hann(data: &mut [f64], w: usize, h: usize) {
    let hann = |i: usize, n: usize| {
        if n <= 1 {
            1.0
        } else {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        }
    };
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] *= hann(x, w) * hann(y, h);
        }
    }
}

/// Row-column 2-D FFT.
fn fft2d(data: &[f64], w: usize, h: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut grid: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = grid[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            grid[y * w + x] = column[y];
        }
    }
    grid
}

/// Ratio of high-band power after/before reconstruction. Below 1 means the
/// reconstruction attenuated high frequencies (the up-sampling signature).
pub fn usa_score(original: &Image, reconstructed: &Image) -> Result<f64> {
    if original.dims() != reconstructed.dims() {
        return Err(ForgeError::DimensionMismatch(format!(
            "usa_score inputs {}x{} vs {}x{}",
            original.width(),
            original.height(),
            reconstructed.width(),
            reconstructed.height()
        )));
    }
    let orig = radial_spectrum(original, SpectrumWindow::None).band_power(HIGH_BAND_CUTOFF, 1.0);
    if orig < 1e-12 {
        return Err(ForgeError::DegenerateSpectrum);
    }
    let recon =
        radial_spectrum(reconstructed, SpectrumWindow::None).band_power(HIGH_BAND_CUTOFF, 1.0);
    Ok(recon / orig)
}

// --- dataset report ---

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AreaStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct UsaStats {
    pub count: usize,
    pub mean: f64,
}

/// Aggregate statistics over one manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetReport {
    pub sample_count: usize,
    pub branch_counts: BTreeMap<String, usize>,
    pub backend_counts: BTreeMap<String, usize>,
    pub mask_kind_counts: BTreeMap<String, usize>,
    pub transform_side_counts: BTreeMap<String, usize>,
    pub mask_area: AreaStats,
    pub usa_by_branch: BTreeMap<String, UsaStats>,
    pub degenerate_spectra: usize,
    pub missing: Vec<String>,
}

impl DatasetReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples            {}\n", self.sample_count));
        let fmt_counts = |label: &str, counts: &BTreeMap<String, usize>, out: &mut String| {
            for (key, count) in counts {
                let frac = (count * 1000).checked_div(self.sample_count).unwrap_or(0);
                out.push_str(&format!(
                    "{label:<10} {key:<16} {count:>7}  ({}.{:01}%)\n",
                    frac / 10,
                    frac % 10
                ));
            }
        };
        fmt_counts("branch", &self.branch_counts, &mut out);
        fmt_counts("backend", &self.backend_counts, &mut out);
        fmt_counts("mask", &self.mask_kind_counts, &mut out);
        fmt_counts("side", &self.transform_side_counts, &mut out);
        if self.mask_area.count > 0 {
            out.push_str(&format!(
                "mask area          mean {:.4}  min {:.4}  max {:.4}\n",
                self.mask_area.mean, self.mask_area.min, self.mask_area.max
            ));
        }
        for (branch, stats) in &self.usa_by_branch {
            out.push_str(&format!(
                "usa[{branch:<9}]     mean {:.4} over {}\n",
                stats.mean, stats.count
            ));
        }
        if self.degenerate_spectra > 0 {
            out.push_str(&format!(
                "degenerate spectra {}\n",
                self.degenerate_spectra
            ));
        }
        if !self.missing.is_empty() {
            out.push_str(&format!("missing artifacts  {}\n", self.missing.len()));
            for path in &self.missing {
                out.push_str(&format!("  {path}\n"));
            }
        }
        out
    }
}

/// Walk the manifest in order and aggregate. Missing files are listed and
/// their per-sample statistics skipped; they do not abort the report.
pub fn dataset_report(
    manifest: &Manifest,
    output_root: &Path,
    input_root: &Path,
) -> DatasetReport {
    let mut report = DatasetReport {
        sample_count: manifest.records.len(),
        ..DatasetReport::default()
    };
    let mut area_acc = 0.0f64;
    let mut usa_acc: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    report.mask_area.min = f64::INFINITY;
    report.mask_area.max = f64::NEG_INFINITY;

    for record in &manifest.records {
        let branch = record.recon.branch.as_str().to_string();
        *report.branch_counts.entry(branch.clone()).or_default() += 1;
        let backend = format!("{:?}", record.recon.backend).to_lowercase();
        *report.backend_counts.entry(backend).or_default() += 1;
        let kind = format!("{:?}", record.mask_kind).to_lowercase();
        *report.mask_kind_counts.entry(kind).or_default() += 1;
        let side = format!("{:?}", record.transform.side).to_lowercase();
        *report.transform_side_counts.entry(side).or_default() += 1;

        let mask_path = output_root.join(&record.outputs.mask);
        match plane_load_png(&mask_path) {
            Ok(mask) => {
                let area = mask.count_at_least(MASK_BINARIZE_THRESHOLD) as f64
                    / (mask.width() * mask.height()) as f64;
                report.mask_area.count += 1;
                area_acc += area;
                report.mask_area.min = report.mask_area.min.min(area);
                report.mask_area.max = report.mask_area.max.max(area);
            }
            Err(_) => report.missing.push(record.outputs.mask.clone()),
        }

        let fake_path = output_root.join(&record.outputs.pseudo_fake);
        let source_path = input_root.join(&record.source_image);
        match (Image::load_png(&source_path), Image::load_png(&fake_path)) {
            (Ok(source), Ok(fake)) => match usa_score(&source, &fake) {
                Ok(score) => {
                    let entry = usa_acc.entry(branch).or_default();
                    entry.0 += 1;
                    entry.1 += score;
                }
                Err(ForgeError::DegenerateSpectrum) => report.degenerate_spectra += 1,
                Err(_) => {}
            },
            (source, fake) => {
                if source.is_err() {
                    report.missing.push(record.source_image.clone());
                }
                if fake.is_err() {
                    report.missing.push(record.outputs.pseudo_fake.clone());
                }
            }
        }
    }

    if report.mask_area.count > 0 {
        report.mask_area.mean = area_acc / report.mask_area.count as f64;
    } else {
        report.mask_area.min = 0.0;
        report.mask_area.max = 0.0;
    }
    for (branch, (count, total)) in usa_acc {
        report.usa_by_branch.insert(
            branch,
            UsaStats {
                count,
                mean: total / count as f64,
            },
        );
    }
    report
}
