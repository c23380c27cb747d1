//! Landmark ingestion, convex-hull and feature-combination mask generation,
//! mask augmentation, and boundary-band extraction.
//!
//! Pixel centers sit at integer coordinates: pixel `(x, y)` covers the color
//! sample at point `(x, y)`. Masks are binarized at 0.5 before any
//! morphological reasoning.

use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::raster::Plane;

/// Threshold separating mask support from background.
pub const MASK_BINARIZE_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkScheme {
    /// 81-point scheme: the common 68-point layout plus 13 forehead points.
    Kp81,
    /// 4 keypoints spanning the face crop.
    Kp4,
    Generic(usize),
}

/// Ordered facial keypoints in image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    scheme: LandmarkScheme,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, scheme: LandmarkScheme) -> Result<Self> {
        let expected = match scheme {
            LandmarkScheme::Kp81 => Some(81),
            LandmarkScheme::Kp4 => Some(4),
            LandmarkScheme::Generic(n) => Some(n),
        };
        if let Some(n) = expected {
            if points.len() != n {
                return Err(ForgeError::DegenerateInput(format!(
                    "scheme expects {n} landmarks, got {}",
                    points.len()
                )));
            }
        }
        Ok(LandmarkSet { points, scheme })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn scheme(&self) -> LandmarkScheme {
        self.scheme
    }

    /// All points must satisfy `0 <= x < w` and `0 <= y < h`.
    pub fn validate_bounds(&self, width: usize, height: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p[0] >= 0.0 && p[0] < width as f64 && p[1] >= 0.0 && p[1] < height as f64) {
                return Err(ForgeError::DegenerateInput(format!(
                    "landmark {i} at ({}, {}) outside {width}x{height} image",
                    p[0], p[1]
                )));
            }
        }
        Ok(())
    }
}

/// One line of the landmark ingestion file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub image: String,
    pub points: Vec<[f64; 2]>,
}

impl LandmarkRecord {
    pub fn to_landmarks(&self) -> Result<LandmarkSet> {
        let scheme = match self.points.len() {
            81 => LandmarkScheme::Kp81,
            4 => LandmarkScheme::Kp4,
            n => LandmarkScheme::Generic(n),
        };
        LandmarkSet::new(self.points.clone(), scheme)
    }
}

/// Read a JSON-lines landmark file: one `{"image": ..., "points": [[x,y],..]}`
/// object per line. Blank lines are skipped.
pub fn read_landmark_file(path: &Path) -> Result<Vec<LandmarkRecord>> {
    let file = std::fs::File::open(path).map_err(|e| ForgeError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ForgeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LandmarkRecord = serde_json::from_str(&line).map_err(|e| {
            ForgeError::Format(format!(
                "{}:{}: bad landmark record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Macro81,
    Macro4,
    Micro,
}

/// The manipulated-area map `M`: `H*W` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: Plane,
    pub kind: MaskKind,
}

impl Mask {
    pub fn support_count(&self) -> usize {
        self.data.count_at_least(MASK_BINARIZE_THRESHOLD)
    }

    pub fn support(&self) -> Plane {
        self.data.binarized(MASK_BINARIZE_THRESHOLD)
    }
}

/// Index subsets of the 81-point scheme used to compose micro-editing masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroups {
    pub brows: Vec<usize>,
    pub eyes: Vec<usize>,
    pub nose: Vec<usize>,
    pub mouth: Vec<usize>,
    pub jaw: Vec<usize>,
}

impl FeatureGroups {
    /// Standard 81-point indices (68-point layout plus forehead, which no
    /// feature group uses).
    pub fn standard_81() -> Self {
        FeatureGroups {
            jaw: (0..=16).collect(),
            brows: (17..=26).collect(),
            nose: (27..=35).collect(),
            eyes: (36..=47).collect(),
            mouth: (48..=67).collect(),
        }
    }

    pub fn named(&self) -> [(&'static str, &[usize]); 5] {
        [
            ("brows", &self.brows),
            ("eyes", &self.eyes),
            ("nose", &self.nose),
            ("mouth", &self.mouth),
            ("jaw", &self.jaw),
        ]
    }
}

/// Convex hull of a point set, counter-clockwise (positive signed area).
///
/// Collinear points along hull edges are dropped; interior points never
/// appear in the output.
pub fn convex_hull(points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Err(ForgeError::DegenerateInput(format!(
            "convex hull needs >= 3 distinct points, got {}",
            pts.len()
        )));
    }

    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };

    // Monotone chain; strict turns only, so collinear runs collapse.
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);

    if lower.len() < 3 {
        return Err(ForgeError::DegenerateInput(
            "all points are collinear".to_string(),
        ));
    }
    Ok(lower)
}

/// Is `p` inside or on the boundary of a counter-clockwise convex polygon?
pub fn point_in_convex_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> bool {
    let n = polygon.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross < 0.0 {
            return false;
        }
    }
    true
}

/// Rasterize a convex CCW polygon: pixel centers inside or on the boundary
/// get 1, everything else 0, clipped to the image bounds. A polygon fully
/// outside the image yields an all-zero plane.
pub fn rasterize(polygon: &[[f64; 2]], width: usize, height: usize) -> Plane {
    let mut plane = Plane::new(width, height);
    if polygon.len() < 3 || width == 0 || height == 0 {
        return plane;
    }
    let min_x = polygon.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = polygon.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = polygon.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = polygon.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);

    let x0 = min_x.ceil().max(0.0) as usize;
    let x1 = (max_x.floor().min(width as f64 - 1.0)) as isize;
    let y0 = min_y.ceil().max(0.0) as usize;
    let y1 = (max_y.floor().min(height as f64 - 1.0)) as isize;
    if x1 < x0 as isize || y1 < y0 as isize || min_x >= width as f64 || min_y >= height as f64 {
        return plane;
    }

    for y in y0..=(y1 as usize) {
        for x in x0..=(x1 as usize) {
            if point_in_convex_polygon([x as f64, y as f64], polygon) {
                plane.set(x, y, 1.0);
            }
        }
    }
    plane
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacroVariant {
    Macro81,
    Macro4,
}

/// Macro-editing mask: either the rasterized convex hull of all landmarks,
/// or the landmark bounding rectangle expanded by `margin` (a fraction of
/// the box side per axis), which realizes the square-crop editing style.
pub fn macro_mask(
    landmarks: &LandmarkSet,
    variant: MacroVariant,
    width: usize,
    height: usize,
    margin: f64,
) -> Result<Mask> {
    match variant {
        MacroVariant::Macro81 => {
            let hull = convex_hull(landmarks.points())?;
            Ok(Mask {
                data: rasterize(&hull, width, height),
                kind: MaskKind::Macro81,
            })
        }
        MacroVariant::Macro4 => {
            let pts = landmarks.points();
            let min_x = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let max_x = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let min_y = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let max_y = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let mx = margin * (max_x - min_x);
            let my = margin * (max_y - min_y);
            let corners = [
                [min_x - mx, min_y - my],
                [max_x + mx, min_y - my],
                [max_x + mx, max_y + my],
                [min_x - mx, max_y + my],
            ];
            let hull = convex_hull(&corners)?;
            Ok(Mask {
                data: rasterize(&hull, width, height),
                kind: MaskKind::Macro4,
            })
        }
    }
}

/// Micro-editing mask: union of the dilated convex hulls of a uniformly
/// random nonempty subset of feature groups. Groups with fewer than three
/// distinct points are skipped; it is an error only if every chosen group
/// was skipped.
pub fn micro_mask(
    landmarks: &LandmarkSet,
    groups: &FeatureGroups,
    rng: &mut impl Rng,
    dilate_radius: u32,
    width: usize,
    height: usize,
) -> Result<Mask> {
    let chosen = sample_group_subset(rng, groups);
    micro_mask_for_groups(landmarks, groups, &chosen, dilate_radius, width, height)
}

/// Rejection-sample a nonempty subset of the five groups, uniform over the
/// 31 nonempty subsets.
pub fn sample_group_subset(rng: &mut impl Rng, groups: &FeatureGroups) -> Vec<&'static str> {
    let names: Vec<&'static str> = groups.named().iter().map(|(n, _)| *n).collect();
    loop {
        let chosen: Vec<&'static str> = names
            .iter()
            .filter(|_| rng.random::<f64>() < 0.5)
            .copied()
            .collect();
        if !chosen.is_empty() {
            return chosen;
        }
    }
}

/// Deterministic micro mask for an explicit set of group names.
pub fn micro_mask_for_groups(
    landmarks: &LandmarkSet,
    groups: &FeatureGroups,
    chosen: &[&str],
    dilate_radius: u32,
    width: usize,
    height: usize,
) -> Result<Mask> {
    if landmarks.scheme() != LandmarkScheme::Kp81 {
        return Err(ForgeError::DegenerateInput(
            "micro masks need the 81-point scheme".to_string(),
        ));
    }
    if chosen.is_empty() {
        return Err(ForgeError::DegenerateInput(
            "no feature groups chosen".to_string(),
        ));
    }
    let named = groups.named();
    let mut union = Plane::new(width, height);
    let mut any = false;
    for &name in chosen {
        let indices = named
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, idx)| *idx)
            .ok_or_else(|| ForgeError::DegenerateInput(format!("unknown group {name}")))?;
        let pts: Vec<[f64; 2]> = indices
            .iter()
            .map(|&i| landmarks.points()[i])
            .collect();
        let hull = match convex_hull(&pts) {
            Ok(h) => h,
            Err(ForgeError::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        };
        let raster = dilate(&rasterize(&hull, width, height), dilate_radius);
        for (u, &v) in union.data_mut().iter_mut().zip(raster.data()) {
            if v > *u {
                *u = v;
            }
        }
        any = true;
    }
    if !any {
        return Err(ForgeError::DegenerateInput(
            "every chosen feature group was degenerate".to_string(),
        ));
    }
    Ok(Mask {
        data: union,
        kind: MaskKind::Micro,
    })
}

// --- grayscale morphology with a Euclidean disc structuring element ---

fn disc_offsets(radius: u32) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    offsets
}

/// Max filter over a disc; area outside the plane counts as background (0).
pub fn dilate(plane: &Plane, radius: u32) -> Plane {
    if radius == 0 {
        return plane.clone();
    }
    morph(plane, radius, true)
}

/// Min filter over a disc; area outside the plane counts as background (0).
pub fn erode(plane: &Plane, radius: u32) -> Plane {
    if radius == 0 {
        return plane.clone();
    }
    morph(plane, radius, false)
}

fn morph(plane: &Plane, radius: u32, is_dilate: bool) -> Plane {
    let (w, h) = (plane.width(), plane.height());
    let offsets = disc_offsets(radius);
    let mut out = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = if is_dilate { 0.0f32 } else { f32::INFINITY };
            for &(dx, dy) in &offsets {
                let xi = x as i32 + dx;
                let yi = y as i32 + dy;
                let v = if xi < 0 || yi < 0 || xi >= w as i32 || yi >= h as i32 {
                    0.0
                } else {
                    plane.get(xi as usize, yi as usize)
                };
                if is_dilate {
                    acc = acc.max(v);
                } else {
                    acc = acc.min(v);
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

// --- mask augmentation ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Erode,
    Dilate,
}

/// Probability and range configuration for mask augmentation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MaskAugmentConfig {
    pub p_morphology: f64,
    pub p_erode: f64,
    pub radius_min: u32,
    pub radius_max: u32,
    pub p_blur: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for MaskAugmentConfig {
    fn default() -> Self {
        MaskAugmentConfig {
            p_morphology: 0.5,
            p_erode: 0.5,
            radius_min: 1,
            radius_max: 6,
            p_blur: 1.0,
            sigma_min: 0.0,
            sigma_max: 6.0,
        }
    }
}

/// The realized augmentation draws for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAugmentDraws {
    pub morph: Option<(MorphOp, u32)>,
    pub blur_sigma: Option<f64>,
}

impl MaskAugmentDraws {
    pub fn identity() -> Self {
        MaskAugmentDraws {
            morph: None,
            blur_sigma: None,
        }
    }

    /// Draw order is fixed: morphology gate, operation, radius, blur gate,
    /// sigma. Replays therefore consume the stream identically.
    pub fn sample(rng: &mut impl Rng, cfg: &MaskAugmentConfig) -> Self {
        let morph = if rng.random::<f64>() < cfg.p_morphology {
            let op = if rng.random::<f64>() < cfg.p_erode {
                MorphOp::Erode
            } else {
                MorphOp::Dilate
            };
            let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
            Some((op, radius))
        } else {
            None
        };
        let blur_sigma = if rng.random::<f64>() < cfg.p_blur {
            Some(rng.random_range(cfg.sigma_min..=cfg.sigma_max))
        } else {
            None
        };
        MaskAugmentDraws { morph, blur_sigma }
    }
}

/// Apply morphology then blur, clip to `[0, 1]`, and fail with `EmptyMask`
/// if no support at the binarization threshold survives.
pub fn apply_mask_augment(mask: &Mask, draws: &MaskAugmentDraws) -> Result<Mask> {
    let mut plane = match draws.morph {
        Some((MorphOp::Erode, r)) => erode(&mask.data, r),
        Some((MorphOp::Dilate, r)) => dilate(&mask.data, r),
        None => mask.data.clone(),
    };
    if let Some(sigma) = draws.blur_sigma {
        if sigma > 0.0 {
            plane = plane.gaussian_blur_zero_pad(sigma as f32);
        }
    }
    plane.clamp01();
    if plane.count_at_least(MASK_BINARIZE_THRESHOLD) == 0 {
        return Err(ForgeError::EmptyMask);
    }
    Ok(Mask {
        data: plane,
        kind: mask.kind,
    })
}

/// Sample augmentation draws and apply them.
pub fn augment_mask(mask: &Mask, rng: &mut impl Rng, cfg: &MaskAugmentConfig) -> Result<Mask> {
    let draws = MaskAugmentDraws::sample(rng, cfg);
    apply_mask_augment(mask, &draws)
}

// --- boundary band ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inside,
    Outside,
    Discarded,
}

/// A per-pixel partition of the grid into inside / outside / discarded.
#[derive(Debug, Clone)]
pub struct RegionPartition {
    width: usize,
    height: usize,
    labels: Vec<Region>,
}

impl RegionPartition {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn label(&self, x: usize, y: usize) -> Region {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[Region] {
        &self.labels
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&l| l == region).count()
    }
}

/// Partition the grid around the blend boundary of a mask.
///
/// With support `S` binarized at 0.5: inside = erode(S, w), discarded =
/// dilate(S, w) minus erode(S, w), outside = complement of dilate(S, w).
///
/// An entirely empty mask partitions to all-outside. Otherwise `EmptyRegion`
/// is raised when the band swallows the whole grid (no outside survives) or
/// erodes nonempty support away (no inside survives).
pub fn boundary_band(mask: &Mask, width_px: u32) -> Result<RegionPartition> {
    let support = mask.support();
    boundary_band_of_support(&support, width_px)
}

/// Same as [`boundary_band`] for a pre-binarized support plane.
pub fn boundary_band_of_support(support: &Plane, width_px: u32) -> Result<RegionPartition> {
    let (w, h) = (support.width(), support.height());
    let support_count = support.count_at_least(MASK_BINARIZE_THRESHOLD);
    let eroded = erode(support, width_px);
    let dilated = dilate(support, width_px);

    let mut labels = Vec::with_capacity(w * h);
    let mut inside_count = 0usize;
    let mut outside_count = 0usize;
    for i in 0..w * h {
        let label = if eroded.data()[i] >= MASK_BINARIZE_THRESHOLD {
            inside_count += 1;
            Region::Inside
        } else if dilated.data()[i] >= MASK_BINARIZE_THRESHOLD {
            Region::Discarded
        } else {
            outside_count += 1;
            Region::Outside
        };
        labels.push(label);
    }

    if outside_count == 0 {
        return Err(ForgeError::EmptyRegion(
            "no outside region: mask plus band covers the whole grid".to_string(),
        ));
    }
    if support_count > 0 && inside_count == 0 {
        return Err(ForgeError::EmptyRegion(
            "no inside region: band erased the mask support".to_string(),
        ));
    }
    Ok(RegionPartition {
        width: w,
        height: h,
        labels,
    })
}
