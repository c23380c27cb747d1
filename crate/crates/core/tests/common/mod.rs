//! Shared test fixtures: a deterministic synthetic face corpus with
//! 81-point landmarks, written to disk the way a real dataset would be.

// Each test binary compiles this module and uses a different subset.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use forge::raster::Image;

pub struct Corpus {
    #[allow(dead_code)]
    pub dir: tempfile::TempDir,
    pub input_root: PathBuf,
    pub landmark_file: PathBuf,
    pub images: Vec<String>,
}

/// 81 landmarks laid out like the common face annotation: jaw arc,
/// brows, nose, eyes, mouth, forehead arc.
#[allow(clippy::needless_range_loop)]
pub fn face_landmarks_81(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<[f64; 2]> {
    let mut pts = vec![[0.0, 0.0]; 81];
    let pi = std::f64::consts::PI;
    // Jaw: lower ellipse arc (y grows downward).
    for i in 0..17 {
        let t = i as f64 / 16.0;
        let theta = pi * (0.12 + 0.76 * t);
        pts[i] = [cx + rx * theta.cos(), cy + ry * theta.sin()];
    }
    // Brows: two shallow arcs above the eyes.
    for i in 0..5 {
        let k = i as f64;
        let lift = 0.04 * ry * (k - 2.0) * (k - 2.0) / 4.0;
        pts[17 + i] = [cx - rx * (0.62 - 0.11 * k), cy - 0.38 * ry + lift];
        pts[22 + i] = [cx + rx * (0.18 + 0.11 * k), cy - 0.38 * ry + lift];
    }
    // Nose: bridge plus base arc.
    for i in 0..4 {
        let k = i as f64;
        pts[27 + i] = [cx + 0.015 * rx * k, cy - 0.18 * ry + 0.12 * ry * k];
    }
    for i in 0..5 {
        let k = i as f64 - 2.0;
        pts[31 + i] = [cx + 0.12 * rx * k, cy + 0.24 * ry + 0.03 * ry * (2.0 - k.abs())];
    }
    // Eyes: two hexagons.
    for (base, ex) in [(36, cx - 0.40 * rx), (42, cx + 0.40 * rx)] {
        for i in 0..6 {
            let theta = 2.0 * pi * i as f64 / 6.0;
            pts[base + i] = [
                ex + 0.16 * rx * theta.cos(),
                cy - 0.18 * ry + 0.08 * ry * theta.sin(),
            ];
        }
    }
    // Mouth: outer ring of 12, inner ring of 8.
    for i in 0..12 {
        let theta = 2.0 * pi * i as f64 / 12.0;
        pts[48 + i] = [
            cx + 0.30 * rx * theta.cos(),
            cy + 0.52 * ry + 0.12 * ry * theta.sin(),
        ];
    }
    for i in 0..8 {
        let theta = 2.0 * pi * i as f64 / 8.0;
        pts[60 + i] = [
            cx + 0.18 * rx * theta.cos(),
            cy + 0.52 * ry + 0.06 * ry * theta.sin(),
        ];
    }
    // Forehead: upper ellipse arc.
    for i in 0..13 {
        let t = i as f64 / 12.0;
        let theta = pi * (1.12 + 0.76 * t);
        pts[68 + i] = [cx + rx * theta.cos(), cy + ry * theta.sin()];
    }
    pts
}

/// A face-ish test image: smooth background, skin-tone ellipse, a couple
/// of darker features, and fine noise so the high-frequency band carries
/// measurable power.
pub fn synthetic_face_image(rng: &mut ChaCha12Rng, w: usize, h: usize) -> Image {
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let rx = w as f64 * 0.30;
    let ry = h as f64 * 0.36;
    let bg = [
        rng.random_range(0.15..0.45),
        rng.random_range(0.2..0.5),
        rng.random_range(0.3..0.6),
    ];
    let grad = rng.random_range(-0.15..0.15);
    let noise_amp = 0.04f32;
    let mut noise: Vec<f32> = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h * 3 {
        noise.push(rng.random_range(-noise_amp..noise_amp));
    }
    Image::from_fn(w, h, |x, y| {
        let fx = x as f64;
        let fy = y as f64;
        let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
        let mut px = [
            bg[0] + grad * (fy / h as f64) as f32,
            bg[1] + grad * (fx / w as f64) as f32,
            bg[2],
        ];
        if d < 1.0 {
            let shade = 1.0 - 0.25 * d as f32;
            px = [0.80 * shade, 0.62 * shade, 0.50 * shade];
            // Eyes and mouth as darker patches.
            for (ex, ey, er) in [
                (cx - 0.40 * rx, cy - 0.18 * ry, 0.10 * rx),
                (cx + 0.40 * rx, cy - 0.18 * ry, 0.10 * rx),
                (cx, cy + 0.52 * ry, 0.16 * rx),
            ] {
                let dd = (fx - ex).powi(2) + (fy - ey).powi(2);
                if dd < er * er {
                    px = [0.25, 0.15, 0.12];
                }
            }
        }
        let i = (y * w + x) * 3;
        [
            (px[0] + noise[i]).clamp(0.0, 1.0),
            (px[1] + noise[i + 1]).clamp(0.0, 1.0),
            (px[2] + noise[i + 2]).clamp(0.0, 1.0),
        ]
    })
}

/// Write `n` images plus their landmark file under a temp directory.
pub fn build_corpus(n: usize, seed: u64) -> Corpus {
    let dir = tempfile::tempdir().expect("corpus tempdir");
    let input_root = dir.path().join("frames");
    std::fs::create_dir_all(&input_root).unwrap();
    let landmark_file = dir.path().join("landmarks.jsonl");

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut lines = String::new();
    let mut images = Vec::new();
    for i in 0..n {
        let w = 96 + (i % 3) * 8;
        let h = 96 + (i % 2) * 8;
        let image = synthetic_face_image(&mut rng, w, h);
        let name = format!("frame_{i:03}.png");
        image.save_png(&input_root.join(&name)).unwrap();

        let cx = w as f64 / 2.0 + rng.random_range(-2.0..2.0);
        let cy = h as f64 / 2.0 + rng.random_range(-2.0..2.0);
        let rx = w as f64 * rng.random_range(0.27..0.31);
        let ry = h as f64 * rng.random_range(0.33..0.37);
        let points = face_landmarks_81(cx, cy, rx, ry);
        let points_json: Vec<String> = points
            .iter()
            .map(|p| format!("[{:.3},{:.3}]", p[0], p[1]))
            .collect();
        lines.push_str(&format!(
            "{{\"image\":\"{name}\",\"points\":[{}]}}\n",
            points_json.join(",")
        ));
        images.push(name);
    }
    std::fs::write(&landmark_file, lines).unwrap();
    Corpus {
        dir,
        input_root,
        landmark_file,
        images,
    }
}
