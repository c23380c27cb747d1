//! Raster primitives: RGB images, single-channel planes, resampling,
//! Gaussian blur, and PNG interchange.
//!
//! Images hold color samples in `[0, 1]`, row-major, x right, y down.
//! Interpolation is written in incremental form (`a + t*(b-a)` and the
//! difference form of Catmull-Rom) so that resampling a constant signal
//! reproduces it bit-exactly.

use std::io::Cursor;
use std::path::Path;

use image::ImageEncoder;

use crate::error::{ForgeError, Result};

/// Single-channel `H*W` array of reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "plane data length mismatch");
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f32) {
        self.data.fill(v);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Number of pixels at or above `threshold`.
    pub fn count_at_least(&self, threshold: f32) -> usize {
        self.data.iter().filter(|&&v| v >= threshold).count()
    }

    /// Binarize into {0, 1} at `threshold` (values >= threshold are support).
    pub fn binarized(&self, threshold: f32) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Plane {
        let data = resize_channels(
            &self.data,
            self.width,
            self.height,
            1,
            out_w,
            out_h,
            Interp::Bilinear,
        );
        Plane {
            width: out_w,
            height: out_h,
            data,
        }
    }

    /// Separable Gaussian blur. `sigma == 0` is the identity. The area
    /// outside the plane is treated as zero, which keeps mask values from
    /// bleeding in from the border.
    pub fn gaussian_blur_zero_pad(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let data = blur_separable(
            &self.data,
            self.width,
            self.height,
            1,
            &kernel,
            EdgeMode::Zero,
        );
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// `H*W*3` image of color samples in `[0, 1]`, row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image data length mismatch");
        Image {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Luminance defined as the channel mean, in f64.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0)
            .collect()
    }

    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Image {
        let data = resize_channels(
            &self.data,
            self.width,
            self.height,
            3,
            out_w,
            out_h,
            Interp::Bilinear,
        );
        Image {
            width: out_w,
            height: out_h,
            data,
        }
    }

    pub fn resize_bicubic(&self, out_w: usize, out_h: usize) -> Image {
        let data = resize_channels(
            &self.data,
            self.width,
            self.height,
            3,
            out_w,
            out_h,
            Interp::CatmullRom,
        );
        Image {
            width: out_w,
            height: out_h,
            data,
        }
    }

    /// Gaussian blur with clamp-to-edge padding (image content, not masks).
    pub fn gaussian_blur(&self, sigma: f32) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let data = blur_separable(
            &self.data,
            self.width,
            self.height,
            3,
            &kernel,
            EdgeMode::Clamp,
        );
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Quantize to 8 bits per channel and back, as a decoder output would.
    pub fn quantize_u8_roundtrip(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| quantize_u8(v) as f32 / 255.0)
                .collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut raw = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            raw.push(quantize_u8(v));
        }
        encode_png(&raw, self.width, self.height, image::ColorType::Rgb8)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ForgeError::Format(format!("png decode: {e}")))?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| ForgeError::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| ForgeError::io(path, e))?;
        Image::from_png_bytes(&bytes)
    }
}

/// 8-bit grayscale PNG for masks.
pub fn plane_to_png_bytes(plane: &Plane) -> Result<Vec<u8>> {
    let raw: Vec<u8> = plane.data().iter().map(|&v| quantize_u8(v)).collect();
    encode_png(&raw, plane.width(), plane.height(), image::ColorType::L8)
}

pub fn plane_from_png_bytes(bytes: &[u8]) -> Result<Plane> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ForgeError::Format(format!("png decode: {e}")))?;
    let gray = decoded.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Plane::from_vec(w, h, data))
}

pub fn plane_save_png(plane: &Plane, path: &Path) -> Result<()> {
    let bytes = plane_to_png_bytes(plane)?;
    std::fs::write(path, bytes).map_err(|e| ForgeError::io(path, e))
}

pub fn plane_load_png(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    plane_from_png_bytes(&bytes)
}

fn encode_png(raw: &[u8], width: usize, height: usize, color: image::ColorType) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raw, width as u32, height as u32, color.into())
        .map_err(|e| ForgeError::Format(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Interp {
    Bilinear,
    CatmullRom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeMode {
    Zero,
    Clamp,
}

/// Resample interleaved channel data to a new size, pixel-center aligned.
fn resize_channels(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    channels: usize,
    out_w: usize,
    out_h: usize,
    interp: Interp,
) -> Vec<f32> {
    assert!(src_w > 0 && src_h > 0 && out_w > 0 && out_h > 0);
    if src_w == out_w && src_h == out_h {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; out_w * out_h * channels];
    let scale_x = src_w as f32 / out_w as f32;
    let scale_y = src_h as f32 / out_h as f32;
    let clamp_x = |x: isize| x.clamp(0, src_w as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, src_h as isize - 1) as usize;

    for oy in 0..out_h {
        let sy = (oy as f32 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let ty = sy - y0;
        let y0 = y0 as isize;
        for ox in 0..out_w {
            let sx = (ox as f32 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let tx = sx - x0;
            let x0 = x0 as isize;
            for c in 0..channels {
                let at = |xi: isize, yi: isize| src[(clamp_y(yi) * src_w + clamp_x(xi)) * channels + c];
                let v = match interp {
                    Interp::Bilinear => {
                        let top = lerp(at(x0, y0), at(x0 + 1, y0), tx);
                        let bot = lerp(at(x0, y0 + 1), at(x0 + 1, y0 + 1), tx);
                        lerp(top, bot, ty)
                    }
                    Interp::CatmullRom => {
                        let mut rows = [0.0f32; 4];
                        for (k, row) in rows.iter_mut().enumerate() {
                            let yi = y0 + k as isize - 1;
                            *row = catmull_rom(
                                at(x0 - 1, yi),
                                at(x0, yi),
                                at(x0 + 1, yi),
                                at(x0 + 2, yi),
                                tx,
                            );
                        }
                        catmull_rom(rows[0], rows[1], rows[2], rows[3], ty)
                    }
                };
                out[(oy * out_w + ox) * channels + c] = v;
            }
        }
    }
    out
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Catmull-Rom evaluated on differences from `p1`, so four equal samples
/// interpolate to exactly `p1`.
#[inline]
fn catmull_rom(p0: f32, p1: f32, p2: f32, p3: f32, t: f32) -> f32 {
    let d0 = p0 - p1;
    let d2 = p2 - p1;
    let d3 = p3 - p1;
    let a = 0.5 * (d2 - d0);
    let b = d0 + 2.0 * d2 - 0.5 * d3;
    let c = -0.5 * d0 - 1.5 * d2 + 0.5 * d3;
    p1 + t * (a + t * (b + t * c))
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let mut sum = 0.0f64;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let w = (-d * d / s2).exp();
        kernel.push(w);
        sum += w;
    }
    kernel.into_iter().map(|w| (w / sum) as f32).collect()
}

fn blur_separable(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    kernel: &[f32],
    edge: EdgeMode,
) -> Vec<f32> {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];

    // Horizontal pass.
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0f32;
                for (k, &w) in kernel.iter().enumerate() {
                    let xi = x as isize + k as isize - radius as isize;
                    let v = match edge {
                        EdgeMode::Zero => {
                            if xi < 0 || xi >= width as isize {
                                0.0
                            } else {
                                src[(y * width + xi as usize) * channels + c]
                            }
                        }
                        EdgeMode::Clamp => {
                            let xi = xi.clamp(0, width as isize - 1) as usize;
                            src[(y * width + xi) * channels + c]
                        }
                    };
                    acc += w * v;
                }
                tmp[(y * width + x) * channels + c] = acc;
            }
        }
    }

    // Vertical pass.
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0f32;
                for (k, &w) in kernel.iter().enumerate() {
                    let yi = y as isize + k as isize - radius as isize;
                    let v = match edge {
                        EdgeMode::Zero => {
                            if yi < 0 || yi >= height as isize {
                                0.0
                            } else {
                                tmp[(yi as usize * width + x) * channels + c]
                            }
                        }
                        EdgeMode::Clamp => {
                            let yi = yi.clamp(0, height as isize - 1) as usize;
                            tmp[(yi * width + x) * channels + c]
                        }
                    };
                    acc += w * v;
                }
                out[(y * width + x) * channels + c] = acc;
            }
        }
    }
    out
}
