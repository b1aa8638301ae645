//! Image preprocessing, rotation-based augmentation, and PCA mask alignment.
//!
//! All pixel math is `f64`. Raster files are read and written through the
//! `png` support of the `image` crate: 8-bit and 16-bit grayscale plus 8-bit
//! RGB in, grayscale out.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Map2D;

/// Side length every cell image is brought to before entering the network.
pub const STANDARD_SIZE: usize = 78;

/// A grayscale image with real-valued pixels in row-major order.
///
/// Raw decoded images may carry intensities in any range; after
/// [`contrast_normalize`] pixels lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                axis: "image pixels",
                expected: height * width,
                actual: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("image pixels must be finite".into()));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Bilinear sample at fractional (row, col); coordinates outside the
    /// pixel grid contribute the given fill value.
    fn sample_bilinear_fill(&self, row: f64, col: f64, fill: f64) -> f64 {
        let y0 = row.floor();
        let x0 = col.floor();
        let fy = row - y0;
        let fx = col - x0;
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let y = y0 as i64 + dy;
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let x = x0 as i64 + dx;
                let v = if y >= 0 && (y as usize) < self.height && x >= 0 && (x as usize) < self.width
                {
                    self.at(y as usize, x as usize)
                } else {
                    fill
                };
                acc += wy * wx * v;
            }
        }
        acc
    }

    /// Bilinear sample with clamp-to-edge semantics (used by resize, where
    /// there is no background to fall into).
    fn sample_bilinear_clamped(&self, row: f64, col: f64) -> f64 {
        let row = row.clamp(0.0, (self.height - 1) as f64);
        let col = col.clamp(0.0, (self.width - 1) as f64);
        let y0 = row.floor() as usize;
        let x0 = col.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = row - y0 as f64;
        let fx = col - x0 as f64;
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn to_map2d(&self) -> Map2D {
        Map2D::from_values(self.height, self.width, self.pixels.clone())
            .expect("image pixels are finite and sized")
    }
}

/// Per-pixel foreground flags matching an image's dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("mask dimensions must be positive".into()));
        }
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                axis: "mask bits",
                expected: height * width,
                actual: bits.len(),
            });
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Rotation-augmentation parameters: an angle step that divides 360 exactly,
/// producing `m = 360 / step` variants per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationPlan {
    angle_step_degrees: u32,
}

impl AugmentationPlan {
    pub fn new(angle_step_degrees: u32) -> Result<Self> {
        if angle_step_degrees == 0 || 360 % angle_step_degrees != 0 {
            return Err(Error::InvalidInput(format!(
                "augmentation angle step must divide 360, got {angle_step_degrees}"
            )));
        }
        Ok(AugmentationPlan { angle_step_degrees })
    }

    /// Plan with a single unrotated variant (no augmentation).
    pub fn none() -> Self {
        AugmentationPlan {
            angle_step_degrees: 360,
        }
    }

    pub fn angle_step_degrees(&self) -> u32 {
        self.angle_step_degrees
    }

    /// Number of variants, `m = 360 / step`.
    pub fn variant_count(&self) -> usize {
        (360 / self.angle_step_degrees) as usize
    }
}

/// Whether contrast normalization saw a usable intensity range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeStatus {
    Normalized,
    /// The image was constant; output is all zeros.
    ConstantInput,
}

/// Min-max contrast normalization: `(p - min) / (max - min)`, mapping the
/// image onto `[0, 1]`. A constant image maps to all zeros and is flagged.
pub fn contrast_normalize(image: &GrayImage) -> (GrayImage, NormalizeStatus) {
    let min = image.pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = image.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return (
            GrayImage::constant(image.height, image.width, 0.0),
            NormalizeStatus::ConstantInput,
        );
    }
    let scale = 1.0 / (max - min);
    let pixels = image.pixels.iter().map(|&p| (p - min) * scale).collect();
    (
        GrayImage {
            height: image.height,
            width: image.width,
            pixels,
        },
        NormalizeStatus::Normalized,
    )
}

/// Bilinear resize to the requested dimensions. Aspect ratio is not
/// preserved; pixel centers are aligned so that resizing to the same size is
/// exact.
pub fn resize(image: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    assert!(out_h >= 1 && out_w >= 1, "resize target must be positive");
    if out_h == image.height && out_w == image.width {
        return image.clone();
    }
    let sy = image.height as f64 / out_h as f64;
    let sx = image.width as f64 / out_w as f64;
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            pixels.push(image.sample_bilinear_clamped(src_y, src_x));
        }
    }
    GrayImage {
        height: out_h,
        width: out_w,
        pixels,
    }
}

/// Sine and cosine of an angle in degrees, exact for multiples of 90 so that
/// quarter-turn rotations are pure permutations of the pixel grid.
fn sin_cos_degrees(angle_degrees: f64) -> (f64, f64) {
    let normalized = angle_degrees.rem_euclid(360.0);
    if normalized == 0.0 {
        (0.0, 1.0)
    } else if normalized == 90.0 {
        (1.0, 0.0)
    } else if normalized == 180.0 {
        (0.0, -1.0)
    } else if normalized == 270.0 {
        (-1.0, 0.0)
    } else {
        normalized.to_radians().sin_cos()
    }
}

/// Rotates the image about its center, keeping the dimensions. Inverse
/// mapping with bilinear interpolation; source coordinates falling outside
/// the frame read as 0 (background).
pub fn rotate_about_center(image: &GrayImage, angle_degrees: f64) -> GrayImage {
    let (s, c) = sin_cos_degrees(angle_degrees);
    let cy = (image.height - 1) as f64 / 2.0;
    let cx = (image.width - 1) as f64 / 2.0;
    let mut pixels = Vec::with_capacity(image.height * image.width);
    for y in 0..image.height {
        let dy = y as f64 - cy;
        for x in 0..image.width {
            let dx = x as f64 - cx;
            let src_x = cx + c * dx + s * dy;
            let src_y = cy - s * dx + c * dy;
            pixels.push(image.sample_bilinear_fill(src_y, src_x, 0.0));
        }
    }
    GrayImage {
        height: image.height,
        width: image.width,
        pixels,
    }
}

/// Rotates a mask about its center with nearest-neighbor sampling, keeping it
/// binary. Out-of-frame sources read as background.
pub fn rotate_mask_about_center(mask: &BinaryMask, angle_degrees: f64) -> BinaryMask {
    let (s, c) = sin_cos_degrees(angle_degrees);
    let cy = (mask.height - 1) as f64 / 2.0;
    let cx = (mask.width - 1) as f64 / 2.0;
    let mut bits = Vec::with_capacity(mask.height * mask.width);
    for y in 0..mask.height {
        let dy = y as f64 - cy;
        for x in 0..mask.width {
            let dx = x as f64 - cx;
            let src_x = (cx + c * dx + s * dy).round();
            let src_y = (cy - s * dx + c * dy).round();
            let inside = src_y >= 0.0
                && src_x >= 0.0
                && (src_y as usize) < mask.height
                && (src_x as usize) < mask.width;
            bits.push(inside && mask.at(src_y as usize, src_x as usize));
        }
    }
    BinaryMask {
        height: mask.height,
        width: mask.width,
        bits,
    }
}

/// Nearest-neighbor mask resize (keeps the mask binary).
pub fn resize_mask(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    assert!(out_h >= 1 && out_w >= 1, "resize target must be positive");
    let sy = mask.height as f64 / out_h as f64;
    let sx = mask.width as f64 / out_w as f64;
    let mut bits = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let src_y = (((y as f64 + 0.5) * sy - 0.5).round()).clamp(0.0, (mask.height - 1) as f64);
        for x in 0..out_w {
            let src_x = (((x as f64 + 0.5) * sx - 0.5).round()).clamp(0.0, (mask.width - 1) as f64);
            bits.push(mask.at(src_y as usize, src_x as usize));
        }
    }
    BinaryMask {
        height: out_h,
        width: out_w,
        bits,
    }
}

/// Orientation of a mask's dominant elongation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalAxis {
    /// Signed angle in degrees between the leading eigenvector and the
    /// vertical axis, in `(-90, 90]`.
    pub angle_from_vertical_degrees: f64,
    /// Both eigenvalues coincide (no dominant direction).
    pub isotropic: bool,
}

/// Principal direction of a mask's foreground shape via the 2x2 covariance of
/// foreground pixel coordinates. The eigenvector sign is fixed to a
/// non-negative vertical component so the result is deterministic.
pub fn principal_axis(mask: &BinaryMask) -> Result<PrincipalAxis> {
    let mut n = 0usize;
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.at(y, x) {
                n += 1;
                sum_x += x as f64;
                sum_y += y as f64;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("mask has no foreground pixels".into()));
    }
    if n == 1 {
        return Err(Error::InvalidInput(
            "mask needs at least two foreground pixels to define a direction".into(),
        ));
    }
    let mx = sum_x / n as f64;
    let my = sum_y / n as f64;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.at(y, x) {
                let dx = x as f64 - mx;
                let dy = y as f64 - my;
                sxx += dx * dx;
                sxy += dx * dy;
                syy += dy * dy;
            }
        }
    }
    sxx /= n as f64;
    sxy /= n as f64;
    syy /= n as f64;

    // Eigen-decomposition of [[sxx, sxy], [sxy, syy]].
    let mean = 0.5 * (sxx + syy);
    let half_diff = 0.5 * (sxx - syy);
    let radius = (half_diff * half_diff + sxy * sxy).sqrt();
    let lambda_max = mean + radius;
    if radius <= 1e-9 * lambda_max.abs().max(1e-12) {
        return Ok(PrincipalAxis {
            angle_from_vertical_degrees: 0.0,
            isotropic: true,
        });
    }
    // Leading eigenvector; pick the better-conditioned of the two forms.
    let (mut vx, mut vy) = if (lambda_max - sxx).abs() > (lambda_max - syy).abs() {
        (sxy, lambda_max - sxx)
    } else {
        (lambda_max - syy, sxy)
    };
    if vy < 0.0 || (vy == 0.0 && vx < 0.0) {
        vx = -vx;
        vy = -vy;
    }
    Ok(PrincipalAxis {
        angle_from_vertical_degrees: vx.atan2(vy).to_degrees(),
        isotropic: false,
    })
}

/// What [`pca_align`] did to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlignStatus {
    /// Image rotated by this many degrees to bring the principal direction
    /// vertical.
    Rotated(f64),
    /// Mask had no dominant direction; no rotation applied.
    Isotropic,
}

/// Rotates the image so the mask's principal direction becomes vertical, then
/// resizes to `target x target`.
pub fn pca_align_to(
    image: &GrayImage,
    mask: &BinaryMask,
    target: usize,
) -> Result<(GrayImage, AlignStatus)> {
    if mask.height != image.height || mask.width != image.width {
        return Err(Error::ShapeMismatch {
            axis: "mask size",
            expected: image.height * image.width,
            actual: mask.height * mask.width,
        });
    }
    let axis = principal_axis(mask)?;
    if axis.isotropic {
        return Ok((resize(image, target, target), AlignStatus::Isotropic));
    }
    let angle = axis.angle_from_vertical_degrees;
    let rotated = rotate_about_center(image, angle);
    Ok((resize(&rotated, target, target), AlignStatus::Rotated(angle)))
}

/// [`pca_align_to`] with the standard 78x78 target.
pub fn pca_align(image: &GrayImage, mask: &BinaryMask) -> Result<(GrayImage, AlignStatus)> {
    pca_align_to(image, mask, STANDARD_SIZE)
}

/// Generates the `m = 360 / step` rotated variants of an image. Variant `k`
/// is the image rotated by `k * step` degrees; variant 0 is the input itself.
pub fn augment(image: &GrayImage, plan: &AugmentationPlan) -> Vec<GrayImage> {
    let m = plan.variant_count();
    let step = plan.angle_step_degrees as f64;
    let mut out = Vec::with_capacity(m);
    out.push(image.clone());
    for k in 1..m {
        out.push(rotate_about_center(image, k as f64 * step));
    }
    out
}

/// A decoded raster before preprocessing: grayscale, or RGB split into
/// planes.
#[derive(Debug, Clone)]
pub enum SourceImage {
    Gray(GrayImage),
    Rgb {
        red: GrayImage,
        green: GrayImage,
        blue: GrayImage,
    },
}

impl SourceImage {
    pub fn is_rgb(&self) -> bool {
        matches!(self, SourceImage::Rgb { .. })
    }
}

/// Preprocessing controls for [`preprocess`].
#[derive(Debug, Clone, Copy)]
pub struct PreprocessOptions {
    /// Rotate so the mask's principal direction is vertical.
    pub align: bool,
    /// Output side length (78 for the reference pipeline).
    pub target: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            align: false,
            target: STANDARD_SIZE,
        }
    }
}

/// The standard preprocessing pipeline: channel selection (green for RGB,
/// identity for grayscale), contrast normalization, optional PCA alignment,
/// and resize to the target square.
pub fn preprocess(
    source: &SourceImage,
    mask: Option<&BinaryMask>,
    opts: &PreprocessOptions,
) -> Result<GrayImage> {
    let gray = match source {
        SourceImage::Gray(g) => g,
        SourceImage::Rgb { green, .. } => green,
    };
    let (normalized, _) = contrast_normalize(gray);
    if opts.align {
        let mask = mask.ok_or_else(|| {
            Error::MaskRequired("alignment requested but the sample has no mask".into())
        })?;
        let (aligned, _) = pca_align_to(&normalized, mask, opts.target)?;
        return Ok(aligned);
    }
    Ok(resize(&normalized, opts.target, opts.target))
}

/// Loads a raster as a [`SourceImage`]. Accepts 8/16-bit grayscale and 8-bit
/// RGB(A); alpha channels are dropped.
pub fn load_raster(path: &Path) -> Result<SourceImage> {
    let decoded = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::ImageDecode {
            path: path.into(),
            source: other,
        },
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let gray_from = |data: Vec<f64>| GrayImage::new(h, w, data);
    match decoded {
        image::DynamicImage::ImageLuma8(img) => Ok(SourceImage::Gray(gray_from(
            img.into_raw().into_iter().map(f64::from).collect(),
        )?)),
        image::DynamicImage::ImageLuma16(img) => Ok(SourceImage::Gray(gray_from(
            img.into_raw().into_iter().map(f64::from).collect(),
        )?)),
        image::DynamicImage::ImageLumaA8(img) => Ok(SourceImage::Gray(gray_from(
            img.pixels().map(|p| f64::from(p.0[0])).collect(),
        )?)),
        image::DynamicImage::ImageLumaA16(img) => Ok(SourceImage::Gray(gray_from(
            img.pixels().map(|p| f64::from(p.0[0])).collect(),
        )?)),
        image::DynamicImage::ImageRgb8(img) => {
            let raw = img.into_raw();
            split_rgb(h, w, &raw, 3)
        }
        image::DynamicImage::ImageRgba8(img) => {
            let raw = img.into_raw();
            split_rgb(h, w, &raw, 4)
        }
        other => Err(Error::UnsupportedImage {
            path: path.into(),
            detail: format!("{:?} pixels; expected 8/16-bit grayscale or 8-bit RGB", other.color()),
        }),
    }
}

fn split_rgb(h: usize, w: usize, raw: &[u8], stride: usize) -> Result<SourceImage> {
    let mut planes = [
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
    ];
    for px in raw.chunks_exact(stride) {
        for (plane, &v) in planes.iter_mut().zip(px.iter().take(3)) {
            plane.push(f64::from(v));
        }
    }
    let [r, g, b] = planes;
    Ok(SourceImage::Rgb {
        red: GrayImage::new(h, w, r)?,
        green: GrayImage::new(h, w, g)?,
        blue: GrayImage::new(h, w, b)?,
    })
}

/// Loads a raster as a binary mask: any nonzero intensity is foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let source = load_raster(path)?;
    let gray = match source {
        SourceImage::Gray(g) => g,
        SourceImage::Rgb { green, .. } => green,
    };
    BinaryMask::new(
        gray.height,
        gray.width,
        gray.pixels.iter().map(|&p| p > 0.0).collect(),
    )
}

/// Writes pixels assumed in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_u8(path: &Path, image: &GrayImage) -> Result<()> {
    let data: Vec<u8> = image
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(image.width as u32, image.height as u32, data)
        .expect("buffer sized from image");
    buf.save(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::ImageDecode {
            path: path.into(),
            source: other,
        },
    })
}

/// Writes pixels assumed in `[0, 1]` as a 16-bit grayscale PNG (used for
/// materialized preprocessing output, where 8 bits would quantize visibly).
pub fn save_gray_u16(path: &Path, image: &GrayImage) -> Result<()> {
    let data: Vec<u16> = image
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            image.width as u32,
            image.height as u32,
            data,
        )
        .expect("buffer sized from image");
    buf.save(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::ImageDecode {
            path: path.into(),
            source: other,
        },
    })
}

/// Writes a mask as an 8-bit PNG with foreground 255 and background 0.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
        .expect("buffer sized from mask");
    buf.save(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::ImageDecode {
            path: path.into(),
            source: other,
        },
    })
}
