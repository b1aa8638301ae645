//! Manifest-driven corpus ingestion, the train/validation/test split
//! protocol, and a synthetic six-class corpus generator for desk-scale
//! verification.
//!
//! A manifest is comma-separated text, one sample per row:
//!
//! ```text
//! #classes: Homogeneous,Speckled,Nucleolar,Centromere,Nuclear Membrane,Golgi
//! #channel: grayscale
//! id,image,mask,label
//! cell0001,images/cell0001.png,masks/cell0001.png,Speckled
//! cell0002,images/cell0002.png,,Golgi
//! ```
//!
//! Lines starting with `#` are comments except for the two directives shown.
//! The `#classes:` directive pins the class order; without it, the table is
//! the sorted set of label names found in the rows. The mask field may be
//! empty. Paths are resolved relative to the manifest location. The header
//! row `id,image,mask,label` is optional and ignored when present.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::{
    self, rotate_about_center, rotate_mask_about_center, BinaryMask, GrayImage, PreprocessOptions,
    SourceImage,
};

/// Which channel carries the signal in the source rasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    /// Single-channel sources; RGB files are rejected at load time.
    #[default]
    Grayscale,
    /// RGB sources contribute their green channel; grayscale files pass
    /// through unchanged.
    GreenOfRgb,
}

/// One dataset record: an image file, an optional mask, and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSample {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub label: usize,
}

/// A validated corpus description.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<CellSample>,
    pub channel_mode: ChannelMode,
}

/// Split fractions and protocol controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// (train, validation, test); must sum to 1.
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: (0.64, 0.16, 0.20),
            seed: 0,
            stratified: false,
        }
    }
}

/// A preprocessed sample ready for the network.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: GrayImage,
    pub label: usize,
}

fn parse_channel(value: &str) -> Result<ChannelMode> {
    match value.trim().to_ascii_lowercase().as_str() {
        "grayscale" | "gray" => Ok(ChannelMode::Grayscale),
        "green-of-rgb" | "green" => Ok(ChannelMode::GreenOfRgb),
        other => Err(Error::Manifest(format!(
            "unknown channel mode '{other}' (expected grayscale or green-of-rgb)"
        ))),
    }
}

fn channel_name(mode: ChannelMode) -> &'static str {
    match mode {
        ChannelMode::Grayscale => "grayscale",
        ChannelMode::GreenOfRgb => "green-of-rgb",
    }
}

/// Loads and validates a manifest, deriving the class table from the
/// `#classes:` directive or, failing that, from the sorted label names.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_impl(path, None)
}

/// Loads a manifest against a fixed class table (for evaluating an already
/// trained model); label names outside the table are an error.
pub fn load_manifest_with_classes(path: &Path, classes: &[String]) -> Result<DatasetManifest> {
    load_manifest_impl(path, Some(classes))
}

fn load_manifest_impl(path: &Path, fixed_classes: Option<&[String]>) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut declared_classes: Option<Vec<String>> = None;
    let mut channel_mode = ChannelMode::Grayscale;
    let mut rows: Vec<(usize, String, String, String, String)> = Vec::new();

    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#classes:") {
            let names: Vec<String> = rest.split(',').map(|s| s.trim().to_string()).collect();
            if names.iter().any(|n| n.is_empty()) {
                return Err(Error::Manifest(format!(
                    "line {}: empty class name in #classes directive",
                    line_no + 1
                )));
            }
            let unique: HashSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::Manifest(format!(
                    "line {}: duplicate class name in #classes directive",
                    line_no + 1
                )));
            }
            declared_classes = Some(names);
            continue;
        }
        if let Some(rest) = line.strip_prefix("#channel:") {
            channel_mode = parse_channel(rest)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest(format!(
                "line {}: expected 4 comma-separated fields (id,image,mask,label), got {}",
                line_no + 1,
                fields.len()
            )));
        }
        if fields[0] == "id" && fields[3] == "label" {
            continue; // optional header row
        }
        rows.push((
            line_no + 1,
            fields[0].trim().to_string(),
            fields[1].trim().to_string(),
            fields[2].trim().to_string(),
            fields[3].trim().to_string(),
        ));
    }

    let classes: Vec<String> = if let Some(fixed) = fixed_classes {
        fixed.to_vec()
    } else if let Some(declared) = declared_classes {
        declared
    } else {
        let names: BTreeSet<String> = rows.iter().map(|r| r.4.clone()).collect();
        names.into_iter().collect()
    };
    if classes.is_empty() {
        return Err(Error::Manifest(format!(
            "manifest {} declares no classes and contains no samples",
            path.display()
        )));
    }
    let class_index: HashMap<&String, usize> =
        classes.iter().enumerate().map(|(i, n)| (n, i)).collect();

    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut samples = Vec::with_capacity(rows.len());
    let mut missing: Vec<String> = Vec::new();
    for (line_no, id, image, mask, label) in rows {
        if id.is_empty() {
            return Err(Error::Manifest(format!("line {line_no}: empty sample id")));
        }
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Manifest(format!("line {line_no}: duplicate id '{id}'")));
        }
        let Some(&label_idx) = class_index.get(&label) else {
            return Err(Error::Manifest(format!(
                "line {line_no}: unknown label name '{label}' for sample '{id}'"
            )));
        };
        let image_path = base.join(&image);
        if !image_path.is_file() {
            missing.push(format!("{id} -> {}", image_path.display()));
        }
        let mask_path = if mask.is_empty() {
            None
        } else {
            let p = base.join(&mask);
            if !p.is_file() {
                missing.push(format!("{id} (mask) -> {}", p.display()));
            }
            Some(p)
        };
        samples.push(CellSample {
            id,
            image_path,
            mask_path,
            label: label_idx,
        });
    }
    if !missing.is_empty() {
        let shown = missing.iter().take(5).cloned().collect::<Vec<_>>().join("; ");
        return Err(Error::Manifest(format!(
            "{} missing file(s): {}{}",
            missing.len(),
            shown,
            if missing.len() > 5 { "; ..." } else { "" }
        )));
    }
    Ok(DatasetManifest {
        classes,
        samples,
        channel_mode,
    })
}

/// A manifest row as written to disk (paths relative to the manifest file).
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub label: String,
}

/// Writes a manifest file with the directives and one row per sample.
pub fn write_manifest(
    path: &Path,
    classes: &[String],
    channel_mode: ChannelMode,
    rows: &[ManifestRow],
) -> Result<()> {
    for name in classes {
        if name.contains(',') {
            return Err(Error::Manifest(format!(
                "class name '{name}' must not contain a comma"
            )));
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "#classes: {}", classes.join(","));
    let _ = writeln!(out, "#channel: {}", channel_name(channel_mode));
    let _ = writeln!(out, "id,image,mask,label");
    for row in rows {
        for field in [&row.id, &row.image, &row.mask, &row.label] {
            if field.contains(',') {
                return Err(Error::Manifest(format!(
                    "manifest field '{field}' must not contain a comma"
                )));
            }
        }
        let _ = writeln!(out, "{},{},{},{}", row.id, row.image, row.mask, row.label);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Seeded shuffle followed by contiguous slicing: train gets
/// `floor(N * f_train)` samples, validation `floor(N * f_val)`, and the test
/// slice takes the remainder. With stratification the same rule applies
/// per class.
pub fn split(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(Vec<CellSample>, Vec<CellSample>, Vec<CellSample>)> {
    let (ft, fv, fe) = spec.fractions;
    if !(ft.is_finite() && fv.is_finite() && fe.is_finite())
        || ft < 0.0
        || fv < 0.0
        || fe < 0.0
        || ((ft + fv + fe) - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slice_indices = |indices: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        indices.shuffle(rng);
        let n = indices.len();
        let n_train = (n as f64 * ft).floor() as usize;
        let n_val = (n as f64 * fv).floor() as usize;
        let train = indices[..n_train].to_vec();
        let val = indices[n_train..n_train + n_val].to_vec();
        let test = indices[n_train + n_val..].to_vec();
        (train, val, test)
    };

    let (train_idx, val_idx, test_idx) = if spec.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.classes.len()];
        for (i, s) in manifest.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for mut class_indices in by_class {
            let (t, v, e) = slice_indices(&mut class_indices, &mut rng);
            train.extend(t);
            val.extend(v);
            test.extend(e);
        }
        (train, val, test)
    } else {
        let mut indices: Vec<usize> = (0..manifest.samples.len()).collect();
        slice_indices(&mut indices, &mut rng)
    };

    let collect = |idx: Vec<usize>| -> Vec<CellSample> {
        idx.into_iter().map(|i| manifest.samples[i].clone()).collect()
    };
    Ok((collect(train_idx), collect(val_idx), collect(test_idx)))
}

/// Decodes a sample's image (and mask, when present), enforcing the corpus
/// channel mode.
pub fn load_source(
    sample: &CellSample,
    channel_mode: ChannelMode,
) -> Result<(SourceImage, Option<BinaryMask>)> {
    let source = imageproc::load_raster(&sample.image_path)?;
    if source.is_rgb() && channel_mode == ChannelMode::Grayscale {
        return Err(Error::UnsupportedImage {
            path: sample.image_path.clone(),
            detail: "RGB file in a grayscale-mode corpus; declare '#channel: green-of-rgb'".into(),
        });
    }
    let mask = match &sample.mask_path {
        Some(p) => Some(imageproc::load_mask(p)?),
        None => None,
    };
    Ok((source, mask))
}

/// Loads and preprocesses one sample.
pub fn preprocess_sample(
    sample: &CellSample,
    channel_mode: ChannelMode,
    opts: &PreprocessOptions,
) -> Result<LabeledImage> {
    let (source, mask) = load_source(sample, channel_mode)?;
    if opts.align && mask.is_none() {
        return Err(Error::MaskRequired(format!(
            "alignment requested but sample '{}' has no mask",
            sample.id
        )));
    }
    let image = imageproc::preprocess(&source, mask.as_ref(), opts)?;
    Ok(LabeledImage {
        id: sample.id.clone(),
        image,
        label: sample.label,
    })
}

/// Loads and preprocesses a sample list in parallel, preserving order.
pub fn load_labeled_set(
    samples: &[CellSample],
    channel_mode: ChannelMode,
    opts: &PreprocessOptions,
) -> Result<Vec<LabeledImage>> {
    samples
        .par_iter()
        .map(|s| preprocess_sample(s, channel_mode, opts))
        .collect()
}

/// Where augmentation rotations sit relative to the resize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentOrder {
    /// Rotate the resized image (cheaper; the default).
    #[default]
    RotateAfterResize,
    /// Rotate at the source resolution, then resize each variant.
    RotateBeforeResize,
}

/// Preprocesses one sample and expands it into its `m` rotated variants.
/// Variant ids are `<id>-rot<k>`; every variant inherits the source label.
pub fn preprocess_augmented_sample(
    sample: &CellSample,
    channel_mode: ChannelMode,
    opts: &PreprocessOptions,
    plan: &imageproc::AugmentationPlan,
    order: AugmentOrder,
) -> Result<Vec<LabeledImage>> {
    let (source, mask) = load_source(sample, channel_mode)?;
    let gray = match &source {
        SourceImage::Gray(g) => g,
        SourceImage::Rgb { green, .. } => green,
    };
    let (normalized, _) = imageproc::contrast_normalize(gray);
    // Alignment rotates at source resolution; the resize happens below,
    // shared with the unaligned path.
    let base = if opts.align {
        let mask = mask.as_ref().ok_or_else(|| {
            Error::MaskRequired(format!(
                "alignment requested but sample '{}' has no mask",
                sample.id
            ))
        })?;
        let axis = imageproc::principal_axis(mask)?;
        if axis.isotropic {
            normalized
        } else {
            rotate_about_center(&normalized, axis.angle_from_vertical_degrees)
        }
    } else {
        normalized
    };
    let t = opts.target;
    let step = f64::from(plan.angle_step_degrees());
    let variants: Vec<GrayImage> = match order {
        AugmentOrder::RotateAfterResize => imageproc::augment(&imageproc::resize(&base, t, t), plan),
        AugmentOrder::RotateBeforeResize => (0..plan.variant_count())
            .map(|k| {
                let rotated = if k == 0 {
                    base.clone()
                } else {
                    rotate_about_center(&base, k as f64 * step)
                };
                imageproc::resize(&rotated, t, t)
            })
            .collect(),
    };
    Ok(variants
        .into_iter()
        .enumerate()
        .map(|(k, image)| LabeledImage {
            id: format!("{}-rot{k:03}", sample.id),
            image,
            label: sample.label,
        })
        .collect())
}

/// [`preprocess_augmented_sample`] over a whole sample list, in parallel,
/// flattened in sample order.
pub fn preprocess_augmented_set(
    samples: &[CellSample],
    channel_mode: ChannelMode,
    opts: &PreprocessOptions,
    plan: &imageproc::AugmentationPlan,
    order: AugmentOrder,
) -> Result<Vec<LabeledImage>> {
    let per_sample: Result<Vec<Vec<LabeledImage>>> = samples
        .par_iter()
        .map(|s| preprocess_augmented_sample(s, channel_mode, opts, plan, order))
        .collect();
    Ok(per_sample?.into_iter().flatten().collect())
}

/// Expands an already-preprocessed set by rotation (rotate-after-resize).
pub fn augment_labeled(
    set: &[LabeledImage],
    plan: &imageproc::AugmentationPlan,
) -> Vec<LabeledImage> {
    set.iter()
        .flat_map(|s| {
            imageproc::augment(&s.image, plan)
                .into_iter()
                .enumerate()
                .map(|(k, image)| LabeledImage {
                    id: format!("{}-rot{k:03}", s.id),
                    image,
                    label: s.label,
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// The six built-in texture generators, in class order.
pub const SYNTH_CLASS_NAMES: [&str; 6] = [
    "Homogeneous",
    "Speckled",
    "Nucleolar",
    "Centromere",
    "NuclearMembrane",
    "Golgi",
];

/// Rendering style knobs, so a second corpus can be generated with a shifted
/// appearance (fine-tuning experiments).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthStyle {
    /// Additive Gaussian noise sigma.
    pub noise: f64,
    /// Scales every foreground intensity.
    pub brightness: f64,
    /// Background level.
    pub background: f64,
}

impl SynthStyle {
    pub fn standard() -> Self {
        SynthStyle {
            noise: 0.03,
            brightness: 1.0,
            background: 0.05,
        }
    }

    /// A visibly different laboratory: dimmer, noisier, brighter background.
    pub fn shifted() -> Self {
        SynthStyle {
            noise: 0.07,
            brightness: 0.72,
            background: 0.14,
        }
    }
}

/// Parameters for [`synth_generate`] / [`synth_in_memory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Number of classes to draw from the built-in generators (at most 6).
    pub classes: usize,
    pub per_class: usize,
    /// Square image side.
    pub image_size: usize,
    pub seed: u64,
    /// Cell orientations are drawn uniformly from this range (degrees).
    /// A narrow range yields an orientation-biased corpus.
    pub orientation_degrees: (f64, f64),
    pub style: SynthStyle,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            classes: 6,
            per_class: 100,
            image_size: 78,
            seed: 0,
            orientation_degrees: (0.0, 360.0),
            style: SynthStyle::standard(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; deterministic for a seeded rng.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Adds a radially fading blob of the given amplitude.
fn stamp_blob(pixels: &mut [f64], n: usize, cy: f64, cx: f64, radius: f64, amplitude: f64) {
    let lo_y = ((cy - radius - 1.0).floor().max(0.0)) as usize;
    let hi_y = ((cy + radius + 1.0).ceil().min((n - 1) as f64)) as usize;
    let lo_x = ((cx - radius - 1.0).floor().max(0.0)) as usize;
    let hi_x = ((cx + radius + 1.0).ceil().min((n - 1) as f64)) as usize;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (radius * radius);
            if d2 <= 1.0 {
                pixels[y * n + x] += amplitude * (1.0 - d2);
            }
        }
    }
}

/// Renders one sample of the given class: an upright elliptical cell with a
/// class-specific texture, rotated to `orientation` afterwards. Returns the
/// image (pixels in [0, 1]) and its elliptical mask.
pub fn synth_sample(
    class: usize,
    size: usize,
    orientation_degrees: f64,
    style: &SynthStyle,
    rng: &mut ChaCha8Rng,
) -> (GrayImage, BinaryMask) {
    assert!(class < 6, "only six synthetic classes exist");
    let n = size;
    let c = (n as f64 - 1.0) / 2.0;
    // Vertical major axis; mild jitter on scale and eccentricity.
    let a = n as f64 * rng.random_range(0.33..0.40);
    let b = a * rng.random_range(0.55..0.68);
    let cy = c + n as f64 * rng.random_range(-0.02..0.02);
    let cx = c + n as f64 * rng.random_range(-0.02..0.02);

    let inside = |y: f64, x: f64| -> f64 {
        // Normalized elliptical radius squared (upright frame).
        ((y - cy) / a).powi(2) + ((x - cx) / b).powi(2)
    };

    let mut pixels = vec![style.background; n * n];
    let mut bits = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            if inside(y as f64, x as f64) <= 1.0 {
                bits[y * n + x] = true;
            }
        }
    }

    let fg = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
    match class {
        0 => {
            // Homogeneous: uniform fill over the whole cell.
            let level = fg(rng, 0.55, 0.70);
            for (p, &m) in pixels.iter_mut().zip(&bits) {
                if m {
                    *p = style.background + level;
                }
            }
        }
        1 => {
            // Speckled: dense small speckles.
            let base = fg(rng, 0.16, 0.22);
            for (p, &m) in pixels.iter_mut().zip(&bits) {
                if m {
                    *p = style.background + base;
                }
            }
            let count = (n * n) / 28;
            for _ in 0..count {
                let (by, bx) = random_point_in_ellipse(rng, cy, cx, a, b);
                stamp_blob(&mut pixels, n, by, bx, n as f64 * 0.030, fg(rng, 0.35, 0.55));
            }
        }
        2 => {
            // Nucleolar: a few large bright blobs.
            let base = fg(rng, 0.12, 0.18);
            for (p, &m) in pixels.iter_mut().zip(&bits) {
                if m {
                    *p = style.background + base;
                }
            }
            let count = rng.random_range(3..=6);
            for _ in 0..count {
                let (by, bx) = random_point_in_ellipse(rng, cy, cx, a * 0.6, b * 0.6);
                stamp_blob(&mut pixels, n, by, bx, n as f64 * fg(rng, 0.085, 0.11), fg(rng, 0.6, 0.8));
            }
        }
        3 => {
            // Centromere: many tiny dots.
            let base = fg(rng, 0.10, 0.15);
            for (p, &m) in pixels.iter_mut().zip(&bits) {
                if m {
                    *p = style.background + base;
                }
            }
            let count = rng.random_range(40..=70);
            for _ in 0..count {
                let (by, bx) = random_point_in_ellipse(rng, cy, cx, a * 0.9, b * 0.9);
                stamp_blob(&mut pixels, n, by, bx, n as f64 * 0.018, fg(rng, 0.55, 0.8));
            }
        }
        4 => {
            // Nuclear membrane: a bright band along the cell boundary.
            let base = fg(rng, 0.14, 0.20);
            let ring = fg(rng, 0.55, 0.75);
            let band = 0.28;
            for y in 0..n {
                for x in 0..n {
                    if bits[y * n + x] {
                        let r2 = inside(y as f64, x as f64);
                        pixels[y * n + x] = style.background
                            + if r2 >= (1.0 - band) { ring } else { base };
                    }
                }
            }
        }
        5 => {
            // Golgi: one to three large blobs hugging one end of the cell.
            let base = fg(rng, 0.10, 0.16);
            for (p, &m) in pixels.iter_mut().zip(&bits) {
                if m {
                    *p = style.background + base;
                }
            }
            let count = rng.random_range(1..=3);
            let end = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for _ in 0..count {
                let along = end * fg(rng, 0.45, 0.75);
                let across = fg(rng, -0.3, 0.3);
                let by = cy + along * a;
                let bx = cx + across * b;
                stamp_blob(&mut pixels, n, by, bx, n as f64 * fg(rng, 0.085, 0.115), fg(rng, 0.65, 0.85));
            }
        }
        _ => unreachable!(),
    }

    for p in &mut pixels {
        *p = (style.background + (*p - style.background) * style.brightness
            + style.noise * gaussian(rng))
        .clamp(0.0, 1.0);
    }

    let image = GrayImage::new(n, n, pixels).expect("rendered pixels are finite");
    let mask = BinaryMask::new(n, n, bits).expect("mask sized to image");
    if orientation_degrees == 0.0 {
        (image, mask)
    } else {
        (
            rotate_about_center(&image, orientation_degrees),
            rotate_mask_about_center(&mask, orientation_degrees),
        )
    }
}

fn random_point_in_ellipse(rng: &mut ChaCha8Rng, cy: f64, cx: f64, a: f64, b: f64) -> (f64, f64) {
    // Rejection sampling in the bounding box.
    loop {
        let y = rng.random_range(-1.0..1.0);
        let x = rng.random_range(-1.0..1.0);
        if y * y + x * x <= 1.0 {
            return (cy + y * a, cx + x * b);
        }
    }
}

/// Generates a balanced corpus in memory: `(image, mask, label)` triples,
/// class-major. Deterministic for a given seed.
pub fn synth_in_memory(opts: &SynthOptions) -> Result<Vec<(GrayImage, BinaryMask, usize)>> {
    if opts.classes == 0 || opts.classes > SYNTH_CLASS_NAMES.len() {
        return Err(Error::InvalidInput(format!(
            "synthetic corpus supports 1..=6 classes, got {}",
            opts.classes
        )));
    }
    if opts.per_class == 0 || opts.image_size < 8 {
        return Err(Error::InvalidInput(
            "synthetic corpus needs per_class >= 1 and image_size >= 8".into(),
        ));
    }
    let (lo, hi) = opts.orientation_degrees;
    if !(lo.is_finite() && hi.is_finite()) || hi < lo {
        return Err(Error::InvalidInput(format!(
            "orientation range ({lo}, {hi}) is invalid"
        )));
    }
    let mut out = Vec::with_capacity(opts.classes * opts.per_class);
    for class in 0..opts.classes {
        for index in 0..opts.per_class {
            // Every sample gets its own rng stream, so corpora are stable
            // under reordering or partial generation.
            let stream = mix(opts.seed, (class * 1_000_003 + index) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let orientation = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            let (image, mask) =
                synth_sample(class, opts.image_size, orientation, &opts.style, &mut rng);
            out.push((image, mask, class));
        }
    }
    Ok(out)
}

/// SplitMix64, used to derive independent rng streams.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders a corpus to `dir` (images under `images/`, masks under `masks/`,
/// manifest at `manifest.csv`) and returns the loaded manifest.
pub fn synth_generate(dir: &Path, opts: &SynthOptions) -> Result<DatasetManifest> {
    let corpus = synth_in_memory(opts)?;
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let classes: Vec<String> = SYNTH_CLASS_NAMES[..opts.classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::with_capacity(corpus.len());
    for (i, (image, mask, label)) in corpus.iter().enumerate() {
        let id = format!("synth{i:05}");
        let image_rel = format!("images/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        imageproc::save_gray_u8(&dir.join(&image_rel), image)?;
        imageproc::save_mask(&dir.join(&mask_rel), mask)?;
        rows.push(ManifestRow {
            id,
            image: image_rel,
            mask: mask_rel,
            label: classes[*label].clone(),
        });
    }
    let manifest_path = dir.join("manifest.csv");
    write_manifest(&manifest_path, &classes, ChannelMode::Grayscale, &rows)?;
    load_manifest(&manifest_path)
}
