//! Image corruptions (blur, brightness, contrast, zoom), crash-degree search
//! and extreme-degree generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Classifier, Matrix};

/// Height × width × channels image, row-major with interleaved channels.
/// Pixels lie in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::dim("image pixel count", height * width * channels, pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=255.0).contains(*p)) {
            return Err(Error::Range {
                what: "pixel",
                value: *p,
                range: "[0, 255]",
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn gray(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, pixels)
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f64).collect())
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::gray(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        }
    }

    /// Rounds every pixel to the nearest integer, i.e. the value it would
    /// have after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        self.with_pixels(self.pixels.iter().map(|p| p.round()).collect())
    }

    /// Pixels as bytes; values are rounded and already lie in `[0, 255]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| p.round() as u8).collect()
    }

    /// Network input features: pixels scaled to `[0, 1]`.
    pub fn features(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| p / 255.0).collect()
    }
}

/// Stacks image features into one row per image.
pub fn features_matrix(images: &[Image]) -> Result<Matrix> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("no images to featurize".into()))?;
    let cols = first.pixels.len();
    let mut data = Vec::with_capacity(images.len() * cols);
    for img in images {
        if img.pixels.len() != cols {
            return Err(Error::dim("image size", cols, img.pixels.len()));
        }
        data.extend(img.pixels.iter().map(|p| p / 255.0));
    }
    Matrix::from_vec(images.len(), cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Blur,
    Bright,
    Contrast,
    Zoom,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Blur,
        TransformKind::Bright,
        TransformKind::Contrast,
        TransformKind::Zoom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Blur => "blur",
            TransformKind::Bright => "bright",
            TransformKind::Contrast => "contrast",
            TransformKind::Zoom => "zoom",
        }
    }

    /// Degree leaving the image unchanged; crash search starts here.
    pub fn identity_degree(self) -> f64 {
        match self {
            TransformKind::Blur | TransformKind::Bright => 0.0,
            TransformKind::Contrast | TransformKind::Zoom => 1.0,
        }
    }

    pub fn range_text(self) -> &'static str {
        match self {
            TransformKind::Blur => "[0, 5)",
            TransformKind::Bright => "[0, 255)",
            TransformKind::Contrast => "(0, 1]",
            TransformKind::Zoom => "[1, 5)",
        }
    }

    pub fn is_legal(self, d: f64) -> bool {
        match self {
            TransformKind::Blur => (0.0..5.0).contains(&d),
            TransformKind::Bright => (0.0..255.0).contains(&d),
            TransformKind::Contrast => d > 0.0 && d <= 1.0,
            TransformKind::Zoom => (1.0..5.0).contains(&d),
        }
    }

    fn check(self, d: f64) -> Result<()> {
        if self.is_legal(d) {
            Ok(())
        } else {
            Err(Error::Range {
                what: "transform degree",
                value: d,
                range: self.range_text(),
            })
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown transform {s:?}")))
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub degree: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, degree: f64) -> Result<Self> {
        kind.check(degree)?;
        Ok(Self { kind, degree })
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        apply(img, self.kind, self.degree)
    }
}

pub fn apply(img: &Image, kind: TransformKind, degree: f64) -> Result<Image> {
    match kind {
        TransformKind::Blur => gaussian_blur(img, degree),
        TransformKind::Bright => brighten(img, degree),
        TransformKind::Contrast => contrast(img, degree),
        TransformKind::Zoom => zoom(img, degree),
    }
}

/// Normalized 1-D Gaussian with `σ = sigma` and radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`) of an out-of-range
/// index into `0..n`.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with `σ = d`, radius `ceil(3σ)` and symmetric
/// reflection at the borders. `d = 0` returns the input unchanged.
pub fn gaussian_blur(img: &Image, d: f64) -> Result<Image> {
    TransformKind::Blur.check(d)?;
    if d == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(d);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height, img.width, img.channels);

    let mut tmp = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect_index(x as isize + t as isize - r, w);
                    acc += kv * img.pixels[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect_index(y as isize + t as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc.clamp(0.0, 255.0);
            }
        }
    }
    Ok(img.with_pixels(out))
}

/// Adds `d` to every pixel, clipping to `[0, 255]`.
pub fn brighten(img: &Image, d: f64) -> Result<Image> {
    TransformKind::Bright.check(d)?;
    if d == 0.0 {
        return Ok(img.clone());
    }
    Ok(img.with_pixels(img.pixels.iter().map(|p| (p + d).clamp(0.0, 255.0)).collect()))
}

/// Scales every pixel by `d`, clipping to `[0, 255]`.
pub fn contrast(img: &Image, d: f64) -> Result<Image> {
    TransformKind::Contrast.check(d)?;
    if d == 1.0 {
        return Ok(img.clone());
    }
    Ok(img.with_pixels(img.pixels.iter().map(|p| (p * d).clamp(0.0, 255.0)).collect()))
}

/// Crops the centered `round(H/d) × round(W/d)` window and resizes it back to
/// `H × W` with bilinear interpolation (pixel-center alignment, edge clamp).
pub fn zoom(img: &Image, d: f64) -> Result<Image> {
    TransformKind::Zoom.check(d)?;
    if d == 1.0 {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let (ch_f, cw_f) = (h as f64 / d, w as f64 / d);
    if ch_f < 1.0 || cw_f < 1.0 {
        return Err(Error::Range {
            what: "zoom crop size",
            value: ch_f.min(cw_f),
            range: "[1, inf) pixels",
        });
    }
    let crop_h = (ch_f.round() as usize).clamp(1, h);
    let crop_w = (cw_f.round() as usize).clamp(1, w);
    let top = (h - crop_h) / 2;
    let left = (w - crop_w) / 2;

    let sy = crop_h as f64 / h as f64;
    let sx = crop_w as f64 / w as f64;
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        let (y0, y1, fy) = bilinear_axis(y, sy, crop_h);
        for x in 0..w {
            let (x0, x1, fx) = bilinear_axis(x, sx, crop_w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| img.get(top + yy, left + xx, ch);
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                out[(y * w + x) * c + ch] = v.clamp(0.0, 255.0);
            }
        }
    }
    Ok(img.with_pixels(out))
}

/// Source neighbours and weight along one axis for output index `i` when
/// resizing a length-`n` source with scale `src/dst = s`.
fn bilinear_axis(i: usize, s: f64, n: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// Degrees used to synthesize out-of-distribution inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeDegrees {
    pub blur: f64,
    pub bright: f64,
    pub contrast: f64,
    pub zoom: f64,
}

impl Default for ExtremeDegrees {
    fn default() -> Self {
        Self {
            blur: 4.5,
            bright: 240.0,
            contrast: 0.02,
            zoom: 4.5,
        }
    }
}

impl ExtremeDegrees {
    pub fn get(&self, kind: TransformKind) -> f64 {
        match kind {
            TransformKind::Blur => self.blur,
            TransformKind::Bright => self.bright,
            TransformKind::Contrast => self.contrast,
            TransformKind::Zoom => self.zoom,
        }
    }
}

pub fn make_extreme(img: &Image, kind: TransformKind) -> Result<Image> {
    make_extreme_with(img, kind, &ExtremeDegrees::default())
}

pub fn make_extreme_with(img: &Image, kind: TransformKind, degrees: &ExtremeDegrees) -> Result<Image> {
    apply(img, kind, degrees.get(kind))
}

/// Anything that assigns a class label to an image.
pub trait LabelPredictor {
    fn predict(&self, img: &Image) -> Result<usize>;

    fn predict_batch(&self, imgs: &[Image]) -> Result<Vec<usize>> {
        imgs.iter().map(|i| self.predict(i)).collect()
    }
}

impl LabelPredictor for Classifier {
    fn predict(&self, img: &Image) -> Result<usize> {
        Ok(Classifier::predict(self, &features_matrix(std::slice::from_ref(img))?)?[0])
    }

    fn predict_batch(&self, imgs: &[Image]) -> Result<Vec<usize>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let parts = imgs
            .par_chunks(256)
            .map(|chunk| Classifier::predict(self, &features_matrix(chunk)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }
}

/// Grid for the crash-degree scan: degrees `start + k·step` for `k = 0, 1, …`
/// while legal for the kind and not past `max` (in the scan direction).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashSearch {
    pub step: f64,
    pub max: f64,
    /// Round transformed pixels to integers before probing the classifier.
    #[serde(default)]
    pub quantize: bool,
}

impl CrashSearch {
    pub fn default_for(kind: TransformKind) -> Self {
        let (step, max) = match kind {
            TransformKind::Blur => (0.25, 4.75),
            TransformKind::Bright => (8.0, 248.0),
            TransformKind::Contrast => (-0.05, 0.05),
            TransformKind::Zoom => (0.2, 4.8),
        };
        Self {
            step,
            max,
            quantize: false,
        }
    }

    /// Grid degrees in scan order.
    pub fn grid(&self, kind: TransformKind) -> Result<Vec<f64>> {
        if !(self.step.is_finite() && self.step != 0.0) || !self.max.is_finite() {
            return Err(Error::Range {
                what: "crash search step",
                value: self.step,
                range: "finite and non-zero",
            });
        }
        let start = kind.identity_degree();
        // The identity degree sits at one end of every legal range, so the
        // scan must move into the range.
        let inward = if matches!(kind, TransformKind::Contrast) {
            self.step < 0.0
        } else {
            self.step > 0.0
        };
        if !inward {
            return Err(Error::Range {
                what: "crash search step",
                value: self.step,
                range: if kind == TransformKind::Contrast { "(-1, 0)" } else { "(0, inf)" },
            });
        }
        let mut grid = Vec::new();
        for k in 0.. {
            let d = start + k as f64 * self.step;
            let past_max = if self.step > 0.0 { d > self.max + 1e-12 } else { d < self.max - 1e-12 };
            if past_max || !kind.is_legal(d) {
                break;
            }
            grid.push(d);
        }
        Ok(grid)
    }
}

fn probe(img: &Image, kind: TransformKind, degree: f64, search: &CrashSearch) -> Result<Image> {
    let out = apply(img, kind, degree)?;
    Ok(if search.quantize { out.quantized() } else { out })
}

/// First degree on the scan grid at which `clf` mispredicts `img` (whose true
/// label is `label`), or `None` if it never does. The grid starts at the
/// identity degree, so an image that is already mispredicted yields it.
pub fn find_crash_degree<P: LabelPredictor + ?Sized>(
    img: &Image,
    label: usize,
    clf: &P,
    kind: TransformKind,
    search: &CrashSearch,
) -> Result<Option<f64>> {
    for d in search.grid(kind)? {
        if clf.predict(&probe(img, kind, d, search)?)? != label {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

/// Batched [`find_crash_degree`]: one classifier call per grid degree over
/// the images that have not crashed yet. Returns the degree and the
/// transformed image for every image that crashes.
pub fn find_crash_degrees<P: LabelPredictor + Sync + ?Sized>(
    images: &[Image],
    labels: &[usize],
    clf: &P,
    kind: TransformKind,
    search: &CrashSearch,
) -> Result<Vec<Option<(f64, Image)>>> {
    if images.len() != labels.len() {
        return Err(Error::dim("crash search labels", images.len(), labels.len()));
    }
    let mut found: Vec<Option<(f64, Image)>> = vec![None; images.len()];
    let mut pending: Vec<usize> = (0..images.len()).collect();
    for d in search.grid(kind)? {
        if pending.is_empty() {
            break;
        }
        let probes = pending
            .par_iter()
            .map(|&i| probe(&images[i], kind, d, search))
            .collect::<Result<Vec<_>>>()?;
        let preds = clf.predict_batch(&probes)?;
        let mut still = Vec::with_capacity(pending.len());
        for ((i, img), p) in pending.into_iter().zip(probes).zip(preds) {
            if p != labels[i] {
                found[i] = Some((d, img));
            } else {
                still.push(i);
            }
        }
        pending = still;
    }
    Ok(found)
}
