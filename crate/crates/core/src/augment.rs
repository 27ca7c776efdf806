//! The stochastic two-view transformation family and a corruption generator
//! for deliberately bad positive pairs.
//!
//! A view is produced by: random resized crop, horizontal flip, colour
//! jitter (brightness, contrast, saturation in that order), random
//! grayscale, then per-channel standardization. Every step before
//! standardization keeps pixels in `[0, 1]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// One image, `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn from_dataset(ds: &ImageDataset, i: usize) -> Self {
        Self::new(ds.channels, ds.height, ds.width, ds.image(i).to_vec())
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn luma(&self, y: usize, x: usize) -> f64 {
        if self.channels == 3 {
            (0..3).map(|c| LUMA[c] * self.at(c, y, x)).sum()
        } else {
            self.at(0, y, x)
        }
    }
}

/// Per-channel standardization constants, computed from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn from_dataset(ds: &ImageDataset) -> Self {
        let (mean, std) = ds.channel_stats();
        let std = std.into_iter().map(|s| if s > 1e-8 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::dim("standardization channels", channels, self.mean.len()));
        }
        Ok(())
    }

    fn apply(&self, img: &mut Image) {
        let plane = img.height * img.width;
        for (c, p) in img.data.chunks_mut(plane).enumerate() {
            p.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
    }

    fn invert(&self, data: &mut [f64], channels: usize) {
        let plane = data.len() / channels;
        for (c, p) in data.chunks_mut(plane).enumerate() {
            p.iter_mut().for_each(|v| *v = *v * self.std[c] + self.mean[c]);
        }
    }
}

/// Jitter strengths `s`: each factor is drawn uniformly from `[1 − s, 1 + s]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    /// Bounds on the crop's fraction of the image area.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub jitter: JitterStrengths,
    pub grayscale_prob: f64,
    /// Output side length; `None` keeps the source size.
    pub output_size: Option<usize>,
    /// `None` leaves pixels unstandardized.
    pub norm: Option<ChannelNorm>,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter: JitterStrengths {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
            },
            grayscale_prob: 0.2,
            output_size: None,
            norm: None,
        }
    }
}

impl TransformSpec {
    /// The transform that only resizes and standardizes.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            jitter: JitterStrengths {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
            },
            grayscale_prob: 0.0,
            output_size: None,
            norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range [{lo}, {hi}] must satisfy 0 < low <= high <= 1"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let j = self.jitter;
        for (name, s) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("jitter {name} strength {s} must lie in [0, 1]")));
            }
        }
        if self.output_size == Some(0) {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }

    fn output_dims(&self, img: &Image) -> (usize, usize) {
        self.output_size.map_or((img.height, img.width), |s| (s, s))
    }
}

/// Bilinear sampling of the window `[y0, y0+h) × [x0, x0+w)` onto an
/// `out_h × out_w` grid. Pixel centres sit at half-integers, so source
/// coordinate `(d + 0.5)·in/out − 0.5`, clamped to the window.
fn resample(img: &Image, (y0, x0, h, w): (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Image {
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        for &(ya, yb, fy) in &ys {
            for &(xa, xb, fx) in &xs {
                let p00 = img.at(c, y0 + ya, x0 + xa);
                let p01 = img.at(c, y0 + ya, x0 + xb);
                let p10 = img.at(c, y0 + yb, x0 + xa);
                let p11 = img.at(c, y0 + yb, x0 + xb);
                let top = if fx == 0.0 { p00 } else { p00 + (p01 - p00) * fx };
                let bottom = if fx == 0.0 { p10 } else { p10 + (p11 - p10) * fx };
                data.push(if fy == 0.0 { top } else { top + (bottom - top) * fy });
            }
        }
    }
    Image::new(img.channels, out_h, out_w, data)
}

/// Bilinear resize of the whole image.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    resample(img, (0, 0, img.height, img.width), out_h, out_w)
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Crops a square-aspect window covering a uniformly drawn fraction of the
/// image area, at a uniform position, then resizes it bilinearly.
pub fn random_crop_resize(img: &Image, scale: (f64, f64), out: (usize, usize), rng: &mut ChaCha8Rng) -> Image {
    let frac = draw(rng, scale.0, scale.1);
    let side = frac.sqrt();
    let h = ((img.height as f64 * side).round() as usize).clamp(1, img.height);
    let w = ((img.width as f64 * side).round() as usize).clamp(1, img.width);
    let y0 = rng.random_range(0..=img.height - h);
    let x0 = rng.random_range(0..=img.width - w);
    resample(img, (y0, x0, h, w), out.0, out.1)
}

pub fn horizontal_flip(img: &Image) -> Image {
    let mut data = img.data.clone();
    for row in data.chunks_mut(img.width) {
        row.reverse();
    }
    Image { data, ..img.clone() }
}

/// Brightness, contrast and saturation adjustments with factors drawn from
/// `[1 − s, 1 + s]`; a zero strength skips its step. Clamped to `[0, 1]`
/// after each step.
pub fn color_jitter(img: &Image, strengths: &JitterStrengths, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    if strengths.brightness > 0.0 {
        let f = draw(rng, 1.0 - strengths.brightness, 1.0 + strengths.brightness);
        out.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if strengths.contrast > 0.0 {
        let f = draw(rng, 1.0 - strengths.contrast, 1.0 + strengths.contrast);
        let plane = out.height * out.width;
        let mean = (0..out.height)
            .flat_map(|y| (0..out.width).map(move |x| (y, x)))
            .map(|(y, x)| out.luma(y, x))
            .sum::<f64>()
            / plane as f64;
        out.data
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if strengths.saturation > 0.0 {
        let f = draw(rng, 1.0 - strengths.saturation, 1.0 + strengths.saturation);
        if out.channels == 3 {
            let gray: Vec<f64> = (0..out.height)
                .flat_map(|y| (0..out.width).map(move |x| (y, x)))
                .map(|(y, x)| out.luma(y, x))
                .collect();
            let plane = gray.len();
            for p in out.data.chunks_mut(plane) {
                for (v, g) in p.iter_mut().zip(&gray) {
                    *v = (g + (*v - g) * f).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Luma replicated across channels. Single-channel images are returned
/// unchanged.
pub fn grayscale(img: &Image) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let gray: Vec<f64> = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (y, x)))
        .map(|(y, x)| img.luma(y, x))
        .collect();
    let data = (0..3).flat_map(|_| gray.iter().copied()).collect();
    Image { data, ..img.clone() }
}

/// Applies grayscale with probability `prob`.
pub fn random_grayscale(img: &Image, prob: f64, rng: &mut ChaCha8Rng) -> Image {
    if rng.random_bool(prob) {
        grayscale(img)
    } else {
        img.clone()
    }
}

/// One draw of the transformation family, without standardization.
pub fn augment(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let out = spec.output_dims(img);
    let mut v = random_crop_resize(img, spec.crop_scale, out, rng);
    if rng.random_bool(spec.flip_prob) {
        v = horizontal_flip(&v);
    }
    if rng.random_bool(spec.jitter_prob) {
        v = color_jitter(&v, &spec.jitter, rng);
    }
    random_grayscale(&v, spec.grayscale_prob, rng)
}

/// Two augmented views of the same `N` source images.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatchPair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub source_indices: Vec<usize>,
    pub draw_seeds: Vec<u64>,
    /// Standardization applied to both views.
    pub norm: Option<ChannelNorm>,
}

impl AugmentedBatchPair {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    /// Both views stacked as `[2N, C, H, W]`, view 1 first.
    pub fn stacked(&self) -> Tensor {
        Tensor::concat_rows(&[&self.view1, &self.view2]).expect("views share shape")
    }
}

fn finish(mut img: Image, norm: Option<&ChannelNorm>) -> Image {
    if let Some(n) = norm {
        n.apply(&mut img);
    }
    img
}

/// Builds the positive pairs for `indices`. Row `i` uses sample seed
/// `derive_seed(seed, i)`, and its two views use `derive_seed(sample, 1)` and
/// `derive_seed(sample, 2)`, so rows are independent of one another.
pub fn make_pair(ds: &ImageDataset, indices: &[usize], spec: &TransformSpec, seed: u64) -> Result<AugmentedBatchPair> {
    spec.validate()?;
    if let Some(n) = &spec.norm {
        n.check(ds.channels)?;
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Contract(format!(
            "index {bad} out of range for {} images",
            ds.len()
        )));
    }
    let (oh, ow) = spec.output_size.map_or((ds.height, ds.width), |s| (s, s));
    let mut v1 = Vec::with_capacity(indices.len() * ds.channels * oh * ow);
    let mut v2 = Vec::with_capacity(v1.capacity());
    let mut seeds = Vec::with_capacity(indices.len());
    for (row, &idx) in indices.iter().enumerate() {
        let sample = derive_seed(seed, row as u64);
        seeds.push(sample);
        let img = Image::from_dataset(ds, idx);
        let a = augment(&img, spec, &mut rng_from(derive_seed(sample, 1)));
        let b = augment(&img, spec, &mut rng_from(derive_seed(sample, 2)));
        v1.extend(finish(a, spec.norm.as_ref()).data);
        v2.extend(finish(b, spec.norm.as_ref()).data);
    }
    let shape = vec![indices.len(), ds.channels, oh, ow];
    Ok(AugmentedBatchPair {
        view1: Tensor::new(shape.clone(), v1)?,
        view2: Tensor::new(shape, v2)?,
        source_indices: indices.to_vec(),
        draw_seeds: seeds,
        norm: spec.norm.clone(),
    })
}

/// Deterministic model input for evaluation: resize to the output size and
/// standardize, no random transformation.
pub fn prepare_eval(ds: &ImageDataset, indices: &[usize], spec: &TransformSpec) -> Result<Tensor> {
    let (oh, ow) = spec.output_size.map_or((ds.height, ds.width), |s| (s, s));
    let mut data = Vec::with_capacity(indices.len() * ds.channels * oh * ow);
    for &idx in indices {
        let img = Image::from_dataset(ds, idx);
        let img = if (oh, ow) == (img.height, img.width) {
            img
        } else {
            resize(&img, oh, ow)
        };
        data.extend(finish(img, spec.norm.as_ref()).data);
    }
    Tensor::new(vec![indices.len(), ds.channels, oh, ow], data)
}

/// Synthetic damage applied to the second view of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    /// All pixels zero.
    Blackout,
    /// Pixels replaced with independent `U[0, 1]` draws.
    UniformNoise,
    /// Pixels multiplied by `factor`.
    ExtremeDarken { factor: f64 },
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blackout" => Ok(Corruption::Blackout),
            "uniform_noise" | "noise" => Ok(Corruption::UniformNoise),
            "extreme_darken" | "darken" => Ok(Corruption::ExtremeDarken { factor: 0.05 }),
            other => Err(Error::Config(format!(
                "unknown corruption mode `{other}` (expected blackout, uniform_noise or extreme_darken)"
            ))),
        }
    }
}

/// Replaces view 2 with a corrupted rendition. The corruption acts on
/// unstandardized pixels; standardization is re-applied afterwards.
pub fn corrupt_view(pair: &AugmentedBatchPair, mode: Corruption, rng: &mut ChaCha8Rng) -> AugmentedBatchPair {
    let channels = pair.view2.shape()[1];
    let mut data = pair.view2.data().to_vec();
    let image_len = pair.view2.row_len();
    for img in data.chunks_mut(image_len) {
        if let Some(n) = &pair.norm {
            n.invert(img, channels);
        }
        match mode {
            Corruption::Blackout => img.fill(0.0),
            Corruption::UniformNoise => img.iter_mut().for_each(|v| *v = rng.random::<f64>()),
            Corruption::ExtremeDarken { factor } => img.iter_mut().for_each(|v| *v *= factor),
        }
        if let Some(n) = &pair.norm {
            let plane = image_len / channels;
            for (c, p) in img.chunks_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v = (*v - n.mean[c]) / n.std[c]);
            }
        }
    }
    AugmentedBatchPair {
        view2: Tensor::new(pair.view2.shape().to_vec(), data).expect("shape preserved"),
        ..pair.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn checker() -> Image {
        Image::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0])
    }

    #[test]
    fn identity_family_gives_identical_views() {
        let ds = make_synthetic(2, 3, 12, 5).unwrap();
        let mut spec = TransformSpec::identity();
        spec.output_size = Some(16);
        let pair = make_pair(&ds, &[0, 4], &spec, 77).unwrap();
        assert_eq!(pair.view1, pair.view2);
        let want = resize(&Image::from_dataset(&ds, 4), 16, 16);
        assert_eq!(pair.view1.row(1), &want.data[..]);
    }

    #[test]
    fn pair_is_deterministic() {
        let ds = make_synthetic(3, 4, 16, 2).unwrap();
        let spec = TransformSpec {
            norm: Some(ChannelNorm::from_dataset(&ds)),
            ..TransformSpec::default()
        };
        let a = make_pair(&ds, &[1, 5, 9], &spec, 123).unwrap();
        let b = make_pair(&ds, &[1, 5, 9], &spec, 123).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.view1, a.view2);
        assert_eq!(a.source_indices, vec![1, 5, 9]);
    }

    #[test]
    fn certain_flip_mirrors_rows() {
        let ds = make_synthetic(1, 2, 10, 8).unwrap();
        let spec = TransformSpec {
            flip_prob: 1.0,
            ..TransformSpec::identity()
        };
        let pair = make_pair(&ds, &[1], &spec, 3).unwrap();
        let src = ds.image(1);
        let v = pair.view1.row(0);
        for c in 0..3 {
            for y in 0..10 {
                for x in 0..10 {
                    assert_eq!(v[(c * 10 + y) * 10 + x], src[(c * 10 + y) * 10 + (9 - x)]);
                }
            }
        }
    }

    #[test]
    fn full_crop_same_size_is_identity() {
        let ds = make_synthetic(1, 1, 9, 1).unwrap();
        let img = Image::from_dataset(&ds, 0);
        let out = random_crop_resize(&img, (1.0, 1.0), (9, 9), &mut rng_from(4));
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkerboard_upsample_matches_hand_weights() {
        let out = resize(&checker(), 4, 4);
        // Source coordinates per axis: 0, 0.25, 0.75, 1 after clamping.
        #[rustfmt::skip]
        let want = [
            0.0,  0.25,  0.75,  1.0,
            0.25, 0.375, 0.625, 0.75,
            0.75, 0.625, 0.375, 0.25,
            1.0,  0.75,  0.25,  0.0,
        ];
        for (a, b) in out.data.iter().zip(want) {
            assert!((a - b).abs() <= 1e-15, "{:?}", out.data);
        }
    }

    #[test]
    fn zero_strength_jitter_is_identity() {
        let ds = make_synthetic(1, 1, 8, 2).unwrap();
        let img = Image::from_dataset(&ds, 0);
        let s = JitterStrengths {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        };
        assert_eq!(color_jitter(&img, &s, &mut rng_from(1)), img);
    }

    #[test]
    fn jitter_stays_in_unit_range() {
        let ds = make_synthetic(2, 2, 8, 2).unwrap();
        let s = JitterStrengths {
            brightness: 0.9,
            contrast: 0.9,
            saturation: 0.9,
        };
        let mut rng = rng_from(6);
        for i in 0..ds.len() {
            let out = color_jitter(&Image::from_dataset(&ds, i), &s, &mut rng);
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gray_pixels_stay_gray() {
        let img = Image::new(3, 1, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]);
        let g = grayscale(&img);
        for (a, b) in g.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let ds = make_synthetic(1, 1, 11, 3).unwrap();
        let img = Image::from_dataset(&ds, 0);
        assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
    }

    #[test]
    fn corruptions() {
        let ds = make_synthetic(2, 2, 8, 1).unwrap();
        let spec = TransformSpec::identity();
        let pair = make_pair(&ds, &[0, 3], &spec, 1).unwrap();
        let black = corrupt_view(&pair, Corruption::Blackout, &mut rng_from(0));
        assert!(black.view2.data().iter().all(|&v| v == 0.0));
        assert_eq!(black.view1, pair.view1);
        assert_eq!(black.source_indices, pair.source_indices);

        let dark = corrupt_view(&pair, "extreme_darken".parse().unwrap(), &mut rng_from(0));
        for (d, o) in dark.view2.data().iter().zip(pair.view2.data()) {
            assert_eq!(*d, 0.05 * o);
        }
        let noisy = corrupt_view(&pair, Corruption::UniformNoise, &mut rng_from(0));
        assert!(noisy.view2.data().iter().all(|v| (0.0..1.0).contains(v)));
        assert!("sepia".parse::<Corruption>().is_err());
    }

    #[test]
    fn corruption_respects_standardization() {
        let ds = make_synthetic(2, 2, 8, 1).unwrap();
        let norm = ChannelNorm::from_dataset(&ds);
        let spec = TransformSpec {
            norm: Some(norm.clone()),
            ..TransformSpec::identity()
        };
        let pair = make_pair(&ds, &[0], &spec, 1).unwrap();
        let black = corrupt_view(&pair, Corruption::Blackout, &mut rng_from(0));
        for c in 0..3 {
            let v = black.view2.data()[c * 64];
            assert!((v - (-norm.mean[c] / norm.std[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = TransformSpec {
            crop_scale: (0.0, 1.0),
            ..TransformSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = TransformSpec {
            flip_prob: 1.5,
            ..TransformSpec::default()
        };
        assert!(bad.validate().is_err());
        assert!(TransformSpec::default().validate().is_ok());
    }
}
