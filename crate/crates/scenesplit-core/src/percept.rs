//! Pixel appearance features and the coarse foreground/background split.
//!
//! Every pixel gets a 32-channel response vector from a fixed filter bank
//! (color, multi-scale blur, gradient energy, oriented even/odd derivative
//! pairs, local contrast, Laplacian), normalized per channel to zero mean and
//! unit variance over the training views. Pixels are additionally lifted to
//! 3D through their camera ray and depth, and a two-cluster split separates
//! foreground from background with an asymmetric distance: the foreground
//! cluster is compact in both feature and 3D position space, while the
//! background cluster ignores position entirely (backgrounds are spatially
//! spread out; their pixels agree in appearance only).

use crate::error::{Error, Result};
use crate::geom::{Aabb, CameraModel, Vec3};
use crate::img::{BinMask, GrayImage, ImageRgb};
use crate::seed::{self, tags};
use rand::Rng;

/// Number of filter-bank channels.
pub const FEATURE_DIM: usize = 32;

/// Default dilation radius for binary masks that supervise downstream
/// training: a small margin absorbs boundary error without swallowing the
/// scene.
pub const DILATION_RADIUS: usize = 2;

/// Dense per-pixel response vectors, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl ResponseMap {
    pub fn new(width: usize, height: usize, dim: usize) -> ResponseMap {
        ResponseMap {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn npixels(&self) -> usize {
        self.width * self.height
    }
}

// ---------------------------------------------------------------------------
// Filters

pub fn luminance(img: &ImageRgb) -> GrayImage {
    let mut out = GrayImage::new(img.width, img.height);
    for (i, px) in img.data.iter().enumerate() {
        out.data[i] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

#[inline]
fn clamp_get(img: &GrayImage, x: i64, y: i64) -> f32 {
    let cx = x.clamp(0, img.width as i64 - 1) as usize;
    let cy = y.clamp(0, img.height as i64 - 1) as usize;
    img.get(cx, cy)
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width, img.height);
    let mut tmp = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * clamp_get(img, x as i64 + j as i64 - r, y as i64);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * clamp_get(&tmp, x as i64, y as i64 + j as i64 - r);
            }
            out.set(x, y, acc);
        }
    }
    out
}

fn central_dx(img: &GrayImage) -> GrayImage {
    let mut out = GrayImage::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = 0.5 * (clamp_get(img, x as i64 + 1, y as i64) - clamp_get(img, x as i64 - 1, y as i64));
            out.set(x, y, v);
        }
    }
    out
}

fn central_dy(img: &GrayImage) -> GrayImage {
    let mut out = GrayImage::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = 0.5 * (clamp_get(img, x as i64, y as i64 + 1) - clamp_get(img, x as i64, y as i64 - 1));
            out.set(x, y, v);
        }
    }
    out
}

/// Standard deviation over a clamped square window.  The accumulation runs
/// in f64 because the f32 difference of the two moments cancels
/// catastrophically on near-uniform patches, leaving noise of the order
/// sqrt(eps) instead of a clean zero.
fn box_std(img: &GrayImage, radius: i64) -> GrayImage {
    let mut out = GrayImage::new(img.width, img.height);
    let inv = 1.0 / ((2 * radius + 1) * (2 * radius + 1)) as f64;
    for y in 0..img.height {
        for x in 0..img.width {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let v = clamp_get(img, x as i64 + dx, y as i64 + dy) as f64;
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s * inv;
            let var = (s2 * inv - mean * mean).max(0.0);
            out.set(x, y, var.sqrt() as f32);
        }
    }
    out
}

/// Spatial pooling scale for rectified energy channels.
const POOL_SIGMA: f64 = 1.5;

/// Channel layout of [`filter_bank_responses`]; oriented channels pair
/// orientations across a 90 degree rotation, which the tests exploit.
///
/// - 0..3   raw R, G, B
/// - 3..6   RGB blurred, sigma 1
/// - 6..9   RGB blurred, sigma 2.5
/// - 9      saturation (max - min) / (max + eps)
/// - 10..12 gradient magnitude of luminance at sigma 1, 2.5
/// - 12..20 sigma 1: odd (first-derivative) responses at 0/45/90/135
///          degrees, then even (second-derivative) responses at the same
///          angles, absolute values
/// - 20..28 same at sigma 2.5
/// - 28..30 local standard deviation of luminance, 3x3 and 7x7 boxes
/// - 30..32 normalized opponent color: (R - G) and (R + G - 2B) / 2, both
///          over (max + eps)
///
/// The chroma channels (9, 30, 31) are ratios, so uniform intensity
/// scaling cancels: a shaded dark face of a colored surface keeps the
/// chroma of its lit side, which is what separates colored objects from an
/// achromatic background regardless of shading.
///
/// Rectified derivative channels (10..28) are pooled with a Gaussian and
/// square-root compressed, so pixels describe the texture of their
/// neighborhood rather than the phase of the nearest edge; without
/// pooling, clustering splits edge pixels from flat pixels instead of
/// separating regions.
pub fn filter_bank_responses(img: &ImageRgb) -> ResponseMap {
    let (w, h) = (img.width, img.height);
    let lum = luminance(img);
    let mut channels: Vec<GrayImage> = Vec::with_capacity(FEATURE_DIM);

    // 0..9: color channels, raw and blurred.
    let mut rgb_ch = Vec::with_capacity(3);
    for c in 0..3 {
        let mut g = GrayImage::new(w, h);
        for (i, px) in img.data.iter().enumerate() {
            g.data[i] = px[c];
        }
        rgb_ch.push(g);
    }
    for g in &rgb_ch {
        channels.push(g.clone());
    }
    for sigma in [1.0, 2.5] {
        for c in 0..3 {
            channels.push(gaussian_blur(&rgb_ch[c], sigma));
        }
    }

    // 9: saturation.
    const CHROMA_EPS: f32 = 0.05;
    {
        let mut g = GrayImage::new(w, h);
        for (i, px) in img.data.iter().enumerate() {
            let mx = px[0].max(px[1]).max(px[2]);
            let mn = px[0].min(px[1]).min(px[2]);
            g.data[i] = (mx - mn) / (mx + CHROMA_EPS);
        }
        channels.push(g);
    }

    // 10..28 interleave per scale below; build both scales' stacks first.
    const SQ2: f32 = std::f32::consts::FRAC_1_SQRT_2;
    // (cos, sin) for 0, 45, 90, 135 degrees.
    let dirs: [(f32, f32); 4] = [(1.0, 0.0), (SQ2, SQ2), (0.0, 1.0), (-SQ2, SQ2)];
    let mut grad_mags = Vec::new();
    let mut oriented = Vec::new();
    for sigma in [1.0f64, 2.5] {
        let b = gaussian_blur(&lum, sigma);
        let gx = central_dx(&b);
        let gy = central_dy(&b);
        let gxx = central_dx(&gx);
        let gxy = central_dy(&gx);
        let gyy = central_dy(&gy);
        let mut mag = GrayImage::new(w, h);
        let mut ors: Vec<GrayImage> = (0..8).map(|_| GrayImage::new(w, h)).collect();
        for i in 0..w * h {
            mag.data[i] = gx.data[i].hypot(gy.data[i]);
            for (d, (c, s)) in dirs.iter().enumerate() {
                // Odd: first derivative along the direction.
                ors[d].data[i] = (c * gx.data[i] + s * gy.data[i]).abs();
                // Even: second derivative along the direction.
                ors[4 + d].data[i] = (c * c * gxx.data[i]
                    + 2.0 * c * s * gxy.data[i]
                    + s * s * gyy.data[i])
                    .abs();
            }
        }
        grad_mags.push(mag);
        oriented.push(ors);
    }
    channels.push(grad_mags[0].clone()); // 10
    channels.push(grad_mags[1].clone()); // 11
    for ors in &oriented {
        for o in ors {
            channels.push(o.clone()); // 12..28
        }
    }

    // 28..30: local contrast.
    for radius in [1i64, 3] {
        channels.push(box_std(&lum, radius));
    }

    // 30..32: normalized opponent color.
    for k in 0..2 {
        let mut g = GrayImage::new(w, h);
        for (i, px) in img.data.iter().enumerate() {
            let mx = px[0].max(px[1]).max(px[2]) + CHROMA_EPS;
            g.data[i] = if k == 0 {
                (px[0] - px[1]) / mx
            } else {
                (px[0] + px[1] - 2.0 * px[2]) / (2.0 * mx)
            };
        }
        channels.push(g);
    }
    debug_assert_eq!(channels.len(), FEATURE_DIM);

    // Pool and compress the rectified energy channels.
    for g in channels.iter_mut().take(28).skip(10) {
        let mut pooled = gaussian_blur(g, POOL_SIGMA);
        for v in &mut pooled.data {
            *v = v.max(0.0).sqrt();
        }
        *g = pooled;
    }

    let mut out = ResponseMap::new(w, h, FEATURE_DIM);
    for i in 0..w * h {
        let px = &mut out.data[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
        for (c, g) in channels.iter().enumerate() {
            px[c] = g.data[i];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization

/// Weight applied to each standardized channel so each cue group — color,
/// chroma ratios, texture energy, local contrast — contributes a fixed
/// total variance to Euclidean distances rather than a share proportional
/// to its channel count. Unweighted, the 18 energy channels outvote the 12
/// color-derived ones and clustering degenerates into busy-vs-flat
/// regardless of color. Within the budget, raw color is cheap and chroma
/// dear: absolute color varies with shading and differs between objects,
/// while chroma ratios are shading-invariant and shared by all colored
/// surfaces, so they generalize across objects where RGB votes cancel.
pub fn channel_weight(c: usize) -> f32 {
    let (budget, group_size) = if c < 9 {
        (0.5f32, 9.0f32) // raw and blurred RGB
    } else if c == 9 || c >= 30 {
        (1.5, 3.0) // saturation and opponent ratios
    } else if c < 28 {
        (1.0, 18.0) // gradient magnitudes and oriented energies
    } else {
        (1.0, 2.0) // local standard deviations
    };
    (budget / group_size).sqrt()
}

/// Per-channel affine normalization fitted over a set of maps: standardize,
/// then scale by [`channel_weight`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNormalizer {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl FeatureNormalizer {
    pub fn fit(maps: &[&ResponseMap]) -> Result<FeatureNormalizer> {
        let dim = maps.first().map(|m| m.dim).ok_or_else(|| {
            Error::InvalidInput("cannot fit a normalizer on zero maps".into())
        })?;
        let mut mean = vec![0.0f64; dim];
        let mut n = 0usize;
        for m in maps {
            if m.dim != dim {
                return Err(Error::Shape("response maps disagree in dim".into()));
            }
            for px in m.data.chunks_exact(dim) {
                for (a, &v) in mean.iter_mut().zip(px) {
                    *a += v as f64;
                }
            }
            n += m.npixels();
        }
        for a in &mut mean {
            *a /= n as f64;
        }
        let mut var = vec![0.0f64; dim];
        for m in maps {
            for px in m.data.chunks_exact(dim) {
                for (c, (a, &v)) in var.iter_mut().zip(px).enumerate() {
                    let d = v as f64 - mean[c];
                    *a += d * d;
                }
            }
        }
        Ok(FeatureNormalizer {
            mean: mean.iter().map(|&v| v as f32).collect(),
            inv_std: var
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    (1.0 / (v / n as f64).sqrt().max(1e-6)) as f32 * channel_weight(c)
                })
                .collect(),
        })
    }

    pub fn apply(&self, map: &mut ResponseMap) -> Result<()> {
        if map.dim != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalizer dim {} vs map dim {}",
                self.mean.len(),
                map.dim
            )));
        }
        for px in map.data.chunks_exact_mut(map.dim) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) * self.inv_std[c];
            }
        }
        Ok(())
    }
}

/// Filter bank plus normalization over all given images (typically the
/// training views). Returns normalized maps and the fitted normalizer so the
/// same transform can be applied to other views.
pub fn extract_features(images: &[&ImageRgb]) -> Result<(Vec<ResponseMap>, FeatureNormalizer)> {
    let mut maps: Vec<ResponseMap> = images.iter().map(|im| filter_bank_responses(im)).collect();
    let norm = FeatureNormalizer::fit(&maps.iter().collect::<Vec<_>>())?;
    for m in &mut maps {
        norm.apply(m)?;
    }
    Ok((maps, norm))
}

// ---------------------------------------------------------------------------
// 3D lifting

/// Fraction of the scene bounds (in xy) whose interior counts as the
/// working volume for lifted pixels.
const VALID_XY_FRAC: f64 = 0.8;

/// World-space point each pixel sees, through its depth. `valid` is false
/// where depth reads as escaped (at or beyond the far plane), or where the
/// point lands in the scene periphery — outside the central xy portion of
/// the bounds or far outside them vertically. Such pixels are certain
/// background: objects of interest are compact near the middle of the
/// working volume, and without the xy margin the silhouette where the
/// ground sheet ends against the void forms a high-contrast band that
/// clusters like an object.
pub fn lift_positions(
    cam: &CameraModel,
    depth: &GrayImage,
    far: f64,
    bounds: &Aabb,
) -> Result<Vec<(Vec3, bool)>> {
    cam.validate()?;
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::Shape(format!(
            "depth {}x{} vs camera {}x{}",
            depth.width, depth.height, cam.width, cam.height
        )));
    }
    let xy = bounds.scaled_about_center(VALID_XY_FRAC);
    let z = bounds.scaled_about_center(2.0);
    let mut out = Vec::with_capacity(depth.data.len());
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = depth.get(x, y) as f64;
            let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            let p = ray.at(d);
            let valid = d < far * 0.999
                && (xy.min.x..=xy.max.x).contains(&p.x)
                && (xy.min.y..=xy.max.y).contains(&p.y)
                && (z.min.z..=z.max.z).contains(&p.z);
            out.push((p, valid));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Coarse two-cluster split

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoarseConfig {
    /// Weight of the 3D position distance in the foreground score.
    pub position_weight: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Border band (fraction of the short image side) seeding the
    /// background mean.
    pub border_frac: f64,
    /// Center crop (fraction of each side) seeding the foreground mean.
    pub center_frac: f64,
}

impl Default for CoarseConfig {
    fn default() -> CoarseConfig {
        CoarseConfig {
            position_weight: 1.0,
            max_iters: 60,
            seed: 0,
            border_frac: 0.08,
            center_frac: 0.34,
        }
    }
}

/// One foreground hypothesis: a feature mean plus a 3D center in
/// normalized coordinates.
#[derive(Clone, Debug)]
pub struct FgPrototype {
    pub features: Vec<f32>,
    pub position: Vec3,
}

#[derive(Clone, Debug)]
pub struct CoarseSplit {
    /// Per-view foreground masks.
    pub fg_masks: Vec<BinMask>,
    /// Surviving foreground prototypes.
    pub prototypes: Vec<FgPrototype>,
    pub mu_bg: Vec<f32>,
    /// Centroid and scale of the position normalization.
    pub pos_center: Vec3,
    pub pos_scale: f64,
    /// Clustering objective after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Times an emptied prototype was reseeded from a random pixel.
    pub reseeds: usize,
}

/// Number of foreground prototypes the split starts from; matches the most
/// objects a scene is expected to hold. Emptied prototypes are reseeded and
/// eventually dropped, so fewer objects are fine.
pub const FG_PROTOTYPES: usize = 4;

const BG: u8 = u8::MAX;

fn dist_f(a: &[f32], mu: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&v, &m) in a.iter().zip(mu) {
        let d = v as f64 - m;
        acc += d * d;
    }
    acc.sqrt()
}

/// Splits all pixels of all views into foreground and background.
///
/// The foreground is a small set of prototypes, each an (appearance, 3D
/// center) pair scoring `||f - mu_j|| + w * ||q - p_j||` over normalized
/// lifted positions `q`; one prototype cannot cover several differently
/// colored objects, so each object gets the chance to claim its own. The
/// background is a single appearance-only score `||f - mu_bg||`: background
/// pixels agree in looks but are spread out in space, so position must not
/// count against them. A pixel is foreground when its best prototype score
/// beats the background score (ties to background; equal prototype scores
/// to the lower index).
///
/// Pixels without a valid lift are background outright and shape neither
/// the means nor the objective. A prototype that loses all pixels is
/// reseeded from a seeded random valid pixel while the reseed budget lasts,
/// then dropped. Mean updates do not strictly minimize the unsquared
/// objective, so the loop keeps the best assignment seen and stops when the
/// objective rises.
pub fn coarse_foreground_split(
    features: &[ResponseMap],
    lifted: &[Vec<(Vec3, bool)>],
    cfg: &CoarseConfig,
) -> Result<CoarseSplit> {
    if features.is_empty() || features.len() != lifted.len() {
        return Err(Error::Shape(format!(
            "{} feature maps vs {} lifted views",
            features.len(),
            lifted.len()
        )));
    }
    let dim = features[0].dim;
    let (w, h) = (features[0].width, features[0].height);
    for (f, l) in features.iter().zip(lifted) {
        if f.width != w || f.height != h || f.dim != dim || l.len() != w * h {
            return Err(Error::Shape("views disagree in size".into()));
        }
    }
    let n_views = features.len();
    let n_total = n_views * w * h;

    // Normalize valid positions to zero centroid, unit RMS radius.
    let mut centroid = Vec3::ZERO;
    let mut n_valid = 0usize;
    for l in lifted {
        for &(p, ok) in l {
            if ok {
                centroid += p;
                n_valid += 1;
            }
        }
    }
    if n_valid == 0 {
        return Err(Error::Degenerate(
            "no pixel lifted to a valid 3D position".into(),
        ));
    }
    centroid = centroid / n_valid as f64;
    let mut rms = 0.0f64;
    for l in lifted {
        for &(p, ok) in l {
            if ok {
                rms += (p - centroid).dot(p - centroid);
            }
        }
    }
    let scale = (rms / n_valid as f64).sqrt().max(1e-9);
    let norm_pos = |p: Vec3| (p - centroid) / scale;

    // Seed the background from the border band and one prototype per
    // quadrant of the center crop. Invalid-lift pixels are background by
    // fiat, so they never shape any mean: the background mean has to model
    // the appearance of pixels the clustering actually has to decide about.
    let band = ((w.min(h) as f64 * cfg.border_frac).round() as usize).max(2);
    let cw = ((w as f64 * cfg.center_frac) as usize).max(2);
    let ch = ((h as f64 * cfg.center_frac) as usize).max(2);
    let (cx0, cy0) = ((w - cw) / 2, (h - ch) / 2);
    let mut mu_bg = vec![0.0f64; dim];
    let mut n_bg = 0usize;
    let mut proto_mu = vec![vec![0.0f64; dim]; FG_PROTOTYPES];
    let mut proto_pos = vec![Vec3::ZERO; FG_PROTOTYPES];
    let mut proto_n = vec![0usize; FG_PROTOTYPES];
    for (f, l) in features.iter().zip(lifted) {
        for y in 0..h {
            for x in 0..w {
                let (p, ok) = l[y * w + x];
                if !ok {
                    continue;
                }
                let px = f.at(x, y);
                let in_border = x < band || y < band || x >= w - band || y >= h - band;
                let in_center =
                    (cx0..cx0 + cw).contains(&x) && (cy0..cy0 + ch).contains(&y);
                if in_border {
                    for (a, &v) in mu_bg.iter_mut().zip(px) {
                        *a += v as f64;
                    }
                    n_bg += 1;
                } else if in_center {
                    let q = ((x >= cx0 + cw / 2) as usize) + 2 * ((y >= cy0 + ch / 2) as usize);
                    for (a, &v) in proto_mu[q].iter_mut().zip(px) {
                        *a += v as f64;
                    }
                    proto_pos[q] += norm_pos(p);
                    proto_n[q] += 1;
                }
            }
        }
    }
    if n_bg == 0 {
        return Err(Error::Degenerate(
            "no valid pixels in the border band to seed the background".into(),
        ));
    }
    for a in &mut mu_bg {
        *a /= n_bg as f64;
    }
    let mut protos: Vec<(Vec<f64>, Vec3)> = Vec::new();
    for j in 0..FG_PROTOTYPES {
        if proto_n[j] == 0 {
            continue;
        }
        let mut mu = std::mem::take(&mut proto_mu[j]);
        for a in &mut mu {
            *a /= proto_n[j] as f64;
        }
        protos.push((mu, proto_pos[j] / proto_n[j] as f64));
    }
    if protos.is_empty() {
        return Err(Error::Degenerate(
            "no valid pixels in the center crop to seed foreground prototypes".into(),
        ));
    }

    let mut assign: Vec<u8> = vec![BG; n_total];
    let mut best_assign: Vec<u8> = vec![BG; n_total];
    let mut best_obj = f64::INFINITY;
    let mut objective = Vec::new();
    let mut reseeds = 0usize;
    let mut iterations = 0usize;

    'iterate: for _iter in 0..cfg.max_iters {
        iterations += 1;
        // Assignment pass over valid pixels; invalid ones stay background
        // and contribute nothing to the objective.
        let mut obj = 0.0f64;
        let mut changed = false;
        let mut idx = 0usize;
        let mut counts = vec![0usize; protos.len()];
        let mut bg_valid = 0usize;
        for (f, l) in features.iter().zip(lifted) {
            for (pi, &(p, ok)) in l.iter().enumerate() {
                let a = if ok {
                    let px = &f.data[pi * dim..(pi + 1) * dim];
                    let q = norm_pos(p);
                    let mut best_j = BG;
                    let mut best_s = dist_f(px, &mu_bg);
                    for (j, (mu, pos)) in protos.iter().enumerate() {
                        let s = dist_f(px, mu) + cfg.position_weight * (q - *pos).length();
                        if s < best_s {
                            best_s = s;
                            best_j = j as u8;
                        }
                    }
                    obj += best_s;
                    if best_j == BG {
                        bg_valid += 1;
                    } else {
                        counts[best_j as usize] += 1;
                    }
                    best_j
                } else {
                    BG
                };
                if assign[idx] != a {
                    changed = true;
                }
                assign[idx] = a;
                idx += 1;
            }
        }
        objective.push(obj);

        // Emptied prototypes: reseed from a random valid pixel while the
        // budget lasts, then drop. The background emptying out means the
        // prototypes swallowed the scene.
        if bg_valid == 0 {
            return Err(Error::Degenerate(
                "coarse clustering collapsed: no valid pixel assigned to background".into(),
            ));
        }
        if let Some(j0) = counts.iter().position(|&c| c == 0) {
            if reseeds < FG_PROTOTYPES {
                let mut rng =
                    seed::rng(seed::derive(cfg.seed, &[tags::CLUSTER_RESEED, reseeds as u64]));
                let target = rng.gen_range(0..n_valid);
                let mut seen = 0usize;
                'outer: for (vi, l) in lifted.iter().enumerate() {
                    for (pi, &(p, ok)) in l.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        if seen == target {
                            protos[j0].0 = features[vi].data[pi * dim..(pi + 1) * dim]
                                .iter()
                                .map(|&v| v as f64)
                                .collect();
                            protos[j0].1 = norm_pos(p);
                            break 'outer;
                        }
                        seen += 1;
                    }
                }
                reseeds += 1;
            } else {
                protos.remove(j0);
                if protos.is_empty() {
                    return Err(Error::Degenerate(
                        "coarse clustering collapsed: all foreground prototypes died".into(),
                    ));
                }
            }
            continue 'iterate;
        }

        if obj < best_obj {
            best_obj = obj;
            best_assign.copy_from_slice(&assign);
        } else if obj > best_obj {
            // Mean updates overshot the unsquared objective; keep the best.
            break;
        }
        if !changed && objective.len() > 1 {
            break;
        }

        // Update pass.
        let mut new_mu = vec![vec![0.0f64; dim]; protos.len()];
        let mut new_pos = vec![Vec3::ZERO; protos.len()];
        let mut new_n = vec![0usize; protos.len()];
        let mut bg_acc = vec![0.0f64; dim];
        let mut nb = 0usize;
        let mut idx = 0usize;
        for (f, l) in features.iter().zip(lifted) {
            for (pi, &(p, ok)) in l.iter().enumerate() {
                if ok {
                    let px = &f.data[pi * dim..(pi + 1) * dim];
                    let a = assign[idx];
                    if a == BG {
                        for (s, &v) in bg_acc.iter_mut().zip(px) {
                            *s += v as f64;
                        }
                        nb += 1;
                    } else {
                        let j = a as usize;
                        for (s, &v) in new_mu[j].iter_mut().zip(px) {
                            *s += v as f64;
                        }
                        new_pos[j] += norm_pos(p);
                        new_n[j] += 1;
                    }
                }
                idx += 1;
            }
        }
        for a in &mut bg_acc {
            *a /= nb as f64;
        }
        mu_bg = bg_acc;
        for j in 0..protos.len() {
            for a in &mut new_mu[j] {
                *a /= new_n[j] as f64;
            }
            protos[j] = (std::mem::take(&mut new_mu[j]), new_pos[j] / new_n[j] as f64);
        }
    }

    // Package the best assignment as per-view masks.
    let mut fg_masks = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let mut m = BinMask::new(w, h);
        for pi in 0..w * h {
            m.data[pi] = best_assign[v * w * h + pi] != BG;
        }
        fg_masks.push(m);
    }
    Ok(CoarseSplit {
        fg_masks,
        prototypes: protos
            .into_iter()
            .map(|(mu, pos)| FgPrototype {
                features: mu.iter().map(|&v| v as f32).collect(),
                position: pos,
            })
            .collect(),
        mu_bg: mu_bg.iter().map(|&v| v as f32).collect(),
        pos_center: centroid,
        pos_scale: scale,
        objective,
        iterations,
        reseeds,
    })
}
