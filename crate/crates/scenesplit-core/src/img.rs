//! Image containers and file formats.
//!
//! Pixels are stored row-major, f32, with RGB in [0, 1]. PNG is used for
//! images and masks; depth maps and feature/response tensors are raw
//! little-endian f32 (the tensor files carry a small u32 dimension header,
//! depth maps are exactly width*height floats).

use crate::error::{Error, Result};
use std::fs;
use std::io::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> ImageRgb {
        ImageRgb {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn npixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> GrayImage {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, v: f32) -> GrayImage {
        GrayImage {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }
}

/// Hard binary mask. Soft masks live in `GrayImage`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinMask {
    pub fn new(width: usize, height: usize) -> BinMask {
        BinMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, v: bool) -> BinMask {
        BinMask {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, o: &BinMask) -> BinMask {
        assert_eq!((self.width, self.height), (o.width, o.height));
        BinMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&o.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    pub fn complement(&self) -> BinMask {
        BinMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&a| !a).collect(),
        }
    }

    /// Morphological dilation with a Euclidean disc of the given radius.
    pub fn dilated(&self, radius: usize) -> BinMask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as i64;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    offsets.push((dx, dy));
                }
            }
        }
        let mut out = BinMask::new(self.width, self.height);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                if !self.data[(y as usize) * self.width + x as usize] {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < self.width as i64 && ny < self.height as i64 {
                        out.data[(ny as usize) * self.width + nx as usize] = true;
                    }
                }
            }
        }
        out
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn from_gray_threshold(g: &GrayImage, thresh: f32) -> BinMask {
        BinMask {
            width: g.width,
            height: g.height,
            data: g.data.iter().map(|&v| v > thresh).collect(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png_rgb(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.get(x, y);
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])]),
            );
        }
    }
    out.save(path)
        .map_err(|e| Error::file_format(path, format!("png encode: {e}")))
}

pub fn load_png_rgb(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path)
        .map_err(|e| Error::file_format(path, format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageRgb::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set(
                x,
                y,
                [
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ],
            );
        }
    }
    Ok(out)
}

/// Masks are 8-bit grayscale PNG, 255 = inside.
pub fn save_png_mask(path: &Path, mask: &BinMask) -> Result<()> {
    let mut out = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask.get(x, y) { 255 } else { 0 }]),
            );
        }
    }
    out.save(path)
        .map_err(|e| Error::file_format(path, format!("png encode: {e}")))
}

pub fn load_png_mask(path: &Path) -> Result<BinMask> {
    let img = image::open(path)
        .map_err(|e| Error::file_format(path, format!("png decode: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = BinMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get_pixel(x as u32, y as u32)[0] >= 128);
        }
    }
    Ok(out)
}

/// Raw little-endian f32 array, no header (used for depth maps).
pub fn save_f32_raw(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_f32_raw(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::file_format(
            path,
            format!(
                "expected {} bytes ({expected_len} f32), found {}",
                expected_len * 4,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Tensor file: u32-LE dims header followed by the f32-LE data, innermost
/// dimension last (a feature map is (width, height, channels) with data laid
/// out row-major, channels fastest).
pub fn save_f32_tensor(path: &Path, dims: &[u32], data: &[f32]) -> Result<()> {
    let expect: usize = dims.iter().map(|&d| d as usize).product();
    assert_eq!(expect, data.len(), "tensor dims do not match data length");
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(4 * (dims.len() + data.len()));
    for d in dims {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_f32_tensor(path: &Path, ndims: usize) -> Result<(Vec<u32>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < ndims * 4 {
        return Err(Error::file_format(path, "truncated tensor header"));
    }
    let dims: Vec<u32> = bytes[..ndims * 4]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let expect: usize = dims.iter().map(|&d| d as usize).product();
    let body = &bytes[ndims * 4..];
    if body.len() != expect * 4 {
        return Err(Error::file_format(
            path,
            format!("tensor body: expected {} f32, found {} bytes", expect, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

/// Exact area-average downsampling (handles non-integer ratios); target must
/// not exceed the source in either dimension.
pub fn downsample_area_rgb(src: &ImageRgb, tw: usize, th: usize) -> Result<ImageRgb> {
    if tw > src.width || th > src.height || tw == 0 || th == 0 {
        return Err(Error::InvalidInput(format!(
            "downsample target {tw}x{th} invalid for source {}x{}",
            src.width, src.height
        )));
    }
    if tw == src.width && th == src.height {
        return Ok(src.clone());
    }
    let mut out = ImageRgb::new(tw, th);
    resample_area(
        src.width,
        src.height,
        tw,
        th,
        |x, y| src.get(x, y),
        |x, y, v: [f64; 3]| out.set(x, y, [v[0] as f32, v[1] as f32, v[2] as f32]),
        [0.0f64; 3],
        |acc, px, w| {
            [
                acc[0] + px[0] as f64 * w,
                acc[1] + px[1] as f64 * w,
                acc[2] + px[2] as f64 * w,
            ]
        },
        |acc, inv| [acc[0] * inv, acc[1] * inv, acc[2] * inv],
    );
    Ok(out)
}

pub fn downsample_area_gray(src: &GrayImage, tw: usize, th: usize) -> Result<GrayImage> {
    if tw > src.width || th > src.height || tw == 0 || th == 0 {
        return Err(Error::InvalidInput(format!(
            "downsample target {tw}x{th} invalid for source {}x{}",
            src.width, src.height
        )));
    }
    if tw == src.width && th == src.height {
        return Ok(src.clone());
    }
    let mut out = GrayImage::new(tw, th);
    resample_area(
        src.width,
        src.height,
        tw,
        th,
        |x, y| src.get(x, y),
        |x, y, v: f64| out.set(x, y, v as f32),
        0.0f64,
        |acc, px, w| acc + px as f64 * w,
        |acc, inv| acc * inv,
    );
    Ok(out)
}

/// Shared area-weighted accumulation over the overlap of destination cells
/// with source pixels.
#[allow(clippy::too_many_arguments)]
fn resample_area<P: Copy, A: Copy>(
    sw: usize,
    sh: usize,
    tw: usize,
    th: usize,
    get: impl Fn(usize, usize) -> P,
    mut set: impl FnMut(usize, usize, A),
    zero: A,
    add: impl Fn(A, P, f64) -> A,
    finish: impl Fn(A, f64) -> A,
) {
    let sx = sw as f64 / tw as f64;
    let sy = sh as f64 / th as f64;
    for ty in 0..th {
        let y0 = ty as f64 * sy;
        let y1 = y0 + sy;
        let iy0 = y0.floor() as usize;
        let iy1 = (y1.ceil() as usize).min(sh);
        for tx in 0..tw {
            let x0 = tx as f64 * sx;
            let x1 = x0 + sx;
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(sw);
            let mut acc = zero;
            for iy in iy0..iy1 {
                let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for ix in ix0..ix1 {
                    let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    if wx == 0.0 {
                        continue;
                    }
                    acc = add(acc, get(ix, iy), wx * wy);
                }
            }
            acc = finish(acc, 1.0 / (sx * sy));
            set(tx, ty, acc);
        }
    }
}

/// Nearest-neighbor upsampling for masks (each target pixel copies the source
/// pixel its center falls into).
pub fn upsample_nearest_mask(src: &BinMask, tw: usize, th: usize) -> BinMask {
    let mut out = BinMask::new(tw, th);
    for ty in 0..th {
        let sy = (((ty as f64 + 0.5) * src.height as f64 / th as f64) as usize).min(src.height - 1);
        for tx in 0..tw {
            let sx = (((tx as f64 + 0.5) * src.width as f64 / tw as f64) as usize).min(src.width - 1);
            out.set(tx, ty, src.get(sx, sy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn png_rgb_roundtrip_is_exact_for_quantized_values() {
        let dir = tempdir().unwrap();
        let mut img = ImageRgb::new(5, 4);
        for y in 0..4 {
            for x in 0..5 {
                // Values that are exactly representable as v/255.
                img.set(
                    x,
                    y,
                    [
                        (x * 50) as f32 / 255.0,
                        (y * 60) as f32 / 255.0,
                        ((x + y) * 20) as f32 / 255.0,
                    ],
                );
            }
        }
        let p = dir.path().join("img.png");
        save_png_rgb(&p, &img).unwrap();
        let back = load_png_rgb(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempdir().unwrap();
        let mut m = BinMask::new(7, 3);
        m.set(0, 0, true);
        m.set(6, 2, true);
        m.set(3, 1, true);
        let p = dir.path().join("m.png");
        save_png_mask(&p, &m).unwrap();
        assert_eq!(load_png_mask(&p).unwrap(), m);
    }

    #[test]
    fn f32_raw_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let data: Vec<f32> = (0..100).map(|i| (i as f32).sin() * 10.0).collect();
        let p = dir.path().join("d.bin");
        save_f32_raw(&p, &data).unwrap();
        let back = load_f32_raw(&p, 100).unwrap();
        assert_eq!(data, back);
        assert!(load_f32_raw(&p, 99).is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let dir = tempdir().unwrap();
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        let p = dir.path().join("t.bin");
        save_f32_tensor(&p, &[4, 3, 2], &data).unwrap();
        let (dims, back) = load_f32_tensor(&p, 3).unwrap();
        assert_eq!(dims, vec![4, 3, 2]);
        assert_eq!(back, data);
    }

    #[test]
    fn downsample_2x_averages_blocks() {
        let mut src = ImageRgb::new(4, 2);
        for y in 0..2 {
            for x in 0..4 {
                src.set(x, y, [(y * 4 + x) as f32, 0.0, 1.0]);
            }
        }
        let out = downsample_area_rgb(&src, 2, 1).unwrap();
        // Each output pixel is the mean of its 2x2 source block.
        let m00 = (0.0 + 1.0 + 4.0 + 5.0) / 4.0;
        let m10 = (2.0 + 3.0 + 6.0 + 7.0) / 4.0;
        assert!((out.get(0, 0)[0] - m00).abs() < 1e-6);
        assert!((out.get(1, 0)[0] - m10).abs() < 1e-6);
        assert!((out.get(0, 0)[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn downsample_noninteger_ratio_preserves_mean() {
        let mut src = GrayImage::new(7, 5);
        for (i, v) in src.data.iter_mut().enumerate() {
            *v = (i % 13) as f32;
        }
        let src_mean: f64 = src.data.iter().map(|&v| v as f64).sum::<f64>() / 35.0;
        let out = downsample_area_gray(&src, 3, 2).unwrap();
        // Area weighting is exact, so the overall mean is preserved.
        let out_mean: f64 = out.data.iter().map(|&v| v as f64).sum::<f64>() / 6.0;
        assert!((src_mean - out_mean).abs() < 1e-4);
    }

    #[test]
    fn downsample_rejects_upscale() {
        let src = GrayImage::new(4, 4);
        assert!(downsample_area_gray(&src, 8, 4).is_err());
    }

    #[test]
    fn nearest_upsample_blocks() {
        let mut m = BinMask::new(2, 1);
        m.set(1, 0, true);
        let up = upsample_nearest_mask(&m, 4, 2);
        for y in 0..2 {
            assert!(!up.get(0, y) && !up.get(1, y));
            assert!(up.get(2, y) && up.get(3, y));
        }
    }

    #[test]
    fn dilation_grows_a_disc() {
        let mut m = BinMask::new(9, 9);
        m.set(4, 4, true);
        let d = m.dilated(2);
        // Every pixel within Euclidean distance 2 of the center, only those.
        for y in 0..9i64 {
            for x in 0..9i64 {
                let inside = (x - 4).pow(2) + (y - 4).pow(2) <= 4;
                assert_eq!(d.get(x as usize, y as usize), inside, "({x},{y})");
            }
        }
        assert_eq!(m.dilated(0).data, m.data);
        // Dilation clips at borders without panicking.
        let mut edge = BinMask::new(3, 3);
        edge.set(0, 0, true);
        assert_eq!(edge.dilated(2).count(), 6);
    }
}
