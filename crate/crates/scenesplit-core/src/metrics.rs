//! Evaluation measures: mask IoU, reconstruction PSNR, normalized depth
//! error, and the assignment of unordered predicted objects to reference
//! objects.

use crate::error::{Error, Result};
use crate::img::{BinMask, GrayImage, ImageRgb};

/// Intersection over union of two binary masks. Two empty masks agree
/// perfectly, so the result is 1.
pub fn mask_iou(a: &BinMask, b: &BinMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "mask {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Peak signal-to-noise ratio in dB between two images with values in
/// [0, 1], capped at 99 dB when the mean squared error falls below 1e-10.
pub fn psnr(image: &ImageRgb, reference: &ImageRgb) -> Result<f64> {
    if image.width != reference.width || image.height != reference.height {
        return Err(Error::Shape(format!(
            "image {}x{} vs {}x{}",
            image.width, image.height, reference.width, reference.height
        )));
    }
    let mut se = 0.0f64;
    for (a, b) in image.data.iter().zip(&reference.data) {
        for c in 0..3 {
            let d = a[c] as f64 - b[c] as f64;
            se += d * d;
        }
    }
    let mse = se / (image.npixels() * 3) as f64;
    if mse < 1e-10 {
        Ok(99.0)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Mean squared depth error after both maps are shifted and scaled by the
/// reference map's min/max over the valid pixels, so the measure is
/// invariant to applying one affine map (positive scale) to both inputs.
pub fn depth_error(pred: &GrayImage, reference: &GrayImage, valid: &BinMask) -> Result<f64> {
    if pred.width != reference.width
        || pred.height != reference.height
        || valid.width != pred.width
        || valid.height != pred.height
    {
        return Err(Error::Shape(format!(
            "depth {}x{} vs {}x{} with validity {}x{}",
            pred.width, pred.height, reference.width, reference.height, valid.width, valid.height
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut n = 0usize;
    for i in 0..valid.data.len() {
        if valid.data[i] {
            let g = reference.data[i] as f64;
            lo = lo.min(g);
            hi = hi.max(g);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "no valid pixels to compare depth over".into(),
        ));
    }
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::Degenerate(
            "reference depth is constant over the valid pixels; nothing to normalize by".into(),
        ));
    }
    let inv = 1.0 / range;
    let mut se = 0.0f64;
    for i in 0..valid.data.len() {
        if valid.data[i] {
            let p = (pred.data[i] as f64 - lo) * inv;
            let g = (reference.data[i] as f64 - lo) * inv;
            se += (p - g) * (p - g);
        }
    }
    Ok(se / n as f64)
}

/// An assignment of predicted object mask stacks to reference stacks.
#[derive(Clone, Debug)]
pub struct ObjectMatching {
    /// `(predicted, reference)` index pairs of the matched objects.
    pub pairs: Vec<(usize, usize)>,
    /// Mean IoU over views for each matched pair, parallel to `pairs`.
    pub per_object: Vec<f64>,
    /// Mean over `max(predicted, reference)` objects; unmatched objects on
    /// either side count as zero.
    pub mean_iou: f64,
}

/// Finds the one-to-one assignment of predicted objects to reference
/// objects that maximizes total IoU, by exhaustive search (object counts
/// are small). Stacks are `masks[object][view]` over the same views.
pub fn best_object_matching(pred: &[Vec<BinMask>], gt: &[Vec<BinMask>]) -> Result<ObjectMatching> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput(
            "object matching needs at least one object on each side".into(),
        ));
    }
    if pred.len().max(gt.len()) > 8 {
        return Err(Error::InvalidInput(format!(
            "exhaustive matching of {} vs {} objects is not practical",
            pred.len(),
            gt.len()
        )));
    }
    let views = pred[0].len();
    if views == 0 || pred.iter().any(|s| s.len() != views) || gt.iter().any(|s| s.len() != views) {
        return Err(Error::Shape(
            "every object needs the same nonzero number of views".into(),
        ));
    }

    // Mean IoU over views for every (pred, reference) pair.
    let mut table = vec![vec![0.0f64; gt.len()]; pred.len()];
    for (i, ps) in pred.iter().enumerate() {
        for (j, gs) in gt.iter().enumerate() {
            let mut sum = 0.0;
            for v in 0..views {
                sum += mask_iou(&ps[v], &gs[v])?;
            }
            table[i][j] = sum / views as f64;
        }
    }

    // Assign each object of the smaller side to a distinct one of the
    // larger side; `swap` remembers which side is which.
    let swap = pred.len() > gt.len();
    let (rows, cols) = if swap {
        (gt.len(), pred.len())
    } else {
        (pred.len(), gt.len())
    };
    let score = |r: usize, c: usize| if swap { table[c][r] } else { table[r][c] };

    let mut best_sum = f64::NEG_INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut assign = vec![0usize; rows];
    let mut used = vec![false; cols];
    fn search(
        r: usize,
        rows: usize,
        cols: usize,
        sum: f64,
        score: &dyn Fn(usize, usize) -> f64,
        assign: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best_sum: &mut f64,
        best: &mut Vec<usize>,
    ) {
        if r == rows {
            if sum > *best_sum {
                *best_sum = sum;
                *best = assign.clone();
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                assign[r] = c;
                search(r + 1, rows, cols, sum + score(r, c), score, assign, used, best_sum, best);
                used[c] = false;
            }
        }
    }
    search(0, rows, cols, 0.0, &score, &mut assign, &mut used, &mut best_sum, &mut best);

    let mut pairs = Vec::with_capacity(rows);
    let mut per_object = Vec::with_capacity(rows);
    for (r, &c) in best.iter().enumerate() {
        let (pi, gi) = if swap { (c, r) } else { (r, c) };
        pairs.push((pi, gi));
        per_object.push(table[pi][gi]);
    }
    let mean_iou = per_object.iter().sum::<f64>() / pred.len().max(gt.len()) as f64;
    Ok(ObjectMatching {
        pairs,
        per_object,
        mean_iou,
    })
}
