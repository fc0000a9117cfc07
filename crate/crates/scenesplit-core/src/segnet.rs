//! Per-scene self-labeling segmentation.
//!
//! A small convolutional scorer is trained on the scene's own views: each
//! step forwards a batch of views, takes the per-pixel argmax as pseudo
//! labels, and descends cross-entropy toward those labels plus an L1
//! continuity penalty on the score maps. Supervision is restricted to the
//! coarse foreground plus a thin border band of certain background, so the
//! network spends its classes subdividing the foreground while still
//! learning what the background looks like. One network serves all views of
//! a scene, which keeps labels comparable across views.
//!
//! The label map is then partitioned into the coarse background plus one
//! part per surviving label, small parts are discarded, and the part whose
//! mean score vector most resembles the background's is merged into it;
//! the remaining parts are the per-object masks.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use crate::diffopt::{
    adam_step,
    prim::{
        conv1x1_backward, conv1x1_forward, conv3x3_backward, conv3x3_forward,
        instance_norm_backward, instance_norm_forward, relu_backward, relu_forward, softmax_ce,
    },
    AdamParams, GradBlock, OptState, ParamBlock, Tensor,
};
use crate::error::{Error, Result};
use crate::img::{self, BinMask, ImageRgb};
use crate::percept::DILATION_RADIUS;
use crate::seed::{self, tags};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegnetConfig {
    /// Number of score channels / available labels (q).
    pub classes: usize,
    /// Channel width of the hidden convolution layers.
    pub hidden: usize,
    pub steps: usize,
    /// Views per optimization step; fewer views use them all.
    pub batch_views: usize,
    pub lr: f64,
    /// Weight of the L1 neighbor-continuity penalty on score maps.
    pub continuity_weight: f64,
    /// Width in pixels of the image-border band added to the supervision.
    pub border_band: usize,
    pub seed: u64,
}

impl Default for SegnetConfig {
    fn default() -> SegnetConfig {
        SegnetConfig {
            classes: 32,
            hidden: 32,
            steps: 64,
            batch_views: 10,
            lr: 1e-2,
            continuity_weight: 5.0,
            border_band: 4,
            seed: 0,
        }
    }
}

/// Pixels sampled per part when estimating its mean score vector.
pub const PART_MEAN_SAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainStats {
    pub steps: usize,
    /// Views actually used per step.
    pub batch_views: usize,
    /// Restarts taken after a collapse (0 or 1).
    pub restarts: usize,
    /// Distinct labels over supervised pixels after training.
    pub surviving_labels: usize,
    pub final_loss: f64,
}

/// Trained per-scene scorer. Parameters: three 3x3 conv layers and a 1x1
/// scorer, each followed by instance normalization (which makes conv biases
/// exactly dead, so there are none) and, for the hidden layers, ReLU.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub params: ParamBlock,
    pub classes: usize,
    pub hidden: usize,
    pub stats: TrainStats,
}

/// Per-pixel class scores with their argmax labels.
#[derive(Clone, Debug)]
pub struct ResponseVectorMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// Row-major, channel-last.
    pub scores: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ResponseVectorMap {
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.classes;
        &self.scores[i..i + self.classes]
    }

    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }
}

/// Index of the maximal entry; ties go to the lowest index.
pub fn argmax_label(scores: &[f32]) -> usize {
    let mut best = 0usize;
    let mut bv = f32::NEG_INFINITY;
    for (i, &v) in scores.iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Network

fn image_tensor(img: &ImageRgb) -> Tensor {
    let mut data = Vec::with_capacity(img.npixels() * 3);
    for px in &img.data {
        data.extend_from_slice(px);
    }
    Tensor {
        shape: vec![img.height, img.width, 3],
        data,
    }
}

/// He-style normal init via Box-Muller on the seeded generator.
fn init_tensor(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        *v = (z * std) as f32;
    }
    t
}

fn init_params(classes: usize, hidden: usize, seed: u64) -> ParamBlock {
    let mut rng = seed::rng(seed);
    let mut p = ParamBlock::new();
    p.insert("w1", init_tensor(&mut rng, &[3, 3, 3, hidden], 3 * 9))
        .expect("fresh block");
    p.insert("w2", init_tensor(&mut rng, &[3, 3, hidden, hidden], hidden * 9))
        .expect("fresh block");
    p.insert("w3", init_tensor(&mut rng, &[3, 3, hidden, hidden], hidden * 9))
        .expect("fresh block");
    p.insert("ws", init_tensor(&mut rng, &[hidden, classes], hidden))
        .expect("fresh block");
    p.insert("gs", Tensor::from_vec(&[classes], vec![1.0; classes]).expect("shape"))
        .expect("fresh block");
    p.insert("bs", Tensor::zeros(&[classes])).expect("fresh block");
    p
}

/// Activations needed by the backward pass. `y*` are the normalized
/// pre-activations, `a*` the ReLU outputs, `scores` the normalized output of
/// the 1x1 scorer.
struct Forward {
    x0: Tensor,
    y1: Tensor,
    s1: Vec<f32>,
    a1: Tensor,
    y2: Tensor,
    s2: Vec<f32>,
    a2: Tensor,
    y3: Tensor,
    s3: Vec<f32>,
    a3: Tensor,
    /// Normalized scorer output, before the affine.
    ys: Tensor,
    ss: Vec<f32>,
    pub scores: Tensor,
}

fn forward(params: &ParamBlock, x0: Tensor) -> Result<Forward> {
    let w1 = params.get("w1").expect("w1");
    let w2 = params.get("w2").expect("w2");
    let w3 = params.get("w3").expect("w3");
    let ws = params.get("ws").expect("ws");
    let hidden = w1.shape[3];
    let classes = ws.shape[1];
    let bh = Tensor::zeros(&[hidden]);
    let bq = Tensor::zeros(&[classes]);

    let gs = params.get("gs").expect("gs");
    let bs = params.get("bs").expect("bs");

    let (y1, s1) = instance_norm_forward(&conv3x3_forward(&x0, w1, &bh)?)?;
    let a1 = relu_forward(&y1);
    let (y2, s2) = instance_norm_forward(&conv3x3_forward(&a1, w2, &bh)?)?;
    let a2 = relu_forward(&y2);
    let (y3, s3) = instance_norm_forward(&conv3x3_forward(&a2, w3, &bh)?)?;
    let a3 = relu_forward(&y3);
    let (ys, ss) = instance_norm_forward(&conv1x1_forward(&a3, ws, &bq)?)?;
    // Per-channel affine: normalization alone would re-amplify every
    // channel to unit variance, so no class could ever fade out; the
    // learnable scale lets the continuity pressure actually retire a
    // channel.
    let mut scores = Tensor::zeros(&ys.shape);
    for p in 0..ys.shape[0] * ys.shape[1] {
        for c in 0..classes {
            scores.data[p * classes + c] = ys.data[p * classes + c] * gs.data[c] + bs.data[c];
        }
    }
    Ok(Forward {
        x0,
        y1,
        s1,
        a1,
        y2,
        s2,
        a2,
        y3,
        s3,
        a3,
        ys,
        ss,
        scores,
    })
}

/// Backpropagates a score-space gradient to the weights. Conv biases do not
/// exist: instance normalization after every convolution makes a per-channel
/// constant shift invisible to the output.
fn backward(params: &ParamBlock, f: &Forward, g_scores: &Tensor) -> Result<GradBlock> {
    let w2 = params.get("w2").expect("w2");
    let w3 = params.get("w3").expect("w3");
    let ws = params.get("ws").expect("ws");

    let gs = params.get("gs").expect("gs");
    let classes = gs.numel();
    let npix = f.ys.shape[0] * f.ys.shape[1];
    let mut g_gs = Tensor::zeros(&[classes]);
    let mut g_bs = Tensor::zeros(&[classes]);
    let mut g_ys = Tensor::zeros(&f.ys.shape);
    for p in 0..npix {
        for c in 0..classes {
            let g = g_scores.data[p * classes + c];
            g_gs.data[c] += f.ys.data[p * classes + c] * g;
            g_bs.data[c] += g;
            g_ys.data[p * classes + c] = gs.data[c] * g;
        }
    }
    let g_zs = instance_norm_backward(&f.ys, &f.ss, &g_ys)?;
    let (g_a3, g_ws, _) = conv1x1_backward(&f.a3, ws, &g_zs)?;
    let g_y3 = relu_backward(&f.y3, &g_a3)?;
    let g_z3 = instance_norm_backward(&f.y3, &f.s3, &g_y3)?;
    let (g_a2, g_w3, _) = conv3x3_backward(&f.a2, w3, &g_z3)?;
    let g_y2 = relu_backward(&f.y2, &g_a2)?;
    let g_z2 = instance_norm_backward(&f.y2, &f.s2, &g_y2)?;
    let (g_a1, g_w2, _) = conv3x3_backward(&f.a1, w2, &g_z2)?;
    let g_y1 = relu_backward(&f.y1, &g_a1)?;
    let g_z1 = instance_norm_backward(&f.y1, &f.s1, &g_y1)?;
    let (_, g_w1, _) = conv3x3_backward(&f.x0, params.get("w1").expect("w1"), &g_z1)?;

    let mut g = ParamBlock::new();
    g.insert("w1", g_w1).expect("fresh block");
    g.insert("w2", g_w2).expect("fresh block");
    g.insert("w3", g_w3).expect("fresh block");
    g.insert("ws", g_ws).expect("fresh block");
    g.insert("gs", g_gs).expect("fresh block");
    g.insert("bs", g_bs).expect("fresh block");
    Ok(g)
}

/// L1 penalty on horizontal and vertical score differences. Returns the
/// loss and adds the gradient into `g` (both scaled by `scale`).
fn continuity_loss(scores: &Tensor, scale: f32, g: &mut Tensor) -> f64 {
    let (h, w, c) = (scores.shape[0], scores.shape[1], scores.shape[2]);
    let mut loss = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * c;
            if x + 1 < w {
                let j = i + c;
                for ci in 0..c {
                    let d = scores.data[j + ci] - scores.data[i + ci];
                    loss += (scale * d.abs()) as f64;
                    let s = scale * d.signum() * if d == 0.0 { 0.0 } else { 1.0 };
                    g.data[j + ci] += s;
                    g.data[i + ci] -= s;
                }
            }
            if y + 1 < h {
                let j = i + w * c;
                for ci in 0..c {
                    let d = scores.data[j + ci] - scores.data[i + ci];
                    loss += (scale * d.abs()) as f64;
                    let s = scale * d.signum() * if d == 0.0 { 0.0 } else { 1.0 };
                    g.data[j + ci] += s;
                    g.data[i + ci] -= s;
                }
            }
        }
    }
    loss
}

/// Loss and parameter gradient of one view under fixed labels: weighted
/// cross-entropy plus the continuity penalty.
fn view_loss_grad(
    params: &ParamBlock,
    fwd: &Forward,
    labels: &[usize],
    ce_weights: &[f32],
    cont_scale: f32,
) -> Result<(f64, GradBlock)> {
    let (ce, mut g_scores) = softmax_ce(&fwd.scores, labels, ce_weights)?;
    let cont = continuity_loss(&fwd.scores, cont_scale, &mut g_scores);
    let g = backward(params, fwd, &g_scores)?;
    Ok((ce + cont, g))
}

fn accumulate(total: &mut GradBlock, part: &GradBlock) {
    for (name, t) in total.iter_mut() {
        let p = part.get(name).expect("same layout");
        for (a, &b) in t.data.iter_mut().zip(&p.data) {
            *a += b;
        }
    }
}

/// Supervision mask: coarse foreground plus the image border band.
fn supervision_mask(fg: &BinMask, band: usize) -> BinMask {
    let mut m = fg.clone();
    let (w, h) = (m.width, m.height);
    for y in 0..h {
        for x in 0..w {
            if x < band || y < band || x + band >= w || y + band >= h {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn distinct_supervised_labels(
    params: &ParamBlock,
    inputs: &[Tensor],
    sup: &[BinMask],
) -> Result<BTreeSet<usize>> {
    let mut seen = BTreeSet::new();
    for (t, m) in inputs.iter().zip(sup) {
        let fwd = forward(params, t.clone())?;
        let c = fwd.scores.shape[2];
        for (p, on) in m.data.iter().enumerate() {
            if *on {
                seen.insert(argmax_label(&fwd.scores.data[p * c..(p + 1) * c]));
            }
        }
    }
    Ok(seen)
}

/// Trains the per-scene segmenter by iterated self-labeling.
///
/// Each step samples `batch_views` views without replacement, forwards
/// them, takes per-pixel argmax labels, and applies one Adam step on
/// cross-entropy (mean over supervised pixels of the batch) plus the
/// continuity penalty (mean per pixel and view). If training ends with
/// fewer than two distinct labels on the supervised pixels, it restarts
/// once with doubled continuity weight and a fresh init; a second collapse
/// is an error.
pub fn train_segmenter(
    views: &[ImageRgb],
    fg_masks: &[BinMask],
    cfg: &SegnetConfig,
) -> Result<Segmenter> {
    if views.is_empty() || views.len() != fg_masks.len() {
        return Err(Error::Shape(format!(
            "{} views vs {} masks",
            views.len(),
            fg_masks.len()
        )));
    }
    if cfg.classes == 0 || cfg.hidden == 0 || cfg.batch_views == 0 {
        return Err(Error::InvalidInput(
            "segmenter needs classes, hidden channels, and a batch size".into(),
        ));
    }
    for (v, m) in views.iter().zip(fg_masks) {
        if v.width != m.width || v.height != m.height {
            return Err(Error::Shape(format!(
                "view {}x{} vs mask {}x{}",
                v.width, v.height, m.width, m.height
            )));
        }
    }

    let inputs: Vec<Tensor> = views.iter().map(image_tensor).collect();
    let sup: Vec<BinMask> = fg_masks
        .iter()
        .map(|m| supervision_mask(m, cfg.border_band))
        .collect();
    let sup_counts: Vec<usize> = sup.iter().map(|m| m.count()).collect();
    let n_views = views.len();
    let batch = cfg.batch_views.min(n_views);

    for attempt in 0..2u64 {
        let cont_w = cfg.continuity_weight * if attempt == 0 { 1.0 } else { 2.0 };
        let mut params = init_params(
            cfg.classes,
            cfg.hidden,
            seed::derive(cfg.seed, &[tags::SEGNET_INIT, attempt]),
        );
        let mut opt = OptState::new(&params);
        let hp = AdamParams::with_lr(cfg.lr);
        let mut final_loss = 0.0f64;

        for step in 0..cfg.steps {
            let order: Vec<usize> = if batch == n_views {
                (0..n_views).collect()
            } else {
                let mut rng = seed::rng(seed::derive(
                    cfg.seed,
                    &[tags::SEGNET_BATCH, attempt, step as u64],
                ));
                let mut idx = rand::seq::index::sample(&mut rng, n_views, batch).into_vec();
                idx.sort_unstable();
                idx
            };
            let total_sup: usize = order.iter().map(|&v| sup_counts[v]).sum();
            if total_sup == 0 {
                return Err(Error::InvalidInput(
                    "no supervised pixels: empty foreground and zero border band".into(),
                ));
            }
            let ce_w = 1.0 / total_sup as f32;

            let mut g_total = params.zeros_like();
            let mut loss = 0.0f64;
            for &v in &order {
                let fwd = forward(&params, inputs[v].clone())?;
                let c = fwd.scores.shape[2];
                let npix = views[v].npixels();
                let labels: Vec<usize> = (0..npix)
                    .map(|p| argmax_label(&fwd.scores.data[p * c..(p + 1) * c]))
                    .collect();
                let weights: Vec<f32> = sup[v]
                    .data
                    .iter()
                    .map(|&on| if on { ce_w } else { 0.0 })
                    .collect();
                let cont_scale = (cont_w / (npix * order.len()) as f64) as f32;
                let (l, g) = view_loss_grad(&params, &fwd, &labels, &weights, cont_scale)?;
                loss += l;
                accumulate(&mut g_total, &g);
            }
            adam_step(&mut params, &g_total, &mut opt, &hp)?;
            final_loss = loss;
        }

        let surviving = distinct_supervised_labels(&params, &inputs, &sup)?;
        if surviving.len() >= 2 {
            return Ok(Segmenter {
                params,
                classes: cfg.classes,
                hidden: cfg.hidden,
                stats: TrainStats {
                    steps: cfg.steps,
                    batch_views: batch,
                    restarts: attempt as usize,
                    surviving_labels: surviving.len(),
                    final_loss,
                },
            });
        }
    }
    Err(Error::Degenerate(format!(
        "segmentation collapsed to a single class twice, even after a restart with continuity \
         weight {:.1}; more classes or more distinct views may help",
        cfg.continuity_weight * 2.0
    )))
}

/// Scores the full image (background included) and labels each pixel by its
/// maximal score channel.
pub fn response_map(seg: &Segmenter, img: &ImageRgb) -> Result<ResponseVectorMap> {
    let fwd = forward(&seg.params, image_tensor(img))?;
    let scores = fwd.scores;
    if scores.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            primitive: "response_map",
            context: "score map".into(),
        });
    }
    let c = seg.classes;
    let labels: Vec<usize> = (0..img.npixels())
        .map(|p| argmax_label(&scores.data[p * c..(p + 1) * c]))
        .collect();
    Ok(ResponseVectorMap {
        width: img.width,
        height: img.height,
        classes: c,
        scores: scores.data,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Parts

/// Disjoint partition of all views' pixels: part 0 is the coarse
/// background, parts 1..=n hold the foreground pixels of one label each
/// (ascending label order, shared across views).
#[derive(Clone, Debug)]
pub struct PartSet {
    /// `masks[part][view]`.
    pub masks: Vec<Vec<BinMask>>,
    /// Mean score vector per part, estimated from sampled pixels.
    pub means: Vec<Vec<f32>>,
    /// Pixel count per part, summed over views.
    pub counts: Vec<usize>,
    /// The label that formed each foreground part (parallel to parts 1..).
    pub seg_labels: Vec<usize>,
}

/// Splits pixels into background and per-label foreground parts.
///
/// Part means are estimated from at most [`PART_MEAN_SAMPLES`] seeded
/// sample pixels per part (all pixels when a part is smaller).
pub fn partition_parts(
    rmaps: &[ResponseVectorMap],
    fg_masks: &[BinMask],
    part_seed: u64,
) -> Result<PartSet> {
    if rmaps.is_empty() || rmaps.len() != fg_masks.len() {
        return Err(Error::Shape(format!(
            "{} response maps vs {} masks",
            rmaps.len(),
            fg_masks.len()
        )));
    }
    let classes = rmaps[0].classes;
    for (r, m) in rmaps.iter().zip(fg_masks) {
        if r.width != m.width || r.height != m.height || r.classes != classes {
            return Err(Error::Shape("response maps and masks disagree in size".into()));
        }
    }
    if fg_masks.iter().map(|m| m.count()).sum::<usize>() == 0 {
        return Err(Error::Degenerate(
            "empty foreground: nothing to partition into parts".into(),
        ));
    }

    let mut label_set = BTreeSet::new();
    for (r, m) in rmaps.iter().zip(fg_masks) {
        for (p, &on) in m.data.iter().enumerate() {
            if on {
                label_set.insert(r.labels[p]);
            }
        }
    }
    let seg_labels: Vec<usize> = label_set.into_iter().collect();

    let mut masks: Vec<Vec<BinMask>> = Vec::with_capacity(seg_labels.len() + 1);
    masks.push(fg_masks.iter().map(|m| m.complement()).collect());
    for &lab in &seg_labels {
        let per_view: Vec<BinMask> = rmaps
            .iter()
            .zip(fg_masks)
            .map(|(r, m)| {
                let mut out = BinMask::new(m.width, m.height);
                for (p, &on) in m.data.iter().enumerate() {
                    out.data[p] = on && r.labels[p] == lab;
                }
                out
            })
            .collect();
        masks.push(per_view);
    }

    let counts: Vec<usize> = masks
        .iter()
        .map(|per_view| per_view.iter().map(|m| m.count()).sum())
        .collect();

    let mut means = Vec::with_capacity(masks.len());
    for (part, per_view) in masks.iter().enumerate() {
        // Canonical pixel order: view-major, then row-major.
        let mut members: Vec<(usize, usize)> = Vec::new();
        for (v, m) in per_view.iter().enumerate() {
            for (p, &on) in m.data.iter().enumerate() {
                if on {
                    members.push((v, p));
                }
            }
        }
        let chosen: Vec<(usize, usize)> = if members.len() > PART_MEAN_SAMPLES {
            let mut rng = seed::rng(seed::derive(part_seed, &[tags::PART_SAMPLE, part as u64]));
            let mut idx =
                rand::seq::index::sample(&mut rng, members.len(), PART_MEAN_SAMPLES).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| members[i]).collect()
        } else {
            members
        };
        let mut acc = vec![0.0f64; classes];
        for &(v, p) in &chosen {
            let s = &rmaps[v].scores[p * classes..(p + 1) * classes];
            for (a, &x) in acc.iter_mut().zip(s) {
                *a += x as f64;
            }
        }
        let n = chosen.len().max(1) as f64;
        means.push(acc.into_iter().map(|a| (a / n) as f32).collect());
    }

    Ok(PartSet {
        masks,
        means,
        counts,
        seg_labels,
    })
}

#[derive(Clone, Debug)]
pub struct SelectedInstances {
    /// `object_masks[object][view]`, dilated by the default mask radius.
    pub object_masks: Vec<Vec<BinMask>>,
    /// Per-view background: everything outside the undilated object parts.
    pub background: Vec<BinMask>,
    /// Part index (into the originating `PartSet`) merged into background.
    pub merged_part: usize,
    /// Part indices discarded for size.
    pub discarded: Vec<usize>,
}

/// Reduces the foreground parts to `k` object masks.
///
/// The `n - (k+1)` smallest foreground parts are discarded, then among the
/// `k+1` survivors the part whose mean score vector is nearest the
/// background's merges into the background (distance ties: larger pixel
/// count, then lower index). Survivor masks are dilated; the returned
/// background is the complement of the undilated object parts, so the
/// dilation ring is covered by both.
pub fn select_instances(parts: &PartSet, k: usize) -> Result<SelectedInstances> {
    if k == 0 {
        return Err(Error::InvalidInput("need at least one object".into()));
    }
    let n = parts.masks.len().saturating_sub(1);
    if n < k + 1 {
        return Err(Error::InvalidInput(format!(
            "{n} foreground parts cannot yield {k} objects plus a background merge; train the \
             segmenter with a larger class count"
        )));
    }

    let mut order: Vec<usize> = (1..=n).collect();
    order.sort_by_key(|&i| (parts.counts[i], i));
    let discarded: Vec<usize> = order[..n - (k + 1)].to_vec();
    let mut survivors: Vec<usize> = order[n - (k + 1)..].to_vec();
    survivors.sort_unstable();

    let bg_mean = &parts.means[0];
    let mut merged = survivors[0];
    let mut best = (f64::INFINITY, 0usize);
    for &i in &survivors {
        let d: f64 = parts.means[i]
            .iter()
            .zip(bg_mean)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let better = d < best.0
            || (d == best.0
                && (parts.counts[i] > best.1 || (parts.counts[i] == best.1 && i < merged)));
        if better {
            best = (d, parts.counts[i]);
            merged = i;
        }
    }

    let n_views = parts.masks[0].len();
    let keep: Vec<usize> = survivors.into_iter().filter(|&i| i != merged).collect();
    let object_masks: Vec<Vec<BinMask>> = keep
        .iter()
        .map(|&i| {
            parts.masks[i]
                .iter()
                .map(|m| m.dilated(DILATION_RADIUS))
                .collect()
        })
        .collect();
    let background: Vec<BinMask> = (0..n_views)
        .map(|v| {
            let mut fg = BinMask::new(parts.masks[0][v].width, parts.masks[0][v].height);
            for &i in &keep {
                fg = fg.union(&parts.masks[i][v]);
            }
            fg.complement()
        })
        .collect();

    Ok(SelectedInstances {
        object_masks,
        background,
        merged_part: merged,
        discarded,
    })
}

// ---------------------------------------------------------------------------
// Persistence

/// Writes a response map as a `[width, height, classes]` tensor file.
pub fn save_response_map(path: &Path, rmap: &ResponseVectorMap) -> Result<()> {
    img::save_f32_tensor(
        path,
        &[rmap.width as u32, rmap.height as u32, rmap.classes as u32],
        &rmap.scores,
    )
}

/// Reads a response map back; labels are recomputed from the scores.
pub fn load_response_map(path: &Path) -> Result<ResponseVectorMap> {
    let (dims, scores) = img::load_f32_tensor(path, 3)?;
    let (width, height, classes) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    if classes == 0 || scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::FileFormat {
            path: path.to_path_buf(),
            msg: "response map with zero classes or non-finite scores".into(),
        });
    }
    let labels: Vec<usize> = (0..width * height)
        .map(|p| argmax_label(&scores[p * classes..(p + 1) * classes]))
        .collect();
    Ok(ResponseVectorMap {
        width,
        height,
        classes,
        scores,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::{finite_difference_check, ClosureObjective, FdOptions};
    use crate::percept::{
        coarse_foreground_split, extract_features, lift_positions, CoarseConfig,
    };
    use crate::synth::{generate_scene, render_ground_truth, SceneSpec};

    fn two_color_view(w: usize, h: usize, left: [f32; 3], right: [f32; 3], jitter: f32) -> ImageRgb {
        let mut img = ImageRgb::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let base = if x < w / 2 { left } else { right };
                let j = jitter * seed::unit_f64((x * 31 + y * 7) as u64) as f32;
                img.set(x, y, [base[0] + j, base[1] + j, base[2] + j]);
            }
        }
        img
    }

    fn tiny_cfg() -> SegnetConfig {
        SegnetConfig {
            classes: 16,
            hidden: 16,
            steps: 60,
            ..SegnetConfig::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_frozen_labels() {
        let img = {
            let mut i = ImageRgb::new(6, 5);
            let mut rng = seed::rng(99);
            for y in 0..5 {
                for x in 0..6 {
                    i.set(x, y, [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]);
                }
            }
            i
        };
        let params = init_params(3, 4, 7);
        let input = image_tensor(&img);
        let fwd0 = forward(&params, input.clone()).unwrap();
        let labels: Vec<usize> = (0..30)
            .map(|p| argmax_label(&fwd0.scores.data[p * 3..(p + 1) * 3]))
            .collect();
        let weights = vec![1.0f32 / 30.0; 30];

        // Continuity is probed separately: its L1 kinks sit wherever two
        // neighboring scores tie, and a parameter step can push a tie
        // across zero, which finite differences feel and a subgradient
        // does not.
        let (l2, w2) = (labels.clone(), weights.clone());
        let input2 = input.clone();
        let obj = ClosureObjective {
            name: "segnet-ce".into(),
            value_fn: move |p: &ParamBlock| {
                let fwd = forward(p, input.clone())?;
                let (ce, _) = softmax_ce(&fwd.scores, &labels, &weights)?;
                Ok(ce)
            },
            grad_fn: move |p: &ParamBlock| {
                let fwd = forward(p, input2.clone())?;
                view_loss_grad(p, &fwd, &l2, &w2, 0.0)
            },
        };
        let report = finite_difference_check(
            &obj,
            &params,
            &FdOptions {
                probes: 60,
                seed: 3,
                rel_step: 3e-3,
                floor: 1e-2,
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 2e-2, "{report:?}");
    }

    #[test]
    fn continuity_gradient_matches_finite_differences() {
        // The penalty is piecewise linear in the scores; probing at a point
        // where every neighbor difference is bounded away from zero keeps
        // the finite-difference step on one linear piece, where the match
        // is exact up to f32 noise.
        let (h, w, c) = (5usize, 6usize, 3usize);
        let scores = (0u64..100)
            .map(|s| {
                let mut rng = seed::rng(s);
                let sc: Vec<f32> = (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0f32)).collect();
                sc
            })
            .find(|sc| {
                let mut min_gap = f32::INFINITY;
                for y in 0..h {
                    for x in 0..w {
                        let i = (y * w + x) * c;
                        for ci in 0..c {
                            if x + 1 < w {
                                min_gap = min_gap.min((sc[i + c + ci] - sc[i + ci]).abs());
                            }
                            if y + 1 < h {
                                min_gap = min_gap.min((sc[i + w * c + ci] - sc[i + ci]).abs());
                            }
                        }
                    }
                }
                min_gap > 0.01
            })
            .expect("some seed separates all neighbor scores");

        let mut params = ParamBlock::new();
        params
            .insert("s", Tensor::from_vec(&[h, w, c], scores).unwrap())
            .unwrap();
        let obj = ClosureObjective {
            name: "continuity".into(),
            value_fn: move |p: &ParamBlock| {
                let mut sink = Tensor::zeros(&[h, w, c]);
                Ok(continuity_loss(p.get("s").unwrap(), 0.7, &mut sink))
            },
            grad_fn: move |p: &ParamBlock| {
                let mut g = Tensor::zeros(&[h, w, c]);
                let loss = continuity_loss(p.get("s").unwrap(), 0.7, &mut g);
                let mut gb = ParamBlock::new();
                gb.insert("s", g).unwrap();
                Ok((loss, gb))
            },
        };
        let report = finite_difference_check(
            &obj,
            &params,
            &FdOptions {
                probes: 60,
                seed: 8,
                // Step stays under half the guaranteed neighbor gap, so no
                // pair changes sign; the floor absorbs f32 noise at
                // coordinates whose pair slopes cancel to an exact zero.
                rel_step: 1e-3,
                floor: 1e-2,
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 2e-2, "{report:?}");
    }

    #[test]
    fn two_flat_colors_learn_two_classes() {
        let views: Vec<ImageRgb> = (0..2)
            .map(|_| two_color_view(64, 24, [0.9, 0.2, 0.1], [0.1, 0.3, 0.9], 0.02))
            .collect();
        let fg: Vec<BinMask> = views.iter().map(|_| BinMask::filled(64, 24, true)).collect();
        let cfg = tiny_cfg();
        let seg = train_segmenter(&views, &fg, &cfg).unwrap();
        assert_eq!(seg.stats.batch_views, 2);
        assert_eq!(seg.stats.surviving_labels, 2);

        let rmap = response_map(&seg, &views[0]).unwrap();
        let mut left = std::collections::HashMap::new();
        let mut right = std::collections::HashMap::new();
        for y in 0..24 {
            for x in 0..64 {
                let h = if x < 32 { &mut left } else { &mut right };
                *h.entry(rmap.label(x, y)).or_insert(0usize) += 1;
            }
        }
        let (l_lab, l_n) = left.iter().max_by_key(|(_, &n)| n).unwrap();
        let (r_lab, r_n) = right.iter().max_by_key(|(_, &n)| n).unwrap();
        assert_ne!(l_lab, r_lab, "both halves collapsed to one label");
        assert!(*l_n >= 730, "left side purity {l_n}/768");
        assert!(*r_n >= 730, "right side purity {r_n}/768");

        // Same seed, same result, bit for bit.
        let seg2 = train_segmenter(&views, &fg, &cfg).unwrap();
        for (name, t) in seg.params.iter() {
            assert_eq!(t.data, seg2.params.get(name).unwrap().data, "{name}");
        }
    }

    #[test]
    fn ten_views_per_step_when_more_exist() {
        let views: Vec<ImageRgb> = (0..12)
            .map(|i| {
                two_color_view(
                    12,
                    12,
                    [0.8, 0.2 + 0.01 * i as f32, 0.1],
                    [0.1, 0.4, 0.8],
                    0.01,
                )
            })
            .collect();
        let fg: Vec<BinMask> = views.iter().map(|_| BinMask::filled(12, 12, true)).collect();
        let cfg = SegnetConfig {
            classes: 8,
            hidden: 8,
            steps: 6,
            ..SegnetConfig::default()
        };
        let seg = train_segmenter(&views, &fg, &cfg).unwrap();
        assert_eq!(seg.stats.batch_views, 10);
        assert!(seg.stats.surviving_labels >= 2);
    }

    #[test]
    fn single_class_collapse_restarts_then_errors() {
        let views = vec![two_color_view(8, 8, [0.9, 0.1, 0.1], [0.1, 0.1, 0.9], 0.0)];
        let fg = vec![BinMask::filled(8, 8, true)];
        let cfg = SegnetConfig {
            classes: 1,
            hidden: 4,
            steps: 2,
            ..SegnetConfig::default()
        };
        let err = train_segmenter(&views, &fg, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("restart"), "{msg}");
        assert!(msg.contains("10.0"), "doubled continuity weight in {msg}");
    }

    #[test]
    fn constant_image_yields_one_label_everywhere() {
        // Clamp-padded convolutions map a constant image to constant
        // channels, normalization sends them to zero, and the argmax tie
        // rule picks label 0 at every pixel — for any parameters.
        let seg = Segmenter {
            params: init_params(16, 16, 123),
            classes: 16,
            hidden: 16,
            stats: TrainStats::default(),
        };
        let mut img = ImageRgb::new(9, 7);
        for y in 0..7 {
            for x in 0..9 {
                img.set(x, y, [0.4, 0.5, 0.6]);
            }
        }
        let rmap = response_map(&seg, &img).unwrap();
        assert!(rmap.labels.iter().all(|&l| l == 0));

        // Argmax labels ignore a constant shift across channels.
        let mut shifted = rmap.scores.clone();
        for v in &mut shifted {
            *v += 3.25;
        }
        for p in 0..rmap.labels.len() {
            assert_eq!(
                argmax_label(&shifted[p * 16..(p + 1) * 16]),
                rmap.labels[p]
            );
        }
    }

    #[test]
    fn flat_regions_have_continuous_scores() {
        let views: Vec<ImageRgb> = (0..2)
            .map(|_| two_color_view(64, 24, [0.9, 0.2, 0.1], [0.1, 0.3, 0.9], 0.02))
            .collect();
        let fg: Vec<BinMask> = views.iter().map(|_| BinMask::filled(64, 24, true)).collect();
        let seg = train_segmenter(&views, &fg, &tiny_cfg()).unwrap();
        let rmap = response_map(&seg, &views[0]).unwrap();
        // Deep inside the left half, far from both the color boundary and
        // the image border.
        let mut worst = 0.0f32;
        for y in 8..16 {
            for x in 10..20 {
                let a = rmap.at(x, y);
                let b = rmap.at(x + 1, y);
                for c in 0..rmap.classes {
                    worst = worst.max((a[c] - b[c]).abs());
                }
            }
        }
        assert!(worst < 0.1, "neighbor score gap {worst}");
    }

    fn hand_rmap(w: usize, h: usize, classes: usize, labeling: impl Fn(usize, usize) -> usize) -> ResponseVectorMap {
        let mut scores = vec![0.0f32; w * h * classes];
        let mut labels = vec![0usize; w * h];
        for y in 0..h {
            for x in 0..w {
                let l = labeling(x, y);
                let p = y * w + x;
                scores[p * classes + l] = 1.0 + (p % 3) as f32 * 0.25;
                labels[p] = l;
            }
        }
        ResponseVectorMap {
            width: w,
            height: h,
            classes,
            scores,
            labels,
        }
    }

    #[test]
    fn partition_is_a_disjoint_cover_with_exact_means() {
        // 6x4 view: label 1 on the left of the fg, label 3 on the right,
        // plus one single-pixel label-5 part.
        let rmap = hand_rmap(6, 4, 8, |x, y| {
            if (x, y) == (4, 3) {
                5
            } else if x < 3 {
                1
            } else {
                3
            }
        });
        let mut fg = BinMask::new(6, 4);
        for y in 1..4 {
            for x in 1..6 {
                fg.set(x, y, true);
            }
        }
        let parts = partition_parts(&[rmap.clone()], &[fg.clone()], 0).unwrap();

        assert_eq!(parts.seg_labels, vec![1, 3, 5]);
        assert_eq!(parts.masks.len(), 4);
        // Part 0 is exactly the background.
        for p in 0..24 {
            assert_eq!(parts.masks[0][0].data[p], !fg.data[p]);
        }
        // Disjoint cover: every pixel in exactly one part.
        for p in 0..24 {
            let hits: usize = parts.masks.iter().map(|m| m[0].data[p] as usize).sum();
            assert_eq!(hits, 1, "pixel {p}");
        }
        assert_eq!(
            parts.counts.iter().sum::<usize>(),
            24,
            "counts sum to the pixel count"
        );
        // The single-pixel part's mean is that pixel's score vector.
        let single = parts.seg_labels.iter().position(|&l| l == 5).unwrap() + 1;
        assert_eq!(parts.counts[single], 1);
        assert_eq!(parts.means[single], rmap.at(4, 3).to_vec());

        // All-foreground-one-label degenerates to {background, one part}.
        let rmap1 = hand_rmap(6, 4, 8, |_, _| 2);
        let parts1 = partition_parts(&[rmap1], &[fg.clone()], 0).unwrap();
        assert_eq!(parts1.masks.len(), 2);

        // Empty foreground errors.
        let rmap2 = hand_rmap(6, 4, 8, |_, _| 2);
        let none = BinMask::new(6, 4);
        assert!(partition_parts(&[rmap2], &[none], 0).is_err());
    }

    #[test]
    fn part_means_subsample_large_parts_deterministically() {
        let rmap = hand_rmap(40, 30, 4, |x, _| if x < 20 { 1 } else { 2 });
        let fg = BinMask::filled(40, 30, true);
        let a = partition_parts(&[rmap.clone()], &[fg.clone()], 9).unwrap();
        let b = partition_parts(&[rmap], &[fg], 9).unwrap();
        assert!(a.counts[1] > PART_MEAN_SAMPLES);
        assert_eq!(a.means, b.means);
    }

    /// Builds a PartSet directly: part sizes and means are the test's to
    /// choose, uncoupled from any network.
    fn hand_parts(counts: &[usize], means: &[Vec<f32>], w: usize, h: usize) -> PartSet {
        // Lay parts out left to right, one column stripe per pixel, top
        // down; sizes must fit the canvas.
        let mut masks: Vec<Vec<BinMask>> = Vec::new();
        let mut cursor = 0usize;
        for &n in counts {
            let mut m = BinMask::new(w, h);
            for i in 0..n {
                let p = cursor + i;
                m.set(p % w, p / w, true);
            }
            cursor += n;
            masks.push(vec![m]);
        }
        assert!(cursor <= w * h, "parts overflow the canvas");
        // Background absorbs the rest.
        let mut bg = BinMask::new(w, h);
        for p in cursor..w * h {
            bg.set(p % w, p / w, true);
        }
        masks[0] = vec![masks[0][0].union(&bg)];
        PartSet {
            masks,
            means: means.to_vec(),
            counts: counts.to_vec(),
            seg_labels: (1..counts.len()).collect(),
        }
    }

    #[test]
    fn selection_discards_smallest_then_merges_nearest_to_background() {
        let mean = |v: f32| vec![v, 0.0, 0.0];
        // Background mean 0; parts at distances 5, 1, 9; sizes 40, 30, 2.
        // k=1: discard the 2-pixel part, merge the distance-1 part, keep
        // the distance-5 part.
        let parts = hand_parts(
            &[10, 40, 30, 2],
            &[mean(0.0), mean(5.0), mean(1.0), mean(9.0)],
            12,
            10,
        );
        let sel = select_instances(&parts, 1).unwrap();
        assert_eq!(sel.discarded, vec![3]);
        assert_eq!(sel.merged_part, 2);
        assert_eq!(sel.object_masks.len(), 1);
        // The kept mask is part 1 dilated: strictly larger, containing it.
        let kept = &sel.object_masks[0][0];
        let orig = &parts.masks[1][0];
        assert!(kept.count() > orig.count());
        for p in 0..12 * 10 {
            assert!(!orig.data[p] || kept.data[p]);
        }
        // Background is the complement of the undilated kept part.
        for p in 0..12 * 10 {
            assert_eq!(sel.background[0].data[p], !orig.data[p]);
        }

        // n = k+1: nothing discarded, only the merge.
        let parts2 = hand_parts(&[10, 40, 30], &[mean(0.0), mean(5.0), mean(1.0)], 12, 10);
        let sel2 = select_instances(&parts2, 1).unwrap();
        assert!(sel2.discarded.is_empty());
        assert_eq!(sel2.merged_part, 2);

        // A part mean exactly equal to the background's merges.
        let parts3 = hand_parts(&[10, 40, 30], &[mean(0.7), mean(0.7), mean(3.0)], 12, 10);
        assert_eq!(select_instances(&parts3, 1).unwrap().merged_part, 1);

        // Distance tie: the larger part merges; count tie: lower index.
        let tie = hand_parts(
            &[10, 20, 30, 4],
            &[mean(0.0), mean(2.0), mean(-2.0), mean(6.0)],
            12,
            10,
        );
        assert_eq!(select_instances(&tie, 2).unwrap().merged_part, 2);
        let tie2 = hand_parts(
            &[10, 20, 20, 4],
            &[mean(0.0), mean(2.0), mean(-2.0), mean(6.0)],
            12,
            10,
        );
        assert_eq!(select_instances(&tie2, 2).unwrap().merged_part, 1);

        // Too few parts names the fix.
        let small = hand_parts(&[10, 40], &[mean(0.0), mean(5.0)], 12, 10);
        let msg = select_instances(&small, 1).unwrap_err().to_string();
        assert!(msg.contains("larger class count"), "{msg}");
    }

    #[test]
    fn response_map_roundtrip_preserves_scores_and_labels() {
        let rmap = hand_rmap(7, 5, 6, |x, y| (x + y) % 6);
        let dir = std::env::temp_dir().join(format!("segnet_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("view_000.bin");
        save_response_map(&path, &rmap).unwrap();
        let back = load_response_map(&path).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(back.classes, 6);
        assert_eq!(back.scores, rmap.scores);
        assert_eq!(back.labels, rmap.labels);
    }

    #[test]
    fn scene_objects_are_recovered_before_any_refinement() {
        // Full front half of the pipeline on a procedural scene: features,
        // coarse split, segmenter, parts, instance selection; the selected
        // masks must already overlap the ground truth decently.
        let spec = SceneSpec::procedural(2, 21, 6, 1, 48, 48).unwrap();
        let scene = generate_scene(&spec).unwrap();
        let views: Vec<_> = scene
            .cameras
            .iter()
            .map(|c| render_ground_truth(&scene, c).unwrap())
            .collect();
        let images: Vec<ImageRgb> = views.iter().map(|v| v.image.clone()).collect();
        let refs: Vec<&ImageRgb> = images.iter().collect();
        let (feats, _) = extract_features(&refs).unwrap();
        let lifted: Vec<_> = scene
            .cameras
            .iter()
            .zip(&views)
            .map(|(c, v)| lift_positions(c, &v.depth, scene.far, &scene.bounds).unwrap())
            .collect();
        let split = coarse_foreground_split(&feats, &lifted, &CoarseConfig::default()).unwrap();
        let fg: Vec<BinMask> = split
            .fg_masks
            .iter()
            .map(|m| m.dilated(DILATION_RADIUS))
            .collect();

        let cfg = SegnetConfig {
            steps: 48,
            ..SegnetConfig::default()
        };
        let seg = train_segmenter(&images, &fg, &cfg).unwrap();
        let rmaps: Vec<_> = images.iter().map(|i| response_map(&seg, i).unwrap()).collect();
        let parts = partition_parts(&rmaps, &fg, cfg.seed).unwrap();
        let sel = select_instances(&parts, 2).unwrap();

        // Match objects to ground truth by best IoU over both pairings.
        let iou = |a: &BinMask, b: &BinMask| {
            let inter = a
                .data
                .iter()
                .zip(&b.data)
                .filter(|(&x, &y)| x && y)
                .count();
            let uni = a.data.iter().zip(&b.data).filter(|(&x, &y)| x || y).count();
            inter as f64 / uni.max(1) as f64
        };
        let pair_iou = |oa: usize, ob: usize| {
            let mut acc = 0.0;
            for (v, view) in views.iter().enumerate() {
                acc += iou(&sel.object_masks[0][v], &view.masks[oa]);
                acc += iou(&sel.object_masks[1][v], &view.masks[ob]);
            }
            acc / (2 * views.len()) as f64
        };
        let best = pair_iou(0, 1).max(pair_iou(1, 0));
        assert!(best >= 0.5, "mean per-object IoU {best}");
    }
}
