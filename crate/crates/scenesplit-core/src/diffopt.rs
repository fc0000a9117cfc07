//! Gradient-based optimization utilities.
//!
//! Provides flat named parameter blocks, an Adam optimizer, a
//! finite-difference gradient checker that any differentiable objective can
//! be validated against, and a small library of differentiable primitives
//! ([`prim`]) with hand-written backward passes.
//!
//! Values and accumulations are f64 where they summarize whole objectives;
//! parameters and gradients are stored f32.

use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;

// ---------------------------------------------------------------------------
// Tensors and parameter blocks

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn same_shape(&self, o: &Tensor) -> bool {
        self.shape == o.shape
    }
}

/// Ordered collection of named tensors. Order is insertion order and is part
/// of the contract: optimizer state and gradient blocks must line up.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBlock {
    entries: Vec<(String, Tensor)>,
}

pub type GradBlock = ParamBlock;

impl ParamBlock {
    pub fn new() -> ParamBlock {
        ParamBlock::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidInput(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamBlock {
        ParamBlock {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    /// Checks that `o` has identical names and shapes in identical order.
    pub fn check_layout(&self, o: &ParamBlock, what: &str) -> Result<()> {
        if self.entries.len() != o.entries.len() {
            return Err(Error::Shape(format!(
                "{what}: {} tensors vs {}",
                o.entries.len(),
                self.entries.len()
            )));
        }
        for ((an, at), (bn, bt)) in self.entries.iter().zip(&o.entries) {
            if an != bn || !at.same_shape(bt) {
                return Err(Error::Shape(format!(
                    "{what}: entry {an:?} {:?} vs {bn:?} {:?}",
                    at.shape, bt.shape
                )));
            }
        }
        Ok(())
    }

    fn flat_get(&self, mut idx: usize) -> Option<(usize, usize)> {
        for (i, (_, t)) in self.entries.iter().enumerate() {
            if idx < t.numel() {
                return Some((i, idx));
            }
            idx -= t.numel();
        }
        None
    }

    fn entry(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n.as_str(), t)
    }
}

// ---------------------------------------------------------------------------
// Objectives

/// A scalar function of a parameter block with an analytic gradient.
pub trait Objective {
    fn label(&self) -> &str;
    /// Objective value only. Must equal the value from [`value_and_grad`]
    /// for identical parameters.
    ///
    /// [`value_and_grad`]: Objective::value_and_grad
    fn value(&self, params: &ParamBlock) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamBlock) -> Result<(f64, GradBlock)>;
}

/// Objective built from closures; convenient for tests and composition.
pub struct ClosureObjective<V, G>
where
    V: Fn(&ParamBlock) -> Result<f64>,
    G: Fn(&ParamBlock) -> Result<(f64, GradBlock)>,
{
    pub name: String,
    pub value_fn: V,
    pub grad_fn: G,
}

impl<V, G> Objective for ClosureObjective<V, G>
where
    V: Fn(&ParamBlock) -> Result<f64>,
    G: Fn(&ParamBlock) -> Result<(f64, GradBlock)>,
{
    fn label(&self) -> &str {
        &self.name
    }

    fn value(&self, params: &ParamBlock) -> Result<f64> {
        (self.value_fn)(params)
    }

    fn value_and_grad(&self, params: &ParamBlock) -> Result<(f64, GradBlock)> {
        (self.grad_fn)(params)
    }
}

/// Linear combination of objectives sharing one parameter block.
pub struct WeightedSum<'a> {
    pub name: String,
    pub parts: Vec<(f64, &'a dyn Objective)>,
}

impl Objective for WeightedSum<'_> {
    fn label(&self) -> &str {
        &self.name
    }

    fn value(&self, params: &ParamBlock) -> Result<f64> {
        let mut acc = 0.0;
        for (w, o) in &self.parts {
            acc += w * o.value(params)?;
        }
        Ok(acc)
    }

    fn value_and_grad(&self, params: &ParamBlock) -> Result<(f64, GradBlock)> {
        let mut total = 0.0;
        let mut sum = params.zeros_like();
        for (w, o) in &self.parts {
            let (v, g) = o.value_and_grad(params)?;
            params.check_layout(&g, o.label())?;
            total += w * v;
            for ((_, acc), (_, gt)) in sum.entries.iter_mut().zip(&g.entries) {
                for (a, b) in acc.data.iter_mut().zip(&gt.data) {
                    *a += (*w as f32) * b;
                }
            }
        }
        Ok((total, sum))
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> AdamParams {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct OptState {
    pub step: u64,
    pub m: ParamBlock,
    pub v: ParamBlock,
}

impl OptState {
    pub fn new(params: &ParamBlock) -> OptState {
        OptState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Single-element Adam update. `inv_bc1` and `inv_bc2` are the reciprocal
/// bias corrections 1/(1-beta1^t) and 1/(1-beta2^t) for the step being
/// applied.
#[inline(always)]
pub fn adam_update_scalar(
    p: &mut f32,
    g: f32,
    m: &mut f32,
    v: &mut f32,
    hp: &AdamParams,
    inv_bc1: f32,
    inv_bc2: f32,
) {
    *m = hp.beta1 as f32 * *m + (1.0 - hp.beta1 as f32) * g;
    *v = hp.beta2 as f32 * *v + (1.0 - hp.beta2 as f32) * g * g;
    let m_hat = *m * inv_bc1;
    let v_hat = *v * inv_bc2;
    *p -= hp.lr as f32 * m_hat / (v_hat.sqrt() + hp.eps as f32);
}

/// One Adam step over every parameter. Rejects non-finite gradients so a
/// diverging objective fails loudly instead of poisoning the state.
pub fn adam_step(
    params: &mut ParamBlock,
    grads: &GradBlock,
    state: &mut OptState,
    hp: &AdamParams,
) -> Result<()> {
    params.check_layout(grads, "adam gradients")?;
    params.check_layout(&state.m, "adam state")?;
    state.step += 1;
    let t = state.step as i32;
    let inv_bc1 = (1.0 / (1.0 - hp.beta1.powi(t))) as f32;
    let inv_bc2 = (1.0 / (1.0 - hp.beta2.powi(t))) as f32;
    for (ei, (name, pt)) in params.entries.iter_mut().enumerate() {
        let gt = &grads.entries[ei].1;
        let mt = &mut state.m.entries[ei].1;
        let vt = &mut state.v.entries[ei].1;
        for i in 0..pt.data.len() {
            let g = gt.data[i];
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    primitive: "adam_step",
                    context: format!("gradient {name}[{i}]"),
                });
            }
            adam_update_scalar(
                &mut pt.data[i],
                g,
                &mut mt.data[i],
                &mut vt.data[i],
                hp,
                inv_bc1,
                inv_bc2,
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Number of coordinates to probe.
    pub probes: usize,
    /// Relative step; the actual step is `rel_step * (1 + |x|)` rounded to
    /// the nearest representable f32 perturbation.
    pub rel_step: f64,
    /// Denominator floor for the relative error, guarding near-zero
    /// gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> FdOptions {
        FdOptions {
            probes: 32,
            rel_step: 1e-3,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<FdProbe>,
}

/// Compares the analytic gradient of `obj` against central finite
/// differences at `probes` seeded random coordinates.
///
/// The perturbed parameters are genuine f32 values, and the difference
/// quotient divides by the actually-achieved perturbation (measured in f64
/// after rounding), so the check stays sharp even where f32 rounding eats
/// part of the nominal step.
pub fn finite_difference_check(
    obj: &dyn Objective,
    params: &ParamBlock,
    opts: &FdOptions,
) -> Result<FdCheckReport> {
    let total = params.total_params();
    if total == 0 {
        return Err(Error::InvalidInput("empty parameter block".into()));
    }
    let (_, analytic) = obj.value_and_grad(params)?;
    params.check_layout(&analytic, obj.label())?;

    let mut rng = seed::rng(seed::derive(opts.seed, &[seed::tags::FD_PROBE]));
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst: Option<FdProbe> = None;

    for _ in 0..opts.probes {
        let flat = rng.gen_range(0..total);
        let (ei, ii) = work.flat_get(flat).expect("flat index in range");
        let x0 = work.entries[ei].1.data[ii];
        let h = (opts.rel_step * (1.0 + x0.abs() as f64)) as f32;

        let xp = x0 + h;
        let xm = x0 - h;
        let achieved = xp as f64 - xm as f64;
        if achieved <= 0.0 {
            return Err(Error::Degenerate(format!(
                "zero effective step at {}[{ii}]",
                work.entries[ei].0
            )));
        }
        work.entries[ei].1.data[ii] = xp;
        let fp = obj.value(&work)?;
        work.entries[ei].1.data[ii] = xm;
        let fm = obj.value(&work)?;
        work.entries[ei].1.data[ii] = x0;

        let numeric = (fp - fm) / achieved;
        let (name, _) = analytic.entry(ei);
        let a = analytic.entries[ei].1.data[ii] as f64;
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite {
                primitive: "finite_difference_check",
                context: format!("{}[{ii}]", name),
            });
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        sum_rel += rel;
        if rel >= max_rel {
            max_rel = rel;
            worst = Some(FdProbe {
                name: name.to_string(),
                index: ii,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }

    Ok(FdCheckReport {
        probes: opts.probes,
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / opts.probes.max(1) as f64,
        worst,
    })
}

// ---------------------------------------------------------------------------
// Differentiable primitives

/// Dense feature-map primitives with hand-written backward passes.
///
/// Feature maps are channel-last `[h, w, c]` tensors so the innermost loops
/// run over output channels and autovectorize.
pub mod prim {
    use super::{Error, Result, Tensor};

    #[inline(always)]
    pub fn softplus(x: f32) -> f32 {
        // ln(1 + e^x) without overflow for large |x|.
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    #[inline(always)]
    pub fn sigmoid(x: f32) -> f32 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn relu_forward(x: &Tensor) -> Tensor {
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
        if !x.same_shape(gy) {
            return Err(Error::Shape("relu: x and gy shapes differ".into()));
        }
        Ok(Tensor {
            shape: x.shape.clone(),
            data: x
                .data
                .iter()
                .zip(&gy.data)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
        })
    }

    fn check_map(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
        if x.shape.len() != 3 {
            return Err(Error::Shape(format!(
                "{what}: expected [h, w, c], got {:?}",
                x.shape
            )));
        }
        Ok((x.shape[0], x.shape[1], x.shape[2]))
    }

    /// 3x3 convolution with clamp-to-edge padding: taps outside the image
    /// read the nearest border pixel. A constant input therefore maps to a
    /// constant output, with no frame artifact along the border — which
    /// matters because the segmentation border band supervises exactly those
    /// pixels. Weights are `[3, 3, cin, cout]`, bias `[cout]`.
    pub fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (h, wd, cin) = check_map(x, "conv3x3")?;
        if w.shape != [3, 3, cin, b.numel()] {
            return Err(Error::Shape(format!(
                "conv3x3: weights {:?} do not match input c={cin} bias {:?}",
                w.shape, b.shape
            )));
        }
        let cout = b.numel();
        let mut y = Tensor::zeros(&[h, wd, cout]);
        let mut acc = vec![0.0f32; cout];
        for oy in 0..h {
            for ox in 0..wd {
                acc.copy_from_slice(&b.data);
                for ky in 0..3usize {
                    let iy = (oy as isize + ky as isize - 1).clamp(0, h as isize - 1);
                    for kx in 0..3usize {
                        let ix = (ox as isize + kx as isize - 1).clamp(0, wd as isize - 1);
                        let xb = (iy as usize * wd + ix as usize) * cin;
                        let wb = ((ky * 3) + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data[xb + ci];
                            let ws = &w.data[wb + ci * cout..wb + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(ws) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
                y.data[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout].copy_from_slice(&acc);
            }
        }
        Ok(y)
    }

    /// Gradients of [`conv3x3_forward`] w.r.t. input, weights, and bias.
    pub fn conv3x3_backward(
        x: &Tensor,
        w: &Tensor,
        gy: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (h, wd, cin) = check_map(x, "conv3x3")?;
        let (gh, gw_, cout) = check_map(gy, "conv3x3 grad")?;
        if (gh, gw_) != (h, wd) || w.shape != [3, 3, cin, cout] {
            return Err(Error::Shape("conv3x3 backward: shape mismatch".into()));
        }
        let mut gx = Tensor::zeros(&x.shape);
        let mut gw = Tensor::zeros(&w.shape);
        let mut gb = Tensor::zeros(&[cout]);
        for oy in 0..h {
            for ox in 0..wd {
                let gb_base = (oy * wd + ox) * cout;
                let gys = &gy.data[gb_base..gb_base + cout];
                for (a, &g) in gb.data.iter_mut().zip(gys) {
                    *a += g;
                }
                for ky in 0..3usize {
                    let iy = (oy as isize + ky as isize - 1).clamp(0, h as isize - 1);
                    for kx in 0..3usize {
                        let ix = (ox as isize + kx as isize - 1).clamp(0, wd as isize - 1);
                        let xb = (iy as usize * wd + ix as usize) * cin;
                        let wb = ((ky * 3) + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data[xb + ci];
                            let ws = &w.data[wb + ci * cout..wb + (ci + 1) * cout];
                            let gws = &mut gw.data[wb + ci * cout..wb + (ci + 1) * cout];
                            let mut acc = 0.0f32;
                            for ((&wv, gwv), &g) in ws.iter().zip(gws.iter_mut()).zip(gys) {
                                acc += wv * g;
                                *gwv += xv * g;
                            }
                            gx.data[xb + ci] += acc;
                        }
                    }
                }
            }
        }
        Ok((gx, gw, gb))
    }

    /// Pointwise (1x1) convolution. Weights `[cin, cout]`, bias `[cout]`.
    pub fn conv1x1_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (h, wd, cin) = check_map(x, "conv1x1")?;
        let cout = b.numel();
        if w.shape != [cin, cout] {
            return Err(Error::Shape(format!(
                "conv1x1: weights {:?} vs input c={cin}, bias {cout}",
                w.shape
            )));
        }
        let mut y = Tensor::zeros(&[h, wd, cout]);
        for p in 0..h * wd {
            let xs = &x.data[p * cin..(p + 1) * cin];
            let ys = &mut y.data[p * cout..(p + 1) * cout];
            ys.copy_from_slice(&b.data);
            for (ci, &xv) in xs.iter().enumerate() {
                let ws = &w.data[ci * cout..(ci + 1) * cout];
                for (a, &wv) in ys.iter_mut().zip(ws) {
                    *a += xv * wv;
                }
            }
        }
        Ok(y)
    }

    pub fn conv1x1_backward(
        x: &Tensor,
        w: &Tensor,
        gy: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (h, wd, cin) = check_map(x, "conv1x1")?;
        let (gh, gw_, cout) = check_map(gy, "conv1x1 grad")?;
        if (gh, gw_) != (h, wd) || w.shape != [cin, cout] {
            return Err(Error::Shape("conv1x1 backward: shape mismatch".into()));
        }
        let mut gx = Tensor::zeros(&x.shape);
        let mut gw = Tensor::zeros(&w.shape);
        let mut gb = Tensor::zeros(&[cout]);
        for p in 0..h * wd {
            let xs = &x.data[p * cin..(p + 1) * cin];
            let gys = &gy.data[p * cout..(p + 1) * cout];
            for (a, &g) in gb.data.iter_mut().zip(gys) {
                *a += g;
            }
            for ci in 0..cin {
                let ws = &w.data[ci * cout..(ci + 1) * cout];
                let gws = &mut gw.data[ci * cout..(ci + 1) * cout];
                let mut acc = 0.0f32;
                for ((&wv, gwv), &g) in ws.iter().zip(gws.iter_mut()).zip(gys) {
                    acc += wv * g;
                    *gwv += xs[ci] * g;
                }
                gx.data[p * cin + ci] = acc;
            }
        }
        Ok((gx, gw, gb))
    }

    const IN_EPS: f64 = 1e-5;

    /// Per-channel normalization over the spatial extent of one map:
    /// `y = (x - mean_c) / sqrt(var_c + eps)`. Returns `(y, inv_std)` with
    /// `inv_std` per channel, needed by the backward pass.
    pub fn instance_norm_forward(x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let (h, w, c) = check_map(x, "instance_norm")?;
        let n = (h * w) as f64;
        if h * w < 2 {
            return Err(Error::Shape("instance_norm: needs at least 2 pixels".into()));
        }
        let mut mean = vec![0.0f64; c];
        for p in 0..h * w {
            for ci in 0..c {
                mean[ci] += x.data[p * c + ci] as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0f64; c];
        for p in 0..h * w {
            for ci in 0..c {
                let d = x.data[p * c + ci] as f64 - mean[ci];
                var[ci] += d * d;
            }
        }
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v / n + IN_EPS).sqrt()) as f32)
            .collect();
        let mut y = Tensor::zeros(&x.shape);
        for p in 0..h * w {
            for ci in 0..c {
                y.data[p * c + ci] = (x.data[p * c + ci] - mean[ci] as f32) * inv_std[ci];
            }
        }
        Ok((y, inv_std))
    }

    /// Backward through instance normalization:
    /// `gx = inv_std * (g - mean(g) - y * mean(g * y))` per channel.
    pub fn instance_norm_backward(y: &Tensor, inv_std: &[f32], gy: &Tensor) -> Result<Tensor> {
        let (h, w, c) = check_map(y, "instance_norm")?;
        if !y.same_shape(gy) || inv_std.len() != c {
            return Err(Error::Shape("instance_norm backward: shape mismatch".into()));
        }
        let n = (h * w) as f64;
        let mut g_mean = vec![0.0f64; c];
        let mut gy_mean = vec![0.0f64; c];
        for p in 0..h * w {
            for ci in 0..c {
                let g = gy.data[p * c + ci] as f64;
                g_mean[ci] += g;
                gy_mean[ci] += g * y.data[p * c + ci] as f64;
            }
        }
        for ci in 0..c {
            g_mean[ci] /= n;
            gy_mean[ci] /= n;
        }
        let mut gx = Tensor::zeros(&y.shape);
        for p in 0..h * w {
            for ci in 0..c {
                let g = gy.data[p * c + ci] as f64;
                let yv = y.data[p * c + ci] as f64;
                gx.data[p * c + ci] =
                    (inv_std[ci] as f64 * (g - g_mean[ci] - yv * gy_mean[ci])) as f32;
            }
        }
        Ok(gx)
    }

    /// Per-pixel softmax over the channel dimension.
    pub fn softmax(x: &Tensor) -> Result<Tensor> {
        let (h, w, c) = check_map(x, "softmax")?;
        let mut y = Tensor::zeros(&x.shape);
        for p in 0..h * w {
            let xs = &x.data[p * c..(p + 1) * c];
            let m = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            let ys = &mut y.data[p * c..(p + 1) * c];
            for (o, &v) in ys.iter_mut().zip(xs) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in ys.iter_mut() {
                *o /= sum;
            }
        }
        Ok(y)
    }

    /// Weighted cross-entropy against per-pixel integer labels.
    ///
    /// Returns the summed loss and the gradient w.r.t. the logits
    /// (`weight * (softmax - onehot)` per pixel). Pixels with zero weight
    /// contribute nothing.
    pub fn softmax_ce(
        logits: &Tensor,
        labels: &[usize],
        weights: &[f32],
    ) -> Result<(f64, Tensor)> {
        let (h, w, c) = check_map(logits, "softmax_ce")?;
        if labels.len() != h * w || weights.len() != h * w {
            return Err(Error::Shape(format!(
                "softmax_ce: {} pixels vs {} labels / {} weights",
                h * w,
                labels.len(),
                weights.len()
            )));
        }
        let probs = softmax(logits)?;
        let mut grad = Tensor::zeros(&logits.shape);
        let mut loss = 0.0f64;
        for p in 0..h * w {
            let wt = weights[p];
            if wt == 0.0 {
                continue;
            }
            let lab = labels[p];
            if lab >= c {
                return Err(Error::Shape(format!(
                    "softmax_ce: label {lab} out of range for {c} classes"
                )));
            }
            let ps = &probs.data[p * c..(p + 1) * c];
            loss -= wt as f64 * (ps[lab].max(1e-12) as f64).ln();
            let gs = &mut grad.data[p * c..(p + 1) * c];
            for (ci, (g, &pv)) in gs.iter_mut().zip(ps).enumerate() {
                *g = wt * (pv - if ci == lab { 1.0 } else { 0.0 });
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                primitive: "softmax_ce",
                context: "loss".into(),
            });
        }
        Ok((loss, grad))
    }
}
