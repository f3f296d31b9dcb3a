//! A small convolutional single-shot detector with hand-written
//! reverse-mode gradients.
//!
//! The backbone is a chain of `conv3x3 → relu → maxpool2` stages. A 1x1
//! localization head and a 1x1 classification head read the output of the
//! second-to-last stage and of the last stage, matching the two layers of
//! the anchor spec. Everything is generic over [`Real`], so the same code
//! trains in `f32` and checks gradients in `f64`.

mod checkpoint;
mod kernels;
mod train;

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorSet, AnchorSpec};
use crate::error::{Error, Result};
use crate::geometry::OffsetVector;
use crate::image::RgbImage;
use crate::loss::{multibox_loss, regularization_loss, GroundTruth, MultiboxConfig, PredictionGrads, Predictions};

pub use checkpoint::{checkpoint_path, restore_latest, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use train::{lr_at, train, LogEvent, TrainConfig, TrainExample, Trainer};

/// Floating-point element type of a network.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + Into<f64> + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;

    /// `c = a·b + beta·c` with arbitrary strides for `a` and `b` and a
    /// row-major `c` with row stride `rsc`.
    ///
    /// # Safety
    /// Every strided index must stay inside the buffers behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![T::zero(); shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ShapeError(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Weights are decayed; biases are not.
    pub is_weight: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub anchors: AnchorSpec,
    pub num_classes: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 96,
            stage_channels: vec![8, 16, 32, 32],
            anchors: AnchorSpec::default(),
            num_classes: 26,
            weight_decay: crate::loss::DEFAULT_WEIGHT_DECAY,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::InvalidInput("num_classes must be at least 1".into()));
        }
        let n = self.stage_channels.len();
        if n < 2 || self.stage_channels.contains(&0) {
            return Err(Error::InvalidInput(
                "need at least two stages with nonzero channels".into(),
            ));
        }
        let stride = 1usize << n;
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::InvalidInput(format!(
                "input size {} not divisible by total stride {stride}",
                self.input_size
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidInput("weight decay must be nonnegative".into()));
        }
        self.anchors.validate()?;
        let grids = self.head_grids();
        if self.anchors.layers.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "anchor spec has {} layers, the network has 2 heads",
                self.anchors.layers.len()
            )));
        }
        for (layer, g) in self.anchors.layers.iter().zip(grids) {
            if layer.grid_w != g || layer.grid_h != g {
                return Err(Error::InvalidInput(format!(
                    "anchor grid {}x{} does not match head feature map {g}x{g}",
                    layer.grid_w, layer.grid_h
                )));
            }
        }
        Ok(())
    }

    /// Feature-map side of the two heads.
    pub fn head_grids(&self) -> [usize; 2] {
        let n = self.stage_channels.len();
        [self.input_size >> (n - 1), self.input_size >> n]
    }

    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }
}

struct StageCache<T> {
    input: Vec<T>,
    act: Vec<T>,
    argmax: Vec<u32>,
}

struct ForwardCache<T> {
    stages: Vec<StageCache<T>>,
    last: Vec<T>,
}

pub struct TinyNet<T: Real> {
    config: ModelConfig,
    anchors: AnchorSet,
    params: Vec<Param<T>>,
    cache: Option<Vec<ForwardCache<T>>>,
}

impl<T: Real> Clone for TinyNet<T> {
    fn clone(&self) -> Self {
        TinyNet {
            config: self.config.clone(),
            anchors: self.anchors.clone(),
            params: self.params.clone(),
            cache: None,
        }
    }
}

impl<T: Real> Debug for TinyNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TinyNet")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl<T: Real> TinyNet<T> {
    /// Builds a network with seed-deterministic initial parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let anchors = generate_anchors(&config.anchors)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut c_in = 3;
        for (s, &c_out) in config.stage_channels.iter().enumerate() {
            let fan_in = c_in * 9;
            params.push(Param {
                name: format!("stage{s}.conv.weight"),
                tensor: normal_tensor(&mut rng, &[c_out, c_in, 3, 3], (2.0 / fan_in as f64).sqrt()),
                is_weight: true,
            });
            params.push(Param {
                name: format!("stage{s}.conv.bias"),
                tensor: Tensor::zeros(&[c_out]),
                is_weight: false,
            });
            c_in = c_out;
        }
        let n = config.stage_channels.len();
        let k = config.num_logits();
        for h in 0..2 {
            let feat = config.stage_channels[n - 2 + h];
            let a = config.anchors.anchors_per_cell(h);
            let std = 0.1 * (1.0 / feat as f64).sqrt();
            params.push(Param {
                name: format!("head{h}.loc.weight"),
                tensor: normal_tensor(&mut rng, &[a * 4, feat], std),
                is_weight: true,
            });
            params.push(Param {
                name: format!("head{h}.loc.bias"),
                tensor: Tensor::zeros(&[a * 4]),
                is_weight: false,
            });
            params.push(Param {
                name: format!("head{h}.cls.weight"),
                tensor: normal_tensor(&mut rng, &[a * k, feat], std),
                is_weight: true,
            });
            let mut bias = Tensor::zeros(&[a * k]);
            for anchor in 0..a {
                bias.values[anchor * k] = T::from_f64(2.0);
            }
            params.push(Param {
                name: format!("head{h}.cls.bias"),
                tensor: bias,
                is_weight: false,
            });
        }
        Ok(TinyNet {
            config,
            anchors,
            params,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Zeroes every head parameter, including the background bias.
    pub fn zero_heads(&mut self) {
        let start = 2 * self.config.stage_channels.len();
        for p in &mut self.params[start..] {
            p.tensor.values.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn regularization_loss(&self) -> f64 {
        let weights: Vec<&[T]> = self
            .params
            .iter()
            .filter(|p| p.is_weight)
            .map(|p| p.tensor.values.as_slice())
            .collect();
        regularization_loss(&weights, self.config.weight_decay)
    }

    fn to_input(&self, img: &RgbImage) -> Result<Vec<T>> {
        let s = self.config.input_size;
        if img.width != s || img.height != s {
            return Err(Error::ShapeError(format!(
                "image is {}x{}, model expects {s}x{s}",
                img.width, img.height
            )));
        }
        let plane = s * s;
        let mut out = vec![T::zero(); 3 * plane];
        // pixels map to [-1, 1]
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = T::from_f64(px[c] as f64 / 127.5 - 1.0);
            }
        }
        Ok(out)
    }

    fn forward_one(&self, input: Vec<T>) -> (Predictions, ForwardCache<T>) {
        let mut res = self.config.input_size;
        let mut c_in = 3;
        let mut x = input;
        let mut stages = Vec::with_capacity(self.config.stage_channels.len());
        for (s, &c_out) in self.config.stage_channels.iter().enumerate() {
            let mut act = vec![T::zero(); c_out * res * res];
            kernels::conv3x3_forward(
                &x,
                c_in,
                res,
                res,
                &self.params[2 * s].tensor.values,
                &self.params[2 * s + 1].tensor.values,
                c_out,
                &mut act,
            );
            act.iter_mut().for_each(|v| *v = v.max(T::zero()));
            let half = res / 2;
            let mut pooled = vec![T::zero(); c_out * half * half];
            let mut argmax = vec![0u32; c_out * half * half];
            kernels::maxpool2_forward(&act, c_out, res, res, &mut pooled, &mut argmax);
            stages.push(StageCache {
                input: x,
                act,
                argmax,
            });
            x = pooled;
            res = half;
            c_in = c_out;
        }
        let cache = ForwardCache { stages, last: x };
        let preds = self.heads_forward(&cache);
        (preds, cache)
    }

    fn head_input<'a>(&self, cache: &'a ForwardCache<T>, head: usize) -> &'a [T] {
        if head == 0 {
            &cache.stages[cache.stages.len() - 1].input
        } else {
            &cache.last
        }
    }

    fn head_param_base(&self, head: usize) -> usize {
        2 * self.config.stage_channels.len() + 4 * head
    }

    fn heads_forward(&self, cache: &ForwardCache<T>) -> Predictions {
        let k = self.config.num_logits();
        let n = self.config.stage_channels.len();
        let mut preds = Predictions::zeros(self.anchors.len(), k);
        let grids = self.config.head_grids();
        for head in 0..2 {
            let feat = self.config.stage_channels[n - 2 + head];
            let plane = grids[head] * grids[head];
            let a = self.config.anchors.anchors_per_cell(head);
            let base = self.head_param_base(head);
            let input = self.head_input(cache, head);
            let mut loc = vec![T::zero(); a * 4 * plane];
            kernels::conv1x1_forward(
                input,
                feat,
                plane,
                &self.params[base].tensor.values,
                &self.params[base + 1].tensor.values,
                a * 4,
                &mut loc,
            );
            let mut cls = vec![T::zero(); a * k * plane];
            kernels::conv1x1_forward(
                input,
                feat,
                plane,
                &self.params[base + 2].tensor.values,
                &self.params[base + 3].tensor.values,
                a * k,
                &mut cls,
            );
            let offset = self.anchors.layer_offsets()[head];
            for p in 0..plane {
                for anchor in 0..a {
                    let idx = offset + p * a + anchor;
                    let m = |c: usize| loc[(anchor * 4 + c) * plane + p].into();
                    preds.loc[idx] = OffsetVector::new(m(0), m(1), m(2), m(3));
                    for c in 0..k {
                        preds.logits[idx * k + c] = cls[(anchor * k + c) * plane + p].into();
                    }
                }
            }
        }
        preds
    }

    /// Inference forward pass; does not retain activations.
    pub fn forward(&self, images: &[RgbImage]) -> Result<Vec<Predictions>> {
        let inputs = images.iter().map(|i| self.to_input(i)).collect::<Result<Vec<_>>>()?;
        Ok(inputs
            .into_par_iter()
            .map(|x| self.forward_one(x).0)
            .collect())
    }

    /// Forward pass that keeps activations for a following [`backward`](Self::backward).
    pub fn forward_train(&mut self, images: &[RgbImage]) -> Result<Vec<Predictions>> {
        let inputs = images.iter().map(|i| self.to_input(i)).collect::<Result<Vec<_>>>()?;
        let (preds, caches): (Vec<_>, Vec<_>) = inputs
            .into_par_iter()
            .map(|x| self.forward_one(x))
            .unzip();
        self.cache = Some(caches);
        Ok(preds)
    }

    fn backward_one(&self, cache: &ForwardCache<T>, g: &PredictionGrads) -> Vec<Vec<T>> {
        let k = self.config.num_logits();
        let n = self.config.stage_channels.len();
        let grids = self.config.head_grids();
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();

        let mut dfeat: [Vec<T>; 2] = [
            vec![T::zero(); cache.stages[n - 1].input.len()],
            vec![T::zero(); cache.last.len()],
        ];
        for head in 0..2 {
            let feat = self.config.stage_channels[n - 2 + head];
            let plane = grids[head] * grids[head];
            let a = self.config.anchors.anchors_per_cell(head);
            let base = self.head_param_base(head);
            let offset = self.anchors.layer_offsets()[head];
            let mut dloc = vec![T::zero(); a * 4 * plane];
            let mut dcls = vec![T::zero(); a * k * plane];
            for p in 0..plane {
                for anchor in 0..a {
                    let idx = offset + p * a + anchor;
                    for c in 0..4 {
                        dloc[(anchor * 4 + c) * plane + p] = T::from_f64(g.loc[idx][c]);
                    }
                    for c in 0..k {
                        dcls[(anchor * k + c) * plane + p] = T::from_f64(g.logits[idx * k + c]);
                    }
                }
            }
            let input = self.head_input(cache, head);
            let (lw, rest) = grads[base..base + 4].split_at_mut(1);
            let (lb, rest) = rest.split_at_mut(1);
            let (cw, cb) = rest.split_at_mut(1);
            kernels::conv1x1_backward(
                input,
                feat,
                plane,
                &self.params[base].tensor.values,
                a * 4,
                &dloc,
                &mut lw[0],
                &mut lb[0],
                &mut dfeat[head],
            );
            kernels::conv1x1_backward(
                input,
                feat,
                plane,
                &self.params[base + 2].tensor.values,
                a * k,
                &dcls,
                &mut cw[0],
                &mut cb[0],
                &mut dfeat[head],
            );
        }

        let [d_prev_last, d_last] = dfeat;
        // gradient w.r.t. the pooled output of the stage being processed
        let mut dpooled = d_last;
        let mut extra = Some(d_prev_last);
        let mut res = self.config.input_size >> (n - 1);
        for s in (0..n).rev() {
            let c_out = self.config.stage_channels[s];
            let c_in = if s == 0 { 3 } else { self.config.stage_channels[s - 1] };
            let st = &cache.stages[s];
            let mut dact = vec![T::zero(); st.act.len()];
            kernels::maxpool2_backward(c_out, res, res, &st.argmax, &dpooled, &mut dact);
            for (d, &a) in dact.iter_mut().zip(&st.act) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let (w_grad, b_grad) = grads[2 * s..2 * s + 2].split_at_mut(1);
            let mut dinput = if s > 0 { Some(vec![T::zero(); st.input.len()]) } else { None };
            kernels::conv3x3_backward(
                &st.input,
                c_in,
                res,
                res,
                &self.params[2 * s].tensor.values,
                c_out,
                &dact,
                &mut w_grad[0],
                &mut b_grad[0],
                dinput.as_deref_mut(),
            );
            if let Some(mut din) = dinput {
                if s == n - 1 {
                    if let Some(e) = extra.take() {
                        din.iter_mut().zip(e).for_each(|(d, e)| *d = *d + e);
                    }
                }
                dpooled = din;
            }
            res *= 2;
        }
        grads
    }

    /// Backpropagates per-image prediction gradients from the last
    /// [`forward_train`](Self::forward_train) and stores parameter gradients,
    /// including the weight-decay term `weight_decay · w`.
    pub fn backward(&mut self, grads: &[PredictionGrads]) -> Result<()> {
        let caches = self
            .cache
            .take()
            .ok_or_else(|| Error::StateError("backward called without a training forward pass".into()))?;
        if caches.len() != grads.len() {
            return Err(Error::ShapeError(format!(
                "{} cached images but {} gradients",
                caches.len(),
                grads.len()
            )));
        }
        let per_image: Vec<Vec<Vec<T>>> = caches
            .par_iter()
            .zip(grads.par_iter())
            .map(|(c, g)| self.backward_one(c, g))
            .collect();
        let decay = T::from_f64(self.config.weight_decay);
        for (pi, p) in self.params.iter_mut().enumerate() {
            let mut acc = if p.is_weight {
                p.tensor.values.iter().map(|&w| decay * w).collect()
            } else {
                vec![T::zero(); p.tensor.len()]
            };
            for img in &per_image {
                for (a, &g) in acc.iter_mut().zip(&img[pi]) {
                    *a = *a + g;
                }
            }
            p.tensor.grad = Some(acc);
        }
        Ok(())
    }

    /// Mean per-image multibox losses over the batch plus regularization.
    /// Returns `(classification, localization, regularization)` and leaves
    /// parameter gradients of their sum in each tensor's `grad`.
    pub fn loss_and_gradients(
        &mut self,
        images: &[RgbImage],
        gts: &[GroundTruth],
        cfg: &MultiboxConfig,
    ) -> Result<(f64, f64, f64)> {
        if images.is_empty() || images.len() != gts.len() {
            return Err(Error::InvalidInput(format!(
                "{} images for {} ground truths",
                images.len(),
                gts.len()
            )));
        }
        let preds = self.forward_train(images)?;
        let b = images.len() as f64;
        let anchors = &self.anchors;
        let losses = preds
            .par_iter()
            .zip(gts.par_iter())
            .map(|(p, gt)| multibox_loss(anchors, p, gt, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut cls = 0.0;
        let mut loc = 0.0;
        let mut grads = Vec::with_capacity(losses.len());
        for mut l in losses {
            cls += l.classification / b;
            loc += l.localization / b;
            l.grads.scale(1.0 / b);
            grads.push(l.grads);
        }
        self.backward(&grads)?;
        Ok((cls, loc, self.regularization_loss()))
    }

    /// Same losses as [`loss_and_gradients`](Self::loss_and_gradients) without gradients.
    pub fn evaluate_loss(&self, images: &[RgbImage], gts: &[GroundTruth], cfg: &MultiboxConfig) -> Result<(f64, f64, f64)> {
        let preds = self.forward(images)?;
        let b = images.len() as f64;
        let mut cls = 0.0;
        let mut loc = 0.0;
        for (p, gt) in preds.iter().zip(gts) {
            let l = multibox_loss(&self.anchors, p, gt, cfg)?;
            cls += l.classification / b;
            loc += l.localization / b;
        }
        Ok((cls, loc, self.regularization_loss()))
    }
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        values: (0..n).map(|_| T::from_f64(dist.sample(rng))).collect(),
        grad: None,
    }
}
