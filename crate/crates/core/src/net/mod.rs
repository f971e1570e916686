//! The recognition network: a stack of conv → ReLU → dropout → max-pool
//! stages, one hidden fully connected layer with ReLU and dropout, and an
//! output layer of `L x A` logits normalized by an independent softmax per
//! character block. Backpropagation is written out by hand per layer.

mod gradcheck;
mod kernels;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, GradReport, TensorCheck};
pub use crate::codec::PredDist;

use crate::codec::HeadLayout;
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{gemm, MatRef, Tensor};
use kernels::{col2im, grouped_softmax, im2col, max_pool, StageGeom};

/// Scale applied to the output layer's initial weight bound.
pub const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub pad: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// Network topology. `convs[i]` is always followed by `pools[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub convs: Vec<ConvSpec>,
    pub pools: Vec<PoolSpec>,
    pub fc1: usize,
    pub head: HeadLayout,
    pub dropout: f64,
}

impl NetConfig {
    /// 50x180 input; convs of 48/64/128 5x5 filters with padding 2 (only the
    /// first strided); 2x2 pools with stride 2, 1, 2; 3072 hidden units; 6x62 head.
    pub fn paper() -> Self {
        let conv = |filters, stride| ConvSpec {
            filters,
            kernel: 5,
            pad: 2,
            stride,
        };
        let pool = |stride| PoolSpec { window: 2, stride };
        NetConfig {
            input_height: 50,
            input_width: 180,
            convs: vec![conv(48, 2), conv(64, 1), conv(128, 1)],
            pools: vec![pool(2), pool(1), pool(2)],
            fc1: 3072,
            head: HeadLayout {
                length: 6,
                classes: 62,
            },
            dropout: 0.5,
        }
    }

    /// Desk-scale: 24x60 input, convs of 8 and 16 3x3 filters, fc 128, 3x10 head.
    pub fn mini() -> Self {
        let conv = |filters| ConvSpec {
            filters,
            kernel: 3,
            pad: 1,
            stride: 1,
        };
        let pool = PoolSpec {
            window: 2,
            stride: 2,
        };
        NetConfig {
            input_height: 24,
            input_width: 60,
            convs: vec![conv(8), conv(16)],
            pools: vec![pool, pool],
            fc1: 128,
            head: HeadLayout {
                length: 3,
                classes: 10,
            },
            dropout: 0.25,
        }
    }

    /// Gradient-check scale: 8x8 input, one conv of 2 filters, fc 4, 2x3 head.
    pub fn tiny() -> Self {
        NetConfig {
            input_height: 8,
            input_width: 8,
            convs: vec![ConvSpec {
                filters: 2,
                kernel: 3,
                pad: 1,
                stride: 1,
            }],
            pools: vec![PoolSpec {
                window: 2,
                stride: 2,
            }],
            fc1: 4,
            head: HeadLayout {
                length: 2,
                classes: 3,
            },
            dropout: 0.0,
        }
    }
}

/// `floor((input + 2 pad - kernel) / stride) + 1`.
pub fn out_extent(input: usize, kernel: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * pad {
        return Err(Error::InvalidShape {
            shape: vec![input, kernel, pad, stride],
            reason: "kernel exceeds padded extent or zero stride".into(),
        });
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All learnable tensors, conv stages first, then `fc1` and the head `fc2`.
/// Gradients and momentum buffers reuse the same structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        let zero = |t: &Tensor| Tensor::zeros(t.shape()).expect("existing shape is valid");
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    weight: zero(&l.weight),
                    bias: zero(&l.bias),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// `(name, tensor, is_weight)` in declaration order.
    pub fn tensors(&self) -> impl Iterator<Item = (String, &Tensor, bool)> {
        self.layers.iter().flat_map(|l| {
            [
                (format!("{}.weight", l.name), &l.weight, true),
                (format!("{}.bias", l.name), &l.bias, false),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, bool)> {
        self.layers
            .iter_mut()
            .flat_map(|l| [(&mut l.weight, true), (&mut l.bias, false)])
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        for (t, _) in self.tensors_mut() {
            t.scale(c);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Default)]
struct StageCache {
    /// Unfolded patches per sample, `patch_len x conv_area` each.
    cols: Vec<f64>,
    /// d(activation)/d(pre-activation): ReLU derivative times dropout scale.
    gate: Vec<f64>,
    argmax: Vec<u32>,
}

/// Everything `backward` needs from a train-mode forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    mode: Mode,
    batch: usize,
    stages: Vec<StageCache>,
    flat: Vec<f64>,
    fc1_gate: Vec<f64>,
    fc1_act: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output probabilities, `batch x (L * A)` row-major.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    stages: Vec<StageGeom>,
    flat: usize,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        if cfg.convs.is_empty() || cfg.convs.len() != cfg.pools.len() {
            return Err(Error::InvalidConfig(format!(
                "{} conv specs and {} pool specs; need matching non-empty lists",
                cfg.convs.len(),
                cfg.pools.len()
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                cfg.dropout
            )));
        }
        if cfg.fc1 == 0 || cfg.head.length == 0 || cfg.head.classes < 2 {
            return Err(Error::InvalidConfig("empty fully connected layer".into()));
        }
        let (mut c, mut h, mut w) = (1, cfg.input_height, cfg.input_width);
        let mut stages = Vec::with_capacity(cfg.convs.len());
        for (conv, pool) in cfg.convs.iter().zip(&cfg.pools) {
            if conv.filters == 0 || pool.window == 0 {
                return Err(Error::InvalidConfig("zero filters or pool window".into()));
            }
            let conv_h = out_extent(h, conv.kernel, conv.pad, conv.stride)?;
            let conv_w = out_extent(w, conv.kernel, conv.pad, conv.stride)?;
            let pool_h = out_extent(conv_h, pool.window, 0, pool.stride)?;
            let pool_w = out_extent(conv_w, pool.window, 0, pool.stride)?;
            stages.push(StageGeom {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: conv.filters,
                kernel: conv.kernel,
                pad: conv.pad,
                stride: conv.stride,
                conv_h,
                conv_w,
                pool_window: pool.window,
                pool_stride: pool.stride,
                pool_h,
                pool_w,
            });
            (c, h, w) = (conv.filters, pool_h, pool_w);
        }
        Ok(Network {
            flat: c * h * w,
            cfg,
            stages,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn head(&self) -> HeadLayout {
        self.cfg.head
    }

    pub fn input_len(&self) -> usize {
        self.cfg.input_height * self.cfg.input_width
    }

    pub fn flat_len(&self) -> usize {
        self.flat
    }

    /// Spatial `(height, width)` after each conv and each pool, in order.
    pub fn stage_extents(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .flat_map(|g| [(g.conv_h, g.conv_w), (g.pool_h, g.pool_w)])
            .collect()
    }

    fn layer_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut shapes: Vec<_> = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, g)| {
                (
                    format!("conv{}", i + 1),
                    vec![g.out_c, g.in_c, g.kernel, g.kernel],
                    g.patch_len(),
                )
            })
            .collect();
        shapes.push(("fc1".into(), vec![self.cfg.fc1, self.flat], self.flat));
        shapes.push((
            "fc2".into(),
            vec![self.cfg.head.total(), self.cfg.fc1],
            self.cfg.fc1,
        ));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>() + s[0])
            .sum()
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero. The output layer
    /// bound is further multiplied by [`OUTPUT_INIT_GAIN`] so the initial
    /// per-character distributions sit close to uniform. Each layer draws from
    /// its own child stream.
    pub fn init_params(&self, rs: &RandomSource) -> ModelParams {
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, fan_in))| {
                let gain = if i == last { OUTPUT_INIT_GAIN } else { 1.0 };
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                let mut lrs = rs.child(&name);
                LayerParams {
                    weight: Tensor::rand_uniform(&mut lrs, &shape, -bound, bound)
                        .expect("derived shapes are valid"),
                    bias: Tensor::zeros(&shape[..1]).expect("derived shapes are valid"),
                    name,
                }
            })
            .collect();
        ModelParams { layers }
    }

    /// Correctly shaped all-zero parameters.
    pub fn zero_params(&self) -> ModelParams {
        let layers = self
            .layer_shapes()
            .into_iter()
            .map(|(name, shape, _)| LayerParams {
                weight: Tensor::zeros(&shape).expect("derived shapes are valid"),
                bias: Tensor::zeros(&shape[..1]).expect("derived shapes are valid"),
                name,
            })
            .collect();
        ModelParams { layers }
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        let shapes = self.layer_shapes();
        let ok = params.layers.len() == shapes.len()
            && params
                .layers
                .iter()
                .zip(&shapes)
                .all(|(l, (_, s, _))| l.weight.shape() == &s[..] && l.bias.shape() == &s[..1]);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "params",
                "parameter shapes do not match the network configuration",
            ))
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        let want = [self.cfg.input_height, self.cfg.input_width];
        if s.len() != 4 || s[1] != 1 || s[2..] != want {
            return Err(Error::shape(
                "forward",
                format!("batch {s:?}, expected [N, 1, {}, {}]", want[0], want[1]),
            ));
        }
        Ok(s[0])
    }

    /// Forward pass over `batch` (`N x 1 x H x W`). In train mode dropout masks
    /// are drawn from `rs` and everything `backward` needs is cached; in eval
    /// mode dropout is the identity and `rs` is untouched.
    pub fn forward(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        mode: Mode,
        rs: &mut RandomSource,
    ) -> Result<(Vec<PredDist>, ForwardCache)> {
        let cache = self.forward_cached(params, batch, mode, rs)?;
        let dists = cache
            .probs
            .chunks_exact(self.cfg.head.total())
            .map(|p| PredDist::new(self.cfg.head.classes, p.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((dists, cache))
    }

    pub fn forward_cached(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        mode: Mode,
        rs: &mut RandomSource,
    ) -> Result<ForwardCache> {
        self.check_params(params)?;
        let n = self.check_batch(batch)?;
        let train = mode == Mode::Train;
        let keep = 1.0 - self.cfg.dropout;
        let drop_scale = 1.0 / keep;
        let use_dropout = train && self.cfg.dropout > 0.0;
        let gate_for = |z: f64, rs: &mut RandomSource| -> f64 {
            if z <= 0.0 {
                // Still consume the draw so mask streams do not depend on values.
                if use_dropout {
                    rs.uniform();
                }
                0.0
            } else if use_dropout {
                if rs.uniform() < keep {
                    drop_scale
                } else {
                    0.0
                }
            } else {
                1.0
            }
        };

        let mut input: Vec<f64> = batch.data().to_vec();
        let mut stages = Vec::with_capacity(self.stages.len());
        for (g, layer) in self.stages.iter().zip(&params.layers) {
            let (patch, area) = (g.patch_len(), g.conv_area());
            let mut cols = vec![0.0; n * patch * area];
            let mut act = vec![0.0; n * g.conv_len()];
            let mut gate = if train {
                vec![0.0; n * g.conv_len()]
            } else {
                Vec::new()
            };
            let mut pooled = vec![0.0; n * g.pool_len()];
            let mut argmax = vec![0u32; n * g.pool_len()];
            let w = layer.weight.data();
            let b = layer.bias.data();
            for s in 0..n {
                let x = &input[s * g.in_len()..(s + 1) * g.in_len()];
                let col = &mut cols[s * patch * area..(s + 1) * patch * area];
                im2col(g, x, col);
                let z = &mut act[s * g.conv_len()..(s + 1) * g.conv_len()];
                for (f, row) in z.chunks_exact_mut(area).enumerate() {
                    row.fill(b[f]);
                }
                gemm(
                    g.out_c,
                    patch,
                    area,
                    1.0,
                    MatRef::row_major(w, patch),
                    MatRef::row_major(col, area),
                    1.0,
                    z,
                    area,
                );
                if train {
                    let gs = &mut gate[s * g.conv_len()..(s + 1) * g.conv_len()];
                    for (v, gv) in z.iter_mut().zip(gs.iter_mut()) {
                        *gv = gate_for(*v, rs);
                        *v *= *gv;
                    }
                } else {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                max_pool(
                    g,
                    z,
                    &mut pooled[s * g.pool_len()..(s + 1) * g.pool_len()],
                    &mut argmax[s * g.pool_len()..(s + 1) * g.pool_len()],
                );
            }
            input = pooled;
            if train {
                stages.push(StageCache { cols, gate, argmax });
            }
        }

        let flat = input;
        let fc1 = &params.layers[self.stages.len()];
        let fc2 = &params.layers[self.stages.len() + 1];
        let hidden = self.cfg.fc1;
        let total = self.cfg.head.total();

        let mut fc1_act = vec![0.0; n * hidden];
        for row in fc1_act.chunks_exact_mut(hidden) {
            row.copy_from_slice(fc1.bias.data());
        }
        gemm(
            n,
            self.flat,
            hidden,
            1.0,
            MatRef::row_major(&flat, self.flat),
            MatRef::transposed(fc1.weight.data(), self.flat),
            1.0,
            &mut fc1_act,
            hidden,
        );
        let mut fc1_gate = Vec::new();
        if train {
            fc1_gate = fc1_act.iter().map(|&z| gate_for(z, rs)).collect();
            fc1_act
                .iter_mut()
                .zip(&fc1_gate)
                .for_each(|(v, g)| *v *= g);
        } else {
            fc1_act.iter_mut().for_each(|v| *v = v.max(0.0));
        }

        let mut probs = vec![0.0; n * total];
        for row in probs.chunks_exact_mut(total) {
            row.copy_from_slice(fc2.bias.data());
        }
        gemm(
            n,
            hidden,
            total,
            1.0,
            MatRef::row_major(&fc1_act, hidden),
            MatRef::transposed(fc2.weight.data(), hidden),
            1.0,
            &mut probs,
            total,
        );
        grouped_softmax(&mut probs, self.cfg.head.classes);

        Ok(ForwardCache {
            mode,
            batch: n,
            stages,
            flat: if train { flat } else { Vec::new() },
            fc1_gate,
            fc1_act: if train { fc1_act } else { Vec::new() },
            probs,
        })
    }

    /// Eval-mode probabilities for `inputs` (`count x H x W`, already
    /// normalized), computed in chunks that may run in parallel.
    pub fn predict(&self, params: &ModelParams, inputs: &[f64]) -> Result<Vec<PredDist>> {
        const CHUNK: usize = 64;
        let per = self.input_len();
        if inputs.len() % per != 0 {
            return Err(Error::shape(
                "predict",
                format!("{} values is not a whole number of images", inputs.len()),
            ));
        }
        let chunks: Vec<Vec<PredDist>> = inputs
            .par_chunks(CHUNK * per)
            .map(|chunk| {
                let batch = Tensor::from_vec(
                    &[
                        chunk.len() / per,
                        1,
                        self.cfg.input_height,
                        self.cfg.input_width,
                    ],
                    chunk.to_vec(),
                )?;
                let mut unused = RandomSource::new(0);
                self.forward(params, &batch, Mode::Eval, &mut unused)
                    .map(|(d, _)| d)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Gradients of the mean data loss with respect to every parameter.
    /// `targets` is the one-hot batch, `N x (L * A)`.
    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        targets: &Tensor,
    ) -> Result<ModelParams> {
        if cache.mode != Mode::Train {
            return Err(Error::Usage(
                "backward needs the cache of a train-mode forward pass".into(),
            ));
        }
        self.check_params(params)?;
        let n = cache.batch;
        let total = self.cfg.head.total();
        if targets.shape() != [n, total] {
            return Err(Error::shape(
                "backward",
                format!("targets {:?}, expected [{n}, {total}]", targets.shape()),
            ));
        }
        let mut grads = params.zeros_like();
        let nst = self.stages.len();
        let hidden = self.cfg.fc1;

        let inv_n = 1.0 / n as f64;
        let dlogits: Vec<f64> = cache
            .probs
            .iter()
            .zip(targets.data())
            .map(|(p, y)| (p - y) * inv_n)
            .collect();

        // Head.
        {
            let g = &mut grads.layers[nst + 1];
            gemm(
                total,
                n,
                hidden,
                1.0,
                MatRef::transposed(&dlogits, total),
                MatRef::row_major(&cache.fc1_act, hidden),
                0.0,
                g.weight.data_mut(),
                hidden,
            );
            column_sums(&dlogits, total, g.bias.data_mut());
        }
        let mut d_hidden = vec![0.0; n * hidden];
        gemm(
            n,
            total,
            hidden,
            1.0,
            MatRef::row_major(&dlogits, total),
            MatRef::row_major(params.layers[nst + 1].weight.data(), hidden),
            0.0,
            &mut d_hidden,
            hidden,
        );
        d_hidden
            .iter_mut()
            .zip(&cache.fc1_gate)
            .for_each(|(d, g)| *d *= g);

        // Hidden fully connected layer.
        {
            let g = &mut grads.layers[nst];
            gemm(
                hidden,
                n,
                self.flat,
                1.0,
                MatRef::transposed(&d_hidden, hidden),
                MatRef::row_major(&cache.flat, self.flat),
                0.0,
                g.weight.data_mut(),
                self.flat,
            );
            column_sums(&d_hidden, hidden, g.bias.data_mut());
        }
        let mut d_pooled = vec![0.0; n * self.flat];
        gemm(
            n,
            hidden,
            self.flat,
            1.0,
            MatRef::row_major(&d_hidden, hidden),
            MatRef::row_major(params.layers[nst].weight.data(), self.flat),
            0.0,
            &mut d_pooled,
            self.flat,
        );

        // Conv stages, last to first.
        for (si, g) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[si];
            let (patch, area) = (g.patch_len(), g.conv_area());
            let w = params.layers[si].weight.data();
            let need_input_grad = si > 0;
            let mut d_input = if need_input_grad {
                vec![0.0; n * g.in_len()]
            } else {
                Vec::new()
            };
            let mut dz = vec![0.0; g.conv_len()];
            let mut dcols = vec![0.0; patch * area];
            let gl = &mut grads.layers[si];
            for s in 0..n {
                dz.fill(0.0);
                let dp = &d_pooled[s * g.pool_len()..(s + 1) * g.pool_len()];
                let am = &sc.argmax[s * g.pool_len()..(s + 1) * g.pool_len()];
                for (&d, &a) in dp.iter().zip(am) {
                    dz[a as usize] += d;
                }
                let gate = &sc.gate[s * g.conv_len()..(s + 1) * g.conv_len()];
                dz.iter_mut().zip(gate).for_each(|(d, gv)| *d *= gv);

                let col = &sc.cols[s * patch * area..(s + 1) * patch * area];
                gemm(
                    g.out_c,
                    area,
                    patch,
                    1.0,
                    MatRef::row_major(&dz, area),
                    MatRef::transposed(col, area),
                    1.0,
                    gl.weight.data_mut(),
                    patch,
                );
                for (b, row) in gl.bias.data_mut().iter_mut().zip(dz.chunks_exact(area)) {
                    *b += row.iter().sum::<f64>();
                }
                if need_input_grad {
                    gemm(
                        patch,
                        g.out_c,
                        area,
                        1.0,
                        MatRef::transposed(w, patch),
                        MatRef::row_major(&dz, area),
                        0.0,
                        &mut dcols,
                        area,
                    );
                    col2im(
                        g,
                        &dcols,
                        &mut d_input[s * g.in_len()..(s + 1) * g.in_len()],
                    );
                }
            }
            d_pooled = d_input;
        }
        Ok(grads)
    }
}

fn column_sums(m: &[f64], cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for row in m.chunks_exact(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
}

/// Mean over samples of the summed per-character cross-entropy.
pub fn loss(preds: &[PredDist], targets: &Tensor) -> Result<f64> {
    let n = preds.len();
    let Some(first) = preds.first() else {
        return Err(Error::shape("loss", "empty batch"));
    };
    let width = first.as_slice().len();
    if targets.shape() != [n, width] || preds.iter().any(|p| p.as_slice().len() != width) {
        return Err(Error::shape(
            "loss",
            format!("{n} predictions of {width} vs targets {:?}", targets.shape()),
        ));
    }
    Ok(loss_from_probs(
        preds.iter().flat_map(|p| p.as_slice().iter().copied()),
        targets.data(),
        n,
    ))
}

pub(crate) fn loss_from_probs(
    probs: impl Iterator<Item = f64>,
    targets: &[f64],
    n: usize,
) -> f64 {
    let total: f64 = probs
        .zip(targets)
        .filter(|(_, &y)| y != 0.0)
        .map(|(p, &y)| -y * p.max(PROB_FLOOR).ln())
        .sum();
    total / n as f64
}

impl ForwardCache {
    /// Loss of the cached prediction against `targets`.
    pub fn loss(&self, targets: &Tensor) -> Result<f64> {
        if targets.len() != self.probs.len() {
            return Err(Error::shape(
                "loss",
                format!("{} probabilities vs {} targets", self.probs.len(), targets.len()),
            ));
        }
        Ok(loss_from_probs(
            self.probs.iter().copied(),
            targets.data(),
            self.batch,
        ))
    }
}
