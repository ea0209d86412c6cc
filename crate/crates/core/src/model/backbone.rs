use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, BatchNorm2d, BnCache, BnPolicy,
    Buffers, Conv2d, ConvCache, MaxPool2d, Mode, PoolCache,
};
use super::params::{Grads, ParamStore};
use super::tensor::{FeatureMap, Matrix};
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Conv(3x3)-BN-ReLU-MaxPool(2) blocks followed by global average pooling.
    SmallConv,
    /// ResNet-18 with global average pooling; 512-dimensional output.
    PaperResnet18,
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug)]
struct ConvBnCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
}

impl ConvBn {
    fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        bufs: &mut Buffers<'_, T>,
        x: &FeatureMap<T>,
        mode: Mode,
        policy: BnPolicy,
    ) -> Result<(FeatureMap<T>, ConvBnCache<T>)> {
        let (z, conv) = self.conv.forward(params, x)?;
        let (y, bn) = self.bn.forward(params, bufs, &z, mode, policy);
        Ok((y, ConvBnCache { conv, bn }))
    }

    fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &ConvBnCache<T>,
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let dz = self.bn.backward(params, grads, &cache.bn, dy);
        self.conv.backward(params, grads, &cache.conv, &dz, need_dx)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
enum Stage {
    ConvBnRelu(ConvBn),
    Pool(MaxPool2d),
    Block(BasicBlock),
}

#[derive(Debug)]
enum StageCache<T> {
    ConvBnRelu {
        inner: ConvBnCache<T>,
        mask: Vec<bool>,
    },
    Pool(PoolCache),
    Block {
        a: ConvBnCache<T>,
        a_mask: Vec<bool>,
        b: ConvBnCache<T>,
        shortcut: Option<ConvBnCache<T>>,
        mask: Vec<bool>,
    },
}

/// Cached activations of one backbone forward pass.
#[derive(Debug)]
pub struct BackboneTape<T> {
    stages: Vec<StageCache<T>>,
    pooled: (usize, usize, usize, usize),
    input: (usize, usize, usize, usize),
}

impl<T> BackboneTape<T> {
    /// `(channels, batch, height, width)` of the input batch.
    pub fn input_dims(&self) -> (usize, usize, usize, usize) {
        self.input
    }
}

/// Shared feature extractor `f`.
#[derive(Debug, Clone)]
pub struct Backbone {
    kind: BackboneKind,
    stages: Vec<Stage>,
    out_dim: usize,
}

fn init_rng(seed: u64, name: &str) -> Rng {
    rng::substream(seed, &format!("{}/{name}", rng::INIT), 0)
}

fn conv_bn<T: Scalar>(
    params: &mut ParamStore<T>,
    buffers: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    (cin, cout, k, s, p): (usize, usize, usize, usize, usize),
) -> ConvBn {
    let conv_name = format!("{name}.conv");
    ConvBn {
        conv: Conv2d::new(params, &conv_name, cin, cout, k, s, p, &mut init_rng(seed, &conv_name)),
        bn: BatchNorm2d::new(params, buffers, &format!("{name}.bn"), cout),
    }
}

impl Backbone {
    /// One block per entry of `widths`; the embedding size is the last width.
    pub fn small_conv<T: Scalar>(
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        widths: &[usize],
        seed: u64,
    ) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Stage::ConvBnRelu(conv_bn(
                params,
                buffers,
                seed,
                &format!("backbone.{i}"),
                (cin, w, 3, 1, 1),
            )));
            stages.push(Stage::Pool(MaxPool2d {
                kernel: 2,
                stride: 2,
                pad: 0,
                ceil_mode: true,
            }));
            cin = w;
        }
        Self {
            kind: BackboneKind::SmallConv,
            stages,
            out_dim: cin,
        }
    }

    pub fn resnet18<T: Scalar>(params: &mut ParamStore<T>, buffers: &mut ParamStore<T>, seed: u64) -> Self {
        let mut stages = vec![
            Stage::ConvBnRelu(conv_bn(params, buffers, seed, "backbone.stem", (3, 64, 7, 2, 3))),
            Stage::Pool(MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 1,
                ceil_mode: false,
            }),
        ];
        let mut cin = 64;
        for (layer, &width) in [64usize, 128, 256, 512].iter().enumerate() {
            for block in 0..2 {
                let stride = if layer > 0 && block == 0 { 2 } else { 1 };
                let name = format!("backbone.layer{}.{block}", layer + 1);
                let shortcut = (stride != 1 || cin != width).then(|| {
                    conv_bn(params, buffers, seed, &format!("{name}.down"), (cin, width, 1, stride, 0))
                });
                stages.push(Stage::Block(BasicBlock {
                    a: conv_bn(params, buffers, seed, &format!("{name}.a"), (cin, width, 3, stride, 1)),
                    b: conv_bn(params, buffers, seed, &format!("{name}.b"), (width, width, 3, 1, 1)),
                    shortcut,
                }));
                cin = width;
            }
        }
        Self {
            kind: BackboneKind::PaperResnet18,
            stages,
            out_dim: 512,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        bufs: &mut Buffers<'_, T>,
        x: &FeatureMap<T>,
        mode: Mode,
        policy: BnPolicy,
    ) -> Result<(Matrix<T>, BackboneTape<T>)> {
        let input = (x.channels, x.batch, x.height, x.width);
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut cur: Option<FeatureMap<T>> = None;
        for stage in &self.stages {
            let inp = cur.as_ref().unwrap_or(x);
            let (out, cache) = match stage {
                Stage::ConvBnRelu(cb) => {
                    let (mut y, inner) = cb.forward(params, bufs, inp, mode, policy)?;
                    let mask = relu_forward(&mut y.data);
                    (y, StageCache::ConvBnRelu { inner, mask })
                }
                Stage::Pool(pool) => {
                    let (y, c) = pool.forward(inp)?;
                    (y, StageCache::Pool(c))
                }
                Stage::Block(block) => {
                    let (mut h, a) = block.a.forward(params, bufs, inp, mode, policy)?;
                    let a_mask = relu_forward(&mut h.data);
                    let (mut y, b) = block.b.forward(params, bufs, &h, mode, policy)?;
                    let shortcut = match &block.shortcut {
                        Some(sc) => {
                            let (s, c) = sc.forward(params, bufs, inp, mode, policy)?;
                            y.data.iter_mut().zip(&s.data).for_each(|(v, &s)| *v += s);
                            Some(c)
                        }
                        None => {
                            y.data.iter_mut().zip(&inp.data).for_each(|(v, &s)| *v += s);
                            None
                        }
                    };
                    let mask = relu_forward(&mut y.data);
                    (
                        y,
                        StageCache::Block {
                            a,
                            a_mask,
                            b,
                            shortcut,
                            mask,
                        },
                    )
                }
            };
            caches.push(cache);
            cur = Some(out);
        }
        let last = cur.as_ref().unwrap_or(x);
        let pooled = (last.channels, last.batch, last.height, last.width);
        let emb = global_avg_pool(last);
        Ok((
            emb,
            BackboneTape {
                stages: caches,
                pooled,
                input,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_emb`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut Grads<T>,
        tape: &BackboneTape<T>,
        d_emb: &Matrix<T>,
        want_input: bool,
    ) -> Option<FeatureMap<T>> {
        let mut grad = global_avg_pool_backward(d_emb, tape.pooled);
        for (i, (stage, cache)) in self.stages.iter().zip(&tape.stages).enumerate().rev() {
            let need_dx = i > 0 || want_input;
            let next = match (stage, cache) {
                (Stage::ConvBnRelu(cb), StageCache::ConvBnRelu { inner, mask }) => {
                    relu_backward(&mut grad.data, mask);
                    cb.backward(params, grads, inner, &grad, need_dx)
                }
                (Stage::Pool(pool), StageCache::Pool(c)) => Some(pool.backward(c, &grad)),
                (
                    Stage::Block(block),
                    StageCache::Block {
                        a,
                        a_mask,
                        b,
                        shortcut,
                        mask,
                    },
                ) => {
                    relu_backward(&mut grad.data, mask);
                    let mut dh = block.b.backward(params, grads, b, &grad, true).expect("requested");
                    relu_backward(&mut dh.data, a_mask);
                    let dx_a = block.a.backward(params, grads, a, &dh, true).expect("requested");
                    let mut dx = match (&block.shortcut, shortcut) {
                        (Some(sc), Some(c)) => sc.backward(params, grads, c, &grad, true).expect("requested"),
                        _ => grad,
                    };
                    dx.data.iter_mut().zip(&dx_a.data).for_each(|(v, &a)| *v += a);
                    Some(dx)
                }
                _ => unreachable!("tape does not match backbone"),
            };
            match next {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }
}
