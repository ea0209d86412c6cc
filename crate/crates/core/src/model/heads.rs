use super::layers::{dropout_mask, relu_backward, relu_forward, Linear, Mode};
use super::params::{Grads, ParamStore};
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub(crate) enum DenseOp {
    Linear(Linear),
    Relu,
    Dropout(f64),
}

#[derive(Debug)]
pub(crate) enum DenseCache<T> {
    Linear(Matrix<T>),
    Relu(Vec<bool>),
    Dropout(Option<Vec<T>>),
}

/// Stack of fully connected layers with optional ReLU and dropout.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    ops: Vec<DenseOp>,
}

/// Builder: `widths[0]` inputs, one linear layer per following width, ReLU
/// (and dropout when `dropout > 0`) between layers, and after the last one
/// when `final_relu` is set.
pub(crate) fn mlp<T: Scalar>(
    params: &mut ParamStore<T>,
    name: &str,
    widths: &[usize],
    dropout: f64,
    final_relu: bool,
    seed: u64,
) -> Mlp {
    let mut ops = Vec::new();
    let layers = widths.len() - 1;
    for i in 0..layers {
        let lname = format!("{name}.fc{i}");
        let mut r = rng::substream(seed, &format!("{}/{lname}", rng::INIT), 0);
        ops.push(DenseOp::Linear(Linear::new(params, &lname, widths[i], widths[i + 1], &mut r)));
        if i + 1 < layers || final_relu {
            ops.push(DenseOp::Relu);
            if dropout > 0.0 && i + 1 < layers {
                ops.push(DenseOp::Dropout(dropout));
            }
        }
    }
    Mlp { ops }
}

impl Mlp {
    pub(crate) fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: Matrix<T>,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Matrix<T>, Vec<DenseCache<T>>)> {
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut cur = x;
        for op in &self.ops {
            match op {
                DenseOp::Linear(l) => {
                    let y = l.forward(params, &cur)?;
                    caches.push(DenseCache::Linear(std::mem::replace(&mut cur, y)));
                }
                DenseOp::Relu => caches.push(DenseCache::Relu(relu_forward(&mut cur.data))),
                DenseOp::Dropout(p) => {
                    if mode == Mode::Train {
                        let r = rng
                            .as_deref_mut()
                            .ok_or_else(|| Error::InvalidArgument("dropout in train mode needs an rng".into()))?;
                        let mask: Vec<T> = dropout_mask(cur.data.len(), *p, r);
                        cur.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                        caches.push(DenseCache::Dropout(Some(mask)));
                    } else {
                        caches.push(DenseCache::Dropout(None));
                    }
                }
            }
        }
        Ok((cur, caches))
    }

    pub(crate) fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut Grads<T>,
        caches: &[DenseCache<T>],
        dy: &Matrix<T>,
    ) -> Matrix<T> {
        let mut grad = dy.clone();
        for (op, cache) in self.ops.iter().zip(caches).rev() {
            match (op, cache) {
                (DenseOp::Linear(l), DenseCache::Linear(x)) => grad = l.backward(params, grads, x, &grad),
                (DenseOp::Relu, DenseCache::Relu(mask)) => relu_backward(&mut grad.data, mask),
                (DenseOp::Dropout(_), DenseCache::Dropout(mask)) => {
                    if let Some(mask) = mask {
                        grad.data.iter_mut().zip(mask).for_each(|(g, &m)| *g *= m);
                    }
                }
                _ => unreachable!("cache does not match layer"),
            }
        }
        grad
    }
}
