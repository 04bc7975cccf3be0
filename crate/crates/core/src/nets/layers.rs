//! Layer building blocks shared by every network.

use super::store::{he_init, Binder, ParamId, ParamStore};
use crate::graph::{Scalar, Var};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            he_init(rng, &[out_c, in_c, k, k], in_c * k * k),
        );
        let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_c])));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized variant for final mean / log-variance heads, so the
    /// initial posteriors sit at the prior.
    pub fn init_zero<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            ArrayD::zeros(IxDyn(&[out_c, in_c, k, k])),
        );
        let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_c])));
        Conv2d { w, b, stride, pad }
    }

    pub fn apply<F: Scalar>(&self, bind: &mut Binder<'_, F>, x: Var) -> Var {
        let w = bind.var(self.w);
        let b = bind.var(self.b);
        bind.graph().conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            he_init(rng, &[in_c, out_c, k, k], in_c * k * k),
        );
        let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_c])));
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn apply<F: Scalar>(&self, bind: &mut Binder<'_, F>, x: Var) -> Var {
        let w = bind.var(self.w);
        let b = bind.var(self.b);
        bind.graph().conv2d_transpose(x, w, b, self.stride, self.pad)
    }
}

/// Two 3×3 convolutions with a skip connection:
/// `relu(x + conv2(relu(conv1(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ResBlock {
            conv1: Conv2d::init(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            conv2: Conv2d::init(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
        }
    }

    pub fn apply<F: Scalar>(&self, bind: &mut Binder<'_, F>, x: Var) -> Var {
        let g = bind.graph();
        let h = g.relu(self.conv1.apply(bind, x));
        let h = self.conv2.apply(bind, h);
        let g = bind.graph();
        g.relu(g.add(x, h))
    }
}

/// A chain of residual blocks.
#[derive(Debug, Clone)]
pub struct ResStack {
    blocks: Vec<ResBlock>,
}

impl ResStack {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ResStack {
            blocks: (0..count)
                .map(|i| ResBlock::init(store, &format!("{name}.res{i}"), channels, rng))
                .collect(),
        }
    }

    pub fn apply<F: Scalar>(&self, bind: &mut Binder<'_, F>, mut x: Var) -> Var {
        for block in &self.blocks {
            x = block.apply(bind, x);
        }
        x
    }
}
