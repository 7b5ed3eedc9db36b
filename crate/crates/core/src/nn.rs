//! Layer helpers shared by the encoder, mappers and discriminator.
//!
//! A network's `init` pushes parameters in a fixed order and its `forward`
//! consumes the bound handles in that same order through a [`Cursor`].

use edgebridge_tensor::{kaiming_normal, Bound, Float, Graph, ParamSet, Tensor, Var};
use rand::Rng;

use crate::image::Image;

pub(crate) const GN_EPS: f64 = 1e-5;

pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bound: &'a Bound) -> Self {
        Self {
            vars: bound.vars(),
            pos: 0,
        }
    }

    pub(crate) fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub(crate) fn finish(self) {
        assert_eq!(self.pos, self.vars.len(), "forward pass did not consume every parameter");
    }
}

pub(crate) fn push_conv<T: Float>(
    ps: &mut ParamSet<T>,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    ps.push(format!("{name}.w"), kaiming_normal(&[out, inp, k, k], inp * k * k, rng));
    if bias {
        ps.push(format!("{name}.b"), Tensor::zeros(&[out]));
    }
}

/// Weight stored as `[out, in]`.
pub(crate) fn push_linear<T: Float>(ps: &mut ParamSet<T>, name: &str, out: usize, inp: usize, bias: bool, rng: &mut impl Rng) {
    ps.push(format!("{name}.w"), kaiming_normal(&[out, inp], inp, rng));
    if bias {
        ps.push(format!("{name}.b"), Tensor::zeros(&[out]));
    }
}

pub(crate) fn push_norm<T: Float>(ps: &mut ParamSet<T>, name: &str, channels: usize) {
    ps.push(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
    ps.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
}

pub(crate) fn conv<T: Float>(g: &mut Graph<T>, cur: &mut Cursor, x: Var, stride: usize, pad: usize, bias: bool) -> Var {
    let w = cur.next();
    let y = g.conv2d(x, w, stride, pad);
    if bias {
        let b = cur.next();
        g.add_channel(y, b)
    } else {
        y
    }
}

pub(crate) fn linear<T: Float>(g: &mut Graph<T>, cur: &mut Cursor, x: Var, bias: bool) -> Var {
    let w = cur.next();
    let y = g.matmul_t(x, w, false, true);
    if bias {
        let b = cur.next();
        g.add_row(y, b)
    } else {
        y
    }
}

/// Group norm followed by a per-channel affine.
pub(crate) fn norm<T: Float>(g: &mut Graph<T>, cur: &mut Cursor, x: Var, groups: usize) -> Var {
    let c = g.shape(x)[1];
    let y = g.group_norm(x, groups.min(c).max(1), T::of(GN_EPS));
    let (gamma, beta) = (cur.next(), cur.next());
    let y = g.mul_channel(y, gamma);
    g.add_channel(y, beta)
}

/// Largest divisor of `c` not exceeding `want`.
pub(crate) fn groups_for(c: usize, want: usize) -> usize {
    (1..=want.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Stacks same-shaped images into an NCHW tensor.
pub fn images_to_tensor<T: Float>(images: &[&Image]) -> Tensor<T> {
    assert!(!images.is_empty(), "empty image batch");
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        assert!(im.channels() == c && im.height() == h && im.width() == w, "ragged image batch");
        data.extend(im.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Replicates a one-channel NCHW map to three channels.
pub(crate) fn gray_to_rgb<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    g.concat(&[x, x, x], 1)
}
