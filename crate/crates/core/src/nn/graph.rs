use std::rc::Rc;

use super::params::{ConvParams, ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// The operation set the model is written against.
///
/// [`Eval`] runs the operations directly; [`super::Tape`] additionally
/// records them for reverse-mode differentiation. Model code is generic over
/// this trait so decoding and training share one forward definition.
pub trait Graph<S: Scalar> {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<S>;

    /// A leaf that never receives gradients.
    fn constant(&mut self, t: Tensor<S>) -> Self::Var;

    fn param(&mut self, id: ParamId) -> Self::Var;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// `[C, H, W] * [1, H, W]`, broadcasting the mask over channels.
    fn mul_mask(&mut self, x: &Self::Var, mask: &Self::Var) -> Result<Self::Var>;

    fn one_minus(&mut self, a: &Self::Var) -> Self::Var;

    fn sigmoid(&mut self, a: &Self::Var) -> Self::Var;

    fn tanh(&mut self, a: &Self::Var) -> Self::Var;

    fn gelu(&mut self, a: &Self::Var) -> Self::Var;

    /// Channel concatenation.
    fn concat(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// Splits channels `[0, at)` and `[at, C)`.
    fn split(&mut self, a: &Self::Var, at: usize) -> Result<(Self::Var, Self::Var)>;

    fn pixel_shuffle(&mut self, a: &Self::Var, factor: usize) -> Result<Self::Var>;

    fn warp(&mut self, feature: &Self::Var, flow: &Self::Var) -> Result<Self::Var>;

    /// GRU state update `(1 - z) * h + z * candidate`.
    fn gru_update(
        &mut self,
        z: &Self::Var,
        h: &Self::Var,
        candidate: &Self::Var,
    ) -> Result<Self::Var>;

    /// `(1 - alpha) * grid[lo] + alpha * grid[hi]` along the leading axis.
    fn temporal_lerp(
        &mut self,
        grid: &Self::Var,
        lo: usize,
        hi: usize,
        alpha: S,
    ) -> Result<Self::Var>;

    /// Mean squared error against a fixed target, as a one-element tensor.
    fn mse(&mut self, pred: &Self::Var, target: &Tensor<S>) -> Result<Self::Var>;

    /// Arithmetic mean of one-element tensors.
    fn mean(&mut self, items: &[Self::Var]) -> Result<Self::Var>;

    fn conv(&mut self, params: &ConvParams, x: &Self::Var) -> Result<Self::Var> {
        let w = self.param(params.weight);
        let b = self.param(params.bias);
        self.conv2d(x, &w, &b)
    }
}

pub(crate) fn mask_dims<S: Scalar>(x: &Tensor<S>, mask: &Tensor<S>) -> Result<(usize, usize)> {
    let (c, h, w) = x.chw()?;
    if mask.shape() != [1, h, w] {
        return Err(shape_err(format!(
            "mask must be [1, {h}, {w}], got {:?}",
            mask.shape()
        )));
    }
    Ok((c, h * w))
}

pub(crate) fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ca, h, w) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (h, w) != (hb, wb) {
        return Err(shape_err(format!(
            "concat of {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

pub(crate) fn split_channels<S: Scalar>(
    a: &Tensor<S>,
    at: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, h, w) = a.chw()?;
    if at > c {
        return Err(shape_err(format!("split at {at} of {c} channels")));
    }
    let cut = at * h * w;
    Ok((
        Tensor::from_vec(&[at, h, w], a.data()[..cut].to_vec())?,
        Tensor::from_vec(&[c - at, h, w], a.data()[cut..].to_vec())?,
    ))
}

pub(crate) fn lerp_slices<S: Scalar>(
    grid: &Tensor<S>,
    lo: usize,
    hi: usize,
    alpha: S,
) -> Result<Tensor<S>> {
    let a = grid.slice_outer(lo)?;
    if alpha == S::zero() {
        return Ok(a);
    }
    let b = grid.slice_outer(hi)?;
    if alpha == S::one() {
        return Ok(b);
    }
    let keep = S::one() - alpha;
    a.zip_map(&b, |x, y| keep * x + alpha * y)
}

pub(crate) fn gru_mix<S: Scalar>(
    z: &Tensor<S>,
    h: &Tensor<S>,
    cand: &Tensor<S>,
) -> Result<Tensor<S>> {
    z.same_shape(h)?;
    z.same_shape(cand)?;
    let data = z
        .data()
        .iter()
        .zip(h.data())
        .zip(cand.data())
        .map(|((&z, &h), &c)| (S::one() - z) * h + z * c)
        .collect();
    Tensor::from_vec(z.shape(), data)
}

pub(crate) fn mse_value<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    pred.same_shape(target)?;
    let n = S::from_f64(pred.len() as f64);
    let sum: S = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Direct evaluation without gradient bookkeeping.
pub struct Eval<'m, S: Scalar> {
    store: &'m ParamStore<S>,
    cache: Vec<Option<Rc<Tensor<S>>>>,
}

impl<'m, S: Scalar> Eval<'m, S> {
    pub fn new(store: &'m ParamStore<S>) -> Self {
        Self {
            store,
            cache: vec![None; store.len()],
        }
    }
}

type EVar<S> = Rc<Tensor<S>>;

impl<S: Scalar> Graph<S> for Eval<'_, S> {
    type Var = EVar<S>;

    fn value<'a>(&'a self, v: &'a EVar<S>) -> &'a Tensor<S> {
        v
    }

    fn constant(&mut self, t: Tensor<S>) -> EVar<S> {
        Rc::new(t)
    }

    fn param(&mut self, id: ParamId) -> EVar<S> {
        self.cache[id.0]
            .get_or_insert_with(|| Rc::new(self.store.get(id).clone()))
            .clone()
    }

    fn conv2d(&mut self, x: &EVar<S>, w: &EVar<S>, b: &EVar<S>) -> Result<EVar<S>> {
        kernels::conv2d(x, w, b).map(Rc::new)
    }

    fn add(&mut self, a: &EVar<S>, b: &EVar<S>) -> Result<EVar<S>> {
        a.add(b).map(Rc::new)
    }

    fn mul(&mut self, a: &EVar<S>, b: &EVar<S>) -> Result<EVar<S>> {
        a.mul(b).map(Rc::new)
    }

    fn mul_mask(&mut self, x: &EVar<S>, mask: &EVar<S>) -> Result<EVar<S>> {
        let (c, hw) = mask_dims(x, mask)?;
        let m = mask.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * m[i % hw])
            .collect();
        debug_assert_eq!(x.len(), c * hw);
        Tensor::from_vec(x.shape(), data).map(Rc::new)
    }

    fn one_minus(&mut self, a: &EVar<S>) -> EVar<S> {
        Rc::new(a.map(|v| S::one() - v))
    }

    fn sigmoid(&mut self, a: &EVar<S>) -> EVar<S> {
        Rc::new(a.map(kernels::sigmoid))
    }

    fn tanh(&mut self, a: &EVar<S>) -> EVar<S> {
        Rc::new(a.map(|v| v.tanh()))
    }

    fn gelu(&mut self, a: &EVar<S>) -> EVar<S> {
        Rc::new(a.map(kernels::gelu))
    }

    fn concat(&mut self, a: &EVar<S>, b: &EVar<S>) -> Result<EVar<S>> {
        concat_channels(a, b).map(Rc::new)
    }

    fn split(&mut self, a: &EVar<S>, at: usize) -> Result<(EVar<S>, EVar<S>)> {
        let (l, r) = split_channels(a, at)?;
        Ok((Rc::new(l), Rc::new(r)))
    }

    fn pixel_shuffle(&mut self, a: &EVar<S>, factor: usize) -> Result<EVar<S>> {
        kernels::pixel_shuffle(a, factor).map(Rc::new)
    }

    fn warp(&mut self, feature: &EVar<S>, flow: &EVar<S>) -> Result<EVar<S>> {
        kernels::warp(feature, flow).map(Rc::new)
    }

    fn gru_update(&mut self, z: &EVar<S>, h: &EVar<S>, candidate: &EVar<S>) -> Result<EVar<S>> {
        gru_mix(z, h, candidate).map(Rc::new)
    }

    fn temporal_lerp(&mut self, grid: &EVar<S>, lo: usize, hi: usize, alpha: S) -> Result<EVar<S>> {
        lerp_slices(grid, lo, hi, alpha).map(Rc::new)
    }

    fn mse(&mut self, pred: &EVar<S>, target: &Tensor<S>) -> Result<EVar<S>> {
        Ok(Rc::new(Tensor::scalar(mse_value(pred, target)?)))
    }

    fn mean(&mut self, items: &[EVar<S>]) -> Result<EVar<S>> {
        if items.is_empty() {
            return Err(shape_err("mean of zero items"));
        }
        if let Some(bad) = items.iter().find(|t| t.len() != 1) {
            return Err(shape_err(format!("mean of non-scalar {:?}", bad.shape())));
        }
        let total: S = items.iter().map(|t| t.sum()).sum();
        Ok(Rc::new(Tensor::scalar(
            total / S::from_f64(items.len() as f64),
        )))
    }
}
