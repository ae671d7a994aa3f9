use super::graph::{
    concat_channels, gru_mix, lerp_slices, mask_dims, mse_value, split_channels, Graph,
};
use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// Index of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulMask {
        x: NodeId,
        mask: NodeId,
    },
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Concat(NodeId, NodeId),
    Slice {
        src: NodeId,
        offset: usize,
    },
    PixelShuffle {
        src: NodeId,
        factor: usize,
    },
    Warp {
        feature: NodeId,
        flow: NodeId,
    },
    GruUpdate {
        z: NodeId,
        h: NodeId,
        cand: NodeId,
    },
    TemporalLerp {
        grid: NodeId,
        lo: usize,
        hi: usize,
        alpha: S,
    },
    Mse {
        pred: NodeId,
        target: Tensor<S>,
    },
    Mean(Vec<NodeId>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<'m, S: Scalar> {
    store: &'m ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<S> {
    params: Vec<Option<Tensor<S>>>,
    leaves: Vec<(NodeId, Tensor<S>)>,
}

impl<S: Scalar> Grads<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf created with [`Tape::variable`].
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.leaves.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    pub fn into_params(self) -> Vec<Option<Tensor<S>>> {
        self.params
    }
}

impl<'m, S: Scalar> Tape<'m, S> {
    pub fn new(store: &'m ParamStore<S>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    /// A leaf whose gradient is reported by [`Grads::leaf`].
    pub fn variable(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t, true, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|n| self.nodes[n.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Back-propagates from the one-element tensor `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<S>> {
        if self.val(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), S::one()));
        let mut out = Grads {
            params: vec![None; self.store.len()],
            leaves: Vec::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match node.param {
                    Some(p) => out.params[p.0] = Some(g),
                    None => out.leaves.push((NodeId(i), g)),
                },
                Op::Conv { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.val(*x), self.val(*w), self.val(*b), &g)?;
                    self.acc(&mut grads, *x, dx)?;
                    self.acc(&mut grads, *w, dw)?;
                    self.acc(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, g.clone())?;
                    self.acc(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.mul(self.val(*b))?)?;
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.mul(self.val(*a))?)?;
                    }
                }
                Op::MulMask { x, mask } => {
                    let (c, hw) = mask_dims(self.val(*x), self.val(*mask))?;
                    let m = self.val(*mask).data();
                    let xv = self.val(*x).data();
                    let gd = g.data();
                    if self.needs(*x) {
                        let dx = Tensor::from_vec(
                            g.shape(),
                            gd.iter().enumerate().map(|(j, &v)| v * m[j % hw]).collect(),
                        )?;
                        self.acc(&mut grads, *x, dx)?;
                    }
                    if self.needs(*mask) {
                        let mut dm = vec![S::zero(); hw];
                        for ch in 0..c {
                            for (p, d) in dm.iter_mut().enumerate() {
                                *d += gd[ch * hw + p] * xv[ch * hw + p];
                            }
                        }
                        self.acc(
                            &mut grads,
                            *mask,
                            Tensor::from_vec(self.val(*mask).shape(), dm)?,
                        )?;
                    }
                }
                Op::OneMinus(a) => self.acc(&mut grads, *a, g.map(|v| -v))?,
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y * (S::one() - y))?;
                    self.acc(&mut grads, *a, d)?;
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (S::one() - y * y))?;
                    self.acc(&mut grads, *a, d)?;
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.val(*a), |gv, x| gv * kernels::gelu_grad(x))?;
                    self.acc(&mut grads, *a, d)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.val(*a).shape()[0];
                    let (ga, gb) = split_channels(&g, ca)?;
                    self.acc(&mut grads, *a, ga)?;
                    self.acc(&mut grads, *b, gb)?;
                }
                Op::Slice { src, offset } => {
                    let src = *src;
                    if self.needs(src) {
                        let slot = grads[src.0]
                            .get_or_insert_with(|| Tensor::zeros(self.val(src).shape()));
                        for (d, &v) in slot.data_mut()[*offset..].iter_mut().zip(g.data()) {
                            *d += v;
                        }
                    }
                }
                Op::PixelShuffle { src, factor } => {
                    self.acc(&mut grads, *src, kernels::pixel_unshuffle(&g, *factor)?)?;
                }
                Op::Warp { feature, flow } => {
                    let (df, dflow) =
                        kernels::warp_backward(self.val(*feature), self.val(*flow), &g)?;
                    self.acc(&mut grads, *feature, df)?;
                    self.acc(&mut grads, *flow, dflow)?;
                }
                Op::GruUpdate { z, h, cand } => {
                    let (zv, hv, cv) = (self.val(*z), self.val(*h), self.val(*cand));
                    if self.needs(*z) {
                        let d = g.zip_map(&cv.sub(hv)?, |gv, diff| gv * diff)?;
                        self.acc(&mut grads, *z, d)?;
                    }
                    if self.needs(*h) {
                        let d = g.zip_map(zv, |gv, zz| gv * (S::one() - zz))?;
                        self.acc(&mut grads, *h, d)?;
                    }
                    if self.needs(*cand) {
                        self.acc(&mut grads, *cand, g.mul(zv)?)?;
                    }
                }
                Op::TemporalLerp {
                    grid,
                    lo,
                    hi,
                    alpha,
                } => {
                    let grid = *grid;
                    if self.needs(grid) {
                        let n = g.len();
                        let keep = S::one() - *alpha;
                        let slot = grads[grid.0]
                            .get_or_insert_with(|| Tensor::zeros(self.val(grid).shape()));
                        let data = slot.data_mut();
                        for (j, &v) in g.data().iter().enumerate() {
                            data[lo * n + j] += keep * v;
                            data[hi * n + j] += *alpha * v;
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = self.val(*pred);
                    let k = S::from_f64(2.0) * g.data()[0] / S::from_f64(pv.len() as f64);
                    let d = pv.zip_map(target, |p, t| k * (p - t))?;
                    self.acc(&mut grads, *pred, d)?;
                }
                Op::Mean(items) => {
                    let k = g.data()[0] / S::from_f64(items.len() as f64);
                    for it in items {
                        self.acc(&mut grads, *it, Tensor::scalar(k))?;
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) -> Result<()> {
        if !self.needs(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

impl<S: Scalar> Graph<S> for Tape<'_, S> {
    type Var = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<S> {
        self.val(*v)
    }

    fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t, false, None)
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.leaf(self.store.get(id).clone(), true, Some(id));
        self.param_nodes[id.0] = Some(n);
        n
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::conv2d(self.val(*x), self.val(*w), self.val(*b))?;
        Ok(self.push(
            v,
            Op::Conv {
                x: *x,
                w: *w,
                b: *b,
            },
            &[*x, *w, *b],
        ))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = self.val(*a).add(self.val(*b))?;
        Ok(self.push(v, Op::Add(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = self.val(*a).mul(self.val(*b))?;
        Ok(self.push(v, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn mul_mask(&mut self, x: &NodeId, mask: &NodeId) -> Result<NodeId> {
        let (_, hw) = mask_dims(self.val(*x), self.val(*mask))?;
        let m = self.val(*mask).data();
        let data = self
            .val(*x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * m[i % hw])
            .collect();
        let v = Tensor::from_vec(self.val(*x).shape(), data)?;
        Ok(self.push(v, Op::MulMask { x: *x, mask: *mask }, &[*x, *mask]))
    }

    fn one_minus(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).map(|x| S::one() - x);
        self.push(v, Op::OneMinus(*a), &[*a])
    }

    fn sigmoid(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(*a), &[*a])
    }

    fn tanh(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).map(|x| x.tanh());
        self.push(v, Op::Tanh(*a), &[*a])
    }

    fn gelu(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).map(kernels::gelu);
        self.push(v, Op::Gelu(*a), &[*a])
    }

    fn concat(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = concat_channels(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::Concat(*a, *b), &[*a, *b]))
    }

    fn split(&mut self, a: &NodeId, at: usize) -> Result<(NodeId, NodeId)> {
        let (l, r) = split_channels(self.val(*a), at)?;
        let offset = l.len();
        let lo = self.push(l, Op::Slice { src: *a, offset: 0 }, &[*a]);
        let hi = self.push(r, Op::Slice { src: *a, offset }, &[*a]);
        Ok((lo, hi))
    }

    fn pixel_shuffle(&mut self, a: &NodeId, factor: usize) -> Result<NodeId> {
        let v = kernels::pixel_shuffle(self.val(*a), factor)?;
        Ok(self.push(v, Op::PixelShuffle { src: *a, factor }, &[*a]))
    }

    fn warp(&mut self, feature: &NodeId, flow: &NodeId) -> Result<NodeId> {
        let v = kernels::warp(self.val(*feature), self.val(*flow))?;
        Ok(self.push(
            v,
            Op::Warp {
                feature: *feature,
                flow: *flow,
            },
            &[*feature, *flow],
        ))
    }

    fn gru_update(&mut self, z: &NodeId, h: &NodeId, candidate: &NodeId) -> Result<NodeId> {
        let v = gru_mix(self.val(*z), self.val(*h), self.val(*candidate))?;
        Ok(self.push(
            v,
            Op::GruUpdate {
                z: *z,
                h: *h,
                cand: *candidate,
            },
            &[*z, *h, *candidate],
        ))
    }

    fn temporal_lerp(&mut self, grid: &NodeId, lo: usize, hi: usize, alpha: S) -> Result<NodeId> {
        let v = lerp_slices(self.val(*grid), lo, hi, alpha)?;
        Ok(self.push(
            v,
            Op::TemporalLerp {
                grid: *grid,
                lo,
                hi,
                alpha,
            },
            &[*grid],
        ))
    }

    fn mse(&mut self, pred: &NodeId, target: &Tensor<S>) -> Result<NodeId> {
        let v = Tensor::scalar(mse_value(self.val(*pred), target)?);
        Ok(self.push(
            v,
            Op::Mse {
                pred: *pred,
                target: target.clone(),
            },
            &[*pred],
        ))
    }

    fn mean(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(shape_err("mean of zero items"));
        }
        if let Some(bad) = items.iter().find(|n| self.val(**n).len() != 1) {
            return Err(shape_err(format!(
                "mean of non-scalar {:?}",
                self.val(*bad).shape()
            )));
        }
        let total: S = items.iter().map(|n| self.val(*n).sum()).sum();
        let v = Tensor::scalar(total / S::from_f64(items.len() as f64));
        Ok(self.push(v, Op::Mean(items.to_vec()), items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Eval;

    /// Central differences of `f` at every element of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let eps = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            (f(&p) - f(&m)) / (2.0 * eps)
        })
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    /// Builds the same small expression on any graph and returns its scalar node.
    fn expression<G: Graph<f64>>(
        g: &mut G,
        x: &G::Var,
        m: &G::Var,
        target: &Tensor<f64>,
    ) -> G::Var {
        let s = g.sigmoid(m);
        let xm = g.mul_mask(x, &s).unwrap();
        let inv = g.one_minus(&s);
        let xb = g.mul_mask(x, &inv).unwrap();
        let t = g.tanh(&xm);
        let e = g.gelu(&xb);
        let cat = g.concat(&t, &e).unwrap();
        let (lo, hi) = g.split(&cat, 2).unwrap();
        let prod = g.mul(&lo, &hi).unwrap();
        let sum = g.add(&prod, x).unwrap();
        let z = g.sigmoid(&sum);
        let upd = g.gru_update(&z, x, &t).unwrap();
        let l1 = g.mse(&upd, target).unwrap();
        let l2 = g.mse(&sum, target).unwrap();
        g.mean(&[l1, l2]).unwrap()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let store = ParamStore::<f64>::new();
        let x0 = sample(&[2, 3, 2], 1);
        let m0 = sample(&[1, 3, 2], 2);
        let target = sample(&[2, 3, 2], 3);

        let mut tape = Tape::new(&store);
        let x = tape.variable(x0.clone());
        let m = tape.variable(m0.clone());
        let loss = expression(&mut tape, &x, &m, &target);
        let grads = tape.backward(loss).unwrap();

        let eval_loss = |xv: &Tensor<f64>, mv: &Tensor<f64>| {
            let mut e = Eval::new(&store);
            let x = e.constant(xv.clone());
            let m = e.constant(mv.clone());
            let l = expression(&mut e, &x, &m, &target);
            l.data()[0]
        };
        assert_eq!(eval_loss(&x0, &m0), tape.value(&loss).data()[0]);
        assert_close(
            grads.leaf(x).unwrap(),
            &numeric_grad(&x0, |v| eval_loss(v, &m0)),
            1e-7,
        );
        assert_close(
            grads.leaf(m).unwrap(),
            &numeric_grad(&m0, |v| eval_loss(&x0, v)),
            1e-7,
        );
    }

    #[test]
    fn lerp_and_shuffle_gradients() {
        let store = ParamStore::<f64>::new();
        let grid0 = sample(&[3, 4, 2, 2], 5);
        let target = sample(&[1, 4, 4], 6);
        let f = |g: &mut Tape<'_, f64>, grid: NodeId| {
            let r = g.temporal_lerp(&grid, 1, 2, 0.25).unwrap();
            let up = g.pixel_shuffle(&r, 2).unwrap();
            g.mse(&up, &target).unwrap()
        };
        let mut tape = Tape::new(&store);
        let grid = tape.variable(grid0.clone());
        let loss = f(&mut tape, grid);
        let grads = tape.backward(loss).unwrap();
        let numeric = numeric_grad(&grid0, |v| {
            let mut t = Tape::new(&store);
            let gnode = t.variable(v.clone());
            let l = f(&mut t, gnode);
            t.value(&l).data()[0]
        });
        assert_close(grads.leaf(grid).unwrap(), &numeric, 1e-7);
        // slot 0 is outside the interpolation support
        assert!(grads.leaf(grid).unwrap().data()[..16]
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", sample(&[2], 7));
        let mut tape = Tape::new(&store);
        let c = tape.constant(sample(&[2], 8));
        let p = tape.param(w);
        let y = tape.mul(&c, &p).unwrap();
        assert!(tape.mean(&[y]).is_err());
        let l = tape.mse(&y, &Tensor::zeros(&[2])).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.leaf(c).is_none());
        assert!(grads.param(w).is_some());
        assert!(
            tape.backward(y).is_err(),
            "non-scalar loss must be rejected"
        );
    }
}
