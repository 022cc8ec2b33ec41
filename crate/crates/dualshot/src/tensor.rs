//! A small reverse-mode autodiff engine over `ndarray` storage.
//!
//! Tensors form an immutable expression graph; each node owns its forward
//! value and an optional backward closure that routes the output gradient to
//! the node's parents. Creation order gives a topological order, so the
//! backward pass is a single id-descending sweep. Everything runs serially in
//! f64, which keeps training bit-reproducible under fixed seeds.
//!
//! Convolutions lower to im2col + GEMM; the backward pass recomputes the
//! column matrix instead of caching it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>, &[Tensor])>;

struct Node {
    id: u64,
    tag: RefCell<Option<String>>,
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Shared handle to one graph node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, tag={:?})",
            self.node.id,
            self.shape(),
            self.tag()
        )
    }
}

impl Tensor {
    fn build(
        value: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                tag: RefCell::new(None),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents,
                backward,
                requires_grad,
            }),
        }
    }

    /// Leaf without gradient (inputs, frozen targets).
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor::build(value, Vec::new(), None, false)
    }

    /// Trainable leaf.
    pub fn param(value: ArrayD<f64>) -> Tensor {
        Tensor::build(value, Vec::new(), None, true)
    }

    /// Derived node. `backward(out_grad, out_value, parents)` must accumulate
    /// into each differentiable parent via [`Tensor::accumulate_grad`].
    pub fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let requires = parents.iter().any(|p| p.node.requires_grad);
        Tensor::build(value, parents, Some(backward), requires)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.node.value.borrow().clone()
    }

    /// Scalar value of a `[1]`-shaped tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.node.value.borrow();
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place SGD-style update of a leaf value.
    pub fn update_value(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.node.value.borrow_mut());
    }

    pub fn accumulate_grad(&self, g: &ArrayD<f64>) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    pub fn set_tag(&self, tag: impl Into<String>) -> &Tensor {
        *self.node.tag.borrow_mut() = Some(tag.into());
        self
    }

    pub fn tag(&self) -> Option<String> {
        self.node.tag.borrow().clone()
    }

    /// Every node reachable through parent edges, including `self`.
    pub fn ancestors(&self) -> Vec<Tensor> {
        let mut seen: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.node.id, t.clone()).is_none() {
                stack.extend(t.node.parents.iter().cloned());
            }
        }
        seen.into_values().collect()
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) {
        {
            let v = self.node.value.borrow();
            assert_eq!(v.len(), 1, "backward() starts from a scalar");
            drop(v);
            *self.node.grad.borrow_mut() =
                Some(ArrayD::ones(self.node.value.borrow().raw_dim()));
        }
        let mut nodes: Vec<Tensor> = self
            .ancestors()
            .into_iter()
            .filter(|t| t.node.requires_grad)
            .collect();
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));
        for t in nodes {
            let grad = t.node.grad.borrow().clone();
            let (Some(grad), Some(backward)) = (grad, t.node.backward.as_ref()) else {
                continue;
            };
            let value = t.node.value.borrow();
            backward(&grad, &value, &t.node.parents);
        }
    }
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

fn as3(v: &ArrayD<f64>) -> Array3<f64> {
    v.view().into_dimensionality().expect("[C,H,W] tensor").to_owned()
}

fn as4(v: &ArrayD<f64>) -> Array4<f64> {
    v.view().into_dimensionality().expect("[O,C,kh,kw] tensor").to_owned()
}

/// Lowers `[C,H,W]` to the `[C*k*k, H_out*W_out]` column matrix.
fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::zeros((c * k * k, h_out * w_out));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                for oy in 0..h_out {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * w_out + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                for oy in 0..h_out {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcol[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    dx
}

impl Tensor {
    /// 2-D convolution of a `[C,H,W]` input with `[O,C,k,k]` weights and `[O]`
    /// bias. `pad` is symmetric zero padding.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x = as3(&self.node.value.borrow());
        let w = as4(&weight.node.value.borrow());
        let b_val = weight_bias(bias);
        let (o, c_w, k, k2) = w.dim();
        let (c, h, wid) = x.dim();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(c, c_w, "input channels {c} do not match weight {c_w}");
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wid + 2 * pad - k) / stride + 1;

        let col = im2col(&x, k, stride, pad);
        let w_mat = w.view().into_shape_with_order((o, c * k * k)).unwrap().to_owned();
        let mut out = w_mat.dot(&col); // [O, H_out*W_out]
        for (mut row, &bv) in out.rows_mut().into_iter().zip(b_val.iter()) {
            row += bv;
        }
        let out = out.into_shape_with_order(IxDyn(&[o, h_out, w_out])).unwrap();

        Tensor::from_op(
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, _out, parents| {
                let x = as3(&parents[0].node.value.borrow());
                let w = as4(&parents[1].node.value.borrow());
                let (o, c, k, _) = w.dim();
                let g2 = g.view().into_shape_with_order((o, h_out * w_out)).unwrap().to_owned();

                if parents[2].requires_grad() {
                    let db = g2.sum_axis(Axis(1));
                    parents[2].accumulate_grad(&db.into_dyn());
                }
                if parents[1].requires_grad() {
                    let col = im2col(&x, k, stride, pad);
                    let dw = g2.dot(&col.t());
                    parents[1].accumulate_grad(
                        &dw.into_shape_with_order(IxDyn(&[o, c, k, k])).unwrap(),
                    );
                }
                if parents[0].requires_grad() {
                    let w_mat =
                        w.view().into_shape_with_order((o, c * k * k)).unwrap().to_owned();
                    let dcol = w_mat.t().dot(&g2);
                    let (_, h, wid) = x.dim();
                    let dx = col2im(&dcol, c, h, wid, k, stride, pad);
                    parents[0].accumulate_grad(&dx.into_dyn());
                }
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out = self.node.value.borrow().mapv(|v| v.max(0.0));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                let x = parents[0].node.value.borrow();
                let dx = ndarray::Zip::from(g)
                    .and(&*x)
                    .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                drop(x);
                parents[0].accumulate_grad(&dx);
            }),
        )
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Tensor {
        let out = self.node.value.borrow().mapv(stable_softplus);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                let x = parents[0].node.value.borrow();
                let dx = ndarray::Zip::from(g)
                    .and(&*x)
                    .map_collect(|&gv, &xv| gv * sigmoid(xv));
                drop(x);
                parents[0].accumulate_grad(&dx);
            }),
        )
    }

    /// Nearest-neighbor spatial upscaling of a `[C,H,W]` tensor by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        let x = as3(&self.node.value.borrow());
        let (c, h, w) = x.dim();
        let mut out = Array3::zeros((c, h * factor, w * factor));
        for ci in 0..c {
            for y in 0..h * factor {
                for xx in 0..w * factor {
                    out[[ci, y, xx]] = x[[ci, y / factor, xx / factor]];
                }
            }
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, hf, wf) = gv.dim();
                let mut dx = Array3::zeros((c, hf / factor, wf / factor));
                for ci in 0..c {
                    for y in 0..hf {
                        for xx in 0..wf {
                            dx[[ci, y / factor, xx / factor]] += gv[[ci, y, xx]];
                        }
                    }
                }
                parents[0].accumulate_grad(&dx.into_dyn());
            }),
        )
    }

    /// Channel concatenation of `[C_i,H,W]` tensors.
    pub fn concat_channels(inputs: &[Tensor]) -> Tensor {
        assert!(!inputs.is_empty());
        let views: Vec<Array3<f64>> =
            inputs.iter().map(|t| as3(&t.node.value.borrow())).collect();
        let (_, h, w) = views[0].dim();
        let total: usize = views.iter().map(|v| v.dim().0).sum();
        let mut out = Array3::zeros((total, h, w));
        let mut at = 0;
        for v in &views {
            let c = v.dim().0;
            out.slice_mut(ndarray::s![at..at + c, .., ..]).assign(v);
            at += c;
        }
        Tensor::from_op(
            out.into_dyn(),
            inputs.to_vec(),
            Box::new(|g, _out, parents| {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut at = 0;
                for p in parents {
                    let c = p.shape()[0];
                    let slice = gv.slice(ndarray::s![at..at + c, .., ..]).to_owned();
                    p.accumulate_grad(&slice.into_dyn());
                    at += c;
                }
            }),
        )
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        let out = &*self.node.value.borrow() * &*other.node.value.borrow();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                let a = parents[0].node.value.borrow().clone();
                let b = parents[1].node.value.borrow().clone();
                parents[0].accumulate_grad(&(g * &b));
                parents[1].accumulate_grad(&(g * &a));
            }),
        )
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Tensor {
        let out = &*self.node.value.borrow() + &*other.node.value.borrow();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            }),
        )
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.node.value.borrow().mapv(|v| v * c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                parents[0].accumulate_grad(&g.mapv(|v| v * c));
            }),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.node.value.borrow().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                let gv = g[[0]];
                let shape = parents[0].node.value.borrow().raw_dim();
                parents[0].accumulate_grad(&ArrayD::from_elem(shape, gv));
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn weight_bias(bias: &Tensor) -> Array1<f64> {
    bias.node
        .value
        .borrow()
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("[O] bias")
        .to_owned()
}

/// Scalar helpers used when assembling weighted loss totals.
pub fn scalar_tensor(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[1]), v)
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn conv2d_known_values() {
        // 1x1 input channel, 3x3 kernel of ones, pad 1: each output counts its
        // 3x3 neighborhood sum
        let x = Tensor::constant(
            Array::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let w = Tensor::param(ArrayD::ones(IxDyn(&[1, 1, 3, 3])));
        let b = Tensor::param(ArrayD::zeros(IxDyn(&[1])));
        let y = x.conv2d(&w, &b, 1, 1);
        let v = y.value();
        assert_eq!(v.shape(), &[1, 2, 2]);
        assert_eq!(v[[0, 0, 0]], 10.0);
        assert_eq!(v[[0, 1, 1]], 10.0);
    }

    #[test]
    fn conv2d_stride_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::constant(randn(&[3, 8, 8], &mut rng));
        let w = Tensor::param(randn(&[5, 3, 3, 3], &mut rng));
        let b = Tensor::param(randn(&[5], &mut rng));
        assert_eq!(x.conv2d(&w, &b, 2, 1).shape(), vec![5, 4, 4]);
        assert_eq!(x.conv2d(&w, &b, 1, 1).shape(), vec![5, 8, 8]);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::param(randn(&[2, 5, 5], &mut rng));
        let w = Tensor::param(randn(&[3, 2, 3, 3], &mut rng));
        let b = Tensor::param(randn(&[3], &mut rng));
        for leaf in [&x, &w, &b] {
            testutil::finite_diff_check(
                leaf,
                || x.conv2d(&w, &b, 2, 1).relu().sum(),
                1e-7,
                1e-5,
            );
        }
    }

    #[test]
    fn upsample_and_mul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::param(randn(&[2, 3, 3], &mut rng));
        let c = Tensor::param(randn(&[2, 6, 6], &mut rng));
        for leaf in [&a, &c] {
            testutil::finite_diff_check(
                leaf,
                || a.upsample_nearest(2).mul(&c).sum(),
                1e-7,
                1e-5,
            );
        }
    }

    #[test]
    fn concat_routes_gradients_to_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::param(randn(&[2, 4, 4], &mut rng));
        let b = Tensor::param(randn(&[3, 4, 4], &mut rng));
        for leaf in [&a, &b] {
            testutil::finite_diff_check(
                leaf,
                || {
                    Tensor::concat_channels(&[a.clone(), b.clone()])
                        .relu()
                        .scale(0.5)
                        .sum()
                },
                1e-7,
                1e-5,
            );
        }
    }

    #[test]
    fn softplus_outputs_nonnegative_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::param(randn(&[1, 4, 4], &mut rng));
        let y = x.softplus();
        assert!(y.value().iter().all(|&v| v >= 0.0));
        testutil::finite_diff_check(&x, || x.softplus().sum(), 1e-7, 1e-5);
    }

    #[test]
    fn add_and_scale_compose() {
        let a = Tensor::param(scalar_tensor(2.0));
        let b = Tensor::param(scalar_tensor(3.0));
        let out = a.scale(2.0).add(&b.scale(10.0));
        assert_eq!(out.scalar(), 34.0);
        out.backward();
        assert_eq!(a.grad().unwrap()[[0]], 2.0);
        assert_eq!(b.grad().unwrap()[[0]], 10.0);
    }

    #[test]
    fn grad_accumulates_across_shared_use() {
        let a = Tensor::param(scalar_tensor(3.0));
        let out = a.mul(&a); // a^2 -> da = 2a = 6
        out.backward();
        assert_eq!(a.grad().unwrap()[[0]], 6.0);
    }

    #[test]
    fn constants_receive_no_grad() {
        let a = Tensor::param(scalar_tensor(1.0));
        let c = Tensor::constant(scalar_tensor(5.0));
        let out = a.mul(&c);
        out.backward();
        assert!(c.grad().is_none());
        assert_eq!(a.grad().unwrap()[[0]], 5.0);
    }

    #[test]
    fn ancestors_and_tags_trace_the_graph() {
        let a = Tensor::param(scalar_tensor(1.0));
        a.set_tag("leaf.a");
        let b = Tensor::constant(scalar_tensor(2.0));
        let out = a.add(&b);
        let tags: Vec<String> =
            out.ancestors().iter().filter_map(|t| t.tag()).collect();
        assert_eq!(tags, vec!["leaf.a".to_string()]);
        assert_eq!(out.ancestors().len(), 3);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[3, 6, 6], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let b = randn(&[4], &mut rng);
        let run = || {
            Tensor::constant(x.clone())
                .conv2d(&Tensor::constant(w.clone()), &Tensor::constant(b.clone()), 1, 1)
                .relu()
                .sum()
                .scalar()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
