use super::{strides, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receives parameter gradients at the end of [`Graph::backward`].
///
/// Gradients are *added* to whatever the sink already holds.
pub trait GradSink<F> {
    fn accumulate(&mut self, slot: usize, grad: &[F]);
}

impl<F: Element> GradSink<F> for [Tensor<F>] {
    fn accumulate(&mut self, slot: usize, grad: &[F]) {
        self[slot].accumulate_grad(grad);
    }
}

impl<F: Element> GradSink<F> for Vec<Tensor<F>> {
    fn accumulate(&mut self, slot: usize, grad: &[F]) {
        self[slot].accumulate_grad(grad);
    }
}

enum Op<F> {
    Constant,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Gelu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    GatherRows {
        a: Var,
        index: Vec<Vec<usize>>,
    },
    WeightedRowSum {
        a: Var,
        weights: Vec<Vec<F>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    BroadcastBatch {
        a: Var,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of executed operations.
///
/// Forward methods compute eagerly and append a node; [`Graph::backward`]
/// walks the tape once in reverse. Parameter leaves are copied in with
/// [`Graph::param`] and their gradients are delivered to a [`GradSink`].
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    flops: u64,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<F: Copy>(data: &[F], shape: &[usize], axes: &[usize]) -> (Vec<F>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn grad_slot<'a, F: Element>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = n.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations spent in matrix products so far, counting a
    /// multiply-accumulate as two.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn raw(shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let t = Self::raw(t.shape, t.data);
        self.push(t, Op::Constant, false)
    }

    /// Records a parameter leaf. Its gradient is routed to `slot` of the
    /// sink passed to [`Graph::backward`] when `t.requires_grad()` is set.
    pub fn param(&mut self, slot: usize, t: &Tensor<F>) -> Var {
        let value = Self::raw(t.shape.clone(), t.data.clone());
        self.push(value, Op::Param(slot), t.requires_grad)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let bad = || Error::Shape {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.is_empty() || bsh.len() != 2 {
            return Err(bad());
        }
        let k = *ash.last().unwrap();
        let (bk, n) = if trans_b {
            (bsh[1], bsh[0])
        } else {
            (bsh[0], bsh[1])
        };
        if bk != k {
            return Err(bad());
        }
        let m = self.value(a).numel().checked_div(k).unwrap_or(0);
        let mut out = vec![F::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            rsb,
            csb,
            F::zero(),
            &mut out,
            n,
            1,
        );
        self.flops += 2 * (m * k * n) as u64;
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Self::raw(shape, out), Op::MatMul { a, b, trans_b }, ng))
    }

    /// `a[..., m, k] · b[k, n]`, leading dimensions of `a` treated as batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] · b[n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Affine map with a `[out, in]` weight: `x · wᵀ + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_t(x, weight)?;
        self.add(y, bias)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let bad = || Error::Shape {
            op: "batch_matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(bad());
        }
        let r = ash.len();
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let (bk, n) = if trans_b {
            (bsh[r - 1], bsh[r - 2])
        } else {
            (bsh[r - 2], bsh[r - 1])
        };
        if bk != k {
            return Err(bad());
        }
        let groups: usize = ash[..r - 2].iter().product();
        let mut out = vec![F::zero(); groups * m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for g in 0..groups {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &ad[g * m * k..(g + 1) * m * k],
                    k,
                    1,
                    &bd[g * k * n..(g + 1) * k * n],
                    rsb,
                    csb,
                    F::zero(),
                    &mut out[g * m * n..(g + 1) * m * n],
                    n,
                    1,
                );
            }
        }
        self.flops += 2 * (groups * m * k * n) as u64;
        let mut shape = ash[..r - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Self::raw(shape, out), Op::BatchMatMul { a, b, trans_b }, ng))
    }

    /// Batched product over matching leading dimensions.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a · bᵀ` over matching leading dimensions.
    pub fn batch_matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape, in
    /// which case it is repeated over `a`'s leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(Error::Shape {
                op: "add",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let bd = self.value(b).data();
        let inner = bd.len();
        let mut out = self.value(a).data().to_vec();
        if inner > 0 {
            for chunk in out.chunks_exact_mut(inner) {
                for (o, &x) in chunk.iter_mut().zip(bd) {
                    *o += x;
                }
            }
        }
        let shape = ash.to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Self::raw(shape, out), Op::Add { a, b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Self::raw(shape, out), Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Self::raw(shape, out), Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(Self::raw(shape, out), Op::Scale { a, factor }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let s = F::of(GELU_SCALE);
        let c = F::of(GELU_CUBIC);
        let half = F::of(0.5);
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| half * x * (F::one() + (s * (x + c * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(Self::raw(shape, out), Op::Gelu { a }, ng)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let d = *xsh.last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            lhs: xsh.clone(),
            rhs: vec![],
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xsh.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xd.len().checked_div(d).unwrap_or(0);
        let mut out = vec![F::zero(); xd.len()];
        let mut xhat = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); rows];
        let inv_d = F::one() / F::of(d as f64);
        let eps = F::of(eps);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Self::raw(xsh, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        if !src.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("softmax received non-finite input".into()));
        }
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut total = F::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(Self::raw(shape, out), Op::Softmax { a, axis }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = t.data().to_vec();
        let ng = self.any_grad(&[a]);
        Ok(self.push(Self::raw(shape.to_vec(), out), Op::Reshape { a }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&ax| ax < shape.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (out, out_shape) = permute_data(self.value(a).data(), &shape, axes);
        let ng = self.any_grad(&[a]);
        Ok(self.push(
            Self::raw(out_shape, out),
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Row gather on `[B, T, d]`: batch item `b` keeps rows `index[b]`.
    /// Every index list must have the same length.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bad = || Error::Shape {
            op: "gather_rows",
            lhs: shape.clone(),
            rhs: vec![index.len(), index.first().map_or(0, Vec::len)],
        };
        if shape.len() != 3 || index.len() != shape[0] {
            return Err(bad());
        }
        let (t, d) = (shape[1], shape[2]);
        let k = index.first().map_or(0, Vec::len);
        if index
            .iter()
            .any(|ix| ix.len() != k || ix.iter().any(|&i| i >= t))
        {
            return Err(bad());
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(shape[0] * k * d);
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                let off = (b * t + i) * d;
                out.extend_from_slice(&src[off..off + d]);
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(
            Self::raw(vec![shape[0], k, d], out),
            Op::GatherRows { a, index },
            ng,
        ))
    }

    /// `out[b, 0, :] = Σ_t weights[b][t] · a[b, t, :]` on `[B, T, d]`.
    /// The weights are constants of the graph.
    pub fn weighted_row_sum(&mut self, a: Var, weights: Vec<Vec<F>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3
            || weights.len() != shape[0]
            || weights.iter().any(|w| w.len() != shape[1])
        {
            return Err(Error::Shape {
                op: "weighted_row_sum",
                lhs: shape,
                rhs: vec![weights.len(), weights.first().map_or(0, Vec::len)],
            });
        }
        let (t, d) = (shape[1], shape[2]);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); shape[0] * d];
        for (b, w) in weights.iter().enumerate() {
            let dst = &mut out[b * d..(b + 1) * d];
            for (i, &wi) in w.iter().enumerate() {
                let row = &src[(b * t + i) * d..(b * t + i + 1) * d];
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += wi * x;
                }
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(
            Self::raw(vec![shape[0], 1, d], out),
            Op::WeightedRowSum { a, weights },
            ng,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.any_grad(parts);
        Ok(self.push(
            Self::raw(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Repeats `a` along a new leading axis of size `n`.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let ng = self.any_grad(&[a]);
        self.push(Self::raw(shape, out), Op::BroadcastBatch { a }, ng)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "mean_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let inv = F::one() / F::of(n as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += x;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.any_grad(&[a]);
        Ok(self.push(Self::raw(out_shape, out), Op::MeanAxis { a, axis }, ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.any_grad(&[a]);
        self.push(Self::raw(vec![], vec![s]), Op::Sum { a }, ng)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let src = self.value(logits).data();
        if !src.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![F::zero(); b * k];
        let mut loss = F::zero();
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (p, &x) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (x - max).exp();
                total += *p;
            }
            probs[r * k..(r + 1) * k]
                .iter_mut()
                .for_each(|p| *p = *p / total);
            loss += total.ln() + max - row[labels[r]];
        }
        loss = loss / F::of(b as f64);
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Self::raw(vec![], vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Replays adjoints from a scalar `loss` and adds parameter gradients
    /// into `sink`. May be called repeatedly; each call adds again.
    pub fn backward<S: GradSink<F> + ?Sized>(&self, loss: Var, sink: &mut S) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            macro_rules! buf {
                ($v:expr) => {
                    grad_slot(&mut grads, &self.nodes, $v)
                };
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(slot) => sink.accumulate(*slot, &g),
                &Op::MatMul { a, b, trans_b } => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let k = *av.shape().last().unwrap();
                    let n = *node.value.shape().last().unwrap();
                    let m = av.numel().checked_div(k).unwrap_or(0);
                    if let Some(ga) = buf!(a) {
                        // ga[m,k] += g[m,n] · Bᵀ
                        let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            &g,
                            n,
                            1,
                            bv.data(),
                            rs,
                            cs,
                            F::one(),
                            ga,
                            k,
                            1,
                        );
                    }
                    if let Some(gb) = buf!(b) {
                        if trans_b {
                            // gb[n,k] += gᵀ · a
                            F::gemm(
                                n,
                                m,
                                k,
                                F::one(),
                                &g,
                                1,
                                n,
                                av.data(),
                                k,
                                1,
                                F::one(),
                                gb,
                                k,
                                1,
                            );
                        } else {
                            // gb[k,n] += aᵀ · g
                            F::gemm(
                                k,
                                m,
                                n,
                                F::one(),
                                av.data(),
                                1,
                                k,
                                &g,
                                n,
                                1,
                                F::one(),
                                gb,
                                n,
                                1,
                            );
                        }
                    }
                }
                &Op::BatchMatMul { a, b, trans_b } => {
                    let ash = self.shape(a);
                    let r = ash.len();
                    let (m, k) = (ash[r - 2], ash[r - 1]);
                    let n = node.value.shape()[r - 1];
                    let groups: usize = ash[..r - 2].iter().product();
                    let ad = self.value(a).data();
                    let bd = self.value(b).data();
                    if let Some(ga) = buf!(a) {
                        let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
                        for gi in 0..groups {
                            F::gemm(
                                m,
                                n,
                                k,
                                F::one(),
                                &g[gi * m * n..],
                                n,
                                1,
                                &bd[gi * k * n..],
                                rs,
                                cs,
                                F::one(),
                                &mut ga[gi * m * k..],
                                k,
                                1,
                            );
                        }
                    }
                    if let Some(gb) = buf!(b) {
                        for gi in 0..groups {
                            let gs = &g[gi * m * n..];
                            let asl = &ad[gi * m * k..];
                            let out = &mut gb[gi * k * n..];
                            if trans_b {
                                F::gemm(
                                    n,
                                    m,
                                    k,
                                    F::one(),
                                    gs,
                                    1,
                                    n,
                                    asl,
                                    k,
                                    1,
                                    F::one(),
                                    out,
                                    k,
                                    1,
                                );
                            } else {
                                F::gemm(
                                    k,
                                    m,
                                    n,
                                    F::one(),
                                    asl,
                                    1,
                                    k,
                                    gs,
                                    n,
                                    1,
                                    F::one(),
                                    out,
                                    n,
                                    1,
                                );
                            }
                        }
                    }
                }
                &Op::Add { a, b } => {
                    if let Some(ga) = buf!(a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = buf!(b) {
                        let inner = gb.len();
                        if inner > 0 {
                            for chunk in g.chunks_exact(inner) {
                                gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                            }
                        }
                    }
                }
                &Op::Sub { a, b } => {
                    if let Some(ga) = buf!(a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = buf!(b) {
                        gb.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y);
                    }
                }
                &Op::Mul { a, b } => {
                    let bd = self.value(b).data();
                    if let Some(ga) = buf!(a) {
                        for ((x, &y), &w) in ga.iter_mut().zip(&g).zip(bd) {
                            *x += y * w;
                        }
                    }
                    let ad = self.value(a).data();
                    if let Some(gb) = buf!(b) {
                        for ((x, &y), &w) in gb.iter_mut().zip(&g).zip(ad) {
                            *x += y * w;
                        }
                    }
                }
                &Op::Scale { a, factor } => {
                    if let Some(ga) = buf!(a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y * factor);
                    }
                }
                &Op::Gelu { a } => {
                    let s = F::of(GELU_SCALE);
                    let c = F::of(GELU_CUBIC);
                    let half = F::of(0.5);
                    let three = F::of(3.0);
                    let ad = self.value(a).data();
                    if let Some(ga) = buf!(a) {
                        for ((gx, &gy), &x) in ga.iter_mut().zip(&g).zip(ad) {
                            let t = (s * (x + c * x * x * x)).tanh();
                            let dt = s * (F::one() + three * c * x * x);
                            let d = half * (F::one() + t) + half * x * (F::one() - t * t) * dt;
                            *gx += gy * d;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = self.value(*gain).numel();
                    let gv = self.value(*gain).data();
                    if let Some(gg) = buf!(*gain) {
                        for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += row_g[j] * row_h[j];
                            }
                        }
                    }
                    if let Some(gb) = buf!(*bias) {
                        for row_g in g.chunks_exact(d) {
                            gb.iter_mut().zip(row_g).for_each(|(x, &y)| *x += y);
                        }
                    }
                    if let Some(gx) = buf!(*x) {
                        let inv_d = F::one() / F::of(d as f64);
                        for (r, &rs) in rstd.iter().enumerate() {
                            let row_g = &g[r * d..(r + 1) * d];
                            let row_h = &xhat[r * d..(r + 1) * d];
                            let mut mean_gh = F::zero();
                            let mut mean_ghh = F::zero();
                            for j in 0..d {
                                let gh = row_g[j] * gv[j];
                                mean_gh += gh;
                                mean_ghh += gh * row_h[j];
                            }
                            mean_gh *= inv_d;
                            mean_ghh *= inv_d;
                            for j in 0..d {
                                let gh = row_g[j] * gv[j];
                                gx[r * d + j] += rs * (gh - mean_gh - row_h[j] * mean_ghh);
                            }
                        }
                    }
                }
                &Op::Softmax { a, axis } => {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), axis);
                    if let Some(ga) = buf!(a) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| o * n * inner + j * inner + i;
                                let mut dot = F::zero();
                                for j in 0..n {
                                    dot += g[at(j)] * y[at(j)];
                                }
                                for j in 0..n {
                                    ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                }
                &Op::Reshape { a } => {
                    if let Some(ga) = buf!(a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                }
                Op::Permute { a, axes } => {
                    if let Some(ga) = buf!(*a) {
                        let mut inverse = vec![0; axes.len()];
                        for (i, &ax) in axes.iter().enumerate() {
                            inverse[ax] = i;
                        }
                        let (back, _) = permute_data(&g, node.value.shape(), &inverse);
                        ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y);
                    }
                }
                Op::GatherRows { a, index } => {
                    let t = self.shape(*a)[1];
                    let d = self.shape(*a)[2];
                    let k = node.value.shape()[1];
                    if let Some(ga) = buf!(*a) {
                        for (b, ix) in index.iter().enumerate() {
                            for (slot, &row) in ix.iter().enumerate() {
                                let src = &g[(b * k + slot) * d..(b * k + slot + 1) * d];
                                let dst = &mut ga[(b * t + row) * d..(b * t + row + 1) * d];
                                dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                            }
                        }
                    }
                }
                Op::WeightedRowSum { a, weights } => {
                    let t = self.shape(*a)[1];
                    let d = self.shape(*a)[2];
                    if let Some(ga) = buf!(*a) {
                        for (b, w) in weights.iter().enumerate() {
                            let src = &g[b * d..(b + 1) * d];
                            for (i, &wi) in w.iter().enumerate() {
                                let dst = &mut ga[(b * t + i) * d..(b * t + i + 1) * d];
                                dst.iter_mut().zip(src).for_each(|(x, &y)| *x += wi * y);
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.shape(p)[*axis];
                        if let Some(gp) = buf!(p) {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner
                                    ..(o * total + offset + n) * inner];
                                let dst = &mut gp[o * n * inner..(o + 1) * n * inner];
                                dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                            }
                        }
                        offset += n;
                    }
                }
                &Op::BroadcastBatch { a } => {
                    if let Some(ga) = buf!(a) {
                        let inner = ga.len();
                        if inner > 0 {
                            for chunk in g.chunks_exact(inner) {
                                ga.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                            }
                        }
                    }
                }
                &Op::MeanAxis { a, axis } => {
                    let (outer, n, inner) = split_axis(self.shape(a), axis);
                    let inv = F::one() / F::of(n as f64);
                    if let Some(ga) = buf!(a) {
                        for o in 0..outer {
                            for j in 0..n {
                                let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                                let src = &g[o * inner..(o + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y * inv);
                            }
                        }
                    }
                }
                &Op::Sum { a } => {
                    if let Some(ga) = buf!(a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / F::of(labels.len() as f64);
                    if let Some(gl) = buf!(*logits) {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == label { F::one() } else { F::zero() };
                                gl[r * k + j] += (probs[r * k + j] - onehot) * scale;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type T = Tensor<f64>;

    fn t(shape: &[usize], v: &[f64]) -> T {
        T::from_f64(shape.to_vec(), v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> T {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t(shape, &v).with_grad()
    }

    /// Checks autodiff against central differences for every input entry.
    fn check<Fwd>(inputs: Vec<T>, f: Fwd)
    where
        Fwd: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |ins: &[T]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().enumerate().map(|(i, x)| g.param(i, x)).collect();
            let out = f(&mut g, &vars);
            g.value(out).data()[0]
        };
        let mut params = inputs.clone();
        {
            let mut g = Graph::new();
            let vars: Vec<Var> = params
                .iter()
                .enumerate()
                .map(|(i, x)| g.param(i, x))
                .collect();
            let out = f(&mut g, &vars);
            g.backward(out, &mut params).unwrap();
        }
        let h = 1e-4;
        for p in 0..inputs.len() {
            for j in 0..inputs[p].numel() {
                let mut plus = inputs.clone();
                plus[p].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[p].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = params[p].grad().unwrap()[j];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-4,
                    "input {p}[{j}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    /// Projects an output to a scalar with fixed pseudo-random weights so
    /// that every output entry contributes a distinct adjoint.
    fn project(g: &mut Graph<f64>, v: Var) -> Var {
        let shape = g.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n)
            .map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
            .collect();
        let w = g.constant(t(&shape, &w));
        let m = g.mul(v, w).unwrap();
        g.sum(m)
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 0.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(T::zeros(vec![2, 3]));
        let b = g.constant(T::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn matmul_sum_gradient_matches_oracle() {
        // Frozen from central differences (h = 1e-4): d/da sum(a·b) = 1·bᵀ.
        let mut params = vec![t(&[2, 2], &[1., 1., 1., 1.]).with_grad()];
        let mut g = Graph::new();
        let a = g.param(0, &params[0]);
        let b = g.constant(t(&[2, 1], &[2., 3.]));
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p);
        g.backward(s, &mut params).unwrap();
        let grad = params[0].grad().unwrap();
        for (x, y) in grad.iter().zip([2., 3., 2., 3.]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[3], &[1000., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 && d.iter().all(|v| v.is_finite()));

        let x = g.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[3, 4, 5], &mut rng));
        for axis in 0..3 {
            let y = g.softmax(x, axis).unwrap();
            let m = g.mean_axis(y, axis).unwrap();
            let n = [3.0, 4.0, 5.0][axis];
            for v in g.value(m).data() {
                assert!((v * n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0., 0.]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let x = g.constant(t(&[1, 2], &[20., 0.]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-8);
        assert!(matches!(g.cross_entropy(x, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.3, -1.2, 2.0];
        let mut params = vec![t(&[1, 3], &logits).with_grad()];
        let mut g = Graph::new();
        let x = g.param(0, &params[0]);
        let l = g.cross_entropy(x, &[1]).unwrap();
        g.backward(l, &mut params).unwrap();
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for (j, &v) in logits.iter().enumerate() {
            let expected = v.exp() / z - if j == 1 { 1.0 } else { 0.0 };
            assert!((params[0].grad().unwrap()[j] - expected).abs() < 1e-12);
        }
        check(
            vec![t(&[2, 3], &[0.3, -1.2, 2.0, 0.1, 0.5, -0.4]).with_grad()],
            |g, v| g.cross_entropy(v[0], &[1, 2]).unwrap(),
        );
    }

    #[test]
    fn backward_examples() {
        let mut params = vec![t(&[3], &[5., -1., 2.]).with_grad()];
        let mut g = Graph::new();
        let x = g.param(0, &params[0]);
        let s = g.sum(x);
        g.backward(s, &mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[1., 1., 1.]);

        let mut params = vec![t(&[2], &[1., 2.]).with_grad()];
        let mut g = Graph::new();
        let x = g.param(0, &params[0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s, &mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[2., 4.]);
        // a second replay without zeroing doubles the gradient
        g.backward(s, &mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[4., 8.]);

        assert!(matches!(g.backward(x, &mut params), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_of_every_primitive_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check(
            vec![random(&[2, 3, 4], &mut rng), random(&[5, 4], &mut rng)],
            |g, v| {
                let y = g.matmul_t(v[0], v[1]).unwrap();
                project(g, y)
            },
        );
        check(
            vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
            |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                project(g, y)
            },
        );
        check(
            vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 3], &mut rng)],
            |g, v| {
                let y = g.batch_matmul(v[0], v[1]).unwrap();
                project(g, y)
            },
        );
        check(
            vec![random(&[2, 3, 4], &mut rng), random(&[2, 5, 4], &mut rng)],
            |g, v| {
                let y = g.batch_matmul_t(v[0], v[1]).unwrap();
                project(g, y)
            },
        );
        check(
            vec![random(&[2, 3], &mut rng), random(&[3], &mut rng)],
            |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                project(g, y)
            },
        );
        check(
            vec![random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)],
            |g, v| {
                let y = g.sub(v[0], v[1]).unwrap();
                let z = g.mul(y, v[1]).unwrap();
                let z = g.scale(z, -1.7);
                project(g, z)
            },
        );
        check(vec![random(&[7], &mut rng)], |g, v| {
            let y = g.scale(v[0], 3.0);
            let y = g.gelu(y);
            project(g, y)
        });
        check(
            vec![
                random(&[3, 5], &mut rng),
                random(&[5], &mut rng),
                random(&[5], &mut rng),
            ],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
                project(g, y)
            },
        );
        check(vec![random(&[4], &mut rng)], |g, v| {
            let y = g.softmax(v[0], 0).unwrap();
            project(g, y)
        });
        check(vec![random(&[2, 3, 4], &mut rng)], |g, v| {
            let y = g.softmax(v[0], 1).unwrap();
            project(g, y)
        });
        check(vec![random(&[2, 3, 4], &mut rng)], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1]).unwrap();
            let y = g.reshape(y, &[4, 6]).unwrap();
            let y = g.transpose(y).unwrap();
            project(g, y)
        });
        check(vec![random(&[2, 4, 3], &mut rng)], |g, v| {
            let y = g
                .gather_rows(v[0], vec![vec![3, 0, 0], vec![1, 2, 3]])
                .unwrap();
            project(g, y)
        });
        check(vec![random(&[2, 3, 2], &mut rng)], |g, v| {
            let y = g
                .weighted_row_sum(v[0], vec![vec![0.2, 0.3, 0.5], vec![1.0, 0.0, -2.0]])
                .unwrap();
            project(g, y)
        });
        check(
            vec![random(&[2, 1, 3], &mut rng), random(&[2, 2, 3], &mut rng)],
            |g, v| {
                let y = g.concat(&[v[0], v[1]], 1).unwrap();
                project(g, y)
            },
        );
        check(vec![random(&[1, 3], &mut rng)], |g, v| {
            let y = g.broadcast_batch(v[0], 3);
            project(g, y)
        });
        check(vec![random(&[2, 3, 4], &mut rng)], |g, v| {
            let y = g.mean_axis(v[0], 1).unwrap();
            project(g, y)
        });
    }

    #[test]
    fn only_leading_batch_broadcasting_is_allowed() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(T::zeros(vec![2, 3]));
        let col = g.constant(T::zeros(vec![2, 1]));
        assert!(g.add(a, col).is_err());
        let b = g.constant(T::zeros(vec![3, 2]));
        assert!(g.sub(a, b).is_err());
        assert!(g.mul(a, b).is_err());
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(&[4, 6], &mut rng), random(&[6, 6], &mut rng)];
        let run = || {
            let mut params = inputs.clone();
            let mut g = Graph::new();
            let x = g.param(0, &params[0]);
            let w = g.param(1, &params[1]);
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            let y = g.softmax(y, 1).unwrap();
            let s = project(&mut g, y);
            g.backward(s, &mut params).unwrap();
            params
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            let bits = |t: &T| {
                t.grad()
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn frozen_inputs_get_no_gradient_work() {
        let frozen = t(&[2], &[1., 2.]);
        let mut params = vec![frozen.clone()];
        let mut g = Graph::new();
        let x = g.param(0, &params[0]);
        let s = g.sum(x);
        assert!(!g.needs_grad(s));
        g.backward(s, &mut params).unwrap();
        assert!(params[0].grad().is_none());
    }

    #[test]
    fn matmul_counts_flops() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3, 4]));
        let b = g.constant(Tensor::zeros(vec![5, 4]));
        g.matmul_t(a, b).unwrap();
        assert_eq!(g.flops(), 2 * 6 * 4 * 5);
    }
}
