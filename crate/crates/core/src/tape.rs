//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Each operation appends a node holding its output value; `backward` walks
//! the tape in reverse and accumulates gradients into every node a gradient
//! reaches. Gradients persist across `backward` calls until `zero_grad`.
//!
//! Shape conventions used throughout the crate:
//!   * token tensors are `[B, N, D]`
//!   * weights are `[K, M]` applied as `tokens . W`
//!   * head-split attention groups are `[B*H, N, d]`
//!   * scalars have shape `[]`

use crate::error::{Error, Result};
use crate::kernel;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Elementwise work below this size stays on one thread. Set beyond any
/// desk-scale tensor: chunked elementwise work loses to the fork overhead on
/// small hosts, and coarse parallelism keeps the cores busy instead.
const PAR_ELEMS: usize = usize::MAX;
const PAR_CHUNK: usize = 16384;

fn unary_map(xs: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    if xs.len() >= PAR_ELEMS {
        let mut out = vec![0.0; xs.len()];
        out.par_chunks_mut(PAR_CHUNK)
            .zip(xs.par_chunks(PAR_CHUNK))
            .for_each(|(o, i)| {
                for (a, b) in o.iter_mut().zip(i) {
                    *a = f(*b);
                }
            });
        out
    } else {
        xs.iter().map(|&x| f(x)).collect()
    }
}

fn binary_map(xs: &[f64], ys: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
    debug_assert_eq!(xs.len(), ys.len());
    if xs.len() >= PAR_ELEMS {
        let mut out = vec![0.0; xs.len()];
        out.par_chunks_mut(PAR_CHUNK)
            .zip(xs.par_chunks(PAR_CHUNK).zip(ys.par_chunks(PAR_CHUNK)))
            .for_each(|(o, (i, j))| {
                for ((a, b), c) in o.iter_mut().zip(i).zip(j) {
                    *a = f(*b, *c);
                }
            });
        out
    } else {
        xs.iter().zip(ys).map(|(&x, &y)| f(x, y)).collect()
    }
}

/// tanh via exp: measurably cheaper than the libm call at our sizes.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    let c = u.clamp(-20.0, 20.0);
    1.0 - 2.0 / ((2.0 * c).exp() + 1.0)
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_COEF: f64 = 0.044715;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// rows(a) . w, with a rank >= 2 and w [K, M].
    MatmulW { a: Var, w: Var },
    /// [G,m,k] . [G,k,n] (or [G,n,k] when tb) -> [G,m,n]
    BatchMatmul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    /// broadcast bias [C] across the last axis
    AddBias { a: Var, bias: Var },
    /// broadcast b (shape = a.shape[1..]) across the leading axis
    AddBcast0 { a: Var, b: Var },
    Affine { a: Var, mul: f64 },
    PowConst { a: Var, e: f64 },
    Ln { a: Var },
    Gelu { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Abs { a: Var },
    MinElem { a: Var, b: Var },
    MaxElem { a: Var, b: Var },
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var },
    BatchNormTrain { a: Var, gamma: Var, beta: Var },
    BatchNormEval { a: Var, gamma: Var, beta: Var, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    /// concat along axis 1 of 3-D tensors
    ConcatTokens { parts: Vec<Var> },
    /// slice along axis 1 of a 3-D tensor
    SliceTokens { a: Var, start: usize, len: usize },
    SliceLast { a: Var, start: usize, len: usize },
    ConcatLast { parts: Vec<Var> },
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    /// [B, gh*gw, C] -> [B, gh*gw, ks*ks*C] neighborhood gather with zero pad
    Im2Col { a: Var, gh: usize, gw: usize, ks: usize },
    /// [B, N, C] -> [B, C], picking cells[b] per batch row
    GatherCell { a: Var, cells: Vec<usize> },
    SumAll { a: Var },
    MeanAll { a: Var },
    Reshape { a: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    /// whether a gradient can flow into this node
    needs_grad: bool,
    /// cached forward intermediates some backwards reuse
    aux: Option<Vec<f64>>,
    op: Op,
}

/// Per-channel statistics a training-mode batch norm produced.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        crate::alloc_tuning::tune_allocator();
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, aux: Option<Vec<f64>>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            aux,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs(*v))
    }

    // ── elementwise helpers ─────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{ctx}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = binary_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = binary_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = binary_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("division produced non-finite values"));
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::Div { a, b }))
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let data = unary_map(self.value(a).data(), |x| x * mul + add);
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("affine shape");
        self.push(t, self.needs(a), None, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Var {
        self.affine(a, mul, 0.0)
    }

    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.powf(e)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("pow shape");
        self.push(t, self.needs(a), None, Op::PowConst { a, e })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.ln()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("ln produced non-finite values"));
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.needs(a), None, Op::Ln { a }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let xs = self.value(a).data();
        let n = xs.len();
        let mut data = vec![0.0; n];
        let mut tanhs = vec![0.0; n];
        let work = |o: &mut [f64], t: &mut [f64], i: &[f64]| {
            for ((y, th), &x) in o.iter_mut().zip(t.iter_mut()).zip(i) {
                let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                let tv = fast_tanh(u);
                *th = tv;
                *y = 0.5 * x * (1.0 + tv);
            }
        };
        if n >= PAR_ELEMS {
            data.par_chunks_mut(PAR_CHUNK)
                .zip(tanhs.par_chunks_mut(PAR_CHUNK).zip(xs.par_chunks(PAR_CHUNK)))
                .for_each(|(o, (t, i))| work(o, t, i));
        } else {
            work(&mut data, &mut tanhs, xs);
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("gelu shape");
        self.push(t, self.needs(a), Some(tanhs), Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = unary_map(self.value(a).data(), |x| x.max(0.0));
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("relu shape");
        self.push(t, self.needs(a), None, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = unary_map(self.value(a).data(), |x| 1.0 / (1.0 + (-x).exp()));
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("sigmoid shape");
        self.push(t, self.needs(a), None, Op::Sigmoid { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = unary_map(self.value(a).data(), |x| x.clamp(lo, hi));
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("clamp shape");
        self.push(t, self.needs(a), None, Op::Clamp { a, lo, hi })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("abs shape");
        self.push(t, self.needs(a), None, Op::Abs { a })
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "min_elem")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::MinElem { a, b }))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "max_elem")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| if x >= y { *x } else { *y })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::MaxElem { a, b }))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// rows(a) . w  — a rank >= 2 with trailing extent K, w [K, M].
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ash, wsh) = (self.value(a).shape().to_vec(), self.value(w).shape().to_vec());
        if ash.len() < 2 || wsh.len() != 2 {
            return Err(Error::dim(format!(
                "matmul expects a rank>=2 and w rank 2, got {ash:?} x {wsh:?}"
            )));
        }
        let k = *ash.last().unwrap();
        if k != wsh[0] {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {ash:?} x {wsh:?}"
            )));
        }
        let rows = self.value(a).leading();
        let m = wsh[1];
        let data = kernel::matmul(self.value(a).data(), self.value(w).data(), rows, k, m);
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = m;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, self.any_needs(&[a, w]), None, Op::MatmulW { a, w }))
    }

    /// Batched [G,m,k] . [G,k,n] (tb=false) or [G,m,k] . [G,n,k]^T (tb=true).
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(Error::dim(format!(
                "batch_matmul expects [G,m,k]x[G,*,*], got {ash:?} x {bsh:?}"
            )));
        }
        let (g, m, k) = (ash[0], ash[1], ash[2]);
        let n = if tb { bsh[1] } else { bsh[2] };
        let k2 = if tb { bsh[2] } else { bsh[1] };
        if k != k2 {
            return Err(Error::dim(format!(
                "batch_matmul inner extents differ: {ash:?} x {bsh:?} (tb={tb})"
            )));
        }
        let data = kernel::batch_matmul(self.value(a).data(), self.value(b).data(), g, m, k, n, tb);
        let t = Tensor::new(vec![g, m, n], data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::BatchMatmul { a, b, tb }))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_extent();
        if self.value(bias).shape() != [c] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match trailing extent {c}",
                self.value(bias).shape()
            )));
        }
        let bdat = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&bdat).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_needs(&[a, bias]), None, Op::AddBias { a, bias }))
    }

    /// a [B, ...rest] + b [...rest], broadcasting b over the leading axis.
    pub fn add_bcast0(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if ash.len() < 2 || ash[1..] != bsh[..] {
            return Err(Error::dim(format!(
                "add_bcast0: {bsh:?} does not match trailing of {ash:?}"
            )));
        }
        let stride = self.value(b).numel();
        let bdat = self.value(b).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(stride)
            .flat_map(|blk| blk.iter().zip(&bdat).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ash, data)?;
        Ok(self.push(t, self.any_needs(&[a, b]), None, Op::AddBcast0 { a, b }))
    }

    // ── normalization and softmax ───────────────────────────────────────

    /// Row softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.assert_finite("softmax input")?;
        let c = av.last_extent();
        let mut data = vec![0.0; av.numel()];
        let row_work = |out: &mut [f64], inp: &[f64]| {
            for (orow, irow) in out.chunks_exact_mut(c).zip(inp.chunks_exact(c)) {
                let mx = irow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &x) in orow.iter_mut().zip(irow) {
                    let e = (x - mx).exp();
                    sum += e;
                    *o = e;
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        };
        let chunk = (PAR_CHUNK / c.max(1)).max(1) * c;
        if av.numel() >= PAR_ELEMS {
            data.par_chunks_mut(chunk)
                .zip(av.data().par_chunks(chunk))
                .for_each(|(o, i)| row_work(o, i));
        } else {
            row_work(&mut data, av.data());
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, self.needs(a), None, Op::SoftmaxRows { a }))
    }

    /// Per-token normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(a).last_extent();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match trailing extent {d}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let av = self.value(a);
        let rows = av.leading();
        let mut aux = vec![0.0; rows * 2];
        let mut data = vec![0.0; av.numel()];
        let row_work = |out: &mut [f64], auxc: &mut [f64], inp: &[f64]| {
            for ((orow, ax), row) in out
                .chunks_exact_mut(d)
                .zip(auxc.chunks_exact_mut(2))
                .zip(inp.chunks_exact(d))
            {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                ax[0] = mean;
                ax[1] = rstd;
                for ((o, &x), (gj, bj)) in orow.iter_mut().zip(row).zip(g.iter().zip(&b)) {
                    *o = (x - mean) * rstd * gj + bj;
                }
            }
        };
        let rows_per = (PAR_CHUNK / d.max(1)).max(1);
        if av.numel() >= PAR_ELEMS {
            data.par_chunks_mut(rows_per * d)
                .zip(aux.par_chunks_mut(rows_per * 2).zip(av.data().par_chunks(rows_per * d)))
                .for_each(|(o, (ax, i))| row_work(o, ax, i));
        } else {
            row_work(&mut data, &mut aux, av.data());
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            self.any_needs(&[a, gain, bias]),
            Some(aux),
            Op::LayerNorm { a, gain, bias },
        ))
    }

    /// Batch-statistics normalization per channel (last axis), training mode.
    /// Returns the node plus the batch statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let c = self.value(a).last_extent();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim("batch_norm: affine does not match channels"));
        }
        let av = self.value(a);
        let rows = av.leading();
        let mut mean = vec![0.0; c];
        for row in av.data().chunks_exact(c) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; c];
        for row in av.data().chunks_exact(c) {
            for (j, x) in row.iter().enumerate() {
                let d = x - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(c)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &x)| (x - mean[j]) * rstd[j] * g[j] + b[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let mut aux = mean.clone();
        aux.extend_from_slice(&rstd);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let v = self.push(
            t,
            self.any_needs(&[a, gamma, beta]),
            Some(aux),
            Op::BatchNormTrain { a, gamma, beta },
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics, inference mode.
    pub fn batch_norm_eval(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(a).last_extent();
        if self.value(gamma).shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm_eval: channel mismatch"));
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(c)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &x)| (x - mean[j]) * rstd[j] * g[j] + b[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(
            t,
            self.any_needs(&[a, gamma, beta]),
            None,
            Op::BatchNormEval {
                a,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
            },
        ))
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_tokens: no parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 3 {
            return Err(Error::dim("concat_tokens expects [B,N,D]"));
        }
        let (b, d) = (first[0], first[2]);
        let mut n_total = 0;
        for p in parts {
            let sh = self.value(*p).shape();
            if sh.len() != 3 || sh[0] != b || sh[2] != d {
                return Err(Error::dim(format!(
                    "concat_tokens: incompatible part {sh:?} vs [B={b},*,D={d}]"
                )));
            }
            n_total += sh[1];
        }
        let mut data = vec![0.0; b * n_total * d];
        let mut offset = 0;
        for p in parts {
            let sh = self.value(*p).shape().to_vec();
            let n_i = sh[1];
            let pdat = self.value(*p).data();
            for bi in 0..b {
                let src = &pdat[bi * n_i * d..(bi + 1) * n_i * d];
                let dst = &mut data[(bi * n_total + offset) * d..][..n_i * d];
                dst.copy_from_slice(src);
            }
            offset += n_i;
        }
        let t = Tensor::new(vec![b, n_total, d], data)?;
        let needs = self.any_needs(parts);
        Ok(self.push(t, needs, None, Op::ConcatTokens { parts: parts.to_vec() }))
    }

    pub fn slice_tokens(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 {
            return Err(Error::dim("slice_tokens expects [B,N,D]"));
        }
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        if start + len > n {
            return Err(Error::dim(format!(
                "slice_tokens: {start}+{len} exceeds {n} tokens"
            )));
        }
        let adat = self.value(a).data();
        let mut data = vec![0.0; b * len * d];
        for bi in 0..b {
            let src = &adat[(bi * n + start) * d..][..len * d];
            data[bi * len * d..(bi + 1) * len * d].copy_from_slice(src);
        }
        let t = Tensor::new(vec![b, len, d], data)?;
        Ok(self.push(t, self.needs(a), None, Op::SliceTokens { a, start, len }))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        let c = *sh.last().ok_or_else(|| Error::dim("slice_last on scalar"))?;
        if start + len > c {
            return Err(Error::dim(format!(
                "slice_last: {start}+{len} exceeds extent {c}"
            )));
        }
        let rows = self.value(a).leading();
        let adat = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&adat[r * c + start..r * c + start + len]);
        }
        let mut out_shape = sh.clone();
        *out_shape.last_mut().unwrap() = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, self.needs(a), None, Op::SliceLast { a, start, len }))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_last: no parts"));
        }
        let lead_shape = {
            let sh = self.value(parts[0]).shape();
            sh[..sh.len() - 1].to_vec()
        };
        let rows = self.value(parts[0]).leading();
        let mut c_total = 0;
        for p in parts {
            let sh = self.value(*p).shape();
            if sh[..sh.len() - 1] != lead_shape[..] {
                return Err(Error::dim("concat_last: leading shapes differ"));
            }
            c_total += sh[sh.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * c_total);
        for r in 0..rows {
            for p in parts {
                let c = self.value(*p).last_extent();
                let pd = self.value(*p).data();
                data.extend_from_slice(&pd[r * c..(r + 1) * c]);
            }
        }
        let mut out_shape = lead_shape;
        out_shape.push(c_total);
        let t = Tensor::new(out_shape, data)?;
        let needs = self.any_needs(parts);
        Ok(self.push(t, needs, None, Op::ConcatLast { parts: parts.to_vec() }))
    }

    /// [B, N, H*d] -> [B*H, N, d]
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 || sh[2] % heads != 0 {
            return Err(Error::dim(format!(
                "split_heads: {sh:?} not divisible into {heads} heads"
            )));
        }
        let (b, n, dm) = (sh[0], sh[1], sh[2]);
        let d = dm / heads;
        let adat = self.value(a).data();
        let mut data = vec![0.0; adat.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ni in 0..n {
                    let src = &adat[(bi * n + ni) * dm + h * d..][..d];
                    let dst = &mut data[((bi * heads + h) * n + ni) * d..][..d];
                    dst.copy_from_slice(src);
                }
            }
        }
        let t = Tensor::new(vec![b * heads, n, d], data)?;
        Ok(self.push(t, self.needs(a), None, Op::SplitHeads { a, heads }))
    }

    /// [B*H, N, d] -> [B, N, H*d]
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 || sh[0] % heads != 0 {
            return Err(Error::dim(format!(
                "merge_heads: {sh:?} not divisible into {heads} heads"
            )));
        }
        let (bh, n, d) = (sh[0], sh[1], sh[2]);
        let b = bh / heads;
        let adat = self.value(a).data();
        let mut data = vec![0.0; adat.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ni in 0..n {
                    let src = &adat[((bi * heads + h) * n + ni) * d..][..d];
                    let dst = &mut data[(bi * n + ni) * (heads * d) + h * d..][..d];
                    dst.copy_from_slice(src);
                }
            }
        }
        let t = Tensor::new(vec![b, n, heads * d], data)?;
        Ok(self.push(t, self.needs(a), None, Op::MergeHeads { a, heads }))
    }

    /// Neighborhood gather for 3x3 (or 1x1) convolution on a [B, gh*gw, C]
    /// channels-last grid. Output [B, gh*gw, ks*ks*C], zero padded.
    pub fn im2col(&mut self, a: Var, gh: usize, gw: usize, ks: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 || sh[1] != gh * gw {
            return Err(Error::geometry(format!(
                "im2col: token count {:?} does not match grid {gh}x{gw}",
                sh.get(1)
            )));
        }
        if ks % 2 == 0 {
            return Err(Error::contract("im2col: kernel size must be odd"));
        }
        let (b, _, c) = (sh[0], sh[1], sh[2]);
        let pad = (ks - 1) / 2;
        let adat = self.value(a).data();
        let ocols = ks * ks * c;
        let mut data = vec![0.0; b * gh * gw * ocols];
        data.chunks_mut(gh * gw * ocols)
            .enumerate()
            .for_each(|(bi, out)| {
                let inp = &adat[bi * gh * gw * c..(bi + 1) * gh * gw * c];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let orow = (gy * gw + gx) * ocols;
                        for ky in 0..ks {
                            let sy = gy as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= gh as isize {
                                continue;
                            }
                            for kx in 0..ks {
                                let sx = gx as isize + kx as isize - pad as isize;
                                if sx < 0 || sx >= gw as isize {
                                    continue;
                                }
                                let src = &inp[(sy as usize * gw + sx as usize) * c..][..c];
                                out[orow + (ky * ks + kx) * c..][..c].copy_from_slice(src);
                            }
                        }
                    }
                }
            });
        let t = Tensor::new(vec![b, gh * gw, ocols], data)?;
        Ok(self.push(t, self.needs(a), None, Op::Im2Col { a, gh, gw, ks }))
    }

    /// [B, N, C] -> [B, C], picking token `cells[b]` from each batch row.
    pub fn gather_cell(&mut self, a: Var, cells: &[usize]) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 || cells.len() != sh[0] {
            return Err(Error::dim(format!(
                "gather_cell: need one cell per batch row, got {} for {sh:?}",
                cells.len()
            )));
        }
        let (n, c) = (sh[1], sh[2]);
        if cells.iter().any(|&i| i >= n) {
            return Err(Error::contract("gather_cell: cell index out of grid"));
        }
        let adat = self.value(a).data();
        let mut data = Vec::with_capacity(sh[0] * c);
        for (bi, &cell) in cells.iter().enumerate() {
            data.extend_from_slice(&adat[(bi * n + cell) * c..][..c]);
        }
        let t = Tensor::new(vec![sh[0], c], data)?;
        Ok(self.push(
            t,
            self.needs(a),
            None,
            Op::GatherCell {
                a,
                cells: cells.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), self.needs(a), None, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), self.needs(a), None, Op::MeanAll { a })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, self.needs(a), None, Op::Reshape { a }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulate dLoss/dNode into every reachable node's grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut flow: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        flow[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g_out) = flow[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            // accumulate into persistent grad
            {
                let node = &mut self.nodes[i];
                let grad = node
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
                for (g, d) in grad.data_mut().iter_mut().zip(&g_out) {
                    *g += d;
                }
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatmulW { a, w } => {
                    let k = self.nodes[a.0].value.last_extent();
                    let rows = self.nodes[a.0].value.leading();
                    let m = self.nodes[w.0].value.shape()[1];
                    if self.nodes[a.0].needs_grad {
                        let da =
                            kernel::matmul_tb(&g_out, self.nodes[w.0].value.data(), rows, m, k);
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[w.0].needs_grad {
                        let dw =
                            kernel::matmul_ta(self.nodes[a.0].value.data(), &g_out, rows, k, m);
                        self.accum(&mut flow, w, dw);
                    }
                }
                Op::BatchMatmul { a, b, tb } => {
                    let ash = self.nodes[a.0].value.shape().to_vec();
                    let (g, m, k) = (ash[0], ash[1], ash[2]);
                    let n_out = self.nodes[i].value.shape()[2];
                    if !tb {
                        if self.nodes[a.0].needs_grad {
                            let da = kernel::batch_matmul(
                                &g_out,
                                self.nodes[b.0].value.data(),
                                g,
                                m,
                                n_out,
                                k,
                                true,
                            );
                            self.accum(&mut flow, a, da);
                        }
                        if self.nodes[b.0].needs_grad {
                            let db = kernel::batch_matmul_ta(
                                self.nodes[a.0].value.data(),
                                &g_out,
                                g,
                                m,
                                k,
                                n_out,
                            );
                            self.accum(&mut flow, b, db);
                        }
                    } else {
                        if self.nodes[a.0].needs_grad {
                            let da = kernel::batch_matmul(
                                &g_out,
                                self.nodes[b.0].value.data(),
                                g,
                                m,
                                n_out,
                                k,
                                false,
                            );
                            self.accum(&mut flow, a, da);
                        }
                        if self.nodes[b.0].needs_grad {
                            let db = kernel::batch_matmul_ta(
                                &g_out,
                                self.nodes[a.0].value.data(),
                                g,
                                m,
                                n_out,
                                k,
                            );
                            self.accum(&mut flow, b, db);
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        self.accum(&mut flow, a, g_out.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accum(&mut flow, b, g_out.clone());
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        self.accum(&mut flow, a, g_out.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        let neg: Vec<f64> = g_out.iter().map(|x| -x).collect();
                        self.accum(&mut flow, b, neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        let da = binary_map(&g_out, self.nodes[b.0].value.data(), |g, y| g * y);
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = binary_map(&g_out, self.nodes[a.0].value.data(), |g, x| g * x);
                        self.accum(&mut flow, b, db);
                    }
                }
                Op::Div { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(self.nodes[b.0].value.data())
                            .map(|(g, y)| g / y)
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let cdat = self.nodes[i].value.data();
                        let db: Vec<f64> = g_out
                            .iter()
                            .zip(cdat.iter().zip(self.nodes[b.0].value.data()))
                            .map(|(g, (c, y))| -g * c / y)
                            .collect();
                        self.accum(&mut flow, b, db);
                    }
                }
                Op::AddBias { a, bias } => {
                    let c = self.nodes[bias.0].value.numel();
                    if self.nodes[a.0].needs_grad {
                        self.accum(&mut flow, a, g_out.clone());
                    }
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![0.0; c];
                        for row in g_out.chunks_exact(c) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accum(&mut flow, bias, db);
                    }
                }
                Op::AddBcast0 { a, b } => {
                    let stride = self.nodes[b.0].value.numel();
                    if self.nodes[a.0].needs_grad {
                        self.accum(&mut flow, a, g_out.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; stride];
                        for blk in g_out.chunks_exact(stride) {
                            for (d, g) in db.iter_mut().zip(blk) {
                                *d += g;
                            }
                        }
                        self.accum(&mut flow, b, db);
                    }
                }
                Op::Affine { a, mul, .. } => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out.iter().map(|g| g * mul).collect();
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::PowConst { a, e } => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(g, x)| g * e * x.powf(e - 1.0))
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Ln { a } => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(g, x)| g / x)
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Gelu { a } => {
                    if self.nodes[a.0].needs_grad {
                        let tanhs = self.nodes[i].aux.as_ref().expect("gelu aux");
                        let xs = self.nodes[a.0].value.data();
                        let n = xs.len();
                        let mut da = vec![0.0; n];
                        let work = |o: &mut [f64], g: &[f64], x: &[f64], t: &[f64]| {
                            for (((dv, &gv), &xv), &tv) in
                                o.iter_mut().zip(g).zip(x).zip(t)
                            {
                                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xv * xv);
                                *dv = gv * (0.5 * (1.0 + tv) + 0.5 * xv * (1.0 - tv * tv) * du);
                            }
                        };
                        if n >= PAR_ELEMS {
                            da.par_chunks_mut(PAR_CHUNK)
                                .zip(
                                    g_out
                                        .par_chunks(PAR_CHUNK)
                                        .zip(xs.par_chunks(PAR_CHUNK).zip(tanhs.par_chunks(PAR_CHUNK))),
                                )
                                .for_each(|(o, (g, (x, t)))| work(o, g, x, t));
                        } else {
                            work(&mut da, &g_out, xs, tanhs);
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Relu { a } => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Sigmoid { a } => {
                    if self.nodes[a.0].needs_grad {
                        let ydat = self.nodes[i].value.data();
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(ydat)
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Abs { a } => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(g, x)| g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::MinElem { a, b } => {
                    let (adat, bdat) =
                        (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(adat.iter().zip(bdat))
                            .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> = g_out
                            .iter()
                            .zip(adat.iter().zip(bdat))
                            .map(|(g, (x, y))| if x <= y { 0.0 } else { *g })
                            .collect();
                        self.accum(&mut flow, b, db);
                    }
                }
                Op::MaxElem { a, b } => {
                    let (adat, bdat) =
                        (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(adat.iter().zip(bdat))
                            .map(|(g, (x, y))| if x >= y { *g } else { 0.0 })
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> = g_out
                            .iter()
                            .zip(adat.iter().zip(bdat))
                            .map(|(g, (x, y))| if x >= y { 0.0 } else { *g })
                            .collect();
                        self.accum(&mut flow, b, db);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.nodes[a.0].needs_grad {
                        let c = self.nodes[i].value.last_extent();
                        let y = self.nodes[i].value.data();
                        let mut da = vec![0.0; y.len()];
                        let row_work = |out: &mut [f64], yv: &[f64], gv: &[f64]| {
                            for ((orow, yrow), grow) in out
                                .chunks_exact_mut(c)
                                .zip(yv.chunks_exact(c))
                                .zip(gv.chunks_exact(c))
                            {
                                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                                for ((o, &yj), &gj) in orow.iter_mut().zip(yrow).zip(grow) {
                                    *o = yj * (gj - dot);
                                }
                            }
                        };
                        let chunk = (PAR_CHUNK / c.max(1)).max(1) * c;
                        if y.len() >= PAR_ELEMS {
                            da.par_chunks_mut(chunk)
                                .zip(y.par_chunks(chunk).zip(g_out.par_chunks(chunk)))
                                .for_each(|(o, (yv, gv))| row_work(o, yv, gv));
                        } else {
                            row_work(&mut da, y, &g_out);
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::LayerNorm { a, gain, bias } => {
                    let d = self.nodes[a.0].value.last_extent();
                    let aux = self.nodes[i].aux.clone().expect("layer_norm aux");
                    let g = self.nodes[gain.0].value.data().to_vec();
                    let xdat = self.nodes[a.0].value.data();
                    let rows = self.nodes[a.0].value.leading();
                    let mut da = vec![0.0; xdat.len()];
                    let rows_per = (PAR_CHUNK / d.max(1)).max(1);
                    let chunk_work = |out: &mut [f64],
                                      xs: &[f64],
                                      gs: &[f64],
                                      ax: &[f64]|
                     -> (Vec<f64>, Vec<f64>) {
                        let mut dgain = vec![0.0; d];
                        let mut dbias = vec![0.0; d];
                        for ((orow, xrow), (grow, axr)) in out
                            .chunks_exact_mut(d)
                            .zip(xs.chunks_exact(d))
                            .zip(gs.chunks_exact(d).zip(ax.chunks_exact(2)))
                        {
                            let (mean, rstd) = (axr[0], axr[1]);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let xh = (xrow[j] - mean) * rstd;
                                let dyg = grow[j] * g[j];
                                m1 += dyg;
                                m2 += dyg * xh;
                                dgain[j] += grow[j] * xh;
                                dbias[j] += grow[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                let xh = (xrow[j] - mean) * rstd;
                                let dyg = grow[j] * g[j];
                                orow[j] = rstd * (dyg - m1 - xh * m2);
                            }
                        }
                        (dgain, dbias)
                    };
                    let (dgain, dbias) = if rows * d >= PAR_ELEMS {
                        let partials: Vec<(Vec<f64>, Vec<f64>)> = da
                            .par_chunks_mut(rows_per * d)
                            .zip(
                                xdat.par_chunks(rows_per * d).zip(
                                    g_out
                                        .par_chunks(rows_per * d)
                                        .zip(aux.par_chunks(rows_per * 2)),
                                ),
                            )
                            .map(|(o, (x, (gr, ax)))| chunk_work(o, x, gr, ax))
                            .collect();
                        let mut dgain = vec![0.0; d];
                        let mut dbias = vec![0.0; d];
                        for (pg, pb) in partials {
                            for (acc, v) in dgain.iter_mut().zip(&pg) {
                                *acc += v;
                            }
                            for (acc, v) in dbias.iter_mut().zip(&pb) {
                                *acc += v;
                            }
                        }
                        (dgain, dbias)
                    } else {
                        chunk_work(&mut da, xdat, &g_out, &aux)
                    };
                    if self.nodes[a.0].needs_grad {
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[gain.0].needs_grad {
                        self.accum(&mut flow, gain, dgain);
                    }
                    if self.nodes[bias.0].needs_grad {
                        self.accum(&mut flow, bias, dbias);
                    }
                }
                Op::BatchNormTrain { a, gamma, beta } => {
                    let c = self.nodes[a.0].value.last_extent();
                    let rows = self.nodes[a.0].value.leading();
                    let aux = self.nodes[i].aux.clone().expect("batch_norm aux");
                    let (mean, rstd) = aux.split_at(c);
                    let g = self.nodes[gamma.0].value.data().to_vec();
                    let xdat = self.nodes[a.0].value.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xh = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            let dy = g_out[r * c + j];
                            let xh = (xdat[r * c + j] - mean[j]) * rstd[j];
                            dgamma[j] += dy * xh;
                            dbeta[j] += dy;
                            sum_dy[j] += dy;
                            sum_dy_xh[j] += dy * xh;
                        }
                    }
                    if self.nodes[a.0].needs_grad {
                        let rn = rows as f64;
                        let mut da = vec![0.0; xdat.len()];
                        for r in 0..rows {
                            for j in 0..c {
                                let dy = g_out[r * c + j];
                                let xh = (xdat[r * c + j] - mean[j]) * rstd[j];
                                da[r * c + j] = g[j] * rstd[j] / rn
                                    * (rn * dy - sum_dy[j] - xh * sum_dy_xh[j]);
                            }
                        }
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[gamma.0].needs_grad {
                        self.accum(&mut flow, gamma, dgamma);
                    }
                    if self.nodes[beta.0].needs_grad {
                        self.accum(&mut flow, beta, dbeta);
                    }
                }
                Op::BatchNormEval {
                    a,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let c = self.nodes[a.0].value.last_extent();
                    let rows = self.nodes[a.0].value.leading();
                    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let g = self.nodes[gamma.0].value.data().to_vec();
                    let xdat = self.nodes[a.0].value.data();
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .enumerate()
                            .map(|(idx, dy)| dy * g[idx % c] * rstd[idx % c])
                            .collect();
                        self.accum(&mut flow, a, da);
                    }
                    if self.nodes[gamma.0].needs_grad {
                        let mut dgamma = vec![0.0; c];
                        for r in 0..rows {
                            for j in 0..c {
                                let xh = (xdat[r * c + j] - mean[j]) * rstd[j];
                                dgamma[j] += g_out[r * c + j] * xh;
                            }
                        }
                        self.accum(&mut flow, gamma, dgamma);
                    }
                    if self.nodes[beta.0].needs_grad {
                        let mut dbeta = vec![0.0; c];
                        for r in 0..rows {
                            for j in 0..c {
                                dbeta[j] += g_out[r * c + j];
                            }
                        }
                        self.accum(&mut flow, beta, dbeta);
                    }
                }
                Op::ConcatTokens { parts } => {
                    let osh = self.nodes[i].value.shape().to_vec();
                    let (b, n_total, d) = (osh[0], osh[1], osh[2]);
                    let mut offset = 0;
                    for p in parts {
                        let n_i = self.nodes[p.0].value.shape()[1];
                        if self.nodes[p.0].needs_grad {
                            let mut dp = vec![0.0; b * n_i * d];
                            for bi in 0..b {
                                let src = &g_out[(bi * n_total + offset) * d..][..n_i * d];
                                dp[bi * n_i * d..(bi + 1) * n_i * d].copy_from_slice(src);
                            }
                            self.accum(&mut flow, p, dp);
                        }
                        offset += n_i;
                    }
                }
                Op::SliceTokens { a, start, len } => {
                    if self.nodes[a.0].needs_grad {
                        let ash = self.nodes[a.0].value.shape().to_vec();
                        let (b, n, d) = (ash[0], ash[1], ash[2]);
                        let mut da = vec![0.0; b * n * d];
                        for bi in 0..b {
                            let dst = &mut da[(bi * n + start) * d..][..len * d];
                            dst.copy_from_slice(&g_out[bi * len * d..(bi + 1) * len * d]);
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::SliceLast { a, start, len } => {
                    if self.nodes[a.0].needs_grad {
                        let c = self.nodes[a.0].value.last_extent();
                        let rows = self.nodes[a.0].value.leading();
                        let mut da = vec![0.0; rows * c];
                        for r in 0..rows {
                            da[r * c + start..r * c + start + len]
                                .copy_from_slice(&g_out[r * len..(r + 1) * len]);
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::ConcatLast { parts } => {
                    let c_total = self.nodes[i].value.last_extent();
                    let rows = self.nodes[i].value.leading();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.last_extent();
                        if self.nodes[p.0].needs_grad {
                            let mut dp = vec![0.0; rows * c];
                            for r in 0..rows {
                                dp[r * c..(r + 1) * c]
                                    .copy_from_slice(&g_out[r * c_total + offset..][..c]);
                            }
                            self.accum(&mut flow, p, dp);
                        }
                        offset += c;
                    }
                }
                Op::SplitHeads { a, heads } => {
                    if self.nodes[a.0].needs_grad {
                        let ash = self.nodes[a.0].value.shape().to_vec();
                        let (b, n, dm) = (ash[0], ash[1], ash[2]);
                        let d = dm / heads;
                        let mut da = vec![0.0; b * n * dm];
                        for bi in 0..b {
                            for h in 0..heads {
                                for ni in 0..n {
                                    let src = &g_out[((bi * heads + h) * n + ni) * d..][..d];
                                    let dst = &mut da[(bi * n + ni) * dm + h * d..][..d];
                                    dst.copy_from_slice(src);
                                }
                            }
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::MergeHeads { a, heads } => {
                    if self.nodes[a.0].needs_grad {
                        let ash = self.nodes[a.0].value.shape().to_vec();
                        let (bh, n, d) = (ash[0], ash[1], ash[2]);
                        let b = bh / heads;
                        let mut da = vec![0.0; bh * n * d];
                        for bi in 0..b {
                            for h in 0..heads {
                                for ni in 0..n {
                                    let src = &g_out[(bi * n + ni) * (heads * d) + h * d..][..d];
                                    let dst = &mut da[((bi * heads + h) * n + ni) * d..][..d];
                                    dst.copy_from_slice(src);
                                }
                            }
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Im2Col { a, gh, gw, ks } => {
                    if self.nodes[a.0].needs_grad {
                        let ash = self.nodes[a.0].value.shape().to_vec();
                        let (b, _, c) = (ash[0], ash[1], ash[2]);
                        let pad = (ks - 1) / 2;
                        let ocols = ks * ks * c;
                        let mut da = vec![0.0; b * gh * gw * c];
                        for bi in 0..b {
                            for gy in 0..gh {
                                for gx in 0..gw {
                                    let orow = (bi * gh * gw + gy * gw + gx) * ocols;
                                    for ky in 0..ks {
                                        let sy = gy as isize + ky as isize - pad as isize;
                                        if sy < 0 || sy >= gh as isize {
                                            continue;
                                        }
                                        for kx in 0..ks {
                                            let sx = gx as isize + kx as isize - pad as isize;
                                            if sx < 0 || sx >= gw as isize {
                                                continue;
                                            }
                                            let srow = (bi * gh * gw
                                                + sy as usize * gw
                                                + sx as usize)
                                                * c;
                                            let src = &g_out[orow + (ky * ks + kx) * c..][..c];
                                            for j in 0..c {
                                                da[srow + j] += src[j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::GatherCell { a, cells } => {
                    if self.nodes[a.0].needs_grad {
                        let ash = self.nodes[a.0].value.shape().to_vec();
                        let (_, n, c) = (ash[0], ash[1], ash[2]);
                        let mut da = vec![0.0; ash.iter().product()];
                        for (bi, &cell) in cells.iter().enumerate() {
                            let dst = &mut da[(bi * n + cell) * c..][..c];
                            for (d, g) in dst.iter_mut().zip(&g_out[bi * c..(bi + 1) * c]) {
                                *d += g;
                            }
                        }
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::SumAll { a } => {
                    if self.nodes[a.0].needs_grad {
                        let da = vec![g_out[0]; self.nodes[a.0].value.numel()];
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::MeanAll { a } => {
                    if self.nodes[a.0].needs_grad {
                        let n = self.nodes[a.0].value.numel();
                        let da = vec![g_out[0] / n as f64; n];
                        self.accum(&mut flow, a, da);
                    }
                }
                Op::Reshape { a } => {
                    if self.nodes[a.0].needs_grad {
                        self.accum(&mut flow, a, g_out.clone());
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(&self, flow: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        match &mut flow[v.0] {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(&delta) {
                    *b += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::new(vec![3, 2], (0..6).map(|i| i as f64 * 1.5 - 2.0).collect()).unwrap();
        let i3 = tape.leaf(eye, false);
        let bv = tape.leaf(b.clone(), false);
        let c = tape.matmul(i3, bv).unwrap();
        assert_eq!(tape.value(c), &b);
    }

    #[test]
    fn hand_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1., 1.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![1, 4]));
        let s = tape.softmax_rows(z).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.2]).unwrap());
        let xs = tape.softmax_rows(x).unwrap();
        let xc = tape.constant(Tensor::new(vec![1, 3], vec![7.3, 5.8, 9.2]).unwrap());
        let xcs = tape.softmax_rows(xc).unwrap();
        let d = tape.value(xs).max_abs_diff(tape.value(xcs));
        assert!(d < 1e-12, "shift invariance violated: {d}");
    }

    #[test]
    fn softmax_scalar_oracle() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let exps = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let z: f64 = exps.iter().sum();
        for (v, e) in tape.value(s).data().iter().zip(&exps) {
            assert!((v - e / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1., -2., 3., 0.5]).unwrap(), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 4], "grads accumulate");
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_half_square_gives_x() {
        let mut tape = Tape::new();
        let xt = Tensor::new(vec![3], vec![1.5, -0.25, 4.0]).unwrap();
        let x = tape.leaf(xt.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let half = tape.scale(sq, 0.5);
        let s = tape.sum_all(half);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), xt.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_constant_token_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![1, 4], 3.7));
        let g = tape.constant(Tensor::filled(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "constant token should normalize to ~0, got {v}");
        }
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., -1., 0., 4.]).unwrap());
        let g = tape.constant(Tensor::zeros(vec![3]));
        let b = tape.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_scalar_oracle() {
        let mut tape = Tape::new();
        let xv = [0.3, -1.7, 2.1, 0.9];
        let gv = [1.1, 0.9, -0.5, 2.0];
        let bv = [0.0, 0.1, -0.2, 0.3];
        let eps = 1e-6;
        let x = tape.constant(Tensor::new(vec![1, 4], xv.to_vec()).unwrap());
        let g = tape.constant(Tensor::new(vec![4], gv.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![4], bv.to_vec()).unwrap());
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        let mean: f64 = xv.iter().sum::<f64>() / 4.0;
        let var: f64 = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        for j in 0..4 {
            let expect = (xv[j] - mean) / (var + eps).sqrt() * gv[j] + bv[j];
            assert!((tape.value(y).data()[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 4]));
        let g = tape.constant(Tensor::zeros(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        assert!(matches!(tape.layer_norm(x, g, b, 1e-6), Err(Error::Dim(_))));
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap());
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.value(s).shape(), &[4, 3, 2]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1, 3], (12..18).map(|i| i as f64).collect()).unwrap());
        let c = tape.concat_tokens(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 3]);
        let sa = tape.slice_tokens(c, 0, 2).unwrap();
        let sb = tape.slice_tokens(c, 2, 1).unwrap();
        assert_eq!(tape.value(sa), tape.value(a));
        assert_eq!(tape.value(sb), tape.value(b));
    }

    #[test]
    fn matmul_associativity_small_chain() {
        let mut tape = Tape::new();
        let mk = |shape: Vec<usize>, seed: u64| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let h = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed);
                    ((h >> 33) as f64 / 2f64.powi(31)) - 1.0
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        let a = tape.constant(mk(vec![3, 4], 1));
        let b = tape.constant(mk(vec![4, 5], 2));
        let c = tape.constant(mk(vec![5, 2], 3));
        let ab = tape.matmul(a, b).unwrap();
        let ab_c = tape.matmul(ab, c).unwrap();
        let bc = tape.matmul(b, c).unwrap();
        let a_bc = tape.matmul(a, bc).unwrap();
        assert!(tape.value(ab_c).max_abs_diff(tape.value(a_bc)) < 1e-10);
    }
}
