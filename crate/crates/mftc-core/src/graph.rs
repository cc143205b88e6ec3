//! Define-by-run reverse-mode automatic differentiation over f64 buffers.
//!
//! Every forward pass builds a fresh `Graph`; node values are computed eagerly
//! at op-creation time and `backward` walks the arena once in reverse. All
//! accumulation is sequential in a fixed order, so both values and gradients
//! are bit-reproducible across runs on the same build.

use std::sync::Arc;

use crate::kernels::{self, Conv3Spec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index map used by gather-style ops. `-1` reads as zero, which is how all
/// spatial padding is expressed.
pub type IndexMap = Arc<Vec<i64>>;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    PowScalar(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Gather { src: Var, idx: IndexMap },
    AddInto { base: Var, patch: Var, idx: Arc<Vec<usize>> },
    Concat { parts: Vec<Var> },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Conv3 { x: Var, w: Var, b: Option<Var>, spec: Conv3Spec },
    ConvT3 { x: Var, w: Var, b: Option<Var>, cin: usize, cout: usize, d: usize, h: usize, wd: usize },
    LayerNormRows { x: Var, gamma: Var, beta: Var, rows: usize, width: usize },
    LayerNormCols { x: Var, gamma: Var, beta: Var, rows: usize, cols: usize },
    SoftmaxRows { x: Var, rows: usize, width: usize },
    LogSoftmaxRows { x: Var, rows: usize, width: usize },
    RowMean { x: Var, rows: usize, cols: usize },
    RowMax { x: Var, rows: usize, cols: usize },
    ColMean { x: Var, rows: usize, cols: usize },
    ColMax { x: Var, rows: usize, cols: usize },
    ColSum { x: Var, rows: usize, cols: usize },
    MulColBroadcast { x: Var, g: Var, rows: usize, cols: usize },
    MulRowBroadcast { x: Var, g: Var, rows: usize, cols: usize },
    AddBiasBroadcast { x: Var, bias: Var, reps: usize, len: usize },
    AddMask { x: Var },
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
enum Aux {
    None,
    /// Argmax positions for max-reduction ops (first maximum wins ties).
    Indices(Vec<usize>),
    /// Interleaved (mean, 1/std) pairs for layer norms.
    MeanRstd(Vec<f64>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    aux: Aux,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by `Graph::backward`. Only leaf nodes retain gradients;
/// intermediate buffers are dropped as soon as they have been propagated.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g[v.0].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape is consistent by construction")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, aux: Aux) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, needs_grad, aux });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf shape/data mismatch"
        );
        self.push(Op::Leaf, shape, data, needs_grad, Aux::None)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        self.leaf(t.data().to_vec(), t.shape().to_vec(), needs_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(vec![v], vec![], false)
    }

    fn need2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    fn assert_same_len(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.nodes[a.0].data.len(),
            self.nodes[b.0].data.len(),
            "{op}: operand lengths differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_len(a, b, "add");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.need2(a, b);
        self.push(Op::Add(a, b), shape, data, ng, Aux::None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_len(a, b, "sub");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.need2(a, b);
        self.push(Op::Sub(a, b), shape, data, ng, Aux::None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_len(a, b, "mul");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.need2(a, b);
        self.push(Op::Mul(a, b), shape, data, ng, Aux::None)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_len(a, b, "div");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.need2(a, b);
        self.push(Op::Div(a, b), shape, data, ng, Aux::None)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Scale(a, s), shape, data, ng, Aux::None)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::AddScalar(a), shape, data, ng, Aux::None)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Abs(a), shape, data, ng, Aux::None)
    }

    /// Elementwise x^p. Gradient assumes x ≥ 0 (used on probabilities).
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.powf(p)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::PowScalar(a, p), shape, data, ng, Aux::None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Gelu(a), shape, data, ng, Aux::None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Sigmoid(a), shape, data, ng, Aux::None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Relu(a), shape, data, ng, Aux::None)
    }

    /// out[i] = src[idx[i]], with idx = -1 producing 0. Covers every layout
    /// move in the model: window partition/reverse, cyclic shifts, padding,
    /// cropping, transposes, patch-merging neighbor collection, bias lookup.
    pub fn gather(&mut self, src: Var, idx: IndexMap, shape: Vec<usize>) -> Var {
        let sdata = &self.nodes[src.0].data;
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { sdata[i as usize] })
            .collect();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "gather shape mismatch");
        let ng = self.nodes[src.0].needs_grad;
        self.push(Op::Gather { src, idx }, shape, data, ng, Aux::None)
    }

    /// out = base; out[idx[j]] += patch[j]. Decoder center insertion.
    pub fn add_into(&mut self, base: Var, patch: Var, idx: Arc<Vec<usize>>) -> Var {
        assert_eq!(idx.len(), self.nodes[patch.0].data.len(), "add_into index length");
        let mut data = self.nodes[base.0].data.clone();
        for (j, &i) in idx.iter().enumerate() {
            data[i] += self.nodes[patch.0].data[j];
        }
        let shape = self.nodes[base.0].shape.clone();
        let ng = self.need2(base, patch);
        self.push(Op::AddInto { base, patch, idx }, shape, data, ng, Aux::None)
    }

    /// Flat concatenation in argument order. With channel-first maps this is
    /// channel concatenation when all parts share one spatial grid.
    pub fn concat(&mut self, parts: &[Var], shape: Vec<usize>) -> Var {
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
            ng |= self.nodes[p.0].needs_grad;
        }
        assert_eq!(shape.iter().product::<usize>(), data.len(), "concat shape mismatch");
        self.push(Op::Concat { parts: parts.to_vec() }, shape, data, ng, Aux::None)
    }

    /// x[rows,din] · w[din,dout] + b
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * din, "linear x size");
        assert_eq!(self.nodes[w.0].data.len(), din * dout, "linear w size");
        let mut data = vec![0.0; rows * dout];
        if let Some(bv) = b {
            assert_eq!(self.nodes[bv.0].data.len(), dout, "linear bias size");
            for r in 0..rows {
                data[r * dout..(r + 1) * dout].copy_from_slice(&self.nodes[bv.0].data);
            }
        }
        kernels::matmul(&mut data, &self.nodes[x.0].data, &self.nodes[w.0].data, rows, din, dout);
        let ng = self.need2(x, w) || b.is_some_and(|bv| self.nodes[bv.0].needs_grad);
        self.push(Op::Linear { x, w, b, rows, din, dout }, vec![rows, dout], data, ng, Aux::None)
    }

    /// Batched matmul: a[batch,m,k] · b[batch,k,n] (or b[batch,n,k] when
    /// trans_b, computing a·bᵀ).
    #[allow(clippy::too_many_arguments)]
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool) -> Var {
        assert_eq!(self.nodes[a.0].data.len(), batch * m * k, "bmm a size");
        assert_eq!(self.nodes[b.0].data.len(), batch * k * n, "bmm b size");
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            let av = &self.nodes[a.0].data[t * m * k..(t + 1) * m * k];
            let bv = &self.nodes[b.0].data[t * k * n..(t + 1) * k * n];
            let out = &mut data[t * m * n..(t + 1) * m * n];
            if trans_b {
                kernels::matmul_nt(out, av, bv, m, k, n);
            } else {
                kernels::matmul(out, av, bv, m, k, n);
            }
        }
        let ng = self.need2(a, b);
        self.push(Op::Bmm { a, b, batch, m, k, n, trans_b }, vec![batch, m, n], data, ng, Aux::None)
    }

    pub fn conv3(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3Spec) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), spec.in_len(), "conv3 input size");
        assert_eq!(self.nodes[w.0].data.len(), spec.weight_len(), "conv3 weight size");
        let (od, oh, ow) = spec.out_dims();
        let osz = od * oh * ow;
        let mut data = vec![0.0; spec.cout * osz];
        if let Some(bv) = b {
            assert_eq!(self.nodes[bv.0].data.len(), spec.cout, "conv3 bias size");
            for co in 0..spec.cout {
                let bval = self.nodes[bv.0].data[co];
                data[co * osz..(co + 1) * osz].fill(bval);
            }
        }
        kernels::conv3d(&mut data, &self.nodes[x.0].data, &self.nodes[w.0].data, &spec);
        let ng = self.need2(x, w) || b.is_some_and(|bv| self.nodes[bv.0].needs_grad);
        self.push(Op::Conv3 { x, w, b, spec }, vec![spec.cout, od, oh, ow], data, ng, Aux::None)
    }

    /// Transposed conv, kernel 2 stride 2; doubles each spatial dim.
    #[allow(clippy::too_many_arguments)]
    pub fn convt3_k2s2(&mut self, x: Var, w: Var, b: Option<Var>, cin: usize, cout: usize, d: usize, h: usize, wd: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), cin * d * h * wd, "convt3 input size");
        assert_eq!(self.nodes[w.0].data.len(), cin * cout * 8, "convt3 weight size");
        let osz = 8 * d * h * wd;
        let mut data = vec![0.0; cout * osz];
        if let Some(bv) = b {
            assert_eq!(self.nodes[bv.0].data.len(), cout, "convt3 bias size");
            for co in 0..cout {
                let bval = self.nodes[bv.0].data[co];
                data[co * osz..(co + 1) * osz].fill(bval);
            }
        }
        kernels::convt3d_k2s2(&mut data, &self.nodes[x.0].data, &self.nodes[w.0].data, cin, cout, d, h, wd);
        let ng = self.need2(x, w) || b.is_some_and(|bv| self.nodes[bv.0].needs_grad);
        self.push(
            Op::ConvT3 { x, w, b, cin, cout, d, h, wd },
            vec![cout, 2 * d, 2 * h, 2 * wd],
            data,
            ng,
            Aux::None,
        )
    }

    /// LayerNorm over the last (contiguous) dimension of x[rows,width].
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, rows: usize, width: usize, eps: f64) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * width, "layer_norm_rows x size");
        assert_eq!(self.nodes[gamma.0].data.len(), width, "layer_norm_rows gamma size");
        assert_eq!(self.nodes[beta.0].data.len(), width, "layer_norm_rows beta size");
        let mut data = vec![0.0; rows * width];
        let mut stats = vec![0.0; rows * 2];
        for r in 0..rows {
            let xr = &self.nodes[x.0].data[r * width..(r + 1) * width];
            let mean = xr.iter().sum::<f64>() / width as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats[2 * r] = mean;
            stats[2 * r + 1] = rstd;
            for c in 0..width {
                data[r * width + c] =
                    (xr[c] - mean) * rstd * self.nodes[gamma.0].data[c] + self.nodes[beta.0].data[c];
            }
        }
        let ng = self.need2(x, gamma) || self.nodes[beta.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            Op::LayerNormRows { x, gamma, beta, rows, width },
            shape,
            data,
            ng,
            Aux::MeanRstd(stats),
        )
    }

    /// LayerNorm over the row (channel) dimension of a channel-first map
    /// x[rows,cols]; each column is normalized independently. Keeps decoder
    /// normalization strictly per spatial position.
    pub fn layer_norm_cols(&mut self, x: Var, gamma: Var, beta: Var, rows: usize, cols: usize, eps: f64) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "layer_norm_cols x size");
        assert_eq!(self.nodes[gamma.0].data.len(), rows, "layer_norm_cols gamma size");
        assert_eq!(self.nodes[beta.0].data.len(), rows, "layer_norm_cols beta size");
        let mut data = vec![0.0; rows * cols];
        let mut stats = vec![0.0; cols * 2];
        let xd = &self.nodes[x.0].data;
        for c in 0..cols {
            let mut mean = 0.0;
            for r in 0..rows {
                mean += xd[r * cols + c];
            }
            mean /= rows as f64;
            let mut var = 0.0;
            for r in 0..rows {
                let d = xd[r * cols + c] - mean;
                var += d * d;
            }
            var /= rows as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats[2 * c] = mean;
            stats[2 * c + 1] = rstd;
            for r in 0..rows {
                data[r * cols + c] = (xd[r * cols + c] - mean) * rstd * self.nodes[gamma.0].data[r]
                    + self.nodes[beta.0].data[r];
            }
        }
        let ng = self.need2(x, gamma) || self.nodes[beta.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            Op::LayerNormCols { x, gamma, beta, rows, cols },
            shape,
            data,
            ng,
            Aux::MeanRstd(stats),
        )
    }

    pub fn softmax_rows(&mut self, x: Var, rows: usize, width: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * width, "softmax_rows size");
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            let xr = &self.nodes[x.0].data[r * width..(r + 1) * width];
            let m = xr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for c in 0..width {
                let e = (xr[c] - m).exp();
                data[r * width + c] = e;
                sum += e;
            }
            for c in 0..width {
                data[r * width + c] /= sum;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::SoftmaxRows { x, rows, width }, shape, data, ng, Aux::None)
    }

    pub fn log_softmax_rows(&mut self, x: Var, rows: usize, width: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * width, "log_softmax_rows size");
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            let xr = &self.nodes[x.0].data[r * width..(r + 1) * width];
            let m = xr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + xr.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..width {
                data[r * width + c] = xr[c] - lse;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::LogSoftmaxRows { x, rows, width }, shape, data, ng, Aux::None)
    }

    pub fn row_mean(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "row_mean size");
        let data: Vec<f64> = (0..rows)
            .map(|r| self.nodes[x.0].data[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::RowMean { x, rows, cols }, vec![rows], data, ng, Aux::None)
    }

    pub fn row_max(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "row_max size");
        let mut data = vec![0.0; rows];
        let mut arg = vec![0usize; rows];
        for r in 0..rows {
            let xr = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let (mut bi, mut bv) = (0usize, xr[0]);
            for (c, &v) in xr.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = c;
                }
            }
            data[r] = bv;
            arg[r] = r * cols + bi;
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::RowMax { x, rows, cols }, vec![rows], data, ng, Aux::Indices(arg))
    }

    pub fn col_mean(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "col_mean size");
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::ColMean { x, rows, cols }, vec![cols], data, ng, Aux::None)
    }

    pub fn col_max(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "col_max size");
        let mut data = vec![f64::NEG_INFINITY; cols];
        let mut arg = vec![0usize; cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = self.nodes[x.0].data[r * cols + c];
                if r == 0 || v > data[c] {
                    data[c] = v;
                    arg[c] = r * cols + c;
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::ColMax { x, rows, cols }, vec![cols], data, ng, Aux::Indices(arg))
    }

    pub fn col_sum(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "col_sum size");
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::ColSum { x, rows, cols }, vec![cols], data, ng, Aux::None)
    }

    /// out[r,c] = x[r,c] · g[r] (per-channel gate on channel-first maps).
    pub fn mul_col_broadcast(&mut self, x: Var, g: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "mul_col_broadcast x size");
        assert_eq!(self.nodes[g.0].data.len(), rows, "mul_col_broadcast gate size");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let gv = self.nodes[g.0].data[r];
            for c in 0..cols {
                data[r * cols + c] = self.nodes[x.0].data[r * cols + c] * gv;
            }
        }
        let ng = self.need2(x, g);
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::MulColBroadcast { x, g, rows, cols }, shape, data, ng, Aux::None)
    }

    /// out[r,c] = x[r,c] · g[c] (per-position gate on channel-first maps).
    pub fn mul_row_broadcast(&mut self, x: Var, g: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), rows * cols, "mul_row_broadcast x size");
        assert_eq!(self.nodes[g.0].data.len(), cols, "mul_row_broadcast gate size");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = self.nodes[x.0].data[r * cols + c] * self.nodes[g.0].data[c];
            }
        }
        let ng = self.need2(x, g);
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::MulRowBroadcast { x, g, rows, cols }, shape, data, ng, Aux::None)
    }

    /// out = x + tile(bias, reps); x has reps·len elements.
    pub fn add_bias_broadcast(&mut self, x: Var, bias: Var, reps: usize) -> Var {
        let len = self.nodes[bias.0].data.len();
        assert_eq!(self.nodes[x.0].data.len(), reps * len, "add_bias_broadcast size");
        let mut data = self.nodes[x.0].data.clone();
        for t in 0..reps {
            for i in 0..len {
                data[t * len + i] += self.nodes[bias.0].data[i];
            }
        }
        let ng = self.need2(x, bias);
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddBiasBroadcast { x, bias, reps, len }, shape, data, ng, Aux::None)
    }

    /// out[o,m,i] = x[o,m,i] + mask[o,i]; the mask is a non-learned constant
    /// (attention masking for shifted windows and padding).
    pub fn add_mask(&mut self, x: Var, mask: Arc<Vec<f64>>, outer: usize, mid: usize, inner: usize) -> Var {
        assert_eq!(self.nodes[x.0].data.len(), outer * mid * inner, "add_mask x size");
        assert_eq!(mask.len(), outer * inner, "add_mask mask size");
        let mut data = self.nodes[x.0].data.clone();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[base + i] += mask[o * inner + i];
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddMask { x }, shape, data, ng, Aux::None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::SumAll(x), vec![], vec![s], ng, Aux::None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::MeanAll(x), vec![], vec![s], ng, Aux::None)
    }

    /// Reverse pass from a scalar root. Returns leaf gradients; intermediate
    /// gradients are freed as soon as they have been propagated.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].data.len(), 1, "backward root must be scalar");
        assert!(self.nodes[root.0].needs_grad, "backward root does not require grad");
        let n = self.nodes.len();
        let mut g: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.propagate(i, &gout, &mut g);
        }
        Grads { g }
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
        if g[v.0].is_none() {
            g[v.0] = Some(vec![0.0; len]);
        }
        g[v.0].as_mut().expect("just initialized").as_mut_slice()
    }

    fn propagate(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.want(*a) {
                    let ga = Self::acc(g, *a, gout.len());
                    for (d, s) in ga.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
                if self.want(*b) {
                    let gb = Self::acc(g, *b, gout.len());
                    for (d, s) in gb.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.want(*a) {
                    let ga = Self::acc(g, *a, gout.len());
                    for (d, s) in ga.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
                if self.want(*b) {
                    let gb = Self::acc(g, *b, gout.len());
                    for (d, s) in gb.iter_mut().zip(gout) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.want(*a) {
                    let bd = &self.nodes[b.0].data;
                    let ga = Self::acc(g, *a, gout.len());
                    for ((d, s), bv) in ga.iter_mut().zip(gout).zip(bd) {
                        *d += s * bv;
                    }
                }
                if self.want(*b) {
                    let ad = &self.nodes[a.0].data;
                    let gb = Self::acc(g, *b, gout.len());
                    for ((d, s), av) in gb.iter_mut().zip(gout).zip(ad) {
                        *d += s * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if self.want(*a) {
                    let ga = Self::acc(g, *a, gout.len());
                    for ((d, s), bv) in ga.iter_mut().zip(gout).zip(bd) {
                        *d += s / bv;
                    }
                }
                if self.want(*b) {
                    let gb = Self::acc(g, *b, gout.len());
                    for i2 in 0..gout.len() {
                        gb[i2] -= gout[i2] * ad[i2] / (bd[i2] * bd[i2]);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.want(*a) {
                    let ga = Self::acc(g, *a, gout.len());
                    for (d, gv) in ga.iter_mut().zip(gout) {
                        *d += gv * s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.want(*a) {
                    let ga = Self::acc(g, *a, gout.len());
                    for (d, gv) in ga.iter_mut().zip(gout) {
                        *d += gv;
                    }
                }
            }
            Op::Abs(a) => {
                if self.want(*a) {
                    let xd = &self.nodes[a.0].data;
                    let ga = Self::acc(g, *a, gout.len());
                    for i2 in 0..gout.len() {
                        let s = if xd[i2] > 0.0 {
                            1.0
                        } else if xd[i2] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i2] += gout[i2] * s;
                    }
                }
            }
            Op::PowScalar(a, p) => {
                if self.want(*a) {
                    let xd = &self.nodes[a.0].data;
                    let ga = Self::acc(g, *a, gout.len());
                    for i2 in 0..gout.len() {
                        ga[i2] += gout[i2] * p * xd[i2].powf(p - 1.0);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.want(*a) {
                    let xd = &self.nodes[a.0].data;
                    let ga = Self::acc(g, *a, gout.len());
                    for i2 in 0..gout.len() {
                        ga[i2] += gout[i2] * gelu_grad(xd[i2]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.want(*a) {
                    let yd = &node.data;
                    let ga = Self::acc(g, *a, gout.len());
                    for i2 in 0..gout.len() {
                        ga[i2] += gout[i2] * yd[i2] * (1.0 - yd[i2]);
                    }
                }
            }
            Op::Relu(a) => {
                if self.want(*a) {
                    let xd = &self.nodes[a.0].data;
                    let ga = Self::acc(g, *a, gout.len());
                    for i2 in 0..gout.len() {
                        if xd[i2] > 0.0 {
                            ga[i2] += gout[i2];
                        }
                    }
                }
            }
            Op::Gather { src, idx } => {
                if self.want(*src) {
                    let len = self.nodes[src.0].data.len();
                    let gs = Self::acc(g, *src, len);
                    for (j, &i2) in idx.iter().enumerate() {
                        if i2 >= 0 {
                            gs[i2 as usize] += gout[j];
                        }
                    }
                }
            }
            Op::AddInto { base, patch, idx } => {
                if self.want(*base) {
                    let gb = Self::acc(g, *base, gout.len());
                    for (d, s) in gb.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
                if self.want(*patch) {
                    let gp = Self::acc(g, *patch, idx.len());
                    for (j, &i2) in idx.iter().enumerate() {
                        gp[j] += gout[i2];
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0usize;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.want(p) {
                        let gp = Self::acc(g, p, len);
                        for (d, s) in gp.iter_mut().zip(&gout[off..off + len]) {
                            *d += s;
                        }
                    }
                    off += len;
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if self.want(*x) {
                    let wd = &self.nodes[w.0].data;
                    let gx = Self::acc(g, *x, rows * din);
                    kernels::matmul_nt(gx, gout, wd, rows, dout, din);
                }
                if self.want(*w) {
                    let xd = &self.nodes[x.0].data;
                    let gw = Self::acc(g, *w, din * dout);
                    kernels::matmul_tn(gw, xd, gout, rows, din, dout);
                }
                if let Some(bv) = b {
                    if self.want(*bv) {
                        let gb = Self::acc(g, *bv, dout);
                        for r in 0..rows {
                            for c in 0..dout {
                                gb[c] += gout[r * dout + c];
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                for t in 0..batch {
                    let go = &gout[t * m * n..(t + 1) * m * n];
                    if self.want(*a) {
                        let bd = &self.nodes[b.0].data[t * k * n..(t + 1) * k * n];
                        let ga = Self::acc(g, *a, batch * m * k);
                        let ga = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            kernels::matmul(ga, go, bd, m, n, k);
                        } else {
                            kernels::matmul_nt(ga, go, bd, m, n, k);
                        }
                    }
                    if self.want(*b) {
                        let ad = &self.nodes[a.0].data[t * m * k..(t + 1) * m * k];
                        let gb = Self::acc(g, *b, batch * k * n);
                        let gb = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            kernels::matmul_tn(gb, go, ad, m, n, k);
                        } else {
                            kernels::matmul_tn(gb, ad, go, m, k, n);
                        }
                    }
                }
            }
            Op::Conv3 { x, w, b, spec } => {
                if self.want(*x) {
                    let wd = &self.nodes[w.0].data;
                    let gx = Self::acc(g, *x, spec.in_len());
                    kernels::conv3d_grad_x(gx, wd, gout, spec);
                }
                if self.want(*w) {
                    let xd = &self.nodes[x.0].data;
                    let gw = Self::acc(g, *w, spec.weight_len());
                    kernels::conv3d_grad_w(gw, xd, gout, spec);
                }
                if let Some(bv) = b {
                    if self.want(*bv) {
                        let (od, oh, ow) = spec.out_dims();
                        let osz = od * oh * ow;
                        let gb = Self::acc(g, *bv, spec.cout);
                        for co in 0..spec.cout {
                            gb[co] += gout[co * osz..(co + 1) * osz].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ConvT3 { x, w, b, cin, cout, d, h, wd } => {
                let (cin, cout, d, h, wd) = (*cin, *cout, *d, *h, *wd);
                if self.want(*x) {
                    let wdat = &self.nodes[w.0].data;
                    let gx = Self::acc(g, *x, cin * d * h * wd);
                    kernels::convt3d_k2s2_grad_x(gx, wdat, gout, cin, cout, d, h, wd);
                }
                if self.want(*w) {
                    let xd = &self.nodes[x.0].data;
                    let gw = Self::acc(g, *w, cin * cout * 8);
                    kernels::convt3d_k2s2_grad_w(gw, xd, gout, cin, cout, d, h, wd);
                }
                if let Some(bv) = b {
                    if self.want(*bv) {
                        let osz = 8 * d * h * wd;
                        let gb = Self::acc(g, *bv, cout);
                        for co in 0..cout {
                            gb[co] += gout[co * osz..(co + 1) * osz].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gamma, beta, rows, width } => {
                let (rows, width) = (*rows, *width);
                let stats = match &node.aux {
                    Aux::MeanRstd(s) => s,
                    _ => unreachable!("layer norm stores stats"),
                };
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                if self.want(*gamma) {
                    let gg = Self::acc(g, *gamma, width);
                    for r in 0..rows {
                        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                        for c in 0..width {
                            gg[c] += gout[r * width + c] * (xd[r * width + c] - mean) * rstd;
                        }
                    }
                }
                if self.want(*beta) {
                    let gb = Self::acc(g, *beta, width);
                    for r in 0..rows {
                        for c in 0..width {
                            gb[c] += gout[r * width + c];
                        }
                    }
                }
                if self.want(*x) {
                    let inv = 1.0 / width as f64;
                    let gx = Self::acc(g, *x, rows * width);
                    for r in 0..rows {
                        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                        let go = &gout[r * width..(r + 1) * width];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for c in 0..width {
                            let xh = (xd[r * width + c] - mean) * rstd;
                            let gh = go[c] * gd[c];
                            sum_g += gh;
                            sum_gx += gh * xh;
                        }
                        for c in 0..width {
                            let xh = (xd[r * width + c] - mean) * rstd;
                            let gh = go[c] * gd[c];
                            gx[r * width + c] += rstd * (gh - inv * sum_g - xh * inv * sum_gx);
                        }
                    }
                }
            }
            Op::LayerNormCols { x, gamma, beta, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let stats = match &node.aux {
                    Aux::MeanRstd(s) => s,
                    _ => unreachable!("layer norm stores stats"),
                };
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                if self.want(*gamma) {
                    let gg = Self::acc(g, *gamma, rows);
                    for c in 0..cols {
                        let (mean, rstd) = (stats[2 * c], stats[2 * c + 1]);
                        for r in 0..rows {
                            gg[r] += gout[r * cols + c] * (xd[r * cols + c] - mean) * rstd;
                        }
                    }
                }
                if self.want(*beta) {
                    let gb = Self::acc(g, *beta, rows);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[r] += gout[r * cols + c];
                        }
                    }
                }
                if self.want(*x) {
                    let inv = 1.0 / rows as f64;
                    let gx = Self::acc(g, *x, rows * cols);
                    for c in 0..cols {
                        let (mean, rstd) = (stats[2 * c], stats[2 * c + 1]);
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for r in 0..rows {
                            let xh = (xd[r * cols + c] - mean) * rstd;
                            let gh = gout[r * cols + c] * gd[r];
                            sum_g += gh;
                            sum_gx += gh * xh;
                        }
                        for r in 0..rows {
                            let xh = (xd[r * cols + c] - mean) * rstd;
                            let gh = gout[r * cols + c] * gd[r];
                            gx[r * cols + c] += rstd * (gh - inv * sum_g - xh * inv * sum_gx);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, rows, width } => {
                if self.want(*x) {
                    let (rows, width) = (*rows, *width);
                    let yd = &node.data;
                    let gx = Self::acc(g, *x, rows * width);
                    for r in 0..rows {
                        let yr = &yd[r * width..(r + 1) * width];
                        let go = &gout[r * width..(r + 1) * width];
                        let dotv: f64 = yr.iter().zip(go).map(|(y, gv)| y * gv).sum();
                        for c in 0..width {
                            gx[r * width + c] += yr[c] * (go[c] - dotv);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { x, rows, width } => {
                if self.want(*x) {
                    let (rows, width) = (*rows, *width);
                    let yd = &node.data;
                    let gx = Self::acc(g, *x, rows * width);
                    for r in 0..rows {
                        let go = &gout[r * width..(r + 1) * width];
                        let gsum: f64 = go.iter().sum();
                        for c in 0..width {
                            gx[r * width + c] += go[c] - yd[r * width + c].exp() * gsum;
                        }
                    }
                }
            }
            Op::RowMean { x, rows, cols } => {
                if self.want(*x) {
                    let (rows, cols) = (*rows, *cols);
                    let inv = 1.0 / cols as f64;
                    let gx = Self::acc(g, *x, rows * cols);
                    for r in 0..rows {
                        let gv = gout[r] * inv;
                        for c in 0..cols {
                            gx[r * cols + c] += gv;
                        }
                    }
                }
            }
            Op::RowMax { x, rows, cols } | Op::ColMax { x, rows, cols } => {
                if self.want(*x) {
                    let arg = match &node.aux {
                        Aux::Indices(a) => a,
                        _ => unreachable!("max ops store argmax"),
                    };
                    let gx = Self::acc(g, *x, rows * cols);
                    for (j, &flat) in arg.iter().enumerate() {
                        gx[flat] += gout[j];
                    }
                }
            }
            Op::ColMean { x, rows, cols } => {
                if self.want(*x) {
                    let (rows, cols) = (*rows, *cols);
                    let inv = 1.0 / rows as f64;
                    let gx = Self::acc(g, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += gout[c] * inv;
                        }
                    }
                }
            }
            Op::ColSum { x, rows, cols } => {
                if self.want(*x) {
                    let (rows, cols) = (*rows, *cols);
                    let gx = Self::acc(g, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += gout[c];
                        }
                    }
                }
            }
            Op::MulColBroadcast { x, g: gate, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if self.want(*x) {
                    let gd = &self.nodes[gate.0].data;
                    let gx = Self::acc(g, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += gout[r * cols + c] * gd[r];
                        }
                    }
                }
                if self.want(*gate) {
                    let xd = &self.nodes[x.0].data;
                    let gg = Self::acc(g, *gate, rows);
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += gout[r * cols + c] * xd[r * cols + c];
                        }
                        gg[r] += acc;
                    }
                }
            }
            Op::MulRowBroadcast { x, g: gate, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if self.want(*x) {
                    let gd = &self.nodes[gate.0].data;
                    let gx = Self::acc(g, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += gout[r * cols + c] * gd[c];
                        }
                    }
                }
                if self.want(*gate) {
                    let xd = &self.nodes[x.0].data;
                    let gg = Self::acc(g, *gate, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += gout[r * cols + c] * xd[r * cols + c];
                        }
                    }
                }
            }
            Op::AddBiasBroadcast { x, bias, reps, len } => {
                let (reps, len) = (*reps, *len);
                if self.want(*x) {
                    let gx = Self::acc(g, *x, reps * len);
                    for (d, s) in gx.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
                if self.want(*bias) {
                    let gb = Self::acc(g, *bias, len);
                    for t in 0..reps {
                        for i2 in 0..len {
                            gb[i2] += gout[t * len + i2];
                        }
                    }
                }
            }
            Op::AddMask { x } => {
                if self.want(*x) {
                    let gx = Self::acc(g, *x, gout.len());
                    for (d, s) in gx.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
            }
            Op::SumAll(x) => {
                if self.want(*x) {
                    let len = self.nodes[x.0].data.len();
                    let gv = gout[0];
                    let gx = Self::acc(g, *x, len);
                    for d in gx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.want(*x) {
                    let len = self.nodes[x.0].data.len();
                    let gv = gout[0] / len as f64;
                    let gx = Self::acc(g, *x, len);
                    for d in gx.iter_mut() {
                        *d += gv;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}
