use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise penalty applied to positive-pair differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    /// `0.5·d²` below `delta`, `delta·(|d| − 0.5·delta)` above.
    Huber { delta: f64 },
    /// `|d|`
    Abs,
    /// `0.5·d²`
    Square,
}

impl Penalty {
    pub fn value(self, d: f64) -> f64 {
        match self {
            Penalty::Huber { delta } => {
                let a = d.abs();
                if a < delta {
                    0.5 * d * d
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
            Penalty::Abs => d.abs(),
            Penalty::Square => 0.5 * d * d,
        }
    }

    pub fn slope(self, d: f64) -> f64 {
        match self {
            Penalty::Huber { delta } => {
                if d.abs() < delta {
                    d
                } else {
                    delta * d.signum()
                }
            }
            Penalty::Abs => {
                if d == 0.0 {
                    0.0
                } else {
                    d.signum()
                }
            }
            Penalty::Square => d,
        }
    }
}

/// Per-feature statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (divisor `m − 1`) variance, the value folded into running
    /// estimates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct FeatureLayout {
    outer: usize,
    features: usize,
    inner: usize,
}

impl FeatureLayout {
    fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [b, f] => Ok(Self {
                outer: b,
                features: f,
                inner: 1,
            }),
            [b, c, h, w] => Ok(Self {
                outer: b,
                features: c,
                inner: h * w,
            }),
            _ => Err(Error::Contract(format!(
                "batch norm expects [batch, features] or [batch, channels, h, w], got {shape:?}"
            ))),
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Calls `f(feature, flat_index)` for every element.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for c in 0..self.features {
                let base = (o * self.features + c) * self.inner;
                for s in 0..self.inner {
                    f(c, base + s);
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        layout: FeatureLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        layout: FeatureLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Sum(Var),
    NtXent {
        input: Var,
        temperature: f64,
        probs: Vec<f64>,
    },
    PairPenalty {
        input: Var,
        penalty: Penalty,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds image `b` into a `[in_ch·kh·kw, out_h·out_w]` matrix.
    fn im2col(&self, input: &[f64], b: usize, cols: &mut [f64]) {
        let p = self.positions();
        let img = &input[b * self.in_ch * self.height * self.width..];
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * self.out_w + ox] =
                                if iy < 0 || ix < 0 || iy as usize >= self.height || ix as usize >= self.width {
                                    0.0
                                } else {
                                    img[(c * self.height + iy as usize) * self.width + ix as usize]
                                };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back
    /// into image `b` of `grad`.
    fn col2im(&self, cols: &[f64], b: usize, grad: &mut [f64]) {
        let p = self.positions();
        let img = &mut grad[b * self.in_ch * self.height * self.width..];
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            img[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so every input of a node has a smaller index and backward simply walks
/// the node list in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `input·weight + bias` for `input: [batch, in]`, `weight: [in, out]`,
    /// `bias: [out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.ndim() != 2 {
            return Err(Error::Contract(format!("dense input must be 2-D, got {:?}", x.shape())));
        }
        if w.ndim() != 2 {
            return Err(Error::Contract(format!(
                "dense weight must be 2-D, got {:?}",
                w.shape()
            )));
        }
        let (batch, in_dim) = (x.shape()[0], x.shape()[1]);
        if w.shape()[0] != in_dim {
            return Err(Error::dim("dense weight axis 0 (in_dim)", in_dim, w.shape()[0]));
        }
        let out_dim = w.shape()[1];
        if b.shape() != [out_dim] {
            return Err(Error::dim("dense bias axis 0 (out_dim)", out_dim, b.len()));
        }
        let mut out = Vec::with_capacity(batch * out_dim);
        for _ in 0..batch {
            out.extend_from_slice(b.data());
        }
        gemm(
            batch,
            in_dim,
            out_dim,
            x.data(),
            Layout::Normal,
            w.data(),
            Layout::Normal,
            &mut out,
            true,
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![batch, out_dim], out)?,
            Op::Dense { input, weight, bias },
            rg,
        ))
    }

    /// Cross-correlation of `input: [batch, in_ch, h, w]` with
    /// `kernel: [out_ch, in_ch, kh, kw]`; zero padding, no bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let (&[batch, in_ch, height, width], &[out_ch, k_in, kh, kw]) = (x.shape(), k.shape()) else {
            return Err(Error::Contract(format!(
                "conv2d expects 4-D input and kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        };
        if k_in != in_ch {
            return Err(Error::dim("conv2d kernel axis 1 (in_channels)", in_ch, k_in));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::Config(format!(
                "conv2d output would be empty: padded input {span_h}x{span_w} smaller than kernel {kh}x{kw}"
            )));
        }
        let geom = ConvGeometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        };
        let p = geom.positions();
        let mut cols = vec![0.0; geom.patch_len() * p];
        let mut out = vec![0.0; batch * out_ch * p];
        for b in 0..batch {
            geom.im2col(x.data(), b, &mut cols);
            gemm(
                out_ch,
                geom.patch_len(),
                p,
                k.data(),
                Layout::Normal,
                &cols,
                Layout::Normal,
                &mut out[b * out_ch * p..(b + 1) * out_ch * p],
                false,
            );
        }
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?,
            Op::Conv2d { input, kernel, geom },
            rg,
        ))
    }

    /// Training-mode batch normalization over the batch axis (and spatial
    /// axes for 4-D input), followed by the per-feature affine map.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let layout = FeatureLayout::of(x.shape())?;
        if layout.outer < 2 {
            return Err(Error::Config(format!(
                "batch norm in training mode needs a batch of at least 2, got {}",
                layout.outer
            )));
        }
        self.check_affine(gamma, beta, layout.features)?;
        let m = layout.count() as f64;
        let mut mean = vec![0.0; layout.features];
        layout.for_each(|c, i| mean[c] += x.data()[i]);
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; layout.features];
        layout.for_each(|c, i| {
            let d = x.data()[i] - mean[c];
            var[c] += d * d;
        });
        let var_unbiased: Vec<f64> = var.iter().map(|s| s / (m - 1.0)).collect();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / m + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        layout.for_each(|c, i| xhat[i] = (x.data()[i] - mean[c]) * inv_std[c]);
        let out = self.affine_out(&xhat, gamma, beta, layout);
        let shape = x.shape().to_vec();
        let rg = self.needs(&[input, gamma, beta]);
        let var = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var, BatchStats { mean, var_unbiased }))
    }

    /// Inference-mode batch normalization using stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let layout = FeatureLayout::of(x.shape())?;
        self.check_affine(gamma, beta, layout.features)?;
        if running_mean.len() != layout.features || running_var.len() != layout.features {
            return Err(Error::dim(
                "batch norm running statistics",
                layout.features,
                running_mean.len(),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        layout.for_each(|c, i| xhat[i] = (x.data()[i] - running_mean[c]) * inv_std[c]);
        let out = self.affine_out(&xhat, gamma, beta, layout);
        let shape = x.shape().to_vec();
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, features: usize) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let len = self.value(v).len();
            if len != features {
                return Err(Error::dim(
                    format!("batch norm {name} axis 0 (features)"),
                    features,
                    len,
                ));
            }
        }
        Ok(())
    }

    fn affine_out(&self, xhat: &[f64], gamma: Var, beta: Var, layout: FeatureLayout) -> Vec<f64> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xhat.len()];
        layout.for_each(|c, i| out[i] = g[c] * xhat[i] + b[c]);
        out
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[input]);
        self.push(t, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[input]);
        self.push(t, Op::Scale(input, factor), rg)
    }

    /// Divides each row by its L2 norm, floored at `1e-12`.
    pub fn normalize_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let w = x.row_len();
        let mut norms = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        debug_assert_eq!(data.len(), x.rows() * w);
        let t = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[input]);
        self.push(t, Op::NormalizeRows { input, norms }, rg)
    }

    /// 2×2 average pooling with stride 2 over `[batch, ch, h, w]`; odd
    /// trailing rows and columns are dropped.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::Contract(format!(
                "avg_pool2 expects 4-D input, got {:?}",
                x.shape()
            )));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Config(format!("avg_pool2 on {h}x{w} input leaves no output")));
        }
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x0) = (2 * oy, 2 * ox);
                    dst[oy * ow + ox] = 0.25
                        * (src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0] + src[(y + 1) * w + x0 + 1]);
                }
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::AvgPool2(input), rg))
    }

    /// Mean over spatial axes: `[batch, ch, h, w] → [batch, ch]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::Contract(format!(
                "global_avg_pool expects 4-D input, got {:?}",
                x.shape()
            )));
        };
        let s = (h * w) as f64;
        let out = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / s).collect();
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(input), rg))
    }

    /// Collapses all trailing axes: `[batch, ...] → [batch, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let t = x
            .clone()
            .reshape(vec![x.rows(), x.row_len()])
            .expect("same element count");
        let rg = self.needs(&[input]);
        self.push(t, Op::Reshape(input), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// NT-Xent over `2N` unit-norm rows where row `i` and row `i + N` form a
    /// positive pair. Each row's softmax runs over every other row, the
    /// positive included; the result is the mean over all `2N` rows.
    pub fn nt_xent(&mut self, input: Var, temperature: f64) -> Result<Var> {
        let u = self.value(input);
        if u.ndim() != 2 {
            return Err(Error::Contract(format!(
                "nt_xent expects 2-D input, got {:?}",
                u.shape()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let (rows, d) = (u.shape()[0], u.shape()[1]);
        if rows < 2 || rows % 2 != 0 {
            return Err(Error::Contract(format!(
                "nt_xent needs an even number of rows (2N with N >= 1), got {rows}"
            )));
        }
        let n = rows / 2;
        let mut sim = vec![0.0; rows * rows];
        gemm(
            rows,
            d,
            rows,
            u.data(),
            Layout::Normal,
            u.data(),
            Layout::Transposed,
            &mut sim,
            false,
        );
        sim.iter_mut().for_each(|s| *s /= temperature);
        let mut probs = vec![0.0; rows * rows];
        let mut total = 0.0;
        for i in 0..rows {
            let s = &sim[i * rows..(i + 1) * rows];
            let max = s
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = s
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let lse = max + denom.ln();
            let pos = (i + n) % rows;
            total += lse - s[pos];
            let p = &mut probs[i * rows..(i + 1) * rows];
            for k in 0..rows {
                if k != i {
                    p[k] = (s[k] - lse).exp();
                }
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::NtXent {
                input,
                temperature,
                probs,
            },
            rg,
        ))
    }

    /// Mean over the `N` positive pairs (row `k` with row `k + N`) of the
    /// per-dimension average penalty of their difference.
    pub fn pair_penalty(&mut self, input: Var, penalty: Penalty) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 2 || x.rows() < 2 || !x.rows().is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "pair penalty expects [2N, d] input, got {:?}",
                x.shape()
            )));
        }
        let (n, d) = (x.rows() / 2, x.row_len());
        let mut total = 0.0;
        for k in 0..n {
            let per_pair: f64 = x
                .row(k)
                .iter()
                .zip(x.row(k + n))
                .map(|(a, b)| penalty.value(a - b))
                .sum::<f64>()
                / d as f64;
            total += per_pair;
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::PairPenalty { input, penalty }, rg))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad matches value shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Dense { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (batch, in_dim, out_dim) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                self.accumulate(grads, *input, |dx| {
                    gemm(
                        batch,
                        out_dim,
                        in_dim,
                        g,
                        Layout::Normal,
                        w.data(),
                        Layout::Transposed,
                        dx,
                        true,
                    )
                });
                self.accumulate(grads, *weight, |dw| {
                    gemm(
                        in_dim,
                        batch,
                        out_dim,
                        x.data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        dw,
                        true,
                    )
                });
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(out_dim) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Conv2d { input, kernel, geom } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                let (p, pl, oc) = (geom.positions(), geom.patch_len(), geom.out_ch);
                let mut cols = vec![0.0; pl * p];
                if self.nodes[kernel.0].requires_grad {
                    self.accumulate(grads, *kernel, |dk| {
                        for b in 0..geom.batch {
                            geom.im2col(x.data(), b, &mut cols);
                            let gb = &g[b * oc * p..(b + 1) * oc * p];
                            gemm(oc, p, pl, gb, Layout::Normal, &cols, Layout::Transposed, dk, true);
                        }
                    });
                }
                self.accumulate(grads, *input, |dx| {
                    for b in 0..geom.batch {
                        let gb = &g[b * oc * p..(b + 1) * oc * p];
                        gemm(
                            pl,
                            oc,
                            p,
                            k.data(),
                            Layout::Transposed,
                            gb,
                            Layout::Normal,
                            &mut cols,
                            false,
                        );
                        geom.col2im(&cols, b, dx);
                    }
                });
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let m = layout.count() as f64;
                let mut sum_g = vec![0.0; layout.features];
                let mut sum_gx = vec![0.0; layout.features];
                layout.for_each(|c, i| {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * xhat[i];
                });
                self.accumulate(grads, *input, |dx| {
                    layout.for_each(|c, i| {
                        dx[i] += gam[c] * inv_std[c] / m * (m * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                    })
                });
                self.accumulate(grads, *gamma, |dg| {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v)
                });
                self.accumulate(grads, *beta, |db| db.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v));
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *input, |dx| {
                    layout.for_each(|c, i| dx[i] += g[i] * gam[c] * inv_std[c])
                });
                self.accumulate(grads, *gamma, |dg| layout.for_each(|c, i| dg[c] += g[i] * xhat[i]));
                self.accumulate(grads, *beta, |db| layout.for_each(|c, i| db[c] += g[i]));
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &v), &gi) in dx.iter_mut().zip(x).zip(g) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                self.accumulate(grads, *b, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i];
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * x[i];
                    }
                });
            }
            Op::Scale(input, factor) => {
                self.accumulate(grads, *input, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v * factor)
                });
            }
            Op::NormalizeRows { input, norms } => {
                let y = &node.value;
                let w = y.row_len();
                self.accumulate(grads, *input, |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * w..(r + 1) * w];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            dx[r * w + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::AvgPool2(input) => {
                let x = self.value(*input);
                let &[b, c, h, w] = x.shape() else { unreachable!() };
                let (oh, ow) = (h / 2, w / 2);
                self.accumulate(grads, *input, |dx| {
                    for plane in 0..b * c {
                        let gsrc = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = 0.25 * gsrc[oy * ow + ox];
                                let (y, x0) = (2 * oy, 2 * ox);
                                dst[y * w + x0] += v;
                                dst[y * w + x0 + 1] += v;
                                dst[(y + 1) * w + x0] += v;
                                dst[(y + 1) * w + x0 + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let s = x.shape()[2] * x.shape()[3];
                self.accumulate(grads, *input, |dx| {
                    for (plane, &gv) in g.iter().enumerate() {
                        let v = gv / s as f64;
                        dx[plane * s..(plane + 1) * s].iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::Reshape(input) => {
                self.accumulate(grads, *input, |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Sum(input) => {
                self.accumulate(grads, *input, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::NtXent {
                input,
                temperature,
                probs,
            } => {
                let u = self.value(*input);
                let (rows, d) = (u.shape()[0], u.shape()[1]);
                let n = rows / 2;
                let scale = g[0] / rows as f64;
                // dL/dS, then symmetrized because S = U·Uᵀ/τ.
                let mut ds = vec![0.0; rows * rows];
                for i in 0..rows {
                    for k in 0..rows {
                        let mut v = probs[i * rows + k];
                        if k == (i + n) % rows {
                            v -= 1.0;
                        }
                        ds[i * rows + k] += scale * v / temperature;
                        ds[k * rows + i] += scale * v / temperature;
                    }
                }
                self.accumulate(grads, *input, |du| {
                    gemm(rows, rows, d, &ds, Layout::Normal, u.data(), Layout::Normal, du, true)
                });
            }
            Op::PairPenalty { input, penalty } => {
                let x = self.value(*input);
                let (n, d) = (x.rows() / 2, x.row_len());
                let scale = g[0] / (n * d) as f64;
                self.accumulate(grads, *input, |dx| {
                    for k in 0..n {
                        for j in 0..d {
                            let s = scale * penalty.slope(x.row(k)[j] - x.row(k + n)[j]);
                            dx[k * d + j] += s;
                            dx[(k + n) * d + j] -= s;
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

/// Floor applied to row norms before division.
pub const NORM_FLOOR: f64 = 1e-12;
