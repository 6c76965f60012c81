use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// How batch-norm layers propagate gradients in `backward`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnGrad {
    /// Exact gradient, including the dependence of the batch statistics on
    /// every sample.
    Full,
    /// Batch statistics treated as constants. Each sample's gradient then
    /// depends only on that sample.
    FrozenStats,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    cache: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu { cache: Option<Tensor> },
    Sigmoid { cache: Option<Tensor> },
    GlobalAvgPool { cache: Option<Vec<usize>> },
    Linear(Linear),
    Flatten { cache: Option<Vec<usize>> },
}

impl Layer {
    /// Square-kernel convolution with He-uniform weights and zero bias.
    pub fn conv<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Layer::Conv2d(Conv2d {
            weight: Tensor::uniform(&[c_out, c_in, kernel, kernel], (6.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
            cache: None,
        })
    }

    pub fn conv_from(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 || bias.shape() != [weight.dim(0)] {
            return Err(Error::Dimension(format!(
                "conv weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Layer::Conv2d(Conv2d { weight, bias, stride, padding, cache: None }))
    }

    pub fn batch_norm(channels: usize) -> Self {
        Layer::BatchNorm(BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            cache: None,
        })
    }

    pub fn relu() -> Self {
        Layer::Relu { cache: None }
    }

    pub fn sigmoid() -> Self {
        Layer::Sigmoid { cache: None }
    }

    pub fn global_avg_pool() -> Self {
        Layer::GlobalAvgPool { cache: None }
    }

    pub fn flatten() -> Self {
        Layer::Flatten { cache: None }
    }

    /// Fully connected layer with `U(-1/sqrt(in), 1/sqrt(in))` weights.
    pub fn linear<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Layer::Linear(Linear {
            weight: Tensor::uniform(&[outputs, inputs], bound, rng),
            bias: Tensor::zeros(&[outputs]),
            cache: None,
        })
    }

    pub fn linear_from(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::Dimension(format!(
                "linear weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Layer::Linear(Linear { weight, bias, cache: None }))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu { .. } => "relu",
            Layer::Sigmoid { .. } => "sigmoid",
            Layer::GlobalAvgPool { .. } => "global_avg_pool",
            Layer::Linear(_) => "linear",
            Layer::Flatten { .. } => "flatten",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.weight.dim(1) {
                    return Err(Error::Dimension(format!(
                        "conv expects {}×H×W, got {input:?}",
                        c.weight.dim(1)
                    )));
                }
                let g = crate::tensor::ConvGeom::new(
                    input[0],
                    input[1],
                    input[2],
                    c.weight.dim(0),
                    c.weight.dim(2),
                    c.weight.dim(3),
                    c.stride,
                    c.padding,
                )?;
                Ok(vec![g.c_out, g.oh, g.ow])
            }
            Layer::BatchNorm(b) => {
                if input.is_empty() || input[0] != b.gamma.len() {
                    return Err(Error::Dimension(format!(
                        "batch_norm over {} channels, got {input:?}",
                        b.gamma.len()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Relu { .. } | Layer::Sigmoid { .. } => Ok(input.to_vec()),
            Layer::GlobalAvgPool { .. } => {
                if input.len() != 3 {
                    return Err(Error::Dimension(format!("pooling expects C×H×W, got {input:?}")));
                }
                Ok(vec![input[0]])
            }
            Layer::Linear(l) => {
                if input.len() != 1 || input[0] != l.weight.dim(1) {
                    return Err(Error::Dimension(format!(
                        "linear expects [{}], got {input:?}",
                        l.weight.dim(1)
                    )));
                }
                Ok(vec![l.weight.dim(0)])
            }
            Layer::Flatten { .. } => Ok(vec![input.iter().product()]),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        match self {
            Layer::Conv2d(c) => {
                let y = conv_forward(c, x)?;
                c.cache = Some(x.clone());
                Ok(y)
            }
            Layer::BatchNorm(b) => bn_forward_train(b, x),
            Layer::Relu { cache } => {
                *cache = Some(x.clone());
                Ok(x.map(|v| v.max(0.0)))
            }
            Layer::Sigmoid { cache } => {
                let y = x.map(sigmoid);
                *cache = Some(y.clone());
                Ok(y)
            }
            Layer::GlobalAvgPool { cache } => {
                *cache = Some(x.shape().to_vec());
                gap_forward(x)
            }
            Layer::Linear(l) => {
                let y = linear_forward(l, x)?;
                l.cache = Some(x.clone());
                Ok(y)
            }
            Layer::Flatten { cache } => {
                *cache = Some(x.shape().to_vec());
                let (n, m) = x.rows_cols();
                x.reshaped(&[n, m])
            }
        }
    }

    /// Cache-free forward pass; batch norm uses its running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(c) => conv_forward(c, x),
            Layer::BatchNorm(b) => {
                let mean = b.running_mean.data();
                let inv: Vec<f64> = b.running_var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                bn_affine(b, x, mean, &inv)
            }
            Layer::Relu { .. } => Ok(x.map(|v| v.max(0.0))),
            Layer::Sigmoid { .. } => Ok(x.map(sigmoid)),
            Layer::GlobalAvgPool { .. } => gap_forward(x),
            Layer::Linear(l) => linear_forward(l, x),
            Layer::Flatten { .. } => {
                let (n, m) = x.rows_cols();
                x.reshaped(&[n, m])
            }
        }
    }

    /// Input gradient for `upstream`; parameter gradients are appended to
    /// `grads` as `(name, gradient)`.
    pub fn backward(
        &self,
        upstream: &Tensor,
        bn: BnGrad,
        grads: &mut Vec<(&'static str, Tensor)>,
    ) -> Result<Tensor> {
        let missing = || Error::State(format!("{} backward called without a cached forward", self.kind()));
        match self {
            Layer::Conv2d(c) => {
                let x = c.cache.as_ref().ok_or_else(missing)?;
                let (dx, dw) = conv2d_backward(x, &c.weight, upstream, c.stride, c.padding)?;
                let co = c.weight.dim(0);
                let plane = upstream.len() / (upstream.dim(0) * co);
                let mut db = vec![0.0; co];
                for (i, chunk) in upstream.data().chunks(plane).enumerate() {
                    db[i % co] += chunk.iter().sum::<f64>();
                }
                grads.push(("weight", dw));
                grads.push(("bias", Tensor::from_vec(db)));
                Ok(dx)
            }
            Layer::BatchNorm(b) => {
                let cache = b.cache.as_ref().ok_or_else(missing)?;
                bn_backward(b, cache, upstream, bn, grads)
            }
            Layer::Relu { cache } => {
                let x = cache.as_ref().ok_or_else(missing)?;
                upstream.check_same_shape(x, "relu backward")?;
                let data = upstream
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Layer::Sigmoid { cache } => {
                let y = cache.as_ref().ok_or_else(missing)?;
                upstream.check_same_shape(y, "sigmoid backward")?;
                let data = upstream.data().iter().zip(y.data()).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                Tensor::new(y.shape().to_vec(), data)
            }
            Layer::GlobalAvgPool { cache } => {
                let shape = cache.as_ref().ok_or_else(missing)?;
                let plane = shape[2] * shape[3];
                if upstream.shape() != [shape[0], shape[1]] {
                    return Err(Error::Dimension(format!(
                        "pool backward: upstream {:?} for input {shape:?}",
                        upstream.shape()
                    )));
                }
                let inv = 1.0 / plane as f64;
                let mut data = Vec::with_capacity(shape.iter().product());
                for &g in upstream.data() {
                    data.extend(std::iter::repeat(g * inv).take(plane));
                }
                Tensor::new(shape.clone(), data)
            }
            Layer::Linear(l) => {
                let x = l.cache.as_ref().ok_or_else(missing)?;
                let (n, out) = (upstream.dim(0), l.weight.dim(0));
                if upstream.shape() != [n, out] || x.dim(0) != n {
                    return Err(Error::Dimension(format!(
                        "linear backward: upstream {:?}, input {:?}",
                        upstream.shape(),
                        x.shape()
                    )));
                }
                let gt = upstream.transpose()?;
                grads.push(("weight", crate::tensor::matmul(&gt, x)?));
                let mut db = vec![0.0; out];
                for row in upstream.data().chunks(out) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                grads.push(("bias", Tensor::from_vec(db)));
                crate::tensor::matmul(upstream, &l.weight)
            }
            Layer::Flatten { cache } => {
                let shape = cache.as_ref().ok_or_else(missing)?;
                upstream.reshaped(shape)
            }
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(c) => c.cache = None,
            Layer::BatchNorm(b) => b.cache = None,
            Layer::Relu { cache } | Layer::Sigmoid { cache } => *cache = None,
            Layer::GlobalAvgPool { cache } | Layer::Flatten { cache } => *cache = None,
            Layer::Linear(l) => l.cache = None,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![("weight", &mut c.weight), ("bias", &mut c.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &mut b.gamma), ("beta", &mut b.beta)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            _ => vec![],
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::BatchNorm(b) => vec![("running_mean", &mut b.running_mean), ("running_var", &mut b.running_var)],
            _ => vec![],
        }
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::BatchNorm(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            _ => vec![],
        }
    }

    /// Replace running statistics with the statistics of the last training
    /// batch (biased variance), so that `infer` reproduces that batch's
    /// normalization.
    pub fn pin_batch_stats(&mut self) -> Result<()> {
        if let Layer::BatchNorm(b) = self {
            let cache = b
                .cache
                .as_ref()
                .ok_or_else(|| Error::State("batch_norm has no cached batch statistics".into()))?;
            b.running_mean = Tensor::from_vec(cache.mean.clone());
            b.running_var = Tensor::from_vec(cache.var.clone());
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let mut y = conv2d(x, &c.weight, c.stride, c.padding)?;
    let co = c.weight.dim(0);
    let plane = y.len() / (y.dim(0) * co);
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let b = c.bias.data()[i % co];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(y)
}

fn gap_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Dimension(format!("pooling expects N×C×H×W, got {:?}", x.shape())));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let data = x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![n, c], data)
}

fn linear_forward(l: &Linear, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("linear expects N×F, got {:?}", x.shape())));
    }
    let mut y = crate::tensor::matmul(x, &l.weight.transpose()?)?;
    let out = l.weight.dim(0);
    for row in y.data_mut().chunks_mut(out) {
        for (v, b) in row.iter_mut().zip(l.bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

fn bn_dims(b: &BatchNorm, x: &Tensor) -> Result<(usize, usize, usize)> {
    let c = b.gamma.len();
    if x.rank() < 2 || x.dim(1) != c {
        return Err(Error::Dimension(format!(
            "batch_norm over {c} channels, got {:?}",
            x.shape()
        )));
    }
    let n = x.dim(0);
    Ok((n, c, x.len() / (n * c)))
}

fn bn_affine(b: &BatchNorm, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> Result<Tensor> {
    let (_, c, plane) = bn_dims(b, x)?;
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (g, be) = (b.gamma.data()[ch], b.beta.data()[ch]);
        chunk.iter_mut().for_each(|v| *v = g * (*v - mean[ch]) * inv_std[ch] + be);
    }
    Ok(y)
}

fn bn_forward_train(b: &mut BatchNorm, x: &Tensor) -> Result<Tensor> {
    let (n, c, plane) = bn_dims(b, x)?;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let mu = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = x.clone();
    for (i, chunk) in xhat.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
    }
    let mut y = xhat.clone();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (g, be) = (b.gamma.data()[ch], b.beta.data()[ch]);
        chunk.iter_mut().for_each(|v| *v = g * *v + be);
    }

    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    for ch in 0..c {
        let rm = &mut b.running_mean.data_mut()[ch];
        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
        let rv = &mut b.running_var.data_mut()[ch];
        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
    }
    b.cache = Some(BnCache { xhat, inv_std, mean, var });
    Ok(y)
}

fn bn_backward(
    b: &BatchNorm,
    cache: &BnCache,
    upstream: &Tensor,
    mode: BnGrad,
    grads: &mut Vec<(&'static str, Tensor)>,
) -> Result<Tensor> {
    upstream.check_same_shape(&cache.xhat, "batch_norm backward")?;
    let (n, c, plane) = bn_dims(b, upstream)?;
    let m = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (g, xh)) in upstream.data().chunks(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
        let ch = i % c;
        dbeta[ch] += g.iter().sum::<f64>();
        dgamma[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut dx = upstream.clone();
    for (i, (d, xh)) in dx.data_mut().chunks_mut(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
        let ch = i % c;
        let k = b.gamma.data()[ch] * cache.inv_std[ch];
        match mode {
            BnGrad::FrozenStats => d.iter_mut().for_each(|v| *v *= k),
            BnGrad::Full => {
                let (sb, sg) = (dbeta[ch] / m, dgamma[ch] / m);
                for (v, &xv) in d.iter_mut().zip(xh) {
                    *v = k * (*v - sb - xv * sg);
                }
            }
        }
    }
    grads.push(("gamma", Tensor::from_vec(dgamma)));
    grads.push(("beta", Tensor::from_vec(dbeta)));
    Ok(dx)
}
