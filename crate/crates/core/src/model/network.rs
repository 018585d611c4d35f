use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv_out_size, cross_entropy, softmax, Architecture, FusionMode, NetInput};
use crate::error::{invalid, Error, Result};

/// Weights of a classifier. Tensors are stored in declaration order:
/// `conv0.weight, conv0.bias, …, fc0.weight, fc0.bias, …`. Conv weights are
/// `[out][in][ky][kx]`, dense weights `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    mode: FusionMode,
    params: Vec<Vec<f64>>,
}

/// Gradients with the same layout as [`Network`] parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self { tensors: net.params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn clear(&mut self) {
        self.tensors.iter_mut().flatten().for_each(|g| *g = 0.0);
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    /// Input of every conv block.
    conv_inputs: Vec<Vec<f64>>,
    /// Post-ReLU conv output of every block (before pooling).
    activations: Vec<Vec<f64>>,
    /// Flat source index of every pooled value.
    pool_argmax: Vec<Vec<usize>>,
    /// Input of every dense layer; the first is the pooled feature vector.
    fc_inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Network {
    /// He-uniform initialisation with zero biases.
    pub fn new(arch: Architecture, mode: FusionMode, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_ins = net.fan_ins();
        for (i, tensor) in net.params.iter_mut().enumerate() {
            if i % 2 == 0 {
                let bound = (6.0 / fan_ins[i / 2] as f64).sqrt();
                tensor.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn zeros(arch: Architecture, mode: FusionMode) -> Result<Self> {
        arch.validate()?;
        let shapes = param_shapes(&arch, mode);
        let params = shapes.iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self { arch, mode, params })
    }

    /// Rebuilds a network from stored tensors, checking every length.
    pub fn from_params(arch: Architecture, mode: FusionMode, params: Vec<Vec<f64>>) -> Result<Self> {
        arch.validate()?;
        let shapes = param_shapes(&arch, mode);
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(&n, p)| n != p.len()) {
            return Err(Error::ShapeMismatch("parameter tensors do not match the architecture".into()));
        }
        Ok(Self { arch, mode, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Tensor index of the weight of conv block `i`.
    pub fn conv_weight_index(&self, i: usize) -> usize {
        2 * i
    }

    /// Tensor index of the weight of dense layer `j`.
    pub fn fc_weight_index(&self, j: usize) -> usize {
        2 * (self.arch.conv.len() + j)
    }

    /// Input width of the first dense layer.
    pub fn head_input_dim(&self) -> usize {
        self.arch.feature_dim() + usize::from(self.mode.uses_aux())
    }

    fn fan_ins(&self) -> Vec<usize> {
        let mut fans = Vec::new();
        let mut in_ch = self.mode.input_channels();
        for c in &self.arch.conv {
            fans.push(in_ch * c.kernel * c.kernel);
            in_ch = c.out_channels;
        }
        let mut width = self.head_input_dim();
        for &h in &self.arch.hidden {
            fans.push(width);
            width = h;
        }
        fans.push(width);
        fans
    }

    fn check_input(&self, input: &NetInput) -> Result<()> {
        let channels = self.mode.input_channels();
        if input.channels != channels {
            return Err(Error::ShapeMismatch(format!(
                "{} network expects {channels} input channels, got {}",
                self.mode, input.channels
            )));
        }
        if input.size != self.arch.input_size || input.data.len() != channels * input.size * input.size {
            return Err(Error::ShapeMismatch(format!(
                "network expects {0}x{0} inputs, got {1}x{1}",
                self.arch.input_size, input.size
            )));
        }
        if input.aux.is_some() != self.mode.uses_aux() {
            return Err(Error::ShapeMismatch(format!(
                "{} network {} an auxiliary DfB feature",
                self.mode,
                if self.mode.uses_aux() { "requires" } else { "does not take" }
            )));
        }
        Ok(())
    }

    /// Pre-softmax class scores.
    pub fn logits(&self, input: &NetInput) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.logits)
    }

    /// Class probabilities.
    pub fn forward(&self, input: &NetInput) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(input)?))
    }

    fn trace(&self, input: &NetInput) -> Result<Trace> {
        self.check_input(input)?;
        let n_conv = self.arch.conv.len();
        let mut conv_inputs = Vec::with_capacity(n_conv);
        let mut activations = Vec::with_capacity(n_conv);
        let mut pool_argmax = Vec::with_capacity(n_conv);

        let mut x = input.data.clone();
        let (mut ch, mut size) = (input.channels, input.size);
        for (i, spec) in self.arch.conv.iter().enumerate() {
            let os = conv_out_size(size, spec.kernel, spec.stride);
            let mut out = vec![0.0; spec.out_channels * os * os];
            let geo = ConvGeometry {
                in_ch: ch,
                in_size: size,
                out_ch: spec.out_channels,
                out_size: os,
                kernel: spec.kernel,
                stride: spec.stride,
            };
            conv_forward(&geo, &x, &self.params[2 * i], &self.params[2 * i + 1], &mut out);
            out.iter_mut().for_each(|v| *v = relu(*v));
            let (next, next_size, argmax) = if spec.pool {
                let (p, idx) = max_pool2(&out, spec.out_channels, os);
                (p, os / 2, idx)
            } else {
                (out.clone(), os, Vec::new())
            };
            conv_inputs.push(std::mem::replace(&mut x, next));
            activations.push(out);
            pool_argmax.push(argmax);
            ch = spec.out_channels;
            size = next_size;
        }

        // global average pool
        let plane = size * size;
        let mut features: Vec<f64> = x.chunks_exact(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        if let Some(aux) = input.aux {
            features.push(aux);
        }

        let n_fc = self.arch.hidden.len() + 1;
        let mut fc_inputs = Vec::with_capacity(n_fc);
        let mut h = features;
        for j in 0..n_fc {
            let w = &self.params[2 * (n_conv + j)];
            let b = &self.params[2 * (n_conv + j) + 1];
            let mut y = dense_forward(w, b, &h);
            if j + 1 < n_fc {
                y.iter_mut().for_each(|v| *v = relu(*v));
            }
            fc_inputs.push(std::mem::replace(&mut h, y));
        }
        Ok(Trace { conv_inputs, activations, pool_argmax, fc_inputs, logits: h })
    }

    /// Adds the gradient of `cross_entropy(forward(input), true_class)` to
    /// `grads` and returns the loss.
    pub fn accumulate_gradients(&self, input: &NetInput, true_class: usize, grads: &mut Gradients) -> Result<f64> {
        if true_class >= self.arch.classes {
            return Err(invalid(format!("class {true_class} out of range")));
        }
        let trace = self.trace(input)?;
        let probs = softmax(&trace.logits);
        let loss = cross_entropy(&probs, true_class);

        // softmax + cross-entropy: dL/dz = p − onehot
        let mut delta = probs;
        delta[true_class] -= 1.0;

        let n_conv = self.arch.conv.len();
        let n_fc = self.arch.hidden.len() + 1;
        for j in (0..n_fc).rev() {
            let wi = 2 * (n_conv + j);
            let x = &trace.fc_inputs[j];
            let (gw, gb) = pair_mut(&mut grads.tensors, wi);
            let dx = dense_backward(&self.params[wi], x, &delta, gw, gb);
            delta = if j > 0 {
                // fc_inputs[j] is the post-ReLU output of layer j-1
                dx.into_iter().zip(x).map(|(d, &a)| if a > 0.0 { d } else { 0.0 }).collect()
            } else {
                dx
            };
        }

        // drop the auxiliary feature and undo the global average pool
        let last = self.arch.spatial_sizes().last().copied().unwrap_or(0);
        let plane = last * last;
        let mut dx: Vec<f64> = Vec::with_capacity(self.arch.feature_dim() * plane);
        for &d in &delta[..self.arch.feature_dim()] {
            dx.extend(std::iter::repeat(d / plane as f64).take(plane));
        }

        let mut in_ch = self.mode.input_channels();
        let mut sizes = vec![self.arch.input_size];
        sizes.extend(self.arch.spatial_sizes());
        let channels: Vec<usize> =
            std::iter::once(in_ch).chain(self.arch.conv.iter().map(|c| c.out_channels)).collect();
        for i in (0..n_conv).rev() {
            let spec = self.arch.conv[i];
            in_ch = channels[i];
            let in_size = sizes[i];
            let os = conv_out_size(in_size, spec.kernel, spec.stride);
            let act = &trace.activations[i];
            let mut dact = if spec.pool {
                let mut d = vec![0.0; act.len()];
                for (g, &src) in dx.iter().zip(&trace.pool_argmax[i]) {
                    d[src] += g;
                }
                d
            } else {
                dx
            };
            for (d, &a) in dact.iter_mut().zip(act) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let geo = ConvGeometry {
                in_ch,
                in_size,
                out_ch: spec.out_channels,
                out_size: os,
                kernel: spec.kernel,
                stride: spec.stride,
            };
            let mut din = if i > 0 { vec![0.0; in_ch * in_size * in_size] } else { Vec::new() };
            let (gw, gb) = pair_mut(&mut grads.tensors, 2 * i);
            conv_backward(
                &geo,
                &trace.conv_inputs[i],
                &self.params[2 * i],
                &dact,
                gw,
                gb,
                if i > 0 { Some(&mut din) } else { None },
            );
            dx = din;
        }
        Ok(loss)
    }

    /// Mean loss and mean gradient over a batch.
    pub fn loss_and_gradients(&self, batch: &[(NetInput, usize)]) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for (x, y) in batch {
            loss += self.accumulate_gradients(x, *y, &mut grads)?;
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    }

    /// Mean loss over a batch without gradients.
    pub fn loss(&self, batch: &[(NetInput, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in batch {
            total += cross_entropy(&self.forward(x)?, *y);
        }
        Ok(total / batch.len().max(1) as f64)
    }
}

fn param_shapes(arch: &Architecture, mode: FusionMode) -> Vec<usize> {
    let mut shapes = Vec::new();
    let mut in_ch = mode.input_channels();
    for c in &arch.conv {
        shapes.push(c.out_channels * in_ch * c.kernel * c.kernel);
        shapes.push(c.out_channels);
        in_ch = c.out_channels;
    }
    let mut width = arch.feature_dim() + usize::from(mode.uses_aux());
    for &h in arch.hidden.iter().chain(std::iter::once(&arch.classes)) {
        shapes.push(h * width);
        shapes.push(h);
        width = h;
    }
    shapes
}

fn pair_mut(tensors: &mut [Vec<f64>], i: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = tensors.split_at_mut(i + 1);
    (&mut a[i], &mut b[0])
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

struct ConvGeometry {
    in_ch: usize,
    in_size: usize,
    out_ch: usize,
    out_size: usize,
    kernel: usize,
    stride: usize,
}

impl ConvGeometry {
    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(self.stride) };
        let hi = if self.in_size + pad <= k {
            0
        } else {
            ((self.in_size - 1 + pad - k) / self.stride + 1).min(self.out_size)
        };
        (lo, hi.max(lo))
    }
}

/// Direct convolution. Contributions accumulate per output channel in
/// input-channel order, and zero weights are skipped, so appending an
/// all-zero input channel leaves every output bit-identical.
fn conv_forward(g: &ConvGeometry, input: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let (k, s, pad) = (g.kernel, g.stride, g.kernel / 2);
    let (is, os) = (g.in_size, g.out_size);
    for oc in 0..g.out_ch {
        let plane = &mut out[oc * os * os..(oc + 1) * os * os];
        plane.fill(b[oc]);
        for ic in 0..g.in_ch {
            let inp = &input[ic * is * is..(ic + 1) * is * is];
            for ky in 0..k {
                let (ylo, yhi) = g.valid_range(ky);
                for kx in 0..k {
                    let wv = w[((oc * g.in_ch + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = g.valid_range(kx);
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - pad;
                        let orow = &mut plane[oy * os + xlo..oy * os + xhi];
                        let irow = &inp[iy * is..(iy + 1) * is];
                        if s == 1 {
                            let start = xlo + kx - pad;
                            let n = orow.len();
                            for (o, &v) in orow.iter_mut().zip(&irow[start..start + n]) {
                                *o += wv * v;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[(xlo + j) * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    g: &ConvGeometry,
    input: &[f64],
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut Vec<f64>>,
) {
    let (k, s, pad) = (g.kernel, g.stride, g.kernel / 2);
    let (is, os) = (g.in_size, g.out_size);
    for oc in 0..g.out_ch {
        let dplane = &dout[oc * os * os..(oc + 1) * os * os];
        db[oc] += dplane.iter().sum::<f64>();
        for ic in 0..g.in_ch {
            let inp = &input[ic * is * is..(ic + 1) * is * is];
            for ky in 0..k {
                let (ylo, yhi) = g.valid_range(ky);
                for kx in 0..k {
                    let wi = ((oc * g.in_ch + ic) * k + ky) * k + kx;
                    let wv = w[wi];
                    let (xlo, xhi) = g.valid_range(kx);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - pad;
                        let drow = &dplane[oy * os + xlo..oy * os + xhi];
                        let irow = &inp[iy * is..(iy + 1) * is];
                        for (j, &d) in drow.iter().enumerate() {
                            acc += d * irow[(xlo + j) * s + kx - pad];
                        }
                        if let Some(din) = din.as_deref_mut() {
                            let dinrow = &mut din[ic * is * is + iy * is..ic * is * is + (iy + 1) * is];
                            for (j, &d) in drow.iter().enumerate() {
                                dinrow[(xlo + j) * s + kx - pad] += wv * d;
                            }
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
}

/// 2×2 max-pool with stride 2; ties resolve to the first element in scan
/// order.
fn max_pool2(x: &[f64], channels: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let ps = size / 2;
    let mut out = Vec::with_capacity(channels * ps * ps);
    let mut idx = Vec::with_capacity(channels * ps * ps);
    for c in 0..channels {
        let base = c * size * size;
        for py in 0..ps {
            for px in 0..ps {
                let mut best = base + (2 * py) * size + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * py + dy) * size + 2 * px + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn dense_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = bias;
            for (&wv, &xv) in row.iter().zip(x) {
                if wv != 0.0 {
                    acc += wv * xv;
                }
            }
            acc
        })
        .collect()
}

fn dense_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &d) in dy.iter().enumerate() {
        db[o] += d;
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += d * x[i];
            dx[i] += row[i] * d;
        }
    }
    dx
}
