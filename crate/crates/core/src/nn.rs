//! Layer kernels with hand-written backward passes.
//!
//! Every kernel works on whole batches. Per-sample work is spread over the
//! rayon pool, and parameter gradients are reduced in batch order so results
//! do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor4;

/// 2-D convolution parameters: kernels are `(out, in, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dGrads {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

/// Fully connected layer, `weight` is row-major `out_features x in_features`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(weight: Tensor4, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        if bias.len() != weight.batch() {
            return Err(Error::shape("Conv2d::new", &weight.shape(), &[bias.len()]));
        }
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be at least 1"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-normal initialized kernels, zero bias.
    pub fn he_init(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut RngStream) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let mut weight = Tensor4::zeros([out_ch, in_ch, k, k]);
        for w in weight.data_mut() {
            *w = rng.normal() * std;
        }
        Self {
            weight,
            bias: vec![0.0; out_ch],
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.batch()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.channels()
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = (self.weight.height(), self.weight.width());
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if kh > ph || kw > pw {
            return Err(Error::shape("conv2d kernel vs padded input", &[kh, kw], &[ph, pw]));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn check_input(&self, input: &Tensor4) -> Result<(usize, usize)> {
        if input.channels() != self.in_channels() {
            return Err(Error::shape("conv2d input vs kernel", &input.shape(), &self.weight.shape()));
        }
        self.output_hw(input.height(), input.width())
    }

    /// Patch matrix of one sample, `(in*kh*kw) x (oh*ow)`, zero where padding.
    fn im2col(&self, sample: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let [_, cin, kh, kw] = self.weight.shape();
        let p = oh * ow;
        let pad = self.padding as isize;
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((c * kh + ki) * kw + kj) * p;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        let dst = &mut cols[row + oi * ow..row + (oi + 1) * ow];
                        if ii < 0 || ii >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &sample[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto one input sample.
    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, sample: &mut [f64]) {
        let [_, cin, kh, kw] = self.weight.shape();
        let p = oh * ow;
        let pad = self.padding as isize;
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((c * kh + ki) * kw + kj) * p;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = (c * h + ii as usize) * w;
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            if jj >= 0 && jj < w as isize {
                                sample[base + jj as usize] += cols[row + oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution through the patch-gather route.
pub fn conv2d_forward(input: &Tensor4, conv: &Conv2d) -> Result<Tensor4> {
    let (oh, ow) = conv.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    let cout = conv.out_channels();
    let k = conv.in_channels() * conv.weight.height() * conv.weight.width();
    let p = oh * ow;
    let mut out = Tensor4::zeros([input.batch(), cout, oh, ow]);
    let weight = conv.weight.data();
    out.data_mut()
        .par_chunks_mut(cout * p)
        .enumerate()
        .for_each_init(
            || vec![0.0; k * p],
            |cols, (b, out_b)| {
                conv.im2col(input.sample(b), h, w, oh, ow, cols);
                for o in 0..cout {
                    let dst = &mut out_b[o * p..(o + 1) * p];
                    dst.fill(conv.bias[o]);
                    for (kk, &wv) in weight[o * k..(o + 1) * k].iter().enumerate() {
                        let src = &cols[kk * p..(kk + 1) * p];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            },
        );
    Ok(out)
}

/// Direct nested-loop convolution. Slow; kept as a reference for the
/// patch-gather path.
pub fn conv2d_reference(input: &Tensor4, conv: &Conv2d) -> Result<Tensor4> {
    let (oh, ow) = conv.check_input(input)?;
    let [cout, cin, kh, kw] = conv.weight.shape();
    let (h, w) = (input.height() as isize, input.width() as isize);
    let mut out = Tensor4::zeros([input.batch(), cout, oh, ow]);
    for b in 0..input.batch() {
        for o in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = conv.bias[o];
                    for c in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * conv.stride + ki) as isize - conv.padding as isize;
                                let jj = (oj * conv.stride + kj) as isize - conv.padding as isize;
                                if ii >= 0 && ii < h && jj >= 0 && jj < w {
                                    acc += conv.weight.get(o, c, ki, kj) * input.get(b, c, ii as usize, jj as usize);
                                }
                            }
                        }
                    }
                    out.set(b, o, oi, oj, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input and parameters.
pub fn conv2d_backward(input: &Tensor4, conv: &Conv2d, grad_out: &Tensor4) -> Result<(Tensor4, Conv2dGrads)> {
    let (oh, ow) = conv.check_input(input)?;
    let cout = conv.out_channels();
    let expected = [input.batch(), cout, oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward grad_out", &grad_out.shape(), &expected));
    }
    let (h, w) = (input.height(), input.width());
    let k = conv.in_channels() * conv.weight.height() * conv.weight.width();
    let p = oh * ow;
    let weight = conv.weight.data();
    let mut grad_in = Tensor4::zeros(input.shape());
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = grad_in
        .data_mut()
        .par_chunks_mut(input.sample_len())
        .enumerate()
        .map(|(b, gin_b)| {
            let mut cols = vec![0.0; k * p];
            conv.im2col(input.sample(b), h, w, oh, ow, &mut cols);
            let gout = grad_out.sample(b);
            let mut gw = vec![0.0; cout * k];
            let mut gb = vec![0.0; cout];
            for o in 0..cout {
                let go = &gout[o * p..(o + 1) * p];
                gb[o] = go.iter().sum();
                for kk in 0..k {
                    let src = &cols[kk * p..(kk + 1) * p];
                    gw[o * k + kk] = go.iter().zip(src).map(|(a, b)| a * b).sum();
                }
            }
            // reuse the patch buffer for the input-side gradient
            cols.fill(0.0);
            for o in 0..cout {
                let go = &gout[o * p..(o + 1) * p];
                for (kk, &wv) in weight[o * k..(o + 1) * k].iter().enumerate() {
                    let dst = &mut cols[kk * p..(kk + 1) * p];
                    for (d, g) in dst.iter_mut().zip(go) {
                        *d += wv * g;
                    }
                }
            }
            conv.col2im(&cols, h, w, oh, ow, gin_b);
            (gw, gb)
        })
        .collect();

    let mut grads = Conv2dGrads {
        weight: Tensor4::zeros(conv.weight.shape()),
        bias: vec![0.0; cout],
    };
    for (gw, gb) in per_sample {
        for (a, b) in grads.weight.data_mut().iter_mut().zip(&gw) {
            *a += b;
        }
        for (a, b) in grads.bias.iter_mut().zip(&gb) {
            *a += b;
        }
    }
    Ok((grad_in, grads))
}

impl Dense {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, in_features: usize, out_features: usize) -> Result<Self> {
        if weight.len() != in_features * out_features || bias.len() != out_features {
            return Err(Error::shape(
                "Dense::new",
                &[weight.len(), bias.len()],
                &[out_features * in_features, out_features],
            ));
        }
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    /// Glorot-normal initialization, zero bias.
    pub fn glorot_init(in_features: usize, out_features: usize, rng: &mut RngStream) -> Self {
        let std = (2.0 / (in_features + out_features) as f64).sqrt();
        Self {
            weight: (0..in_features * out_features).map(|_| rng.normal() * std).collect(),
            bias: vec![0.0; out_features],
            in_features,
            out_features,
        }
    }
}

/// Affine map over the flattened sample; output shape is `(batch, out, 1, 1)`.
pub fn dense_forward(input: &Tensor4, dense: &Dense) -> Result<Tensor4> {
    if input.sample_len() != dense.in_features {
        return Err(Error::shape("dense input", &input.shape(), &[dense.out_features, dense.in_features]));
    }
    let (nin, nout) = (dense.in_features, dense.out_features);
    let mut out = Tensor4::zeros([input.batch(), nout, 1, 1]);
    for b in 0..input.batch() {
        let x = input.sample(b);
        for o in 0..nout {
            let row = &dense.weight[o * nin..(o + 1) * nin];
            out.data_mut()[b * nout + o] = dense.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
    Ok(out)
}

pub fn dense_backward(input: &Tensor4, dense: &Dense, grad_out: &Tensor4) -> Result<(Tensor4, DenseGrads)> {
    let expected = [input.batch(), dense.out_features, 1, 1];
    if grad_out.shape() != expected || input.sample_len() != dense.in_features {
        return Err(Error::shape("dense_backward grad_out", &grad_out.shape(), &expected));
    }
    let (nin, nout) = (dense.in_features, dense.out_features);
    let mut grad_in = Tensor4::zeros(input.shape());
    let mut grads = DenseGrads {
        weight: vec![0.0; nin * nout],
        bias: vec![0.0; nout],
    };
    for b in 0..input.batch() {
        let x = input.sample(b);
        let g = grad_out.sample(b);
        let gin = grad_in.sample_mut(b);
        let rows = dense.weight.chunks_exact(nin).zip(grads.weight.chunks_exact_mut(nin));
        for ((&go, gb), (row, grow)) in g.iter().zip(&mut grads.bias).zip(rows) {
            *gb += go;
            for ((gw, gi), (&xi, &wi)) in grow.iter_mut().zip(gin.iter_mut()).zip(x.iter().zip(row)) {
                *gw += go * xi;
                *gi += go * wi;
            }
        }
    }
    Ok((grad_in, grads))
}

pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    input.map(|x| x.max(0.0))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", &input.shape(), &grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output entry, the flat input offset of the selected maximum.
pub fn maxpool2_forward(input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let [nb, nc, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("2x2 max pooling needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([nb, nc, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let x = input.data();
    for b in 0..nb {
        for c in 0..nc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = input.offset(b, c, 2 * i, 2 * j);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let o = input.offset(b, c, 2 * i + di, 2 * j + dj);
                        if x[o] > x[best] {
                            best = o;
                        }
                    }
                    out.set(b, c, i, j, x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor4) -> Result<Tensor4> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool2_backward", &[argmax.len()], &grad_out.shape()));
    }
    let mut grad_in = Tensor4::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        grad_in.data_mut()[src] += g;
    }
    Ok(grad_in)
}

/// Tensor of independent 0/1 entries, each 1 with probability `prob_one`.
pub fn bernoulli_sample(rng: &mut RngStream, shape: [usize; 4], prob_one: f64) -> Result<Tensor4> {
    if !(0.0..=1.0).contains(&prob_one) {
        return Err(Error::invalid(format!("Bernoulli probability {prob_one} outside [0, 1]")));
    }
    let mut t = Tensor4::zeros(shape);
    for v in t.data_mut() {
        if rng.bernoulli(prob_one) {
            *v = 1.0;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: [usize; 4], rng: &mut RngStream) -> Tensor4 {
        let mut t = Tensor4::zeros(shape);
        for v in t.data_mut() {
            *v = rng.normal();
        }
        t
    }

    #[test]
    fn identity_kernel_is_identity() {
        let conv = Conv2d::new(Tensor4::ones([1, 1, 1, 1]), vec![0.0], 1, 0).unwrap();
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![3.5]).unwrap();
        assert_eq!(conv2d_forward(&x, &conv).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = RngStream::new(1, 0);
        let mut conv = Conv2d::he_init(3, 2, 3, 1, 1, &mut rng);
        conv.bias = vec![0.5, -1.0, 2.0];
        let y = conv2d_forward(&Tensor4::zeros([2, 2, 4, 4]), &conv).unwrap();
        for b in 0..2 {
            for o in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(y.get(b, o, i, j), conv.bias[o]);
                    }
                }
            }
        }
    }

    #[test]
    fn patch_gather_matches_nested_loops() {
        let mut rng = RngStream::new(2, 0);
        let x = random_tensor([1, 2, 5, 5], &mut rng);
        let mut conv = Conv2d::he_init(3, 2, 3, 1, 1, &mut rng);
        conv.bias = vec![0.1, 0.2, 0.3];
        let fast = conv2d_forward(&x, &conv).unwrap();
        let slow = conv2d_reference(&x, &conv).unwrap();
        assert_eq!(fast.shape(), [1, 3, 5, 5]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        // strided, unpadded, non-square
        let x = random_tensor([2, 2, 7, 6], &mut rng);
        let conv = Conv2d::he_init(2, 2, 3, 2, 0, &mut rng);
        let fast = conv2d_forward(&x, &conv).unwrap();
        let slow = conv2d_reference(&x, &conv).unwrap();
        assert_eq!(fast.shape(), [2, 2, 3, 2]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let conv = Conv2d::new(Tensor4::ones([1, 1, 5, 5]), vec![0.0], 1, 0).unwrap();
        let err = conv2d_forward(&Tensor4::zeros([1, 1, 3, 3]), &conv).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let err = conv2d_forward(&Tensor4::zeros([1, 2, 5, 5]), &conv).unwrap_err();
        assert!(err.to_string().contains("[1, 2, 5, 5]"));
    }

    #[test]
    fn single_pixel_gradient_is_flipped_kernel() {
        let mut rng = RngStream::new(3, 0);
        let conv = Conv2d::he_init(1, 1, 3, 1, 1, &mut rng);
        let x = Tensor4::zeros([1, 1, 5, 5]);
        let mut g = Tensor4::zeros([1, 1, 5, 5]);
        g.set(0, 0, 2, 2, 1.0);
        let (gin, _) = conv2d_backward(&x, &conv, &g).unwrap();
        // out(2,2) = sum_k w(ki,kj) x(1+ki, 1+kj), so d/dx(1+ki,1+kj) = w(ki,kj)
        for ki in 0..3 {
            for kj in 0..3 {
                assert_eq!(gin.get(0, 0, 1 + ki, 1 + kj), conv.weight.get(0, 0, ki, kj));
            }
        }
        assert_eq!(gin.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = RngStream::new(4, 0);
        let conv = Conv2d::he_init(2, 2, 3, 1, 1, &mut rng);
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        let (gin, g) = conv2d_backward(&x, &conv, &Tensor4::zeros([2, 2, 4, 4])).unwrap();
        assert!(gin.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let mut rng = RngStream::new(4, 0);
        let conv = Conv2d::he_init(2, 2, 3, 1, 1, &mut rng);
        let x = Tensor4::zeros([1, 2, 4, 4]);
        assert!(conv2d_backward(&x, &conv, &Tensor4::zeros([1, 2, 3, 3])).is_err());
    }

    #[test]
    fn relu_definition() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor4::ones([1, 1, 1, 3]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_constant_plane_and_odd_dims() {
        let x = Tensor4::filled([1, 2, 4, 6], 1.5);
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y, Tensor4::filled([1, 2, 2, 3], 1.5));
        assert!(maxpool2_forward(&Tensor4::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[0.9]);
        let g = maxpool2_backward(x.shape(), &arg, &Tensor4::filled([1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn bernoulli_degenerate_and_range() {
        let mut rng = RngStream::new(5, 0);
        assert!(bernoulli_sample(&mut rng, [1, 1, 10, 10], 0.0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(bernoulli_sample(&mut rng, [1, 1, 10, 10], 1.0).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(bernoulli_sample(&mut rng, [1, 1, 1, 1], 1.5).is_err());
        assert!(bernoulli_sample(&mut rng, [1, 1, 1, 1], -0.1).is_err());
    }

    #[test]
    fn bernoulli_mean_within_three_sigma() {
        let mut rng = RngStream::new(6, 0);
        let t = bernoulli_sample(&mut rng, [1, 1, 100, 1000], 0.3).unwrap();
        // 3 * sqrt(0.3 * 0.7 / 1e5) = 0.00435 < 0.005
        assert!((t.mean() - 0.3).abs() <= 0.005, "mean = {}", t.mean());
    }
}
