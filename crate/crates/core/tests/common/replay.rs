//! Plain loop implementations used as independent oracles.

use fedfd::nn::SmallConvNet;
use fedfd::Tensor;

/// Straightforward seven-deep loop nest, written without im2col.
pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * stride + ki) as i64 - pad as i64;
                                let jj = (oj * stride + kj) as i64 - pad as i64;
                                if ii < 0 || jj < 0 || ii >= h as i64 || jj >= wd as i64 {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + ii as usize) * wd + jj as usize];
                                let wv = w.data()[((fi * c + ci) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

/// Spatial mean and biased variance of one `(sample, channel)` map,
/// by two explicit passes.
pub fn spatial_moments(shape: &[usize], data: &[f64], i: usize, ch: usize) -> (f64, f64) {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let map = &data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
    let mut mean = 0.0;
    for v in map {
        mean += v;
    }
    mean /= hw as f64;
    let mut var = 0.0;
    for v in map {
        var += (v - mean) * (v - mean);
    }
    (mean, var / hw as f64)
}

/// Everything a replayed layer can see when choosing its statistics.
pub struct LayerView<'a> {
    pub layer: usize,
    pub sample: usize,
    pub channel: usize,
    pub shape: &'a [usize],
    pub pre_norm: &'a [f64],
}

/// Replays the whole network with scalar arithmetic. `stats` returns the
/// `(mu, sigma)` used to normalize each `(layer, sample, channel)` map.
pub fn replay(net: &SmallConvNet, x: &Tensor, mut stats: impl FnMut(&LayerView) -> (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let pad = net.config().kernel / 2;
    let mut shape = x.shape().to_vec();
    let mut act = x.data().to_vec();
    for (l, block) in net.blocks.iter().enumerate() {
        let input = Tensor::new(&shape, act).unwrap();
        let (s, mut z) = conv_oracle(&input, &block.conv, block.stride, pad);
        let pre = z.clone();
        let hw = s[2] * s[3];
        for i in 0..s[0] {
            for ch in 0..s[1] {
                let view = LayerView {
                    layer: l,
                    sample: i,
                    channel: ch,
                    shape: &s,
                    pre_norm: &pre,
                };
                let (mu, sigma) = stats(&view);
                let gamma = block.bn.gamma.data()[ch];
                let beta = block.bn.beta.data()[ch];
                for p in 0..hw {
                    let idx = (i * s[1] + ch) * hw + p;
                    let y = gamma * (pre[idx] - mu) / sigma + beta;
                    z[idx] = if y > 0.0 { y } else { 0.0 };
                }
            }
        }
        shape = s;
        act = z;
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut features = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for p in 0..hw {
                acc += act[(i * c + ch) * hw + p];
            }
            features[i * c + ch] = acc / hw as f64;
        }
    }
    let y = net.classifier_b.numel();
    let mut logits = vec![0.0; n * y];
    for i in 0..n {
        for k in 0..y {
            let mut acc = net.classifier_b.data()[k];
            for ch in 0..c {
                acc += features[i * c + ch] * net.classifier_w.data()[ch * y + k];
            }
            logits[i * y + k] = acc;
        }
    }
    (features, logits)
}
