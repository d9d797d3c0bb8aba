//! Two-layer convolutional slice scorer with manual differentiation.
//!
//! A k x k same-padded convolution to a small channel bank, tanh, then a
//! 1x1 projection to per-node scores. One parameter set is shared by all
//! three plane orientations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::fusion::NodeGrid;
use crate::inference::SliceScorer;

/// Architecture of the scorer; fixes the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneShape {
    pub kernel: usize,
    pub channels: usize,
    pub n_nodes: usize,
}

impl BackboneShape {
    pub fn new(kernel: usize, channels: usize, n_nodes: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        assert!(channels > 0 && n_nodes > 0);
        BackboneShape {
            kernel,
            channels,
            n_nodes,
        }
    }

    pub fn conv1_w_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Flat parameter count: conv1 weights, conv1 bias, 1x1 weights, bias.
    pub fn param_count(&self) -> usize {
        self.conv1_w_len() + self.channels + self.n_nodes * self.channels + self.n_nodes
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.conv1_w_len();
        let w2 = b1 + self.channels;
        let b2 = w2 + self.n_nodes * self.channels;
        (b1, w2, b2)
    }
}

/// The scorer: shape plus one flat parameter vector.
///
/// Layout: `conv1_w[c][ky][kx]`, `conv1_b[c]`, `conv2_w[n][c]`,
/// `conv2_b[n]`.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    pub shape: BackboneShape,
    pub params: Vec<f64>,
}

/// Cached activations of one forward pass, consumed by `backward`.
pub struct ForwardCache {
    w: usize,
    h: usize,
    /// tanh outputs, `[c * pixels + p]`
    act: Vec<f64>,
}

impl ToyBackbone {
    /// Small uniform init scaled by fan-in; biases zero.
    pub fn init(shape: BackboneShape, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![0.0; shape.param_count()];
        let (b1, w2, b2) = shape.offsets();
        let s1 = (1.0 / (shape.kernel * shape.kernel) as f64).sqrt();
        for p in &mut params[..b1] {
            *p = rng.random_range(-s1..s1);
        }
        let s2 = (1.0 / shape.channels as f64).sqrt();
        for p in &mut params[w2..b2] {
            *p = rng.random_range(-s2..s2);
        }
        ToyBackbone { shape, params }
    }

    pub fn zeros(shape: BackboneShape) -> Self {
        ToyBackbone {
            shape,
            params: vec![0.0; shape.param_count()],
        }
    }

    /// Forward pass returning scores and the activation cache.
    pub fn forward(&self, pixels: &[f64], w: usize, h: usize) -> (NodeGrid, ForwardCache) {
        assert_eq!(pixels.len(), w * h);
        assert!(
            w >= self.shape.kernel && h >= self.shape.kernel,
            "slice smaller than the kernel"
        );
        let k = self.shape.kernel;
        let c_n = self.shape.channels;
        let n = self.shape.n_nodes;
        let half = (k / 2) as i64;
        let (b1_off, w2_off, b2_off) = self.shape.offsets();
        let pixels_n = w * h;
        let mut act = vec![0.0; c_n * pixels_n];
        for c in 0..c_n {
            let wbase = c * k * k;
            let bias = self.params[b1_off + c];
            for py in 0..h as i64 {
                for px in 0..w as i64 {
                    let mut acc = bias;
                    for ky in 0..k as i64 {
                        let sy = py + ky - half;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for kx in 0..k as i64 {
                            let sx = px + kx - half;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            acc += self.params[wbase + (ky * k as i64 + kx) as usize]
                                * pixels[(sy * w as i64 + sx) as usize];
                        }
                    }
                    act[c * pixels_n + (py * w as i64 + px) as usize] = acc.tanh();
                }
            }
        }
        let mut grid = NodeGrid::zeros(w, h, n);
        for p in 0..pixels_n {
            let out = &mut grid.data[p * n..(p + 1) * n];
            for (ni, o) in out.iter_mut().enumerate() {
                let mut acc = self.params[b2_off + ni];
                let wrow = w2_off + ni * c_n;
                for c in 0..c_n {
                    acc += self.params[wrow + c] * act[c * pixels_n + p];
                }
                *o = acc;
            }
        }
        (grid, ForwardCache { w, h, act })
    }

    /// Accumulate parameter gradients for one slice given the gradient of
    /// the loss w.r.t. the output scores.
    pub fn backward(
        &self,
        pixels: &[f64],
        cache: &ForwardCache,
        d_scores: &NodeGrid,
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.shape.param_count());
        assert_eq!(d_scores.w, cache.w);
        assert_eq!(d_scores.h, cache.h);
        let k = self.shape.kernel;
        let c_n = self.shape.channels;
        let n = self.shape.n_nodes;
        let (w, h) = (cache.w, cache.h);
        let half = (k / 2) as i64;
        let pixels_n = w * h;
        let (b1_off, w2_off, b2_off) = self.shape.offsets();

        // Projection layer and gradient into the activations.
        let mut d_act = vec![0.0; c_n * pixels_n];
        for p in 0..pixels_n {
            let g = &d_scores.data[p * n..(p + 1) * n];
            for (ni, gi) in g.iter().enumerate() {
                if *gi == 0.0 {
                    continue;
                }
                grad[b2_off + ni] += gi;
                let wrow = w2_off + ni * c_n;
                for c in 0..c_n {
                    grad[wrow + c] += gi * cache.act[c * pixels_n + p];
                    d_act[c * pixels_n + p] += gi * self.params[wrow + c];
                }
            }
        }
        // tanh' = 1 - act^2, then the convolution weights.
        for c in 0..c_n {
            let wbase = c * k * k;
            for py in 0..h as i64 {
                for px in 0..w as i64 {
                    let p = (py * w as i64 + px) as usize;
                    let a = cache.act[c * pixels_n + p];
                    let d_pre = d_act[c * pixels_n + p] * (1.0 - a * a);
                    if d_pre == 0.0 {
                        continue;
                    }
                    grad[b1_off + c] += d_pre;
                    for ky in 0..k as i64 {
                        let sy = py + ky - half;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for kx in 0..k as i64 {
                            let sx = px + kx - half;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            grad[wbase + (ky * k as i64 + kx) as usize] +=
                                d_pre * pixels[(sy * w as i64 + sx) as usize];
                        }
                    }
                }
            }
        }
    }
}

impl SliceScorer for ToyBackbone {
    fn n_nodes(&self) -> usize {
        self.shape.n_nodes
    }

    fn score_slice(&self, pixels: &[f64], w: usize, h: usize) -> NodeGrid {
        self.forward(pixels, w, h).0
    }
}
