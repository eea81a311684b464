//! Local Feature Processing: a pointwise layer stack `Phi` followed by a
//! depthwise convolution along the distance-sorted neighbour axis, added
//! back onto the input, `F(x) = x + DwConv(Phi(x))`.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use super::config::Backend;
use super::linear::{relu, relu_backward, Linear};
use crate::error::{ensure_arg, Error, Result};
use crate::kan::{KanCache, KanLayer, RationalCache, RationalGroupLayer, SplineGrid};
use crate::params::{join, Params};

/// One kernel of odd width per channel, plus a per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DwConv {
    pub channels: usize,
    pub width: usize,
    /// `channels × width`.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DwConv {
    pub fn new(channels: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut conv = Self::zeros(channels, width)?;
        let s = 1.0 / (width as f64).sqrt();
        conv.kernels.iter_mut().for_each(|v| *v = rng.random_range(-s..s));
        Ok(conv)
    }

    pub fn zeros(channels: usize, width: usize) -> Result<Self> {
        ensure_arg!(width % 2 == 1, "depthwise kernel width must be odd, got {width}");
        Ok(Self {
            channels,
            width,
            kernels: vec![0.0; channels * width],
            bias: vec![0.0; channels],
        })
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        dwconv_neighbors(x, &self.kernels, self.width, &self.bias)
    }

    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>) -> (Array3<f64>, DwConv) {
        let (g, k, c) = x.dim();
        let w = self.width;
        let pad = (w - 1) / 2;
        let mut dx = Array3::zeros((g, k, c));
        let mut grad = DwConv {
            channels: c,
            width: w,
            kernels: vec![0.0; c * w],
            bias: vec![0.0; c],
        };
        for gi in 0..g {
            for j in 0..k {
                for ch in 0..c {
                    let up = dy[[gi, j, ch]];
                    grad.bias[ch] += up;
                    for t in 0..w {
                        let src = j + t;
                        if src < pad || src - pad >= k {
                            continue;
                        }
                        let src = src - pad;
                        grad.kernels[ch * w + t] += up * x[[gi, src, ch]];
                        dx[[gi, src, ch]] += up * self.kernels[ch * w + t];
                    }
                }
            }
        }
        (dx, grad)
    }
}

impl Params for DwConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "kernels"), &self.kernels);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "kernels"), &mut self.kernels);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Depthwise 1-D cross-correlation over the neighbour axis of a
/// `G × K × C` tensor with zero padding `(w - 1) / 2`.
pub fn dwconv_neighbors(x: &Array3<f64>, kernels: &[f64], width: usize, bias: &[f64]) -> Result<Array3<f64>> {
    ensure_arg!(width % 2 == 1, "depthwise kernel width must be odd, got {width}");
    let (g, k, c) = x.dim();
    ensure_arg!(
        kernels.len() == c * width && bias.len() == c,
        "depthwise parameters sized for {} channels, input has {c}",
        bias.len()
    );
    let pad = (width - 1) / 2;
    let mut y = Array3::zeros((g, k, c));
    for gi in 0..g {
        for j in 0..k {
            for ch in 0..c {
                let mut acc = bias[ch];
                for t in 0..width {
                    let src = j + t;
                    if src >= pad && src - pad < k {
                        acc += kernels[ch * width + t] * x[[gi, src - pad, ch]];
                    }
                }
                y[[gi, j, ch]] = acc;
            }
        }
    }
    Ok(y)
}

/// Hyperparameters shared by the per-point layer stacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiSpec {
    pub backend: Backend,
    pub grid_size: usize,
    pub spline_order: usize,
    pub num_degree: usize,
    pub den_degree: usize,
    pub groups: usize,
}

/// The pointwise stack `Phi`, applied independently to every `(group, slot)`
/// feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiStack {
    BSpline(Vec<KanLayer>),
    Rational(Vec<RationalGroupLayer>),
    /// Linear layers with ReLU between them (none after the last).
    Mlp(Vec<Linear>),
}

#[derive(Debug, Clone)]
pub enum PhiCache {
    BSpline(Vec<KanCache>),
    Rational(Vec<RationalCache>),
    /// Inputs to each linear layer and the pre-activations that were rectified.
    Mlp {
        inputs: Vec<Array2<f64>>,
        pre: Vec<Array2<f64>>,
    },
}

impl PhiStack {
    /// Builds a stack with layer widths `widths[0] -> widths[1] -> ..`.
    pub fn new(spec: &PhiSpec, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        ensure_arg!(widths.len() >= 2, "layer stack needs at least one layer");
        let pairs = widths.windows(2).map(|w| (w[0], w[1]));
        Ok(match spec.backend {
            Backend::BSpline => {
                let grid = SplineGrid::symmetric(spec.grid_size, spec.spline_order)?;
                PhiStack::BSpline(pairs.map(|(a, b)| KanLayer::new(a, b, grid.clone(), rng)).collect())
            }
            Backend::Rational => PhiStack::Rational(
                pairs
                    .map(|(a, b)| RationalGroupLayer::new(a, b, spec.groups, spec.num_degree, spec.den_degree, rng))
                    .collect::<Result<_>>()?,
            ),
            Backend::Mlp => PhiStack::Mlp(pairs.map(|(a, b)| Linear::new(a, b, rng)).collect()),
        })
    }

    pub fn backend(&self) -> Backend {
        match self {
            PhiStack::BSpline(_) => Backend::BSpline,
            PhiStack::Rational(_) => Backend::Rational,
            PhiStack::Mlp(_) => Backend::Mlp,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            PhiStack::BSpline(l) => l.len(),
            PhiStack::Rational(l) => l.len(),
            PhiStack::Mlp(l) => l.len(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, PhiCache)> {
        let mut h = x.to_owned();
        match self {
            PhiStack::BSpline(layers) => {
                let mut caches = Vec::with_capacity(layers.len());
                for l in layers {
                    let (y, c) = l.forward_batch(h.view())?;
                    caches.push(c);
                    h = y;
                }
                Ok((h, PhiCache::BSpline(caches)))
            }
            PhiStack::Rational(layers) => {
                let mut caches = Vec::with_capacity(layers.len());
                for l in layers {
                    let (y, c) = l.forward_batch(h.view())?;
                    caches.push(c);
                    h = y;
                }
                Ok((h, PhiCache::Rational(caches)))
            }
            PhiStack::Mlp(layers) => {
                let mut inputs = Vec::with_capacity(layers.len());
                let mut pre = Vec::with_capacity(layers.len());
                for (i, l) in layers.iter().enumerate() {
                    let z = l.forward(h.view())?;
                    inputs.push(std::mem::replace(&mut h, Array2::zeros((0, 0))));
                    if i + 1 < layers.len() {
                        h = relu(&z);
                        pre.push(z);
                    } else {
                        h = z;
                    }
                }
                Ok((h, PhiCache::Mlp { inputs, pre }))
            }
        }
    }

    pub fn backward(&self, cache: &PhiCache, dy: &Array2<f64>) -> Result<(Array2<f64>, PhiStack)> {
        let mut d = dy.clone();
        match (self, cache) {
            (PhiStack::BSpline(layers), PhiCache::BSpline(caches)) => {
                let mut grads = Vec::with_capacity(layers.len());
                for (l, c) in layers.iter().zip(caches).rev() {
                    let (dx, g) = l.backward(c, d.view())?;
                    grads.push(g);
                    d = dx;
                }
                grads.reverse();
                Ok((d, PhiStack::BSpline(grads)))
            }
            (PhiStack::Rational(layers), PhiCache::Rational(caches)) => {
                let mut grads = Vec::with_capacity(layers.len());
                for (l, c) in layers.iter().zip(caches).rev() {
                    let (dx, g) = l.backward(c, d.view())?;
                    grads.push(g);
                    d = dx;
                }
                grads.reverse();
                Ok((d, PhiStack::Rational(grads)))
            }
            (PhiStack::Mlp(layers), PhiCache::Mlp { inputs, pre }) => {
                let mut grads = Vec::with_capacity(layers.len());
                for i in (0..layers.len()).rev() {
                    if i + 1 < layers.len() {
                        d = relu_backward(&pre[i], &d);
                    }
                    let (dx, g) = layers[i].backward(inputs[i].view(), d.view());
                    grads.push(g);
                    d = dx;
                }
                grads.reverse();
                Ok((d, PhiStack::Mlp(grads)))
            }
            _ => Err(Error::Usage("cache does not belong to this layer stack".into())),
        }
    }

    /// Rectifier mask bits for the MLP stack; empty for the smooth backends.
    pub(crate) fn kink_pattern(cache: &PhiCache, out: &mut Vec<bool>) {
        if let PhiCache::Mlp { pre, .. } = cache {
            for z in pre {
                out.extend(z.iter().map(|v| *v > 0.0));
            }
        }
    }
}

impl Params for PhiStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            PhiStack::BSpline(l) => l
                .iter()
                .enumerate()
                .for_each(|(i, x)| x.visit(&join(prefix, &format!("kan{i}")), f)),
            PhiStack::Rational(l) => l
                .iter()
                .enumerate()
                .for_each(|(i, x)| x.visit(&join(prefix, &format!("rational{i}")), f)),
            PhiStack::Mlp(l) => l
                .iter()
                .enumerate()
                .for_each(|(i, x)| x.visit(&join(prefix, &format!("mlp{i}")), f)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            PhiStack::BSpline(l) => l
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| x.visit_mut(&join(prefix, &format!("kan{i}")), f)),
            PhiStack::Rational(l) => l
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| x.visit_mut(&join(prefix, &format!("rational{i}")), f)),
            PhiStack::Mlp(l) => l
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| x.visit_mut(&join(prefix, &format!("mlp{i}")), f)),
        }
    }
}

/// The LFP block. Without a depthwise convolution the residual adds `Phi(x)`
/// directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Lfp {
    pub phi: PhiStack,
    pub dwconv: Option<DwConv>,
}

#[derive(Debug, Clone)]
pub struct LfpCache {
    dims: (usize, usize, usize),
    phi: PhiCache,
    phi_out: Array3<f64>,
}

impl LfpCache {
    pub(crate) fn kink_pattern(&self, out: &mut Vec<bool>) {
        PhiStack::kink_pattern(&self.phi, out);
    }
}

impl Lfp {
    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, LfpCache)> {
        let (g, k, c) = x.dim();
        let flat = x
            .to_shape((g * k, c))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (phi_flat, phi_cache) = self.phi.forward(flat.view())?;
        ensure_arg!(
            phi_flat.ncols() == c,
            "layer stack maps {c} channels to {}, residual needs equal widths",
            phi_flat.ncols()
        );
        let phi_out = phi_flat.into_shape_clone((g, k, c)).expect("shape");
        let branch = match &self.dwconv {
            Some(dw) => dw.forward(&phi_out)?,
            None => phi_out.clone(),
        };
        Ok((
            x + &branch,
            LfpCache {
                dims: (g, k, c),
                phi: phi_cache,
                phi_out,
            },
        ))
    }

    pub fn backward(&self, cache: &LfpCache, dy: &Array3<f64>) -> Result<(Array3<f64>, Lfp)> {
        let (g, k, c) = cache.dims;
        if dy.dim() != cache.dims {
            return Err(Error::Usage(
                "upstream gradient shape does not match cached forward".into(),
            ));
        }
        let (dphi, dw_grad) = match &self.dwconv {
            Some(dw) => {
                let (d, gr) = dw.backward(&cache.phi_out, dy);
                (d, Some(gr))
            }
            None => (dy.clone(), None),
        };
        let dphi_flat = dphi.into_shape_clone((g * k, c)).expect("shape");
        let (dx_flat, phi_grad) = self.phi.backward(&cache.phi, &dphi_flat)?;
        let dx = dy + &dx_flat.into_shape_clone((g, k, c)).expect("shape");
        Ok((
            dx,
            Lfp {
                phi: phi_grad,
                dwconv: dw_grad,
            },
        ))
    }
}

impl Params for Lfp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.phi.visit(prefix, f);
        if let Some(dw) = &self.dwconv {
            dw.visit(&join(prefix, "dwconv"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.phi.visit_mut(prefix, f);
        if let Some(dw) = &mut self.dwconv {
            dw.visit_mut(&join(prefix, "dwconv"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(backend: Backend) -> PhiSpec {
        PhiSpec {
            backend,
            grid_size: 5,
            spline_order: 3,
            num_degree: 5,
            den_degree: 4,
            groups: 2,
        }
    }

    fn random_lfp(rng: &mut ChaCha8Rng, backend: Backend, c: usize) -> Lfp {
        let mut l = Lfp {
            phi: PhiStack::new(&spec(backend), &[c, c / 2, c / 2, c], rng).unwrap(),
            dwconv: Some(DwConv::new(c, 3, rng).unwrap()),
        };
        l.visit_mut("", &mut |_, s| {
            s.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3))
        });
        l
    }

    #[test]
    fn degenerate_shapes_round_trip() {
        // Single rows and columns make matrix products come back column-major.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for backend in [Backend::BSpline, Backend::Rational, Backend::Mlp] {
            for (g, k) in [(1, 1), (1, 3), (3, 1), (2, 2)] {
                let mut sp = spec(backend);
                sp.groups = 1;
                let l = Lfp {
                    phi: PhiStack::new(&sp, &[2, 1, 2], &mut rng).unwrap(),
                    dwconv: Some(DwConv::new(2, 3, &mut rng).unwrap()),
                };
                let x = Array3::from_shape_fn((g, k, 2), |_| rng.random_range(-1.0..1.0));
                let (y, cache) = l.forward(&x).unwrap();
                let (dx, _) = l.backward(&cache, &Array3::ones(y.dim())).unwrap();
                assert_eq!(dx.dim(), x.dim());
            }
        }
    }

    #[test]
    fn dwconv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array3::from_shape_fn((2, 5, 3), |_| rng.random_range(-1.0..1.0));
        let delta: Vec<f64> = (0..3).flat_map(|_| [0.0, 1.0, 0.0]).collect();
        assert_eq!(dwconv_neighbors(&x, &delta, 3, &[0.0; 3]).unwrap(), x);
        let y = dwconv_neighbors(&x, &[0.0; 9], 3, &[1.0, 2.0, 3.0]).unwrap();
        assert!(y.slice(s![.., .., 1]).iter().all(|v| *v == 2.0));
        let x = Array3::from_shape_vec((1, 3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            dwconv_neighbors(&x, &[1.0, 1.0, 1.0], 3, &[0.0])
                .unwrap()
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![3.0, 6.0, 5.0]
        );
        assert!(matches!(
            dwconv_neighbors(&x, &[1.0, 1.0], 2, &[0.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(DwConv::zeros(3, 4).is_err());
    }

    #[test]
    fn dwconv_wide_kernel_is_cross_correlation() {
        let x = Array3::from_shape_vec((1, 4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // y_j = sum_t k_t x_{j + t - 2}
        let y = dwconv_neighbors(&x, &[1.0, 0.0, 0.0, 0.0, 10.0], 5, &[0.0]).unwrap();
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![30.0, 40.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_dwconv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for backend in [Backend::BSpline, Backend::Rational, Backend::Mlp] {
            let mut l = random_lfp(&mut rng, backend, 4);
            l.dwconv = Some(DwConv::zeros(4, 3).unwrap());
            let x = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(-1.0..1.0));
            let (y, _) = l.forward(&x).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn matches_stepwise_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_lfp(&mut rng, Backend::BSpline, 4);
        let x = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(-1.0..1.0));
        let (y, _) = l.forward(&x).unwrap();
        let PhiStack::BSpline(layers) = &l.phi else {
            unreachable!()
        };
        let mut phi = Array3::zeros((2, 3, 4));
        for gi in 0..2 {
            for j in 0..3 {
                let mut v = x.slice(s![gi, j, ..]).to_vec();
                for layer in layers {
                    v = layer.forward(&v).unwrap().0;
                }
                phi.slice_mut(s![gi, j, ..]).assign(&ndarray::Array1::from(v));
            }
        }
        let dw = l.dwconv.as_ref().unwrap();
        let want = &x + &dwconv_neighbors(&phi, &dw.kernels, 3, &dw.bias).unwrap();
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_channel_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_lfp(&mut rng, Backend::Rational, 4);
        let (y, _) = l.forward(&Array3::zeros((3, 5, 4))).unwrap();
        assert_eq!(y.dim(), (3, 5, 4));
        assert!(matches!(
            l.forward(&Array3::zeros((3, 5, 6))),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for backend in [Backend::BSpline, Backend::Rational, Backend::Mlp] {
            let l = random_lfp(&mut rng, backend, 4);
            let x = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(-1.0..1.0));
            let up = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(-1.0..1.0));
            let loss = |l: &Lfp, x: &Array3<f64>| (l.forward(x).unwrap().0 * &up).sum();
            let (_, cache) = l.forward(&x).unwrap();
            let (dx, g) = l.backward(&cache, &up).unwrap();
            let h = 1e-5;
            let flat = l.to_flat();
            let gf = g.to_flat();
            for j in 0..flat.len() {
                let mut f = flat.clone();
                let mut lp = l.clone();
                f[j] += h;
                lp.load_flat(&f);
                let a = loss(&lp, &x);
                f[j] -= 2.0 * h;
                lp.load_flat(&f);
                let b = loss(&lp, &x);
                let num = (a - b) / (2.0 * h);
                assert!((num - gf[j]).abs() / num.abs().max(1.0) < 1e-5, "{backend:?} param {j}");
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[i] += h;
                let a = loss(&l, &xp);
                xp.as_slice_mut().unwrap()[i] -= 2.0 * h;
                let b = loss(&l, &xp);
                let num = (a - b) / (2.0 * h);
                assert!((num - dx.as_slice().unwrap()[i]).abs() / num.abs().max(1.0) < 1e-5);
            }
        }
    }
}
