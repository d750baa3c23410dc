//! A deliberately small dense network: affine layers with relu, sigmoid or
//! identity activations, reverse-mode gradients, plain SGD and a central
//! difference gradient checker. All learnable functions of the pipeline are
//! built from this.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SplitMix64. The update rule is fixed so streams are reproducible
/// everywhere:
///
/// ```text
/// state = state + 0x9E3779B97F4A7C15            (wrapping)
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (wrapping)
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (wrapping)
/// output = z ^ (z >> 31)
/// ```
///
/// Uniform floats take the top 53 bits of the output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller (one draw per call, two uniforms
    /// consumed).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }

    /// Derives an independent stream; `tag` separates sibling streams.
    pub fn fork(&mut self, tag: u64) -> Rng {
        let s = self.next_u64() ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        Rng::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Flat parameter (or gradient) vector: each layer's weights row-major
/// followed by its bias, layers in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Length-prefixed little-endian encoding: `u64` count, then each value
    /// as an `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one vector from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamVector, usize)> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedPacket { needed: 8, available: bytes.len() });
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let needed = n.checked_mul(8).and_then(|b| b.checked_add(8)).ok_or_else(|| {
            Error::Parse(format!("parameter count {n} overflows"))
        })?;
        if bytes.len() < needed {
            return Err(Error::TruncatedPacket { needed, available: bytes.len() });
        }
        let values = bytes[8..needed]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((ParamVector(values), needed))
    }
}

/// Per-layer cache of a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }

    /// Smallest |pre-activation| over relu units; used by gradient checks to
    /// stay away from kinks.
    pub fn min_relu_margin(&self, net: &DenseNet) -> f64 {
        net.layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Builds a network with Glorot-uniform weights drawn from `Rng::new(seed)`
/// and zero biases.
pub fn init_net(dims: &[usize], activations: &[Activation], seed: u64) -> Result<DenseNet> {
    if dims.len() < 2 || activations.len() + 1 != dims.len() {
        return Err(Error::DimMismatch { expected: dims.len().saturating_sub(1), actual: activations.len() });
    }
    if dims.iter().any(|d| *d == 0) {
        return Err(Error::Invalid(format!("zero-width layer in {dims:?}")));
    }
    let mut rng = Rng::new(seed);
    let layers = dims
        .windows(2)
        .zip(activations)
        .map(|(w, act)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
            Layer { in_dim: fan_in, out_dim: fan_out, weights, bias: vec![0.0; fan_out], activation: *act }
        })
        .collect();
    Ok(DenseNet { layers })
}

impl DenseNet {
    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.in_dim).collect();
        d.push(self.out_dim());
        d
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        ParamVector(out)
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::LengthMismatch { left: self.param_count(), right: p.len() });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p.0[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p.0[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn with_params(&self, p: &ParamVector) -> Result<DenseNet> {
        let mut n = self.clone();
        n.set_params(p)?;
        Ok(n)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Output only, no tape.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch { expected: self.in_dim(), actual: x.len() });
        }
        let mut a = x.to_vec();
        for l in &self.layers {
            a = affine(l, &a).into_iter().map(|z| l.activation.apply(z)).collect();
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch { expected: self.in_dim(), actual: x.len() });
        }
        let n = self.layers.len();
        let mut tape = Tape { inputs: Vec::with_capacity(n), pre: Vec::with_capacity(n), post: Vec::with_capacity(n) };
        let mut a = x.to_vec();
        for l in &self.layers {
            let z = affine(l, &a);
            let out: Vec<f64> = z.iter().map(|v| l.activation.apply(*v)).collect();
            tape.inputs.push(a);
            tape.pre.push(z);
            a = out.clone();
            tape.post.push(out);
        }
        Ok((a, tape))
    }

    /// Reverse pass; returns fresh parameter gradients and the input
    /// gradient.
    pub fn backward(&self, tape: &Tape, dl_dy: &[f64]) -> Result<(ParamVector, Vec<f64>)> {
        let mut grads = ParamVector::zeros(self.param_count());
        let dx = self.backward_accumulate(tape, dl_dy, &mut grads.0)?;
        Ok((grads, dx))
    }

    /// Reverse pass adding parameter gradients into `grads`.
    pub fn backward_accumulate(&self, tape: &Tape, dl_dy: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if dl_dy.len() != self.out_dim() {
            return Err(Error::DimMismatch { expected: self.out_dim(), actual: dl_dy.len() });
        }
        if grads.len() != self.param_count() {
            return Err(Error::LengthMismatch { left: self.param_count(), right: grads.len() });
        }
        if tape.pre.len() != self.layers.len()
            || tape.pre.iter().zip(&self.layers).any(|(z, l)| z.len() != l.out_dim)
        {
            return Err(Error::DimMismatch { expected: self.layers.len(), actual: tape.pre.len() });
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        let mut upstream = dl_dy.to_vec();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[idx];
            let a = &tape.post[idx];
            let input = &tape.inputs[idx];
            let delta: Vec<f64> =
                upstream.iter().zip(z.iter().zip(a)).map(|(g, (z, a))| g * l.activation.derivative(*z, *a)).collect();
            let base = offsets[idx];
            let (gw, gb) = grads[base..base + l.param_count()].split_at_mut(l.weights.len());
            let mut down = vec![0.0; l.in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                let grow = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                for i in 0..l.in_dim {
                    grow[i] += d * input[i];
                    down[i] += d * row[i];
                }
                gb[o] += d;
            }
            upstream = down;
        }
        Ok(upstream)
    }
}

fn affine(l: &Layer, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim)
        .map(|o| {
            let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
            l.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

pub fn sgd_step(params: &ParamVector, grads: &ParamVector, lr: f64) -> Result<ParamVector> {
    if params.len() != grads.len() {
        return Err(Error::LengthMismatch { left: params.len(), right: grads.len() });
    }
    Ok(ParamVector(params.0.iter().zip(&grads.0).map(|(p, g)| p - lr * g).collect()))
}

/// Maximum relative disagreement between central differences and
/// backpropagated parameter gradients. `loss` maps a network output to the
/// scalar loss and its gradient with respect to that output.
pub fn finite_diff_check<F>(net: &DenseNet, x: &[f64], loss: F, h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step must be positive, got {h}")));
    }
    let (y, tape) = net.forward(x)?;
    let (_, dl_dy) = loss(&y);
    let (bp, _) = net.backward(&tape, &dl_dy)?;
    let base = net.params();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p.0[i] = base.0[i] + h;
        probe.set_params(&p)?;
        let up = loss(&probe.eval(x)?).0;
        p.0[i] = base.0[i] - h;
        probe.set_params(&p)?;
        let down = loss(&probe.eval(x)?).0;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - bp.0[i]).abs() / (fd.abs() + bp.0[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_sq(y: &[f64]) -> (f64, Vec<f64>) {
        (0.5 * y.iter().map(|v| v * v).sum::<f64>(), y.to_vec())
    }

    #[test]
    fn splitmix_reference_values() {
        // reference stream for seed 0
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn rng_uniform_in_range() {
        let mut r = Rng::new(9);
        for _ in 0..1000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn init_shapes() {
        let n = init_net(&[1, 1], &[Activation::Identity], 3).unwrap();
        assert_eq!(n.param_count(), 2);
        assert_eq!(n.layers[0].bias, vec![0.0]);
        assert_eq!(init_net(&[4, 8, 2], &[Activation::Relu, Activation::Identity], 1).unwrap().param_count(), 58);
        assert_eq!(init_net(&[4, 8, 2], &[Activation::Relu], 1), Err(Error::DimMismatch { expected: 2, actual: 1 }));
        let a = init_net(&[5, 7, 3], &[Activation::Relu, Activation::Sigmoid], 11).unwrap();
        let b = init_net(&[5, 7, 3], &[Activation::Relu, Activation::Sigmoid], 11).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn forward_trivial_cases() {
        let mut n = init_net(&[3, 3], &[Activation::Identity], 0).unwrap();
        n.layers[0].weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(n.forward(&[1.0, -2.0, 3.0]).unwrap().0, vec![1.0, -2.0, 3.0]);

        let z = init_net(&[3, 4], &[Activation::Relu], 0).unwrap();
        let z = z.with_params(&ParamVector::zeros(z.param_count())).unwrap();
        assert_eq!(z.forward(&[1.0, 2.0, 3.0]).unwrap().0, vec![0.0; 4]);

        let s = init_net(&[2, 1], &[Activation::Sigmoid], 0).unwrap();
        let s = s.with_params(&ParamVector::zeros(3)).unwrap();
        assert_eq!(s.forward(&[7.0, -9.0]).unwrap().0, vec![0.5]);

        assert!(matches!(s.forward(&[1.0]), Err(Error::DimMismatch { expected: 2, actual: 1 })));
    }

    #[test]
    fn backward_hand_chain_rule() {
        let n = init_net(&[1, 1], &[Activation::Identity], 0).unwrap();
        let n = n.with_params(&ParamVector(vec![2.0, 0.0])).unwrap();
        let (y, tape) = n.forward(&[3.0]).unwrap();
        assert_eq!(y, vec![6.0]);
        // L = y², dL/dy = 2y
        let (g, dx) = n.backward(&tape, &[2.0 * y[0]]).unwrap();
        assert_eq!(g.0, vec![36.0, 12.0]);
        assert_eq!(dx, vec![24.0]);

        let (g0, _) = n.backward(&tape, &[0.0]).unwrap();
        assert!(g0.0.iter().all(|v| *v == 0.0));
        assert!(n.backward(&tape, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sgd_cases() {
        let p = ParamVector(vec![1.0, 1.0]);
        assert_eq!(sgd_step(&p, &ParamVector(vec![3.0, 4.0]), 0.0).unwrap(), p);
        assert_eq!(sgd_step(&p, &ParamVector(vec![1.0, -1.0]), 0.5).unwrap().0, vec![0.5, 1.5]);
        let mut w = ParamVector(vec![1.0]);
        for _ in 0..2 {
            let g = ParamVector(vec![2.0 * w.0[0]]);
            w = sgd_step(&w, &g, 0.1).unwrap();
        }
        assert!((w.0[0] - 0.64).abs() < 1e-15);
        assert!(matches!(sgd_step(&p, &ParamVector(vec![1.0]), 0.1), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn finite_diff_linear_is_exact() {
        let n = init_net(&[3, 2], &[Activation::Identity], 4).unwrap();
        let err = finite_diff_check(&n, &[0.3, -1.2, 0.8], half_sq, 1e-4).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn finite_diff_relu_and_halving() {
        let n = init_net(&[4, 6, 3], &[Activation::Relu, Activation::Sigmoid], 21).unwrap();
        let x = [0.7, -0.4, 1.1, 0.2];
        let (_, tape) = n.forward(&x).unwrap();
        assert!(tape.min_relu_margin(&n) > 1e-3);
        let e1 = finite_diff_check(&n, &x, half_sq, 1e-4).unwrap();
        let e2 = finite_diff_check(&n, &x, half_sq, 5e-5).unwrap();
        assert!(e1 < 1e-4, "{e1}");
        assert!(e2 <= 4.0 * e1.max(1e-10), "{e1} {e2}");
    }

    #[test]
    fn param_bytes_round_trip() {
        let p = ParamVector(vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]);
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 8 + 32);
        let (q, used) = ParamVector::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(q.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(ParamVector::from_bytes(&bytes[..20]).is_err());
    }
}
