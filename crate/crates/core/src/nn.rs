//! Parameter storage and the handful of layer helpers the model is built from.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Element, Gradients, Tape, Tensor};

/// One named f32 parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered master copy of all model weights.
///
/// Plain buffers rather than tensors so the store can be shared across
/// threads; [`bind`](Self::bind) materializes tensors for one graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.into(), ParamEntry { shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.data.fill(0.0);
            }
        }
    }

    /// Tensors for one forward pass: leaves on `tape`, or constants.
    pub fn bind<T: Element>(&self, tape: Option<&Tape<T>>) -> Params<T> {
        let map = self
            .entries
            .iter()
            .map(|(k, e)| {
                let t = Tensor::from_fn(&e.shape, |i| T::of(e.data[i] as f64));
                let t = match tape {
                    Some(tape) => tape.leaf(&t),
                    None => t,
                };
                (k.clone(), t)
            })
            .collect();
        Params { map }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let tensors = self
            .entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), Tensor::from_vec(e.shape.clone(), e.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        write_checkpoint(BufWriter::new(file), &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = ParamStore::new();
        for (name, t) in read_checkpoint(BufReader::new(file))? {
            store.insert(name, t.shape().to_vec(), t.to_vec());
        }
        Ok(store)
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, e) in &self.entries {
            match other.entries.get(name) {
                Some(o) if o.shape == e.shape => {}
                Some(o) => {
                    return Err(Error::ShapeMismatch {
                        op: "load parameters",
                        lhs: e.shape.clone(),
                        rhs: o.shape.clone(),
                    })
                }
                None => return Err(Error::Config(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters bound for one computation graph.
pub struct Params<T: Element> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Params<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Replaces one parameter, e.g. with a leaf under gradient check.
    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        self.map.insert(name.to_string(), t);
    }

    /// Gradient buffers in store order (zeros for unreachable parameters).
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Vec<f32>> {
        self.map
            .values()
            .map(|t| grads.get_or_zeros(t).iter().map(|v| v.as_f64() as f32).collect())
            .collect()
    }
}

/// Registers freshly initialized parameters: weights uniform in
/// `±gain/sqrt(fan_in)` (gain 1 unless stated), biases in `±1/sqrt(fan_in)`.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

/// Weight gain keeping the activation variance through a ReLU.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178;
/// Weight gain keeping the activation variance through a linear map.
pub const LINEAR_GAIN: f64 = 1.732_050_807_568_877_2;

impl Initializer<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound) as f32).collect();
        self.store.insert(name, shape, data);
    }

    fn weights(&mut self, name: &str, w_shape: Vec<usize>, bias: usize, fan_in: usize, gain: f64) {
        let base = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(format!("{name}.w"), w_shape, gain * base);
        self.uniform(format!("{name}.b"), vec![bias], base);
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) {
        self.linear_with_gain(name, inputs, outputs, 1.0);
    }

    pub fn linear_with_gain(&mut self, name: &str, inputs: usize, outputs: usize, gain: f64) {
        self.weights(name, vec![inputs, outputs], outputs, inputs, gain);
    }

    pub fn conv(&mut self, name: &str, inputs: usize, outputs: usize, kernel: usize) {
        self.conv_with_gain(name, inputs, outputs, kernel, 1.0);
    }

    pub fn conv_with_gain(&mut self, name: &str, inputs: usize, outputs: usize, kernel: usize, gain: f64) {
        self.weights(name, vec![outputs, inputs, kernel, kernel], outputs, inputs * kernel * kernel, gain);
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) {
        self.store.insert(format!("{name}.gamma"), vec![channels], vec![1.0; channels]);
        self.store.insert(format!("{name}.beta"), vec![channels], vec![0.0; channels]);
    }

    /// Registers `dst` as a copy of the already registered `src`.
    pub fn copy(&mut self, src: &str, dst: &str) {
        for part in ["w", "b"] {
            let e = self.store.get(&format!("{src}.{part}")).expect("source registered first").clone();
            self.store.insert(format!("{dst}.{part}"), e.shape, e.data);
        }
    }
}

/// `x @ w + b` over the last axis of `x`.
pub fn linear<T: Element>(p: &Params<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let rank = x.rank();
    let lead: usize = x.shape()[..rank - 1].iter().product();
    let flat = x.reshape(&[lead, x.dim(rank - 1)])?;
    let y = flat.matmul(w)?.add(b)?;
    let mut shape = x.shape().to_vec();
    shape[rank - 1] = w.dim(1);
    y.reshape(&shape)
}

/// Same-size ("padding = k/2") convolution with bias on `[B,C,H,W]`.
pub fn conv<T: Element>(p: &Params<T>, name: &str, x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = x.conv2d(w, stride, w.dim(2) / 2)?;
    y.add(&b.reshape(&[1, w.dim(0), 1, 1])?)
}

pub fn layer_norm<T: Element>(p: &Params<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = p.get(&format!("{name}.gamma"))?;
    let b = p.get(&format!("{name}.beta"))?;
    x.layer_norm(1e-5).mul(g)?.add(b)
}

/// `[H,W,C]` to `[1,C,H,W]`.
pub fn hwc_to_nchw<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    x.permute(&[2, 0, 1])?.reshape(&[1, c, h, w])
}

/// `[1,C,H,W]` to `[H,W,C]`.
pub fn nchw_to_hwc<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    x.reshape(&[c, h, w])?.permute(&[1, 2, 0])
}
