use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::nn::layer::{BnGrad, Layer, Mode};
use crate::tensor::Tensor;

/// Parameter gradients keyed by qualified parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Prefix every key of `grads` with `prefix.`.
pub fn prefixed(prefix: &str, grads: Grads) -> Grads {
    grads.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

/// An ordered stack of layers with a validated per-sample input shape.
///
/// Parameters are named `"{layer_index}.{param}"`, e.g. `"0.weight"`.
#[derive(Debug)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
    evals: AtomicUsize,
    cached_batch: Option<usize>,
}

impl Clone for NetworkGraph {
    fn clone(&self) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            layers: self.layers.clone(),
            evals: AtomicUsize::new(self.evals.load(Ordering::Relaxed)),
            cached_batch: self.cached_batch,
        }
    }
}

impl NetworkGraph {
    pub fn new(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.kind())))?;
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            layers,
            evals: AtomicUsize::new(0),
            cached_batch: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Number of layer evaluations performed so far (all modes).
    pub fn layer_evals(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_layer_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "network expects N×{:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer
                .forward(&h, Mode::Train)
                .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.kind())))?;
            self.evals.fetch_add(1, Ordering::Relaxed);
        }
        self.cached_batch = Some(x.dim(0));
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, Mode::Train)
    }

    /// Inference forward pass. Does not touch caches or running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer
                .infer(&h)
                .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.kind())))?;
            self.evals.fetch_add(1, Ordering::Relaxed);
        }
        Ok(h)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<(Tensor, Grads)> {
        self.backward_with(upstream, BnGrad::Full)
    }

    pub fn backward_with(&self, upstream: &Tensor, bn: BnGrad) -> Result<(Tensor, Grads)> {
        let batch = self
            .cached_batch
            .ok_or_else(|| Error::State("backward called before a training forward pass".into()))?;
        if upstream.rank() != self.output_shape.len() + 1
            || upstream.dim(0) != batch
            || upstream.shape()[1..] != self.output_shape[..]
        {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?} does not match output [{batch}, {:?}]",
                upstream.shape(),
                self.output_shape
            )));
        }
        let mut grads = Grads::new();
        let mut g = upstream.clone();
        let mut local = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            local.clear();
            g = layer.backward(&g, bn, &mut local)?;
            for (name, t) in local.drain(..) {
                grads.insert(format!("{i}.{name}"), t);
            }
        }
        Ok((g, grads))
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
        self.cached_batch = None;
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters and running statistics, for checkpointing.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> =
            self.params().into_iter().map(|(k, v)| (k, v.clone())).collect();
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.buffers() {
                out.insert(format!("{i}.{n}"), t.clone());
            }
        }
        out
    }

    /// Load tensors named `"{prefix}{name}"` from `state`.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in l.params_mut() {
                load_one(state, &format!("{prefix}{i}.{n}"), t)?;
            }
            for (n, t) in l.buffers_mut() {
                load_one(state, &format!("{prefix}{i}.{n}"), t)?;
            }
        }
        self.clear_cache();
        Ok(())
    }

    /// Copy of this network whose batch-norm layers normalize with the
    /// statistics of the last training batch when run through `infer`.
    pub fn with_pinned_batch_stats(&self) -> Result<Self> {
        let mut out = self.clone();
        for l in out.layers.iter_mut() {
            l.pin_batch_stats()?;
        }
        Ok(out)
    }
}

fn load_one(state: &BTreeMap<String, Tensor>, key: &str, slot: &mut Tensor) -> Result<()> {
    let t = state
        .get(key)
        .ok_or_else(|| Error::Registry(format!("checkpoint is missing `{key}`")))?;
    if t.shape() != slot.shape() {
        return Err(Error::Registry(format!(
            "`{key}` has shape {:?}, expected {:?}",
            t.shape(),
            slot.shape()
        )));
    }
    *slot = t.clone();
    Ok(())
}
