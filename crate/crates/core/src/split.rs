//! Cutting a model into a client portion and a server portion, and the
//! payloads that cross the cut.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, ForwardCache, LayerSpec, Mode, ModelGraph, OptimizerConfig, OptimizerState,
};
use crate::tensor::Tensor;

/// Client portion is layers `[0, cut_index)`, server portion the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub cut_index: usize,
}

impl SplitSpec {
    pub fn new(cut_index: usize) -> Self {
        Self { cut_index }
    }

    /// Cut after the first convolution/batch-norm/ReLU group, or after the
    /// first layer when the model has no such group.
    pub fn default_for(specs: &[LayerSpec]) -> Self {
        let first_bn = specs.iter().position(LayerSpec::is_batch_norm);
        let cut = first_bn
            .map(|bn| match specs.get(bn + 1) {
                Some(LayerSpec::Relu) => bn + 2,
                _ => bn + 1,
            })
            .filter(|&c| c < specs.len())
            .unwrap_or(1);
        Self { cut_index: cut }
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.cut_index == 0 || self.cut_index >= layer_count {
            return Err(Error::Split(format!(
                "cut index {} leaves an empty portion in a {layer_count}-layer model",
                self.cut_index
            )));
        }
        Ok(())
    }
}

/// Splits a model. The parameters move into the two portions.
pub fn split(model: ModelGraph, spec: SplitSpec) -> Result<(ModelGraph, ModelGraph)> {
    spec.validate(model.layers().len())?;
    let cut_shape = model.layer_input_shapes()[spec.cut_index].clone();
    let (input_shape, mut layers) = model.into_parts();
    let server_layers = layers.split_off(spec.cut_index);
    Ok((
        ModelGraph::from_layers(input_shape, layers)?,
        ModelGraph::from_layers(cut_shape, server_layers)?,
    ))
}

/// Joins a client portion and a server portion back into one model.
pub fn merge(client: ModelGraph, server: ModelGraph) -> Result<ModelGraph> {
    if client.output_shape() != server.input_shape() {
        return Err(Error::Split(format!(
            "client output {:?} does not feed server input {:?}",
            client.output_shape(),
            server.input_shape()
        )));
    }
    let (input_shape, mut layers) = client.into_parts();
    layers.extend(server.into_parts().1);
    ModelGraph::from_layers(input_shape, layers)
}

/// Share of the trainable parameters held by the client.
pub fn trainable_fraction(client: &ModelGraph, server: &ModelGraph) -> f64 {
    let c = client.trainable_param_count() as f64;
    c / (c + server.trainable_param_count() as f64)
}

/// Share of all stored values (running statistics included) held by the
/// client. This is the fraction that matches checkpoint sizes.
pub fn stored_fraction(client: &ModelGraph, server: &ModelGraph) -> f64 {
    let c = client.param_count() as f64;
    c / (c + server.param_count() as f64)
}

/// Cut-layer activations of one client mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedBatch {
    pub client_id: u32,
    pub epoch: u32,
    pub batch_seq: u32,
    pub activations: Tensor,
    pub labels: Vec<usize>,
}

impl SmashedBatch {
    pub fn new(
        client_id: u32,
        epoch: u32,
        batch_seq: u32,
        activations: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if activations.outer() != labels.len() || activations.rank() < 2 {
            return Err(Error::Shape(format!(
                "{} labels for activations {:?}",
                labels.len(),
                activations.shape()
            )));
        }
        Ok(Self {
            client_id,
            epoch,
            batch_seq,
            activations,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gradient with respect to a [`SmashedBatch`]'s activations.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub client_id: u32,
    pub epoch: u32,
    pub batch_seq: u32,
    pub grad: Tensor,
}

struct Pending {
    epoch: u32,
    batch_seq: u32,
    shape: Vec<usize>,
    cache: ForwardCache,
}

/// A client's model portion with its optimizer and at most one outstanding
/// forward pass.
pub struct ClientPortion {
    id: u32,
    model: ModelGraph,
    opt: OptimizerState,
    pending: Option<Pending>,
}

impl ClientPortion {
    pub fn new(id: u32, model: ModelGraph, opt: OptimizerConfig) -> Self {
        Self {
            id,
            model,
            opt: OptimizerState::new(opt),
            pending: None,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelGraph {
        &mut self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.opt.set_epoch(epoch);
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Train-mode forward of one mini-batch.
    pub fn forward(
        &mut self,
        epoch: u32,
        batch_seq: u32,
        input: &Tensor,
        labels: Vec<usize>,
    ) -> Result<SmashedBatch> {
        if let Some(p) = &self.pending {
            return Err(Error::Pending(format!(
                "client {} still awaits the gradient of batch {}/{}",
                self.id, p.epoch, p.batch_seq
            )));
        }
        let (activations, cache) = self.model.forward(input, Mode::Train)?;
        let sb = SmashedBatch::new(self.id, epoch, batch_seq, activations, labels)?;
        self.pending = Some(Pending {
            epoch,
            batch_seq,
            shape: sb.activations.shape().to_vec(),
            cache,
        });
        Ok(sb)
    }

    /// Applies the returned cut-layer gradient as one SGD step. A gradient
    /// that does not match the pending forward is rejected without any
    /// state change.
    pub fn backward(&mut self, gb: &GradientBatch) -> Result<()> {
        let p = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Pending(format!("client {} has no pending forward", self.id)))?;
        if gb.client_id != self.id || gb.epoch != p.epoch || gb.batch_seq != p.batch_seq {
            return Err(Error::Pending(format!(
                "gradient for {}:{}/{} does not match pending {}:{}/{}",
                gb.client_id, gb.epoch, gb.batch_seq, self.id, p.epoch, p.batch_seq
            )));
        }
        if gb.grad.shape() != p.shape.as_slice() {
            return Err(Error::Shape(format!(
                "gradient {:?} for activations {:?}",
                gb.grad.shape(),
                p.shape
            )));
        }
        let (grads, _) = self.model.backward(&p.cache, &gb.grad)?;
        self.opt.step(&mut self.model, &grads)?;
        self.pending = None;
        Ok(())
    }

    pub fn infer(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        self.model.infer(input, mode)
    }

    /// One local step when this portion is a whole model: forward,
    /// cross-entropy, backward and SGD. Returns the mean loss.
    pub fn local_step(&mut self, input: &Tensor, labels: &[usize]) -> Result<f64> {
        if self.pending.is_some() {
            return Err(Error::Pending(format!(
                "client {} has a pending forward",
                self.id
            )));
        }
        let (logits, cache) = self.model.forward(input, Mode::Train)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        let (grads, _) = self.model.backward(&cache, &dlogits)?;
        self.opt.step(&mut self.model, &grads)?;
        Ok(loss)
    }
}

/// The server's model portion with its optimizer.
pub struct ServerPortion {
    model: ModelGraph,
    opt: OptimizerState,
}

impl ServerPortion {
    pub fn new(model: ModelGraph, opt: OptimizerConfig) -> Self {
        Self {
            model,
            opt: OptimizerState::new(opt),
        }
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.opt.set_epoch(epoch);
    }

    /// Forward, cross-entropy, backward and one SGD step. Returns the mean
    /// loss and the gradient with respect to the activations.
    pub fn train_step(&mut self, activations: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let (logits, cache) = self.model.forward(activations, Mode::Train)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        let (grads, dx) = self.model.backward(&cache, &dlogits)?;
        self.opt.step(&mut self.model, &grads)?;
        Ok((loss, dx))
    }

    pub fn into_model(self) -> ModelGraph {
        self.model
    }
}
