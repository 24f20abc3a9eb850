//! The client actor: owns one data shard and one model portion and answers
//! server messages.

use super::{epoch_batches, Augment, Protocol};
use crate::data::{random_hflip, Dataset};
use crate::error::{Error, Result};
use crate::fedserver::AggregationPolicy;
use crate::nn::{ModelGraph, OptimizerConfig};
use crate::rng::{stream, SeedStreams};
use crate::split::ClientPortion;
use crate::tensor::Tensor;
use crate::transport::link::failed;
use crate::transport::{Control, ControlKind, Endpoint, WireMessage};

pub struct ClientActor {
    protocol: Protocol,
    portion: ClientPortion,
    data: Dataset,
    batch_size: usize,
    seeds: SeedStreams,
    augment: Augment,
    policy: AggregationPolicy,
    epoch: u32,
    batches: Vec<Vec<usize>>,
    next: usize,
}

impl ClientActor {
    /// `model` is the client portion for split protocols and the whole
    /// model for FL; `data` is this client's shard.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        protocol: Protocol,
        model: ModelGraph,
        optimizer: OptimizerConfig,
        data: Dataset,
        batch_size: usize,
        seeds: SeedStreams,
        augment: Augment,
        policy: AggregationPolicy,
    ) -> Self {
        Self {
            protocol,
            portion: ClientPortion::new(id, model, optimizer),
            data,
            batch_size,
            seeds,
            augment,
            policy,
            epoch: 0,
            batches: Vec::new(),
            next: 0,
        }
    }

    pub fn id(&self) -> u32 {
        self.portion.id()
    }

    pub fn model(&self) -> &ModelGraph {
        self.portion.model()
    }

    pub fn has_pending(&self) -> bool {
        self.portion.has_pending()
    }

    fn start_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
        self.portion.set_epoch(epoch as usize);
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.batches = epoch_batches(
            &all,
            self.batch_size,
            &self.seeds,
            self.id(),
            epoch as usize,
        );
        self.next = 0;
    }

    fn load_batch(&self, seq: usize) -> Result<(Tensor, Vec<usize>)> {
        let (mut x, y) = self.data.batch(&self.batches[seq])?;
        if self.augment == Augment::Hflip {
            let mut rng = self.seeds.rng(
                stream::AUGMENT,
                &[self.id() as u64, self.epoch as u64, seq as u64],
            );
            random_hflip(&mut x, &mut rng)?;
        }
        Ok((x, y))
    }

    fn control(&self, kind: ControlKind) -> WireMessage {
        WireMessage::Control(Control::new(kind, self.id(), self.epoch))
    }

    fn try_handle(&mut self, msg: WireMessage) -> Result<Vec<WireMessage>> {
        match msg {
            WireMessage::ModelDown(bytes) => {
                let policy = self.policy;
                self.portion
                    .model_mut()
                    .load_checkpoint_filtered(&bytes, |k| policy.shares(k))?;
                Ok(vec![])
            }
            WireMessage::Gradient(gb) => {
                self.portion.backward(&gb)?;
                Ok(vec![])
            }
            WireMessage::Control(c) => match c.kind {
                ControlKind::EpochStart => {
                    self.start_epoch(c.epoch);
                    Ok(vec![])
                }
                ControlKind::Pull => {
                    if c.epoch != self.epoch {
                        return Err(Error::Protocol(format!(
                            "pull for epoch {} during epoch {}",
                            c.epoch, self.epoch
                        )));
                    }
                    if self.next >= self.batches.len() {
                        return Ok(vec![self.control(ControlKind::Exhausted)]);
                    }
                    let seq = self.next;
                    let (x, y) = self.load_batch(seq)?;
                    let sb = self.portion.forward(self.epoch, seq as u32, &x, y)?;
                    self.next += 1;
                    Ok(vec![WireMessage::Smashed(sb)])
                }
                ControlKind::Upload => Ok(vec![WireMessage::ModelUp(
                    self.portion.model().to_checkpoint()?,
                )]),
                ControlKind::TrainLocal => {
                    if self.protocol != Protocol::Fl {
                        return Err(Error::Protocol("local training is only part of FL".into()));
                    }
                    let mut loss_sum = 0.0;
                    let mut count = 0usize;
                    for seq in 0..self.batches.len() {
                        let (x, y) = self.load_batch(seq)?;
                        loss_sum += self.portion.local_step(&x, &y)? * y.len() as f64;
                        count += y.len();
                    }
                    self.next = self.batches.len();
                    let mut report = Control::new(ControlKind::LocalLoss, self.id(), self.epoch);
                    report.detail = (loss_sum / count.max(1) as f64).to_string();
                    Ok(vec![
                        WireMessage::Control(report),
                        WireMessage::ModelUp(self.portion.model().to_checkpoint()?),
                    ])
                }
                ControlKind::Shutdown => Ok(vec![]),
                other => Err(Error::Protocol(format!("client cannot handle {other:?}"))),
            },
            other => Err(Error::Protocol(format!(
                "client cannot handle a {} message",
                other.name()
            ))),
        }
    }
}

impl Endpoint for ClientActor {
    fn handle(&mut self, msg: WireMessage) -> Vec<WireMessage> {
        match self.try_handle(msg) {
            Ok(r) => r,
            Err(e) => vec![failed(self.id(), &e)],
        }
    }
}
