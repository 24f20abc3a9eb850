//! Fixtures shared by the benchmarks: the default experiment's model and
//! data, cut at the default layer.

use splitfed::experiment::{prepare, Prepared};
use splitfed::nn::{Mode, ModelGraph};
use splitfed::split::{split, SmashedBatch};
use splitfed::{RunConfig, Tensor, DEFAULT_CONFIG};

pub struct Fixture {
    pub prep: Prepared,
    pub client: ModelGraph,
    pub server: ModelGraph,
}

pub fn fixture() -> Fixture {
    let cfg = RunConfig::parse(DEFAULT_CONFIG).expect("default configuration parses");
    let prep = prepare(&cfg).expect("default experiment prepares");
    let (client, server) = split(prep.model.clone(), prep.cut).expect("default cut is valid");
    Fixture {
        prep,
        client,
        server,
    }
}

impl Fixture {
    /// The first `n` training samples.
    pub fn batch(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n).collect();
        self.prep
            .train
            .batch(&idx)
            .expect("batch within the training set")
    }

    /// One smashed batch of `size` samples from each of `clients` clients.
    pub fn smashed(&self, clients: usize, size: usize) -> Vec<SmashedBatch> {
        (0..clients)
            .map(|k| {
                let idx: Vec<usize> = (k * size..(k + 1) * size).collect();
                let (x, y) = self
                    .prep
                    .train
                    .batch(&idx)
                    .expect("batch within the training set");
                let a = self
                    .client
                    .infer(&x, Mode::EvalCmsd)
                    .expect("client forward");
                SmashedBatch::new(k as u32, 0, 0, a, y).expect("matching labels")
            })
            .collect()
    }
}
