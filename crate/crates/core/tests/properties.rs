// casts spell out the 32-bit storage width whatever the scalar type
#![allow(clippy::unnecessary_cast)]

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use splitfed::collector::{fisher_yates, invert, ActivationStack};
use splitfed::data::{partition, PartitionMode};
use splitfed::fedserver::{
    aggregate, broadcast, weight_divergence, AggregationMode, AggregationPolicy, Weighting,
};
use splitfed::nn::{cross_entropy, LayerSpec, Mode, ModelGraph};
use splitfed::protocol::chunk_ranges;
use splitfed::split::{GradientBatch, SmashedBatch};
use splitfed::transport::wire::{decode, encode, HEADER_LEN};
use splitfed::transport::{Control, ControlKind, WireMessage};
use splitfed::{RunConfig, Scalar, Tensor};

fn small_model(seed: u64) -> ModelGraph {
    ModelGraph::new(
        vec![1, 4, 4],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            },
            LayerSpec::BatchNorm {
                channels: 2,
                eps: 1e-5,
                momentum: 0.1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 32,
                outputs: 3,
            },
        ],
        &mut SplitMix64::seed_from_u64(seed),
    )
    .unwrap()
}

/// A model with every tensor, running statistics included, redrawn.
fn scrambled(seed: u64) -> ModelGraph {
    let mut m = small_model(0);
    let mut rng = SplitMix64::seed_from_u64(seed);
    for (_, _, t) in m.named_params_mut() {
        let r = common::randn(t.shape(), &mut rng);
        t.data_mut().copy_from_slice(r.data());
        if t.data().iter().all(|v| *v == 0.0) {
            t.data_mut()[0] = 1.0;
        }
    }
    for (_, kind, t) in m.named_params_mut() {
        if kind == splitfed::nn::ParamKind::RunningVar {
            t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
        // checkpoints store 32 bits
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as Scalar);
    }
    m
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(b, c, w)| {
        prop::collection::vec(-1e3f32..1e3, b * c * w).prop_map(move |v| {
            Tensor::new(vec![b, c, w], v.into_iter().map(|x| x as Scalar).collect()).unwrap()
        })
    })
}

fn message_strategy() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (
            tensor_strategy(),
            any::<u32>(),
            any::<u32>(),
            any::<u32>(),
            0usize..1000
        )
            .prop_map(|(t, c, e, s, l)| {
                let labels = vec![l; t.outer()];
                WireMessage::Smashed(SmashedBatch::new(c, e, s, t, labels).unwrap())
            }),
        (tensor_strategy(), any::<u32>(), any::<u32>(), any::<u32>()).prop_map(
            |(grad, client_id, epoch, batch_seq)| {
                WireMessage::Gradient(GradientBatch {
                    client_id,
                    epoch,
                    batch_seq,
                    grad,
                })
            }
        ),
        any::<u64>().prop_map(|s| WireMessage::ModelUp(scrambled(s).to_checkpoint().unwrap())),
        any::<u64>().prop_map(|s| WireMessage::ModelDown(scrambled(s).to_checkpoint().unwrap())),
        (0u8..10, any::<u32>(), any::<u32>(), "[a-z0-9 .]{0,20}").prop_map(|(k, c, e, d)| {
            let kinds = [
                ControlKind::Hello,
                ControlKind::Assign,
                ControlKind::EpochStart,
                ControlKind::Pull,
                ControlKind::Exhausted,
                ControlKind::Upload,
                ControlKind::TrainLocal,
                ControlKind::Shutdown,
                ControlKind::Failed,
                ControlKind::LocalLoss,
            ];
            let mut ctl = Control::new(kinds[k as usize], c, e);
            ctl.detail = d;
            WireMessage::Control(ctl)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wire_round_trip(msg in message_strategy()) {
        let frame = encode(&msg).unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len + HEADER_LEN, frame.len());
        prop_assert_eq!(decode(&frame).unwrap(), msg);
    }

    #[test]
    fn truncated_frames_never_decode(msg in message_strategy(), cut in 1usize..8) {
        let frame = encode(&msg).unwrap();
        let keep = frame.len().saturating_sub(cut);
        prop_assert!(decode(&frame[..keep]).is_err());
    }

    #[test]
    fn iid_partition_covers_every_sample_once(m in 1usize..300, n in 1usize..12, seed in any::<u64>()) {
        prop_assume!(n <= m);
        let labels: Vec<usize> = (0..m).map(|i| i % 3).collect();
        let plan = partition(&labels, 3, PartitionMode::Iid, n, &mut SplitMix64::seed_from_u64(seed)).unwrap();
        let mut all: Vec<usize> = plan.assignments.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
        let sizes = plan.shard_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(plan.assignments.iter().all(|s| s.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn positive_label_shards_are_pure(labels in prop::collection::vec(0usize..6, 6..200)) {
        prop_assume!((0..6).all(|c| labels.contains(&c)));
        let plan = partition(&labels, 6, PartitionMode::PositiveLabels, 6, &mut SplitMix64::seed_from_u64(0)).unwrap();
        for (k, shard) in plan.assignments.iter().enumerate() {
            prop_assert!(shard.iter().all(|&i| labels[i] == k));
        }
        prop_assert_eq!(plan.shard_sizes().iter().sum::<usize>(), labels.len());
    }

    #[test]
    fn fisher_yates_is_a_permutation(n in 0usize..200, seed in any::<u64>()) {
        let p = fisher_yates(n, &mut SplitMix64::seed_from_u64(seed));
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let inv = invert(&p);
        prop_assert!((0..n).all(|i| inv[p[i]] == i));
    }

    #[test]
    fn routing_the_pool_returns_each_batch(
        sizes in prop::collection::vec(1usize..6, 1..8),
        seed in any::<u64>(),
    ) {
        let n = sizes.len();
        let mut stack = ActivationStack::new(n, 1.0).unwrap();
        let mut originals = Vec::new();
        let mut rng = SplitMix64::seed_from_u64(seed);
        for (k, &b) in sizes.iter().enumerate() {
            let t = common::randn(&[b, 3], &mut rng);
            originals.push(t.clone());
            stack.push(SmashedBatch::new(k as u32, 0, 0, t, vec![k; b]).unwrap()).unwrap();
        }
        let (pooled, labels, record) = stack.shuffle(seed).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            prop_assert_eq!(l as u32, record.origin_of_pooled(i).client_id);
        }
        let routed = stack.route(&record, &pooled).unwrap();
        prop_assert_eq!(routed.len(), n);
        for g in routed {
            prop_assert_eq!(g.grad.data(), originals[g.client_id as usize].data());
        }
        prop_assert_eq!(stack.count(), 0);
    }

    #[test]
    fn aggregation_ignores_client_order(k in 2usize..6, seed in any::<u64>(), rot in 1usize..5) {
        let models: Vec<ModelGraph> = (0..k).map(|i| scrambled(seed.wrapping_add(i as u64))).collect();
        let counts: Vec<usize> = (0..k).map(|i| 1 + i * 3).collect();
        let rot = rot % k;
        let rotated: Vec<&ModelGraph> = models.iter().cycle().skip(rot).take(k).collect();
        let rotated_counts: Vec<usize> = counts.iter().cycle().skip(rot).take(k).copied().collect();
        for weighting in [Weighting::Uniform, Weighting::BySampleCount] {
            let policy = AggregationPolicy::new(AggregationMode::IncludeBatchNorm, weighting);
            let a = aggregate(&models.iter().collect::<Vec<_>>(), &counts, policy).unwrap();
            let b = aggregate(&rotated, &rotated_counts, policy).unwrap();
            for ((_, _, x), (_, _, y)) in a.named_params().zip(b.named_params()) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    prop_assert!((*p as f64 - *q as f64).abs() <= 1e-6 * (1.0 + p.abs() as f64));
                }
            }
        }
    }

    #[test]
    fn exclusion_broadcast_leaves_batch_norm_alone(k in 2usize..6, seed in any::<u64>()) {
        let mut clients: Vec<ModelGraph> = (0..k).map(|i| scrambled(seed.wrapping_add(i as u64))).collect();
        let before = clients.clone();
        let policy = AggregationPolicy::new(AggregationMode::ExcludeBatchNorm, Weighting::Uniform);
        let global = aggregate(&clients.iter().collect::<Vec<_>>(), &[], policy).unwrap();
        broadcast(&global, &mut clients, policy).unwrap();
        for (c, b) in clients.iter().zip(&before) {
            for ((_, kind, x), (_, _, y)) in c.named_params().zip(b.named_params()) {
                if kind.is_batch_norm() {
                    prop_assert_eq!(x.data(), y.data());
                }
            }
        }
        for c in &clients[1..] {
            for ((_, kind, x), (_, _, y)) in c.named_params().zip(clients[0].named_params()) {
                if !kind.is_batch_norm() {
                    prop_assert_eq!(x.data(), y.data());
                }
            }
        }
    }

    #[test]
    fn divergence_is_scale_free_and_ignores_batch_norm(seed in any::<u64>(), scale in 0.25f64..4.0) {
        let a = scrambled(seed);
        let b = scrambled(seed ^ 0x5555);
        let d = weight_divergence(&a, &b).unwrap();
        prop_assert_eq!(weight_divergence(&b, &b).unwrap(), 0.0);
        let scaled = |m: &ModelGraph| {
            let mut m = m.clone();
            for (_, _, t) in m.named_params_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * scale) as Scalar);
            }
            m
        };
        let ds = weight_divergence(&scaled(&a), &scaled(&b)).unwrap();
        prop_assert!((d - ds).abs() <= 1e-5 * d.max(1.0));
        let mut a_bn = a.clone();
        for (_, kind, t) in a_bn.named_params_mut() {
            if kind.is_batch_norm() {
                t.data_mut().iter_mut().for_each(|v| *v += 3.0);
            }
        }
        prop_assert_eq!(weight_divergence(&a_bn, &b).unwrap(), d);
    }

    #[test]
    fn train_mode_batch_norm_standardizes_each_channel(batch in 3usize..8, seed in any::<u64>()) {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut m = ModelGraph::new(
            vec![3, 2, 2],
            vec![LayerSpec::BatchNorm { channels: 3, eps: 1e-5, momentum: 0.1 }],
            &mut rng,
        )
        .unwrap();
        let x = common::randn(&[batch, 3, 2, 2], &mut rng);
        let (y, _) = m.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..batch)
                .flat_map(|b| (0..4).map(move |p| (b, p)))
                .map(|(b, p)| y.data()[b * 12 + c * 4 + p] as f64)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-3, "variance {}", var);
        }
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero(
        logits in prop::collection::vec(-20.0f32..20.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let t = Tensor::new(vec![3, 4], logits.into_iter().map(|v| v as Scalar).collect()).unwrap();
        let (loss, g) = cross_entropy(&t, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for r in 0..3 {
            let s: f64 = g.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let m = scrambled(seed);
        let mut other = small_model(seed ^ 1);
        other.load_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        prop_assert_eq!(other, m);
    }

    #[test]
    fn chunks_cover_without_singletons(len in 1usize..500, size in 2usize..40) {
        let chunks = chunk_ranges(len, size);
        prop_assert_eq!(chunks.first().unwrap().start, 0);
        prop_assert_eq!(chunks.last().unwrap().end, len);
        prop_assert!(chunks.windows(2).all(|w| w[0].end == w[1].start));
        if len > 1 {
            prop_assert!(chunks.iter().all(|c| c.len() >= 2));
        }
    }

    #[test]
    fn config_echo_parses_back(
        seed in any::<u64>(),
        epochs in 1usize..50,
        alpha in 0.01f64..1.0,
        lr in 1e-4f64..1.0,
        protocol in prop::sample::select(vec!["sfpl", "sflv2", "fl", "centralized"]),
        bn in prop::sample::select(vec!["rmsd", "cmsd"]),
    ) {
        let text = format!(
            "seed = {seed}\nepochs = {epochs}\nalpha = {alpha}\nlr = {lr}\nprotocol = {protocol}\nbn_mode = {bn}\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let echo = cfg.to_string();
        prop_assert_eq!(RunConfig::parse(&echo).unwrap(), cfg);
    }
}
