#![cfg_attr(feature = "f64", allow(clippy::unnecessary_cast))]

//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the target fails if any criterion does.

mod common;

use std::time::Instant;

use common::{desk, median, oracle_round};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use splitfed::collector::ActivationStack;
use splitfed::experiment::{execute, prepare};
use splitfed::fedserver::{aggregate, broadcast, AggregationMode, AggregationPolicy, Weighting};
use splitfed::nn::{LayerSpec, ModelGraph};
use splitfed::protocol::{Confusion, Protocol};
use splitfed::rng::SeedStreams;
use splitfed::split::SmashedBatch;
use splitfed::transport::{predict_cost, CostModel};
use splitfed::{run, Execution, RunConfig, RunOutcome};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CLASSES: usize = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn seeded(seed: u64, keys: &[(&str, &str)]) -> RunConfig {
    let s = seed.to_string();
    let mut all = vec![("seed", s.as_str())];
    all.extend_from_slice(keys);
    desk(&all)
}

fn final_accuracy(o: &RunOutcome) -> f64 {
    o.report.final_metrics.unwrap().accuracy
}

/// Positive-label SFPL and SFLv2 runs on every seed, shared by several criteria.
struct PairedRuns {
    sfpl: Vec<RunOutcome>,
    sflv2: Vec<RunOutcome>,
}

fn paired_runs() -> PairedRuns {
    let go = |p: &str| {
        SEEDS
            .iter()
            .map(|&s| run(&seeded(s, &[("protocol", p)]), &Execution::Local).unwrap())
            .collect()
    };
    PairedRuns {
        sfpl: go("sfpl"),
        sflv2: go("sflv2"),
    }
}

fn collapse_signature(runs: &PairedRuns) -> Verdict {
    let expected = [0.01, 0.1, 0.018_181_818, 0.1];
    let matches = |m: &splitfed::protocol::Metrics| {
        let got = [m.precision, m.recall, m.f1, m.accuracy];
        got.iter().zip(expected).all(|(g, e)| (g - e).abs() <= 1e-4)
    };
    let collapsed: Vec<&RunOutcome> = runs
        .sflv2
        .iter()
        .filter(|o| {
            let c = &o.output.epochs.last().unwrap().eval.confusion;
            (0..c.classes())
                .filter(|&p| (0..c.classes()).any(|t| c.counts[t][p] > 0))
                .count()
                == 1
        })
        .collect();
    if let Some(o) = collapsed.first() {
        let m = o.report.final_metrics.unwrap();
        return verdict(
            matches(&m),
            format!(
                "{} of {} SFLv2 runs predict one class; seed {}: P={:.5} R={:.5} F1={:.5} acc={:.5}",
                collapsed.len(),
                runs.sflv2.len(),
                o.report.seed,
                m.precision,
                m.recall,
                m.f1,
                m.accuracy
            ),
        );
    }
    let mut c = Confusion::new(CLASSES);
    for t in 0..CLASSES {
        for _ in 0..50 {
            c.add(t, 3);
        }
    }
    let m = c.metrics(0.0);
    verdict(
        matches(&m),
        format!(
            "no SFLv2 run predicted a single class; constant predictor gives P={:.5} R={:.5} F1={:.5} acc={:.5}",
            m.precision, m.recall, m.f1, m.accuracy
        ),
    )
}

fn recovery(runs: &PairedRuns) -> Verdict {
    let a: Vec<f64> = runs.sfpl.iter().map(final_accuracy).collect();
    let b: Vec<f64> = runs.sflv2.iter().map(final_accuracy).collect();
    let good = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| **x >= 0.90 && **y <= 0.20)
        .count();
    verdict(
        good >= 4,
        format!("{good}/5 seeds; SFPL {a:.3?}, SFLv2 {b:.3?}"),
    )
}

fn single_client_equivalence() -> Verdict {
    let losses = |p: &str| {
        let cfg = desk(&[
            ("protocol", p),
            ("clients", "1"),
            ("partition", "iid"),
            ("epochs", "20"),
            ("per_class", "30"),
        ]);
        let prep = prepare(&cfg).unwrap();
        let out = execute(&cfg, &prep, &Execution::Local).unwrap();
        out.epochs
            .iter()
            .map(|e| e.train_loss.to_bits())
            .collect::<Vec<u64>>()
    };
    let central = losses("centralized");
    let sfpl = losses("sfpl");
    let sflv2 = losses("sflv2");
    verdict(
        central.len() >= 20 && sfpl == central && sflv2 == central,
        format!(
            "{} epochs; SFPL identical: {}, SFLv2 identical: {}",
            central.len(),
            sfpl == central,
            sflv2 == central
        ),
    )
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let cases: Vec<_> = (0..16).flat_map(oracle_round).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| c.worst.is_nan() || c.worst > c.tolerance)
        .map(|c| format!("{} {:.2e}", c.kind, c.worst))
        .collect();
    let worst = cases
        .iter()
        .map(|c| c.worst / c.tolerance)
        .fold(0.0, f64::max);
    verdict(
        failed.is_empty() && cases.len() >= 100 && elapsed < 60.0,
        format!(
            "{} instances in {elapsed:.1}s, worst error {worst:.2} of tolerance, failures {failed:?}",
            cases.len()
        ),
    )
}

fn shuffle_bijection() -> Verdict {
    let mut rng = SplitMix64::seed_from_u64(17);
    let mut mismatches = 0usize;
    for cycle in 0..10_000u32 {
        let n = rng.random_range(1..8usize);
        let alpha = rng.random_range(0.05..=1.0f64);
        let width = rng.random_range(1..5usize);
        let mut stack = ActivationStack::new(n, alpha).unwrap();
        let mut sent = Vec::new();
        let mut k = rng.random_range(0..n);
        while !stack.barrier_met() {
            let b = rng.random_range(1..5usize);
            let t = common::randn(&[b, width], &mut rng);
            let labels = (0..b).map(|_| rng.random_range(0..CLASSES)).collect();
            let sb = SmashedBatch::new(k as u32, cycle, cycle, t, labels).unwrap();
            sent.push(sb.clone());
            stack.push(sb).unwrap();
            k = (k + 1) % n;
        }
        let (pooled, labels, record) = stack.shuffle(rng.random()).unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let o = record.origin_of_pooled(i);
            let src = sent.iter().find(|s| s.client_id == o.client_id).unwrap();
            if pooled.row(i) != src.activations.row(o.offset) || label != src.labels[o.offset] {
                mismatches += 1;
            }
        }
        let routed = stack.route(&record, &pooled).unwrap();
        if routed.len() != sent.len() {
            mismatches += 1;
        }
        for g in &routed {
            let src = sent
                .iter()
                .find(|s| s.client_id == g.client_id && s.batch_seq == g.batch_seq);
            match src {
                Some(s) if s.activations.data() == g.grad.data() && s.epoch == g.epoch => {}
                _ => mismatches += 1,
            }
        }
    }

    // uniformity over the 24 orderings of a pool of two 2-sample batches
    let seeds = SeedStreams::new(99);
    let mut counts = [0u64; 24];
    let draws = 10_000u64;
    for d in 0..draws {
        let mut stack = ActivationStack::new(2, 1.0).unwrap();
        for k in 0..2u32 {
            let t = splitfed::Tensor::new(vec![2, 1], vec![0.0; 2]).unwrap();
            stack
                .push(SmashedBatch::new(k, 0, 0, t, vec![0, 0]).unwrap())
                .unwrap();
        }
        let (_, _, record) = stack.shuffle(seeds.seed("shuffle", &[0, d])).unwrap();
        counts[lehmer_rank(&record.permutation)] += 1;
    }
    let expected = draws as f64 / 24.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 23 degrees of freedom; the 0.999 quantile
    let critical = 49.728;
    verdict(
        mismatches == 0 && chi2 < critical,
        format!("10000 cycles, {mismatches} mismatches; chi-square {chi2:.2} (limit {critical} for p > 0.001)"),
    )
}

fn lehmer_rank(p: &[usize]) -> usize {
    let mut rank = 0;
    for i in 0..p.len() {
        let smaller = p[i + 1..].iter().filter(|&&v| v < p[i]).count();
        rank = rank * (p.len() - i) + smaller;
    }
    rank
}

fn random_client_model(rng: &mut SplitMix64, width: usize) -> ModelGraph {
    let mut m = ModelGraph::new(
        vec![1, 3, 3],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: width,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            },
            LayerSpec::BatchNorm {
                channels: width,
                eps: 1e-5,
                momentum: 0.1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 9 * width,
                outputs: 4,
            },
            LayerSpec::BatchNorm {
                channels: 4,
                eps: 1e-5,
                momentum: 0.1,
            },
        ],
        rng,
    )
    .unwrap();
    for (_, _, t) in m.named_params_mut() {
        let r = common::randn(t.shape(), rng);
        t.data_mut().copy_from_slice(r.data());
    }
    m
}

fn aggregation_oracle() -> Verdict {
    let mut rng = SplitMix64::seed_from_u64(23);
    let policy = AggregationPolicy::new(AggregationMode::ExcludeBatchNorm, Weighting::Uniform);
    let (mut worst, mut bn_changed, mut fleets) = (0.0f64, 0usize, 0usize);
    for _ in 0..200 {
        let n = rng.random_range(3..=10usize);
        let width = rng.random_range(1..4usize);
        let mut clients: Vec<ModelGraph> = (0..n)
            .map(|_| random_client_model(&mut rng, width))
            .collect();
        let before = clients.clone();
        let global = aggregate(&clients.iter().collect::<Vec<_>>(), &[], policy).unwrap();
        broadcast(&global, &mut clients, policy).unwrap();
        for (i, (_, kind, _)) in before[0].named_params().enumerate() {
            let tensors: Vec<&splitfed::Tensor> = before
                .iter()
                .map(|m| m.named_params().nth(i).unwrap().2)
                .collect();
            for (c, after) in clients.iter().enumerate() {
                let got = after.named_params().nth(i).unwrap().2;
                if kind.is_batch_norm() {
                    if got.data() != tensors[c].data() {
                        bn_changed += 1;
                    }
                    continue;
                }
                for (e, &v) in got.data().iter().enumerate() {
                    let mean = tensors.iter().map(|t| t.data()[e] as f64).sum::<f64>() / n as f64;
                    worst = worst.max((v as f64 - mean).abs());
                }
            }
        }
        fleets += 1;
    }
    verdict(
        worst <= 1e-6 && bn_changed == 0,
        format!("{fleets} fleets of 3-10 clients; max deviation from element mean {worst:.2e}, BN tensors changed {bn_changed}"),
    )
}

fn cost_exactness() -> Verdict {
    let configs: [&[(&str, &str)]; 3] = [
        &[("clients", "10"), ("per_class", "40")],
        &[
            ("clients", "4"),
            ("partition", "iid"),
            ("per_class", "30"),
            ("batch_size", "8"),
        ],
        &[
            ("clients", "7"),
            ("partition", "iid"),
            ("per_class", "25"),
            ("width", "4"),
            ("hidden", "16"),
        ],
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for keys in configs {
        for p in ["fl", "sfpl"] {
            let mut all = vec![("protocol", p), ("epochs", "1"), ("divergence", "false")];
            all.extend_from_slice(keys);
            let report = run(&desk(&all), &Execution::Local).unwrap().report;
            let cost = report.cost.unwrap();
            let predicted = cost.predicted.total_comms.round() as u64;
            let mut exact = predicted == cost.measured_total;
            if p == "fl" {
                let per = cost.predicted.comms_per_client.round() as u64;
                exact &= cost.measured_per_client.iter().all(|&c| c == per);
            }
            ok &= exact;
            lines.push(format!(
                "{p} N={} {}/{}",
                cost.model.n_clients, cost.measured_total, predicted
            ));
        }
    }
    let mut rng = SplitMix64::seed_from_u64(5);
    let mut differ = 0;
    for _ in 0..10_000 {
        let cm = CostModel {
            n_clients: rng.random_range(1..1000),
            model_bytes: rng.random_range(1.0..1e9),
            beta: rng.random_range(1e-4..0.9999),
            smashed_bytes: rng.random_range(1.0..1e6),
            dataset_size: rng.random_range(1.0..1e7),
            rate: rng.random_range(1e3..1e10),
            epoch_time: rng.random_range(1e-3..1e4),
            fedavg_time: rng.random_range(1e-3..1e3),
        };
        if predict_cost(&cm, Protocol::Sflv2).unwrap() != predict_cost(&cm, Protocol::Sfpl).unwrap()
        {
            differ += 1;
        }
    }
    verdict(
        ok && differ == 0,
        format!("measured/predicted bytes: {}; SFLv2 and SFPL predictions differ on {differ} of 10000 inputs", lines.join(", ")),
    )
}

fn bn_mode_trends() -> Verdict {
    let rmsd = [("aggregation", "include_bn"), ("bn_mode", "rmsd")];
    let cmsd = [("aggregation", "exclude_bn"), ("bn_mode", "cmsd")];
    let med = |scenario: &[(&str, &str)], bn: &[(&str, &str)]| {
        let accs: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let mut keys = vec![("divergence", "false")];
                keys.extend_from_slice(scenario);
                keys.extend_from_slice(bn);
                final_accuracy(&run(&seeded(s, &keys), &Execution::Local).unwrap())
            })
            .collect();
        median(accs)
    };
    let iid = [("partition", "iid"), ("test_partition", "iid")];
    let non = [
        ("partition", "positive_labels"),
        ("test_partition", "positive_labels"),
    ];
    let (iid_r, iid_c) = (med(&iid, &rmsd), med(&iid, &cmsd));
    let (non_r, non_c) = (med(&non, &rmsd), med(&non, &cmsd));
    verdict(
        iid_r >= iid_c && non_c >= non_r,
        format!("median accuracy iid/iid RMSD {iid_r:.3} CMSD {iid_c:.3}; noniid/noniid RMSD {non_r:.3} CMSD {non_c:.3}"),
    )
}

fn forgetting(runs: &PairedRuns) -> Verdict {
    let limit = 2.0 / CLASSES as f64;
    let frac = |rs: &[RunOutcome]| -> Vec<f64> {
        rs.iter()
            .map(|o| {
                o.report
                    .forgetting
                    .as_ref()
                    .unwrap()
                    .last_visited_max_fraction
            })
            .collect()
    };
    let (a, b) = (frac(&runs.sfpl), frac(&runs.sflv2));
    let below = a.iter().filter(|&&f| f < limit).count();
    let above = b.iter().filter(|&&f| f > limit).count();
    verdict(
        below >= 3 && above >= 3,
        format!("limit {limit}; SFPL below in {below}/5 {a:.2?}; SFLv2 above in {above}/5 {b:.2?}"),
    )
}

fn divergence(runs: &PairedRuns) -> Verdict {
    let last = |o: &RunOutcome| o.report.epochs.last().unwrap().divergence;
    let a: Vec<f64> = runs.sfpl.iter().map(last).collect();
    let b: Vec<f64> = runs.sflv2.iter().map(last).collect();
    let wins = a.iter().zip(&b).filter(|(x, y)| y > x).count();
    verdict(
        wins >= 4,
        format!("SFLv2 larger in {wins}/5 seeds; SFPL {a:.3?}, SFLv2 {b:.3?}"),
    )
}

fn mode_equivalence() -> Verdict {
    let mut same = Vec::new();
    for p in ["sfpl", "sflv2", "fl"] {
        let cfg = desk(&[("protocol", p), ("epochs", "4"), ("divergence", "false")]);
        let local = run(&cfg, &Execution::Local).unwrap().report.to_csv();
        let threaded = run(&cfg, &Execution::Threaded).unwrap().report.to_csv();
        let socket = run(&cfg, &Execution::Socket).unwrap().report.to_csv();
        same.push((p, local == threaded, local == socket));
    }
    verdict(
        same.iter().all(|(_, a, b)| *a && *b),
        format!("(protocol, threaded identical, socket identical): {same:?}"),
    )
}

fn main() {
    let start = Instant::now();
    let runs = paired_runs();
    let results: Vec<(u32, &str, Verdict)> = vec![
        (1, "collapse signature", collapse_signature(&runs)),
        (2, "SFPL recovers where SFLv2 collapses", recovery(&runs)),
        (3, "single-client equivalence", single_client_equivalence()),
        (4, "gradient oracle", gradient_oracle()),
        (5, "shuffle bijection and uniformity", shuffle_bijection()),
        (6, "aggregation excluding batch norm", aggregation_oracle()),
        (7, "byte counters equal predicted cost", cost_exactness()),
        (8, "running vs batch statistics trends", bn_mode_trends()),
        (9, "forgetting statistic", forgetting(&runs)),
        (10, "weight divergence ordering", divergence(&runs)),
        (11, "determinism across execution modes", mode_equivalence()),
    ];
    let mut failed = 0;
    for (n, name, v) in &results {
        println!(
            "{} criterion {n}: {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
