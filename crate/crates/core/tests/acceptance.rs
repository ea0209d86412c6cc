//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the terminal.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fewshot_ssl::data::synthetic::{generate, SyntheticConfig};
use fewshot_ssl::data::{
    degrade_low_resolution, make_rotation, split_classes, to_greyscale, EpisodeSampler, ImageTensor, LabeledImage,
};
use fewshot_ssl::evaluator::{confidence_interval, format_mean_ci, meta_test, saliency, LinearProbe, SaliencyMap};
use fewshot_ssl::model::{BackboneKind, BnPolicy, Matrix, Mode, ModelBundle};
use fewshot_ssl::objectives::{prototype_logits, prototype_loss, prototypes};
use fewshot_ssl::optim::{Adam, AdamConfig};
use fewshot_ssl::permset::{generate_permutation_set, PermutationSet};
use fewshot_ssl::rng::{self, substream, Streams};
use fewshot_ssl::{train, EvalReport, SslTask, TrainConfig, TrainData, TrainOutcome};
use rand::seq::SliceRandom;
use rand::Rng as _;

use common::{grad_check, noise_dataset, pick_parameters, problem, Terms};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ------------------------------------------------------------ 1. permset

fn hamming(p: &[usize], q: &[usize]) -> usize {
    p.iter().zip(q).filter(|(a, b)| a != b).count()
}

fn permutations_lex(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let v = left.remove(i);
            prefix.push(v);
            rec(prefix, left, out);
            prefix.pop();
            left.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

/// `(min, mean)` distance from `cand` to every chosen permutation.
fn score(cand: &[usize], chosen: &[Vec<usize>]) -> (usize, f64) {
    let ds: Vec<usize> = chosen.iter().map(|c| hamming(cand, c)).collect();
    (*ds.iter().min().unwrap(), ds.iter().sum::<usize>() as f64 / ds.len() as f64)
}

/// True when `a` ranks strictly ahead of `b`.
fn ahead(a: (&[usize], (usize, f64)), b: (&[usize], (usize, f64))) -> bool {
    if a.1 .0 != b.1 .0 {
        return a.1 .0 > b.1 .0;
    }
    if a.1 .1 != b.1 .1 {
        return a.1 .1 > b.1 .1;
    }
    a.0 < b.0
}

fn exhaustive_oracle(n: usize, size: usize) -> Vec<Vec<usize>> {
    let all = permutations_lex(n);
    let mut chosen = vec![all[0].clone()];
    while chosen.len() < size {
        let mut best: Option<(&Vec<usize>, (usize, f64))> = None;
        for cand in all.iter().filter(|c| !chosen.contains(c)) {
            let s = score(cand, &chosen);
            if best.is_none_or(|b| ahead((cand, s), (b.0, b.1))) {
                best = Some((cand, s));
            }
        }
        chosen.push(best.unwrap().0.clone());
    }
    chosen
}

/// Same rules as the library's sampled greedy: fresh pool of 100k seeded
/// shuffles per step plus the 64 runners-up of every earlier step.
fn sampled_oracle(n: usize, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut chosen = vec![(0..n).collect::<Vec<usize>>()];
    let mut carried: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut step = 0;
    while chosen.len() < size {
        step += 1;
        let mut r = substream(seed, rng::PERMSET, step);
        let mut pool = carried.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..100_000 {
            perm.shuffle(&mut r);
            pool.insert(perm.clone());
        }
        for c in &chosen {
            pool.remove(c);
        }
        let mut ranked: Vec<(Vec<usize>, (usize, f64))> = pool
            .into_iter()
            .map(|p| {
                let s = score(&p, &chosen);
                (p, s)
            })
            .collect();
        ranked.sort_by(|a, b| {
            if ahead((&a.0, a.1), (&b.0, b.1)) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        let winner = ranked[0].0.clone();
        carried.remove(&winner);
        carried.extend(ranked[1..ranked.len().min(65)].iter().map(|(p, _)| p.clone()));
        chosen.push(winner);
    }
    chosen
}

fn criterion_permset(set: &PermutationSet, elapsed: Duration) -> Check {
    ensure(set.len() == 35 && set.n_elements() == 9, "wrong set shape")?;
    let perms = set.perms();
    for p in perms {
        let mut sorted = p.clone();
        sorted.sort_unstable();
        ensure(sorted == (0..9).collect::<Vec<_>>(), format!("{p:?} is not a bijection"))?;
    }
    let distinct: BTreeSet<&Vec<usize>> = perms.iter().collect();
    ensure(distinct.len() == 35, "duplicate permutations")?;
    let mut min = usize::MAX;
    for i in 0..perms.len() {
        for j in i + 1..perms.len() {
            min = min.min(hamming(&perms[i], &perms[j]));
        }
    }
    ensure(min == set.min_hamming(), format!("stored min_hamming {} != recomputed {min}", set.min_hamming()))?;
    ensure(elapsed < Duration::from_secs(30), format!("generation took {elapsed:?}"))?;

    let oracle = sampled_oracle(9, 35, 0);
    ensure(oracle == perms, "differs from the brute-force sampled-greedy oracle")?;

    let mut small = 0;
    for n in 1..=4usize {
        let total: usize = (1..=n).product();
        for size in 1..=total {
            let got = generate_permutation_set(n, size).map_err(|e| e.to_string())?;
            ensure(got.perms() == exhaustive_oracle(n, size), format!("({n}, {size}) differs from the exhaustive oracle"))?;
            small += 1;
        }
    }
    Ok(format!(
        "35 bijections, min Hamming {min}, {:.1}s; matches oracle at (9,35) and {small} sets with n <= 4",
        elapsed.as_secs_f64()
    ))
}

// ------------------------------------------------------------ 2. prototype loss

fn criterion_prototype_example() -> Check {
    let support = Matrix::from_rows(&[vec![0.0f64, 1.0], vec![4.0, 1.0]]).map_err(|e| e.to_string())?;
    let query = Matrix::from_rows(&[vec![1.0f64, 1.0]]).map_err(|e| e.to_string())?;
    let protos = prototypes(&support, &[0, 1], 2).map_err(|e| e.to_string())?;
    let logits = prototype_logits(&protos, &query).map_err(|e| e.to_string())?;
    let loss = prototype_loss(&support, &[0, 1], &query, &[0]).map_err(|e| e.to_string())?;
    let expected_loss = (1.0 + (-8.0f64).exp()).ln();
    ensure((logits.get(0, 0) + 1.0).abs() < 1e-6 && (logits.get(0, 1) + 9.0).abs() < 1e-6, "logits differ from (-1, -9)")?;
    ensure((loss.loss - 3.355e-4).abs() < 1e-6, format!("loss {} vs 3.355e-4", loss.loss))?;
    ensure((loss.loss - expected_loss).abs() < 1e-12, "loss differs from ln(1 + e^-8)")?;
    Ok(format!("logits ({}, {}), loss {:.4e}", logits.get(0, 0), logits.get(0, 1), loss.loss))
}

// ------------------------------------------------------------ 3. gradients

fn criterion_gradients(set: &PermutationSet) -> Check {
    let started = Instant::now();
    let config = common::tiny_config(Some(set.len()), true, None);
    let mut bundle = ModelBundle::<f64>::new(config, 11).map_err(|e| e.to_string())?;
    let p = problem(5, set, 8);
    let terms = Terms { prototype: true, softmax: false, jigsaw: true, rotation: true };
    let picks = pick_parameters(&bundle, 120, 3);
    let check = grad_check(&mut bundle, &p, terms, &picks, 1e-5, 1e-6);
    let elapsed = started.elapsed();
    ensure(check.checked >= 100, "fewer than 100 parameters checked")?;
    ensure(check.worst_relative < 1e-5, format!("worst relative error {:.3e} at {}", check.worst_relative, check.worst_name))?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} parameters, worst relative error {:.2e}, {:.1}s",
        check.checked,
        check.worst_relative,
        elapsed.as_secs_f64()
    ))
}

// ------------------------------------------------------------ 4. episodes

fn criterion_episodes() -> Check {
    let images: Vec<LabeledImage<f32>> = (0..12 * 30)
        .map(|i| LabeledImage {
            image: ImageTensor::filled(2, 2, 3, (i % 7) as f32),
            class_id: i / 30,
            source_path: format!("c{}/{}", i / 30, i % 30),
        })
        .collect();
    let sampler = EpisodeSampler::new(&images);
    let (n, k, m) = (5, 5, 16);
    let mut violations = 0;
    for e in 0..1000u64 {
        let mut r = substream(0, rng::EPISODE, e);
        let ep = sampler.sample(n, k, m, &mut r).map_err(|e| e.to_string())?;
        let classes: BTreeSet<usize> = ep.support.iter().map(|i| i.class_id).collect();
        let query_classes: BTreeSet<usize> = ep.query.iter().map(|i| i.class_id).collect();
        let ids: BTreeSet<&String> = ep.all_images().map(|i| &i.source_path).collect();
        let mut ok = classes.len() == n
            && classes == query_classes
            && ep.support.len() == n * k
            && ep.query.len() == n * m
            && ids.len() == n * (k + m)
            && ep.class_map.len() == n;
        for c in &classes {
            ok &= ep.support.iter().filter(|i| i.class_id == *c).count() == k;
            ok &= ep.query.iter().filter(|i| i.class_id == *c).count() == m;
        }
        let local: BTreeSet<usize> = ep.support_labels().into_iter().collect();
        ok &= local == (0..n).collect();
        ok &= ep.all_images().all(|i| i.source_path.starts_with(&format!("c{}/", i.class_id)));
        if !ok {
            violations += 1;
        }
    }
    ensure(violations == 0, format!("{violations} episodes violate the invariants"))?;
    Ok("1000 episodes (5,5,16), 0 violations".into())
}

// ------------------------------------------------------------ 5. confidence intervals

fn criterion_ci() -> Check {
    let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
    let oracle = |xs: &[f64]| {
        let e = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / e;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (e - 1.0);
        (100.0 * mean, 100.0 * 1.96 * var.sqrt() / e.sqrt())
    };
    let a = confidence_interval(&[0.5, 1.0]).map_err(|e| e.to_string())?;
    let (m, c) = oracle(&[0.5, 1.0]);
    ensure(rel(a.mean, 75.0) < 1e-9 && rel(a.ci95, 49.0) < 1e-9, format!("got {} ± {}", a.mean, a.ci95))?;
    ensure(rel(a.mean, m) < 1e-9 && rel(a.ci95, c) < 1e-9, "differs from the independent formula")?;
    let b = confidence_interval(&[1.0; 10]).map_err(|e| e.to_string())?;
    ensure(rel(b.mean, 100.0) < 1e-9 && b.ci95 == 0.0, format!("all-ones gave {} ± {}", b.mean, b.ci95))?;
    let (sa, sb) = (format_mean_ci(a.mean, a.ci95), format_mean_ci(b.mean, b.ci95));
    ensure(sa == "75.00 ± 49.00" && sb == "100.00 ± 0.00", format!("formatted as {sa} / {sb}"))?;
    Ok(format!("{sa}; {sb}"))
}

// ------------------------------------------------------------ 6. batch norm policy

fn small_config(ssl: SslTask) -> TrainConfig {
    TrainConfig {
        ssl_task: ssl,
        backbone: BackboneKind::SmallConv,
        widths: vec![4, 4],
        n_way: 3,
        k_shot: 2,
        m_query: 3,
        episodes: 100,
        image_size: 16,
        jigsaw_tile: 4,
        weight_decay: 1e-4,
        seed: 9,
        ..Default::default()
    }
}

fn criterion_bn_policy(set: &PermutationSet) -> Check {
    let data = noise_dataset(2, 5, 6, 16);
    let config = TrainConfig { episodes: 6, ..small_config(SslTask::Jigsaw) };
    let out: TrainOutcome<f64> = train(
        &config,
        TrainData { train: &data, val: &[], num_classes: 5 },
        Some(set),
        &mut |_| {},
    )
    .map_err(|e| e.to_string())?;
    let fresh = ModelBundle::<f64>::new(out.last.bundle.config().clone(), config.seed).map_err(|e| e.to_string())?;
    let buffers = out.last.bundle.buffers();
    ensure(buffers.numel() > 0, "model has no running-statistic buffers")?;
    ensure(buffers.tensors() == fresh.buffers().tensors(), "jigsaw training changed running statistics")?;
    ensure(out.last.bundle.params().tensors() != fresh.params().tensors(), "training did not move the parameters")?;

    let mut rejected = 0;
    for ssl in [SslTask::Jigsaw, SslTask::Rotation] {
        let bad = TrainConfig { bn_policy: BnPolicy::RunningStats, ..small_config(ssl) };
        ensure(bad.validate().is_err(), format!("{ssl:?} with running_stats validated"))?;
        let res: fewshot_ssl::Result<TrainOutcome<f64>> =
            train(&bad, TrainData { train: &data, val: &[], num_classes: 5 }, Some(set), &mut |_| {});
        ensure(res.is_err(), format!("{ssl:?} with running_stats trained"))?;
        rejected += 1;
    }
    Ok(format!("{} buffer values unchanged after jigsaw training; {rejected} invalid configs rejected", buffers.numel()))
}

// ------------------------------------------------------------ 7. ablation identity

fn criterion_ablation() -> Check {
    let data = noise_dataset(4, 6, 8, 12);
    let config = small_config(SslTask::None);
    let mut logged = Vec::new();
    let out: TrainOutcome<f64> = train(
        &config,
        TrainData { train: &data, val: &[], num_classes: 6 },
        None,
        &mut |l| logged.push(l.loss_sup),
    )
    .map_err(|e| e.to_string())?;

    let mut bundle = ModelBundle::<f64>::new(config.model_config(6, 0), config.seed).map_err(|e| e.to_string())?;
    let mut adam = Adam::new(
        AdamConfig { learning_rate: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() },
        bundle.params(),
    )
    .map_err(|e| e.to_string())?;
    let streams = Streams::new(config.seed);
    let sampler = EpisodeSampler::new(&data);
    let mut losses = Vec::new();
    for step in 0..100u64 {
        let mut r = streams.stream(rng::EPISODE, step);
        let ep = sampler.sample(3, 2, 3, &mut r).map_err(|e| e.to_string())?;
        let s = bundle.embed_pass(ep.support.iter().map(|i| &i.image), Mode::Train).map_err(|e| e.to_string())?;
        let q = bundle.embed_pass(ep.query.iter().map(|i| &i.image), Mode::Train).map_err(|e| e.to_string())?;
        let pl = prototype_loss(&s.embeddings, &ep.support_labels(), &q.embeddings, &ep.query_labels())
            .map_err(|e| e.to_string())?;
        let mut grads = bundle.zero_grads();
        bundle.embed_backward(&s, &pl.grad_support, &mut grads, false);
        bundle.embed_backward(&q, &pl.grad_query, &mut grads, false);
        adam.step(bundle.params_mut(), &grads).map_err(|e| e.to_string())?;
        losses.push(pl.loss);
    }
    let same_losses = logged.len() == 100 && logged.iter().zip(&losses).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same_losses, "per-step losses differ")?;
    let same_params = out
        .last
        .bundle
        .params()
        .tensors()
        .iter()
        .zip(bundle.params().tensors())
        .all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(same_params, "final parameters differ")?;
    Ok(format!("100 steps bit-identical (final loss {:.6})", losses[99]))
}

// ------------------------------------------------------------ 8. desk-scale end to end

struct Desk {
    base: Vec<LabeledImage<f32>>,
    novel: Vec<LabeledImage<f32>>,
}

/// Synthetic 10-class, 100 images per class, 64 px textures reduced to 32 px;
/// five base and five novel classes.
fn desk_data() -> Result<Desk, String> {
    let ds = generate::<f32>(&SyntheticConfig::default());
    let images = ds
        .images
        .iter()
        .map(|i| {
            Ok(LabeledImage { image: i.image.downsample_area(2).map_err(|e| e.to_string())?, ..i.clone() })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let split = split_classes(&(0..10).collect::<Vec<_>>(), [1, 0, 1], 0).map_err(|e| e.to_string())?;
    let pick = |classes: &[usize]| images.iter().filter(|i| classes.contains(&i.class_id)).cloned().collect();
    Ok(Desk { base: pick(&split.base), novel: pick(&split.novel) })
}

fn desk_config(ssl: SslTask) -> TrainConfig {
    TrainConfig {
        ssl_task: ssl,
        episodes: 2000,
        backbone: BackboneKind::SmallConv,
        widths: vec![16; 4],
        image_size: 32,
        jigsaw_tile: 16,
        ..Default::default()
    }
}

struct DeskRun {
    outcome: TrainOutcome<f32>,
    ssl_tail: f64,
    seconds: f64,
}

fn desk_train(desk: &Desk, ssl: SslTask, set: Option<&PermutationSet>) -> Result<DeskRun, String> {
    let started = Instant::now();
    let mut ssl_acc = Vec::new();
    let outcome = train(
        &desk_config(ssl),
        TrainData { train: &desk.base, val: &[], num_classes: 10 },
        set,
        &mut |l| ssl_acc.extend(l.acc_ssl),
    )
    .map_err(|e| e.to_string())?;
    let tail = &ssl_acc[ssl_acc.len().saturating_sub(100)..];
    Ok(DeskRun {
        outcome,
        ssl_tail: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn table_shaped(report: &EvalReport) -> bool {
    let s = report.summary();
    let Some((mean, ci)) = s.split_once(" ± ") else { return false };
    let two_decimals = |t: &str| t.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == 2) && t.parse::<f64>().is_ok();
    two_decimals(mean)
        && two_decimals(ci)
        && report.n_way == Some(5)
        && report.k_shot == Some(5)
        && report.n_episodes == Some(600)
        && report.per_episode_accuracies.len() == 600
}

fn criterion_desk_baseline(desk: &Desk) -> (Check, Check) {
    let run = match desk_train(desk, SslTask::None, None) {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let bundle = &run.outcome.last.bundle;
    let trained = meta_test(bundle, &desk.novel, 5, 5, 16, 600, 7);
    let random = ModelBundle::<f32>::new(bundle.config().clone(), 0).and_then(|b| meta_test(&b, &desk.novel, 5, 5, 16, 600, 7));
    let (trained, random) = match (trained, random) {
        (Ok(t), Ok(r)) => (t, r),
        (Err(e), _) | (_, Err(e)) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let c = if table_shaped(&trained) {
        Ok(format!("ProtoNet 5-way 5-shot over 600 episodes: {}", trained.summary()))
    } else {
        Err(format!("report not table-shaped: {}", trained.summary()))
    };
    let gap = trained.mean_accuracy - random.mean_accuracy;
    let d = if gap >= 20.0 {
        Ok(format!("trained {} vs random init {} (+{gap:.2} points, {:.0}s training)", trained.summary(), random.summary(), run.seconds))
    } else {
        Err(format!("gap {gap:.2} < 20 points ({} vs {})", trained.summary(), random.summary()))
    };
    (c, d)
}

fn criterion_desk_ssl(desk: &Desk, ssl: SslTask, set: Option<&PermutationSet>, threshold: f64) -> Check {
    let run = desk_train(desk, ssl, set)?;
    ensure(
        run.ssl_tail > threshold,
        format!("{ssl:?} accuracy {:.4} <= {threshold:.4}", run.ssl_tail),
    )?;
    Ok(format!(
        "{ssl:?} accuracy over the last 100 steps {:.3} > {threshold:.3} ({:.0}s training)",
        run.ssl_tail, run.seconds
    ))
}

// ------------------------------------------------------------ 9. degradations

fn criterion_degradations() -> Check {
    let mut r = substream(1, "acceptance", 9);
    let img: ImageTensor<f64> = ImageTensor::from_fn(40, 36, 3, |_, _, _| r.gen::<f64>());
    let grey = to_greyscale(&img);
    let equal = grey.pixels().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]);
    ensure(equal, "greyscale channels differ")?;

    let low = degrade_low_resolution(&img, 4).map_err(|e| e.to_string())?;
    ensure((low.height(), low.width(), low.channels()) == (40, 36, 3), "low resolution changed the dimensions")?;
    for v in [0.0, 0.25, 0.7, 1.0] {
        let flat = ImageTensor::filled(40, 36, 3, v);
        ensure(degrade_low_resolution(&flat, 4).map_err(|e| e.to_string())? == flat, format!("constant {v} not preserved"))?;
    }

    let once = make_rotation(&img, 2).map_err(|e| e.to_string())?.image;
    let twice = make_rotation(&once, 2).map_err(|e| e.to_string())?.image;
    ensure(twice == img, "two 180 degree rotations are not the identity")?;
    Ok("greyscale channels equal; lowres x4 keeps 40x36x3 and constants; 180+180 = identity".into())
}

// ------------------------------------------------------------ 10. saliency

fn criterion_saliency() -> Check {
    let (h, w, c, classes) = (6, 5, 3, 4);
    let mut r = substream(2, "acceptance", 10);
    let weights: Vec<f64> = (0..classes * h * w * c).map(|_| r.gen_range(-1.0..1.0)).collect();
    let probe = LinearProbe {
        weights: Matrix::from_vec(classes, h * w * c, weights.clone()).map_err(|e| e.to_string())?,
        bias: vec![0.3; classes],
    };
    let image = ImageTensor::from_fn(h, w, c, |_, _, _| r.gen::<f64>());
    let class = 2;
    let map = saliency(&probe, &image, class).map_err(|e| e.to_string())?;

    let row = &weights[class * h * w * c..(class + 1) * h * w * c];
    let mags: Vec<f64> = row.chunks(c).map(|px| px.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let (lo, hi) = mags.iter().fold((f64::MAX, f64::MIN), |(l, u), &m| (l.min(m), u.max(m)));
    let expected: Vec<f64> = mags.iter().map(|m| (m - lo) / (hi - lo)).collect();
    let worst = map.values.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    ensure((map.height, map.width) == (h, w) && map.values.len() == h * w, "wrong saliency shape")?;
    ensure(map.values.iter().all(|v| (0.0..=1.0).contains(v)), "values outside [0, 1]")?;
    ensure(worst < 1e-6, format!("max deviation from analytic |weights| {worst:.3e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("map.png");
    map.save_png(&path).map_err(|e| e.to_string())?;
    let back = SaliencyMap::load_png(&path).map_err(|e| e.to_string())?;
    let again = dir.path().join("again.png");
    back.save_png(&again).map_err(|e| e.to_string())?;
    let quantised = map.values.iter().zip(&back.values).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12);
    ensure((back.height, back.width) == (h, w) && quantised, "PNG round trip lost the map")?;
    ensure(SaliencyMap::load_png(&again).map_err(|e| e.to_string())?.values == back.values, "PNG re-save is not stable")?;
    Ok(format!("{h}x{w} map, max deviation {worst:.1e}, PNG round trip within 1/510"))
}

// ------------------------------------------------------------ driver

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut report = |id: &'static str, r: Check| {
        match &r {
            Ok(d) => println!("PASS  {id:<3} {d}"),
            Err(d) => println!("FAIL  {id:<3} {d}"),
        }
        results.push((id, r));
    };

    let started = Instant::now();
    let set = generate_permutation_set(9, 35);
    let elapsed = started.elapsed();
    let set = match set {
        Ok(s) => s,
        Err(e) => {
            println!("FAIL  1   permutation set: {e}");
            return ExitCode::FAILURE;
        }
    };
    report("1", guarded(|| criterion_permset(&set, elapsed)));
    report("2", guarded(criterion_prototype_example));
    report("3", guarded(|| criterion_gradients(&set)));
    report("4", guarded(criterion_episodes));
    report("5", guarded(criterion_ci));
    report("6", guarded(|| criterion_bn_policy(&set)));
    report("7", guarded(criterion_ablation));
    report("9", guarded(criterion_degradations));
    report("10", guarded(criterion_saliency));

    match desk_data() {
        Err(e) => {
            for id in ["8a", "8b", "8c", "8d"] {
                report(id, Err(e.clone()));
            }
        }
        Ok(desk) => {
            let (c, d) = catch_unwind(AssertUnwindSafe(|| criterion_desk_baseline(&desk)))
                .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
            report("8c", c);
            report("8d", d);
            report("8b", guarded(|| criterion_desk_ssl(&desk, SslTask::Rotation, None, 0.5)));
            report("8a", guarded(|| criterion_desk_ssl(&desk, SslTask::Jigsaw, Some(&set), 3.0 / 35.0)));
        }
    }

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
