#![allow(dead_code)]

use fewshot_ssl::data::{ImageTensor, JigsawSample, LabeledImage, RotationSample};
use fewshot_ssl::model::{BackboneKind, BnPolicy, Grads, Mode, ModelBundle, ModelConfig};
use fewshot_ssl::objectives::{cross_entropy_with_grad, jigsaw_loss, prototype_loss, rotation_loss};
use fewshot_ssl::permset::PermutationSet;
use fewshot_ssl::rng::{self, substream, Rng};
use rand::Rng as _;

pub fn noise_image(rng: &mut Rng, side: usize) -> ImageTensor<f64> {
    ImageTensor::from_fn(side, side, 3, |_, _, _| rng.gen::<f64>())
}

/// `classes * per_class` noise images; every image is unrelated to its label.
pub fn noise_dataset(seed: u64, classes: usize, per_class: usize, side: usize) -> Vec<LabeledImage<f64>> {
    let mut r = substream(seed, "noise", 0);
    (0..classes * per_class)
        .map(|i| LabeledImage {
            image: noise_image(&mut r, side),
            class_id: i / per_class,
            source_path: format!("noise/{}/{}", i / per_class, i % per_class),
        })
        .collect()
}

pub fn tiny_config(jigsaw: Option<usize>, rotation: bool, num_classes: Option<usize>) -> ModelConfig {
    ModelConfig {
        backbone: BackboneKind::SmallConv,
        widths: vec![3, 4, 5],
        bn_policy: BnPolicy::PerBatch,
        num_classes,
        jigsaw_classes: jigsaw,
        rotation,
    }
}

/// Fixed inputs and targets for a combined-loss evaluation.
pub struct Problem {
    pub support: Vec<ImageTensor<f64>>,
    pub support_labels: Vec<usize>,
    pub query: Vec<ImageTensor<f64>>,
    pub query_labels: Vec<usize>,
    pub jigsaw: Vec<JigsawSample<f64>>,
    pub rotation: Vec<RotationSample<f64>>,
    pub standard: Vec<(ImageTensor<f64>, usize)>,
    pub dropout_seed: u64,
}

pub fn problem(seed: u64, permset: &PermutationSet, side: usize) -> Problem {
    let mut r = substream(seed, "problem", 0);
    let (n, k, m) = (3, 2, 2);
    let support = (0..n * k).map(|_| noise_image(&mut r, side)).collect();
    let query = (0..n * m).map(|_| noise_image(&mut r, side)).collect();
    let jigsaw = (0..3)
        .map(|_| {
            let cells: Vec<_> = (0..9).map(|_| noise_image(&mut r, side)).collect();
            JigsawSample::from_cells(&cells, permset, r.gen_range(0..permset.len())).unwrap()
        })
        .collect();
    let rotation = (0..4)
        .map(|a| fewshot_ssl::data::make_rotation(&noise_image(&mut r, side), a).unwrap())
        .collect();
    let standard = (0..4).map(|i| (noise_image(&mut r, side), i % 3)).collect();
    Problem {
        support,
        support_labels: (0..n * k).map(|i| i / k).collect(),
        query,
        query_labels: (0..n * m).map(|i| i / m).collect(),
        jigsaw,
        rotation,
        standard,
        dropout_seed: seed,
    }
}

/// Which terms enter the summed loss.
#[derive(Debug, Clone, Copy)]
pub struct Terms {
    pub prototype: bool,
    pub softmax: bool,
    pub jigsaw: bool,
    pub rotation: bool,
}

/// Summed loss and, when requested, its gradient, all in train mode.
pub fn loss_and_grads(bundle: &mut ModelBundle<f64>, p: &Problem, terms: Terms, want: bool) -> (f64, Option<Grads<f64>>) {
    let mut total = 0.0;
    let mut grads = bundle.zero_grads();
    if terms.prototype {
        let sp = bundle.embed_pass(&p.support, Mode::Train).unwrap();
        let qp = bundle.embed_pass(&p.query, Mode::Train).unwrap();
        let pl = prototype_loss(&sp.embeddings, &p.support_labels, &qp.embeddings, &p.query_labels).unwrap();
        total += pl.loss;
        if want {
            bundle.embed_backward(&sp, &pl.grad_support, &mut grads, false);
            bundle.embed_backward(&qp, &pl.grad_query, &mut grads, false);
        }
    }
    if terms.softmax {
        let pass = bundle.supervised_pass(p.standard.iter().map(|(i, _)| i), Mode::Train).unwrap();
        let targets: Vec<usize> = p.standard.iter().map(|(_, c)| *c).collect();
        let ce = cross_entropy_with_grad(&pass.logits, &targets).unwrap();
        total += ce.loss;
        if want {
            bundle.head_backward(&pass, &ce.grad, &mut grads, false);
        }
    }
    if terms.jigsaw {
        let pass = bundle.jigsaw_pass(&p.jigsaw, Mode::Train).unwrap();
        let targets: Vec<usize> = p.jigsaw.iter().map(|s| s.perm_index).collect();
        let ce = jigsaw_loss(&pass.logits, &targets).unwrap();
        total += ce.loss;
        if want {
            bundle.head_backward(&pass, &ce.grad, &mut grads, false);
        }
    }
    if terms.rotation {
        let mut d = substream(p.dropout_seed, rng::DROPOUT, 0);
        let pass = bundle.rotation_pass(&p.rotation, Mode::Train, Some(&mut d)).unwrap();
        let targets: Vec<usize> = p.rotation.iter().map(|s| s.angle_index).collect();
        let ce = rotation_loss(&pass.logits, &targets).unwrap();
        total += ce.loss;
        if want {
            bundle.head_backward(&pass, &ce.grad, &mut grads, false);
        }
    }
    (total, want.then_some(grads))
}

/// Flat parameter indices: one from every tensor, then uniform draws up to `count`.
pub fn pick_parameters(bundle: &ModelBundle<f64>, count: usize, seed: u64) -> Vec<usize> {
    let mut r = substream(seed, "pick", 0);
    let mut picks = Vec::new();
    let mut offset = 0;
    for t in bundle.params().tensors() {
        picks.push(offset + r.gen_range(0..t.data.len()));
        offset += t.data.len();
    }
    while picks.len() < count {
        picks.push(r.gen_range(0..offset));
    }
    picks.sort_unstable();
    picks.dedup();
    while picks.len() < count.min(offset) {
        let i = r.gen_range(0..offset);
        if let Err(pos) = picks.binary_search(&i) {
            picks.insert(pos, i);
        }
    }
    picks
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_relative: f64,
    pub worst_name: String,
}

/// Central differences with step `h`; relative error
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(bundle: &mut ModelBundle<f64>, p: &Problem, terms: Terms, indices: &[usize], h: f64, floor: f64) -> GradCheck {
    let (_, grads) = loss_and_grads(bundle, p, terms, true);
    let grads = grads.unwrap();
    let mut worst = GradCheck { checked: 0, worst_relative: 0.0, worst_name: String::new() };
    for &i in indices {
        let original = bundle.params().flat_get(i);
        bundle.params_mut().flat_set(i, original + h);
        let (plus, _) = loss_and_grads(bundle, p, terms, false);
        bundle.params_mut().flat_set(i, original - h);
        let (minus, _) = loss_and_grads(bundle, p, terms, false);
        bundle.params_mut().flat_set(i, original);
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.flat_get(i);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst.checked += 1;
        if rel > worst.worst_relative {
            worst.worst_relative = rel;
            worst.worst_name = format!("{}[{i}] analytic={analytic:e} numeric={numeric:e}", bundle.params().flat_name(i));
        }
    }
    worst
}
