//! Meta-test protocol, standard test accuracy and saliency maps.

use std::fmt;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::data::{Episode, EpisodeSampler, ImageTensor, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{argmax, Grads, Matrix, ModelBundle};
use crate::objectives::{prototype_logits, prototypes};
use crate::rng;
use crate::scalar::Scalar;

/// Images per forward pass in [`test_standard`].
pub const STANDARD_TEST_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    MetaTest,
    Standard,
}

/// Mean accuracy and 95% half-width, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    /// `100 * 1.96 * s / sqrt(E)` with the sample standard deviation.
    pub ci95: f64,
    /// Same with the population standard deviation.
    pub ci95_population: f64,
}

/// Aggregates per-episode accuracies (fractions).
pub fn confidence_interval(accuracies: &[f64]) -> Result<ConfidenceInterval> {
    if accuracies.is_empty() {
        return Err(Error::InvalidArgument("no accuracies to aggregate".into()));
    }
    let e = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / e;
    let ss: f64 = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
    let sample = if accuracies.len() > 1 { (ss / (e - 1.0)).sqrt() } else { 0.0 };
    let population = (ss / e).sqrt();
    Ok(ConfidenceInterval {
        mean: 100.0 * mean,
        ci95: 100.0 * 1.96 * sample / e.sqrt(),
        ci95_population: 100.0 * 1.96 * population / e.sqrt(),
    })
}

/// `"87.29 ± 0.48"`.
pub fn format_mean_ci(mean: f64, ci95: f64) -> String {
    format!("{mean:.2} ± {ci95:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub n_way: Option<usize>,
    pub k_shot: Option<usize>,
    pub m_query: Option<usize>,
    pub n_episodes: Option<usize>,
    pub seed: Option<u64>,
    pub per_episode_accuracies: Vec<f64>,
    /// Percent.
    pub mean_accuracy: f64,
    /// Percent half-width; zero for the standard protocol.
    pub ci95: f64,
    pub ci95_population: f64,
    pub std_kind: String,
    pub config: serde_json::Value,
    pub checkpoint_id: Option<String>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format_mean_ci(self.mean_accuracy, self.ci95)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("eval report", &e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.protocol {
            Protocol::MetaTest => write!(
                f,
                "{}-way {}-shot over {} episodes: {}",
                self.n_way.unwrap_or(0),
                self.k_shot.unwrap_or(0),
                self.n_episodes.unwrap_or(0),
                self.summary()
            ),
            Protocol::Standard => write!(f, "per-image accuracy: {:.1}", self.mean_accuracy),
        }
    }
}

/// Nearest-prototype predictions for the queries of `episode`. Support and
/// query are embedded as two batches in evaluation mode.
pub fn episode_predictions<T: Scalar>(bundle: &ModelBundle<T>, episode: &Episode<T>) -> Result<Vec<usize>> {
    let support = bundle.embed_eval(episode.support.iter().map(|i| &i.image))?;
    let query = bundle.embed_eval(episode.query.iter().map(|i| &i.image))?;
    let protos = prototypes(&support, &episode.support_labels(), episode.n_way)?;
    let logits = prototype_logits(&protos, &query)?;
    Ok((0..logits.rows).map(|r| argmax(logits.row(r))).collect())
}

pub fn episode_accuracy<T: Scalar>(bundle: &ModelBundle<T>, episode: &Episode<T>) -> Result<f64> {
    let predictions = episode_predictions(bundle, episode)?;
    let labels = episode.query_labels();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracies of `n_episodes` episodes drawn from `images`; episode `i`
/// uses the stream `(seed, stream, i)` so any subset can be recomputed alone.
pub fn episode_accuracies<T: Scalar>(
    bundle: &ModelBundle<T>,
    images: &[LabeledImage<T>],
    geometry: (usize, usize, usize),
    n_episodes: usize,
    seed: u64,
    stream: &str,
) -> Result<Vec<f64>> {
    let (n_way, k_shot, m_query) = geometry;
    let sampler = EpisodeSampler::new(images);
    sampler.check_geometry(n_way, k_shot + m_query)?;
    (0..n_episodes)
        .map(|i| {
            let mut r = rng::substream(seed, stream, i as u64);
            let episode = sampler.sample(n_way, k_shot, m_query, &mut r)?;
            episode_accuracy(bundle, &episode)
        })
        .collect()
}

/// N-way K-shot evaluation over `n_episodes` episodes of the novel classes.
pub fn meta_test<T: Scalar>(
    bundle: &ModelBundle<T>,
    novel: &[LabeledImage<T>],
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("meta-test needs at least one episode".into()));
    }
    let accs = episode_accuracies(bundle, novel, (n_way, k_shot, m_query), n_episodes, seed, rng::META_TEST)?;
    let ci = confidence_interval(&accs)?;
    Ok(EvalReport {
        protocol: Protocol::MetaTest,
        n_way: Some(n_way),
        k_shot: Some(k_shot),
        m_query: Some(m_query),
        n_episodes: Some(n_episodes),
        seed: Some(seed),
        per_episode_accuracies: accs,
        mean_accuracy: ci.mean,
        ci95: ci.ci95,
        ci95_population: ci.ci95_population,
        std_kind: "sample".into(),
        config: serde_json::Value::Null,
        checkpoint_id: None,
    })
}

/// Argmax predictions of the supervised head, in batches of
/// [`STANDARD_TEST_BATCH`].
pub fn classify<T: Scalar>(bundle: &ModelBundle<T>, images: &[LabeledImage<T>]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(STANDARD_TEST_BATCH) {
        let pass = bundle.supervised_pass_eval(chunk.iter().map(|i| &i.image))?;
        out.extend((0..pass.logits.rows).map(|r| argmax(pass.logits.row(r))));
    }
    Ok(out)
}

/// Per-image accuracy in percent.
pub fn test_standard<T: Scalar>(bundle: &ModelBundle<T>, images: &[LabeledImage<T>]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let classes = bundle
        .config()
        .num_classes
        .ok_or_else(|| Error::Config("model has no supervised classification head".into()))?;
    if let Some(bad) = images.iter().find(|i| i.class_id >= classes) {
        return Err(Error::InvalidArgument(format!(
            "test label {} outside the classifier's {classes} classes ({})",
            bad.class_id, bad.source_path
        )));
    }
    let predictions = classify(bundle, images)?;
    let correct = predictions.iter().zip(images).filter(|(p, i)| **p == i.class_id).count();
    Ok(100.0 * correct as f64 / images.len() as f64)
}

pub fn standard_report<T: Scalar>(bundle: &ModelBundle<T>, images: &[LabeledImage<T>]) -> Result<EvalReport> {
    let accuracy = test_standard(bundle, images)?;
    Ok(EvalReport {
        protocol: Protocol::Standard,
        n_way: None,
        k_shot: None,
        m_query: None,
        n_episodes: None,
        seed: None,
        per_episode_accuracies: Vec::new(),
        mean_accuracy: accuracy,
        ci95: 0.0,
        ci95_population: 0.0,
        std_kind: "none".into(),
        config: serde_json::Value::Null,
        checkpoint_id: None,
    })
}

// ---------------------------------------------------------------- saliency

/// Anything that can differentiate a class logit w.r.t. its input.
pub trait InputGradient<T: Scalar> {
    /// `d logit[class] / d image`, laid out like the image (HWC).
    fn logit_input_gradient(&self, image: &ImageTensor<T>, class: usize) -> Result<Vec<T>>;
}

impl<T: Scalar> InputGradient<T> for ModelBundle<T> {
    fn logit_input_gradient(&self, image: &ImageTensor<T>, class: usize) -> Result<Vec<T>> {
        let pass = self.supervised_pass_eval(std::iter::once(image))?;
        if class >= pass.logits.cols {
            return Err(Error::InvalidArgument(format!(
                "class {class} outside the classifier's {} classes",
                pass.logits.cols
            )));
        }
        let mut d = Matrix::zeros(1, pass.logits.cols);
        d.data[class] = T::one();
        let mut grads: Grads<T> = self.zero_grads();
        let dx = self
            .head_backward(&pass, &d, &mut grads, true)
            .expect("input gradient requested");
        Ok(dx.item_hwc(0))
    }
}

/// `logits = W x + b` on the flattened HWC image.
#[derive(Debug, Clone)]
pub struct LinearProbe<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn logits(&self, image: &ImageTensor<T>) -> Result<Vec<T>> {
        if image.pixels().len() != self.weights.cols {
            return Err(Error::Shape(format!(
                "probe expects {} inputs, image has {}",
                self.weights.cols,
                image.pixels().len()
            )));
        }
        Ok((0..self.weights.rows)
            .map(|r| {
                self.weights.row(r).iter().zip(image.pixels()).map(|(&w, &x)| w * x).sum::<T>() + self.bias[r]
            })
            .collect())
    }
}

impl<T: Scalar> InputGradient<T> for LinearProbe<T> {
    fn logit_input_gradient(&self, image: &ImageTensor<T>, class: usize) -> Result<Vec<T>> {
        if image.pixels().len() != self.weights.cols {
            return Err(Error::Shape(format!(
                "probe expects {} inputs, image has {}",
                self.weights.cols,
                image.pixels().len()
            )));
        }
        if class >= self.weights.rows {
            return Err(Error::InvalidArgument(format!("class {class} outside 0..{}", self.weights.rows)));
        }
        Ok(self.weights.row(class).to_vec())
    }
}

/// Per-pixel gradient magnitude scaled to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub source: String,
    pub model_id: String,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([(self.get(y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    /// Writes an 8-bit greyscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads a map written by [`save_png`](Self::save_png); values are
    /// quantised to multiples of 1/255.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .into_luma8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            values: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            source: path.display().to_string(),
            model_id: String::new(),
        })
    }
}

/// Channel-wise L2 norm of a HWC gradient, min-max normalised per image.
/// An identically zero gradient gives an all-zero map and a constant
/// non-zero magnitude an all-one map.
pub fn saliency_from_gradient<T: Scalar>(gradient: &[T], height: usize, width: usize, channels: usize) -> Result<Vec<f64>> {
    if gradient.len() != height * width * channels || channels == 0 {
        return Err(Error::Shape(format!(
            "gradient of length {} for a {height}x{width}x{channels} image",
            gradient.len()
        )));
    }
    let mags: Vec<f64> = gradient
        .chunks_exact(channels)
        .map(|px| px.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt())
        .collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![0.0; mags.len()]);
    }
    let min = mags.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(vec![1.0; mags.len()]);
    }
    Ok(mags.iter().map(|m| (m - min) / (max - min)).collect())
}

pub fn saliency<T: Scalar, M: InputGradient<T> + ?Sized>(
    model: &M,
    image: &ImageTensor<T>,
    true_class: usize,
) -> Result<SaliencyMap> {
    let g = model.logit_input_gradient(image, true_class)?;
    Ok(SaliencyMap {
        height: image.height(),
        width: image.width(),
        values: saliency_from_gradient(&g, image.height(), image.width(), image.channels())?,
        source: String::new(),
        model_id: String::new(),
    })
}
