use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::loader::LabeledImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One N-way K-shot task. Support and query are stored class-major in the
/// order of the local class index.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub support: Vec<LabeledImage<T>>,
    pub query: Vec<LabeledImage<T>>,
    /// Global class id -> local index in `0..n_way`.
    pub class_map: BTreeMap<usize, usize>,
}

impl<T: Scalar> Episode<T> {
    pub fn support_labels(&self) -> Vec<usize> {
        self.local_labels(&self.support)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.local_labels(&self.query)
    }

    fn local_labels(&self, items: &[LabeledImage<T>]) -> Vec<usize> {
        items.iter().map(|i| self.class_map[&i.class_id]).collect()
    }

    /// Support followed by query; the image set shared with the
    /// self-supervised branch.
    pub fn all_images(&self) -> impl Iterator<Item = &LabeledImage<T>> {
        self.support.iter().chain(&self.query)
    }
}

/// Class-indexed view over a list of images for repeated episode draws.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a, T> {
    images: &'a [LabeledImage<T>],
    by_class: BTreeMap<usize, Vec<usize>>,
    class_names: Option<&'a [String]>,
}

impl<'a, T: Scalar> EpisodeSampler<'a, T> {
    pub fn new(images: &'a [LabeledImage<T>]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            by_class.entry(img.class_id).or_default().push(i);
        }
        Self {
            images,
            by_class,
            class_names: None,
        }
    }

    /// Uses `names[class_id]` in error messages.
    pub fn with_class_names(mut self, names: &'a [String]) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    fn class_label(&self, id: usize) -> String {
        self.class_names
            .and_then(|n| n.get(id).cloned())
            .unwrap_or_else(|| format!("class {id}"))
    }

    /// Fails unless every class can supply `per_class` images.
    pub fn check_geometry(&self, n_way: usize, per_class: usize) -> Result<()> {
        if self.by_class.len() < n_way {
            return Err(Error::TooFewClasses {
                needed: n_way,
                available: self.by_class.len(),
            });
        }
        for (&id, members) in &self.by_class {
            if members.len() < per_class {
                return Err(Error::InsufficientImages {
                    class: self.class_label(id),
                    needed: per_class,
                    available: members.len(),
                });
            }
        }
        Ok(())
    }

    /// Draws N classes uniformly, then K + M distinct images per class
    /// without replacement.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n_way: usize,
        k_shot: usize,
        m_query: usize,
        rng: &mut R,
    ) -> Result<Episode<T>> {
        if n_way == 0 || k_shot == 0 || m_query == 0 {
            return Err(Error::InvalidArgument(
                "episode needs n_way, k_shot and m_query >= 1".into(),
            ));
        }
        if self.by_class.len() < n_way {
            return Err(Error::TooFewClasses {
                needed: n_way,
                available: self.by_class.len(),
            });
        }
        let mut classes: Vec<usize> = self.by_class.keys().copied().collect();
        let (chosen, _) = classes.partial_shuffle(rng, n_way);
        let chosen = chosen.to_vec();

        let per_class = k_shot + m_query;
        let mut support = Vec::with_capacity(n_way * k_shot);
        let mut query = Vec::with_capacity(n_way * m_query);
        let mut class_map = BTreeMap::new();
        for (local, &class) in chosen.iter().enumerate() {
            let mut members = self.by_class[&class].clone();
            if members.len() < per_class {
                return Err(Error::InsufficientImages {
                    class: self.class_label(class),
                    needed: per_class,
                    available: members.len(),
                });
            }
            let (picked, _) = members.partial_shuffle(rng, per_class);
            support.extend(picked[..k_shot].iter().map(|&i| self.images[i].clone()));
            query.extend(picked[k_shot..].iter().map(|&i| self.images[i].clone()));
            class_map.insert(class, local);
        }
        Ok(Episode {
            n_way,
            k_shot,
            m_query,
            support,
            query,
            class_map,
        })
    }
}

/// One-shot convenience wrapper around [`EpisodeSampler::sample`].
pub fn sample_episode<T: Scalar, R: Rng + ?Sized>(
    images: &[LabeledImage<T>],
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    rng: &mut R,
) -> Result<Episode<T>> {
    EpisodeSampler::new(images).sample(n_way, k_shot, m_query, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::ImageTensor;
    use crate::rng::substream;
    use std::collections::BTreeSet;

    fn toy(classes: usize, per_class: usize) -> Vec<LabeledImage<f32>> {
        (0..classes)
            .flat_map(|c| {
                (0..per_class).map(move |i| LabeledImage {
                    image: ImageTensor::filled(2, 2, 3, 0.5),
                    class_id: c,
                    source_path: format!("c{c}/{i}"),
                })
            })
            .collect()
    }

    #[test]
    fn full_size_geometry() {
        let images = toy(5, 25);
        let ep = sample_episode(&images, 5, 5, 16, &mut substream(0, "t", 0)).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 80);
        let s: BTreeSet<_> = ep.support.iter().map(|i| &i.source_path).collect();
        assert!(ep.query.iter().all(|q| !s.contains(&q.source_path)));
        assert_eq!(ep.class_map.len(), 5);
    }

    #[test]
    fn forced_partition() {
        let images = toy(1, 2);
        let ep = sample_episode(&images, 1, 1, 1, &mut substream(0, "t", 0)).unwrap();
        assert_ne!(ep.support[0].source_path, ep.query[0].source_path);
        assert_eq!(ep.support_labels(), vec![0]);
        assert_eq!(ep.query_labels(), vec![0]);
    }

    #[test]
    fn too_few_classes_or_images() {
        let images = toy(3, 30);
        assert!(matches!(
            sample_episode(&images, 5, 5, 16, &mut substream(0, "t", 0)),
            Err(Error::TooFewClasses { .. })
        ));
        let mut images = toy(5, 30);
        images.retain(|i| i.class_id != 2 || i.source_path.ends_with("/0"));
        let names: Vec<String> = (0..5).map(|c| format!("species{c}")).collect();
        let sampler = EpisodeSampler::new(&images).with_class_names(&names);
        let err = sampler.sample(5, 5, 16, &mut substream(0, "t", 0)).unwrap_err();
        assert!(err.to_string().contains("species2"), "{err}");
    }

    #[test]
    fn same_stream_same_episode() {
        let images = toy(8, 30);
        let a = sample_episode(&images, 5, 5, 16, &mut substream(9, "t", 0)).unwrap();
        let b = sample_episode(&images, 5, 5, 16, &mut substream(9, "t", 0)).unwrap();
        let ids = |e: &Episode<f32>| e.all_images().map(|i| i.source_path.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }
}
