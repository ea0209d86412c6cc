use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loader::LabeledImage;
use crate::error::{Error, Result};
use crate::rng;

/// Disjoint base / validation / novel class partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub val: Vec<usize>,
    pub novel: Vec<usize>,
}

/// Split file contents: class names per partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub base: Vec<String>,
    pub val: Vec<String>,
    pub novel: Vec<String>,
}

/// Partition sizes for `n` classes: floor of each proportional share, then
/// one extra class per part (base, then val, then novel) until all are used.
pub fn split_sizes(n: usize, ratio: [u32; 3]) -> Result<[usize; 3]> {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("split ratio must not be all zero".into()));
    }
    let mut sizes = ratio.map(|r| (n as u64 * r as u64 / total) as usize);
    let mut remainder = n - sizes.iter().sum::<usize>();
    for (size, &r) in sizes.iter_mut().zip(&ratio) {
        if remainder == 0 {
            break;
        }
        if r > 0 {
            *size += 1;
            remainder -= 1;
        }
    }
    debug_assert_eq!(remainder, 0);
    Ok(sizes)
}

/// Shuffles `class_ids` with the `split` stream of `seed` and cuts it into
/// base / val / novel following [`split_sizes`].
pub fn split_classes(class_ids: &[usize], ratio: [u32; 3], seed: u64) -> Result<ClassSplit> {
    let unique: BTreeSet<usize> = class_ids.iter().copied().collect();
    if unique.len() != class_ids.len() {
        return Err(Error::InvalidArgument("duplicate class ids".into()));
    }
    if class_ids.len() < 3 {
        return Err(Error::TooFewClasses {
            needed: 3,
            available: class_ids.len(),
        });
    }
    let [nb, nv, _] = split_sizes(class_ids.len(), ratio)?;
    let mut ids: Vec<usize> = unique.into_iter().collect();
    ids.shuffle(&mut rng::substream(seed, rng::SPLIT, 0));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(ClassSplit {
        base: sorted(&ids[..nb]),
        val: sorted(&ids[nb..nb + nv]),
        novel: sorted(&ids[nb + nv..]),
    })
}

/// Image-level split for standard classification: within every class the
/// images are shuffled with the `split` stream and cut by `ratio` into
/// train / val / test, so all three parts share the label space.
pub fn split_images<T: Clone>(images: &[LabeledImage<T>], ratio: [u32; 3], seed: u64) -> Result<[Vec<LabeledImage<T>>; 3]> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        by_class.entry(img.class_id).or_default().push(i);
    }
    let mut parts: [Vec<LabeledImage<T>>; 3] = Default::default();
    for (&class, members) in &by_class {
        let mut members = members.clone();
        members.shuffle(&mut rng::substream(seed, rng::SPLIT, 1 + class as u64));
        let [a, b, _] = split_sizes(members.len(), ratio)?;
        for (k, &i) in members.iter().enumerate() {
            let part = if k < a { 0 } else if k < a + b { 1 } else { 2 };
            parts[part].push(images[i].clone());
        }
    }
    Ok(parts)
}

impl ClassSplit {
    pub fn to_file(&self, class_names: &[String]) -> SplitFile {
        let names = |ids: &[usize]| ids.iter().map(|&i| class_names[i].clone()).collect();
        SplitFile {
            base: names(&self.base),
            val: names(&self.val),
            novel: names(&self.novel),
        }
    }

    pub fn from_file(file: &SplitFile, class_names: &[String]) -> Result<Self> {
        let ids = |names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    class_names
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| Error::InvalidArgument(format!("split names unknown class `{n}`")))
                })
                .collect()
        };
        let split = ClassSplit {
            base: ids(&file.base)?,
            val: ids(&file.val)?,
            novel: ids(&file.novel)?,
        };
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.base.iter().chain(&self.val).chain(&self.novel) {
            if !seen.insert(*id) {
                return Err(Error::InvalidArgument(format!("class {id} appears in two partitions")));
            }
        }
        Ok(())
    }
}

impl SplitFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("split file", &e))
    }
}
