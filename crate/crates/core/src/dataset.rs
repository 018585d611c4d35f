//! Slide-level cross-validation folds, class balancing and flip augmentation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imgproc::RgbImage;
use crate::tiling::ClassLabel;

/// Share of the non-test slides held out for model selection.
pub const VALIDATION_SHARE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            _ => Err(invalid(format!("unknown fold role {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_wsis: Vec<String>,
    pub val_wsis: Vec<String>,
    pub test_wsis: Vec<String>,
}

impl FoldSplit {
    pub fn role_of(&self, wsi_id: &str) -> Option<Role> {
        let has = |v: &[String]| v.iter().any(|w| w == wsi_id);
        if has(&self.test_wsis) {
            Some(Role::Test)
        } else if has(&self.val_wsis) {
            Some(Role::Val)
        } else if has(&self.train_wsis) {
            Some(Role::Train)
        } else {
            None
        }
    }
}

/// Derives an independent stream seed from a base seed and a salt.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffles the slides, cuts them into `k` contiguous folds whose sizes
/// differ by at most one, and holds out a seeded 20% of each fold's
/// remaining slides for validation.
pub fn split_folds(wsi_ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(invalid("k-fold split needs k >= 2"));
    }
    if wsi_ids.len() < k {
        return Err(invalid(format!("{} slides cannot fill {k} folds", wsi_ids.len())));
    }
    let mut ids = wsi_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds: Vec<Vec<String>> = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(ids[start..start + len].to_vec());
        start += len;
    }

    let mut splits = Vec::with_capacity(k);
    for (i, test) in folds.iter().enumerate() {
        let mut rest: Vec<String> =
            folds.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, f)| f.clone()).collect();
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, i as u64 + 1)));
        let n_val = if rest.len() < 2 {
            0
        } else {
            ((rest.len() as f64 * VALIDATION_SHARE).round() as usize).clamp(1, rest.len() - 1)
        };
        let train = rest.split_off(n_val);
        splits.push(FoldSplit { fold_index: i, train_wsis: train, val_wsis: rest, test_wsis: test.clone() });
    }
    Ok(splits)
}

/// Median of the per-class counts (lower median for an even class count).
pub fn balance_target(counts: &[usize]) -> usize {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    sorted[(sorted.len() - 1) / 2]
}

/// Resamples every class to the median class count: larger classes are
/// subsampled without replacement, smaller ones keep all their items plus
/// duplicates drawn with replacement. The output is shuffled.
pub fn balance_classes<T: Clone>(items: &[T], label_of: impl Fn(&T) -> ClassLabel, seed: u64) -> Result<Vec<T>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ClassLabel::COUNT];
    for (i, item) in items.iter().enumerate() {
        by_class[label_of(item).index()].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(invalid(format!("cannot balance: class {} has no samples", ClassLabel::from_index(c).unwrap())));
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let target = balance_target(&counts);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(target * ClassLabel::COUNT);
    for members in &mut by_class {
        if members.len() >= target {
            let (chosen, _) = members.partial_shuffle(&mut rng, target);
            picked.extend_from_slice(chosen);
        } else {
            let n = members.len();
            picked.extend_from_slice(members);
            picked.extend((n..target).map(|_| members[rng.gen_range(0..n)]));
        }
    }
    picked.shuffle(&mut rng);
    Ok(picked.into_iter().map(|i| items[i].clone()).collect())
}

/// Which flips to apply to one presentation of a tile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlipBits {
    /// Mirror left/right.
    pub horizontal: bool,
    /// Mirror top/bottom.
    pub vertical: bool,
}

impl FlipBits {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self { horizontal: rng.gen_bool(0.5), vertical: rng.gen_bool(0.5) }
    }
}

pub fn augment_flip(tile: &RgbImage, bits: FlipBits) -> RgbImage {
    if !bits.horizontal && !bits.vertical {
        return tile.clone();
    }
    let (w, h) = (tile.width(), tile.height());
    let mut out = tile.clone();
    for y in 0..h {
        let sy = if bits.vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if bits.horizontal { w - 1 - x } else { x };
            out.set_pixel(x, y, tile.pixel(sx, sy));
        }
    }
    out
}
