use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};

use crate::data::filename::{BiopsyRecord, Magnification};
use crate::data::manifest::Manifest;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Which label a stratification or balancing step groups records by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassKey {
    Tumor,
    Subtype,
}

impl ClassKey {
    pub fn of(self, r: &BiopsyRecord) -> usize {
        match self {
            ClassKey::Tumor => r.class.index(),
            ClassKey::Subtype => r.subtype.index(),
        }
    }
}

fn group(m: &Manifest, key: ClassKey) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        groups.entry(key.of(r)).or_default().push(i);
    }
    groups
}

fn select(m: &Manifest, keep: &BTreeSet<usize>) -> Manifest {
    Manifest {
        records: keep.iter().map(|&i| m.records[i].clone()).collect(),
        source: m.source.clone(),
    }
}

/// Partitions by magnification. All four levels are present in the result.
pub fn split_by_magnification(m: &Manifest) -> BTreeMap<Magnification, Manifest> {
    let mut out: BTreeMap<Magnification, Manifest> = Magnification::ALL
        .into_iter()
        .map(|mag| {
            (
                mag,
                Manifest {
                    records: Vec::new(),
                    source: m.source.clone(),
                },
            )
        })
        .collect();
    for r in &m.records {
        out.get_mut(&r.magnification)
            .expect("every magnification has a bucket")
            .records
            .push(r.clone());
    }
    out
}

/// Down-samples every class above `target` to exactly `target` records,
/// uniformly without replacement. Smaller classes pass through. Relative
/// order of the surviving records is unchanged.
pub fn balance_classes(m: &Manifest, target: usize, key: ClassKey, seed: u64) -> Result<Manifest> {
    if target == 0 {
        return Err(Error::config("balance target must be at least 1"));
    }
    let mut rng = rng::stream(seed, Stream::Balance);
    let mut keep = BTreeSet::new();
    for members in group(m, key).values() {
        if members.len() <= target {
            keep.extend(members.iter().copied());
        } else {
            keep.extend(
                index::sample(&mut rng, members.len(), target)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    Ok(select(m, &keep))
}

/// Per class, `floor(n * fraction)` records go to validation after a seeded
/// shuffle. Classes with fewer than two records stay entirely in training.
pub fn stratified_split(
    m: &Manifest,
    fraction: f64,
    key: ClassKey,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "validation fraction {fraction} must be in (0, 1)"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let mut val = BTreeSet::new();
    for (class, members) in group(m, key) {
        if members.len() < 2 {
            log::warn!(
                "class {class} has {} record(s); keeping it in the training split",
                members.len()
            );
            continue;
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let take = (members.len() as f64 * fraction).floor() as usize;
        val.extend(shuffled.into_iter().take(take));
    }
    let train: BTreeSet<usize> = (0..m.len()).filter(|i| !val.contains(i)).collect();
    Ok((select(m, &train), select(m, &val)))
}

/// Patient IDs that appear in both splits.
pub fn patient_leakage(train: &Manifest, val: &Manifest) -> Vec<String> {
    let a: BTreeSet<&str> = train.records.iter().map(|r| r.patient_id.as_str()).collect();
    let b: BTreeSet<&str> = val.records.iter().map(|r| r.patient_id.as_str()).collect();
    a.intersection(&b).map(|s| s.to_string()).collect()
}
