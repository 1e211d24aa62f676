//! Leakage-free train/dev/test splitting by whole clusters, plus pair,
//! triplet and retrieval-group generation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Cluster, ClusterSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One value per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerSplit<T> {
    pub train: T,
    pub dev: T,
    pub test: T,
}

impl<T> PerSplit<T> {
    pub fn get(&self, split: Split) -> &T {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut T {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, dev: f64, test: f64) -> Result<Self> {
        let ratios = SplitRatios { train, dev, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::Config(format!("split ratios must be positive, got {all:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {all:?}")));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad ratios `{s}`: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(Error::Config(format!("expected three ratios, got `{s}`"))),
        }
    }
}

/// Per-split upper bounds on the number of duplicate pairs. `None` means
/// uncapped. Non-duplicate counts follow from balance or the target ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub train: Option<usize>,
    pub dev: Option<usize>,
    pub test: Option<usize>,
}

impl Caps {
    pub fn get(&self, split: Split) -> Option<usize> {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

impl FromStr for Caps {
    type Err = Error;

    /// Parses `train=6615,dev=258,test=258`; omitted splits stay uncapped.
    fn from_str(s: &str) -> Result<Self> {
        let mut caps = Caps::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad cap `{part}`")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad cap `{part}`: {e}")))?;
            match key.trim().parse::<Split>()? {
                Split::Train => caps.train = Some(value),
                Split::Dev => caps.dev = Some(value),
                Split::Test => caps.test = Some(value),
            }
        }
        Ok(caps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub caps: Caps,
    /// Fraction of duplicates among dev/test pairs.
    pub target_dup_ratio: f64,
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.target_dup_ratio;
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!("target dup ratio must be in (0, 1], got {r}")));
        }
        Ok(())
    }
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            caps: Caps::default(),
            target_dup_ratio: 0.1564,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Indexed by cluster id.
    pub clusters: Vec<Split>,
    pub independents: BTreeMap<String, Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Duplicate,
    NonDuplicate,
}

impl PairLabel {
    pub fn as_target(self) -> f64 {
        match self {
            PairLabel::Duplicate => 1.0,
            PairLabel::NonDuplicate => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub bug_a: String,
    pub bug_b: String,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletExample {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalGroup {
    pub query: String,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub caps: Caps,
    pub target_dup_ratio: f64,
    pub assignment: Assignment,
    pub pairs: PerSplit<Vec<LabeledPair>>,
    pub triplets: Vec<TripletExample>,
    pub groups: PerSplit<Vec<RetrievalGroup>>,
}

impl SplitManifest {
    pub fn clusters_in<'a>(&'a self, set: &'a ClusterSet, split: Split) -> impl Iterator<Item = &'a Cluster> {
        set.clusters
            .iter()
            .filter(move |c| self.assignment.clusters.get(c.id) == Some(&split))
    }

    pub fn independents_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignment
            .independents
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
    }

    /// All bug ids of a split: cluster members (cluster order) then independents.
    pub fn bugs_in<'a>(&'a self, set: &'a ClusterSet, split: Split) -> Vec<&'a str> {
        self.clusters_in(set, split)
            .flat_map(|c| c.members.iter().map(String::as_str))
            .chain(self.independents_in(split))
            .collect()
    }

    /// Checks that the assignment covers `set` exactly.
    pub fn check_against(&self, set: &ClusterSet) -> Result<()> {
        if self.assignment.clusters.len() != set.clusters.len() {
            return Err(Error::Artifact(format!(
                "manifest assigns {} clusters, cluster set has {}",
                self.assignment.clusters.len(),
                set.clusters.len()
            )));
        }
        if self.assignment.independents.len() != set.independents.len()
            || set
                .independents
                .iter()
                .any(|id| !self.assignment.independents.contains_key(id))
        {
            return Err(Error::Artifact("manifest independents do not match cluster set".into()));
        }
        Ok(())
    }
}

/// Number of unordered duplicate pairs inside a cluster of `n` bugs.
pub fn count_dup_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Non-duplicate pairs needed so that `dup / (dup + nondup)` hits `ratio`.
pub fn nondup_count_for_ratio(dup: usize, ratio: f64) -> usize {
    (dup as f64 * (1.0 - ratio) / ratio).round() as usize
}

/// Number of cross-cluster (non-duplicate) pairs available among bugs
/// grouped into clusters of the given sizes plus `independents` singletons.
pub fn nondup_pool_size(cluster_sizes: &[usize], independents: usize) -> usize {
    let n: usize = cluster_sizes.iter().sum::<usize>() + independents;
    count_dup_pairs(n) - cluster_sizes.iter().map(|&s| count_dup_pairs(s)).sum::<usize>()
}

/// Assigns whole clusters (and independents) to train/dev/test.
///
/// Clusters are shuffled, then walked in order; a cluster goes to the split
/// whose cumulative share of duplicate-bug mass contains the cluster's
/// midpoint. Each split is guaranteed at least one cluster.
pub fn split_clusters(set: &ClusterSet, ratios: SplitRatios, seed: u64) -> Result<SplitManifest> {
    ratios.validate()?;
    if set.clusters.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 clusters to populate train/dev/test, got {}",
            set.clusters.len()
        )));
    }

    let mut order: Vec<usize> = (0..set.clusters.len()).collect();
    order.shuffle(&mut rng::substream(seed, rng::SPLIT));

    let total: usize = set.clusters.iter().map(|c| c.members.len()).sum();
    let train_end = ratios.train * total as f64;
    let dev_end = (ratios.train + ratios.dev) * total as f64;

    let mut assigned = vec![Split::Train; set.clusters.len()];
    let mut by_split: PerSplit<Vec<usize>> = PerSplit::default();
    let mut cumulative = 0usize;
    for &cid in &order {
        let size = set.clusters[cid].members.len();
        let midpoint = cumulative as f64 + size as f64 / 2.0;
        let split = if midpoint < train_end {
            Split::Train
        } else if midpoint < dev_end {
            Split::Dev
        } else {
            Split::Test
        };
        assigned[cid] = split;
        by_split.get_mut(split).push(cid);
        cumulative += size;
    }

    for split in Split::ALL {
        if !by_split.get(split).is_empty() {
            continue;
        }
        let donor = Split::ALL
            .into_iter()
            .max_by_key(|s| by_split.get(*s).len())
            .expect("three splits");
        let cid = by_split.get_mut(donor).pop().expect("donor has clusters");
        assigned[cid] = split;
        by_split.get_mut(split).push(cid);
    }

    let mut independents = set.independents.clone();
    independents.shuffle(&mut rng::substream(seed, rng::SPLIT_INDEPENDENTS));
    let n = independents.len() as f64;
    let cut_train = (ratios.train * n).round() as usize;
    let cut_dev = ((ratios.train + ratios.dev) * n).round() as usize;
    let independents = independents
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < cut_train {
                Split::Train
            } else if i < cut_dev {
                Split::Dev
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();

    Ok(SplitManifest {
        seed,
        ratios,
        caps: Caps::default(),
        target_dup_ratio: PairConfig::default().target_dup_ratio,
        assignment: Assignment {
            clusters: assigned,
            independents,
        },
        pairs: PerSplit::default(),
        triplets: Vec::new(),
        groups: PerSplit::default(),
    })
}

/// Generates labeled pairs for every split.
///
/// Duplicate pairs are all within-cluster pairs, subsampled to the cap when
/// one is set. Non-duplicate pairs are drawn uniformly without replacement
/// from cross-cluster pairs (independents included) of the same split:
/// as many as the duplicates in train, and enough to reach the target
/// duplicate ratio in dev and test.
pub fn generate_pairs(
    manifest: &SplitManifest,
    set: &ClusterSet,
    config: &PairConfig,
    seed: u64,
) -> Result<PerSplit<Vec<LabeledPair>>> {
    config.validate()?;
    manifest.check_against(set)?;
    if let Some(split) = Split::ALL.into_iter().find(|s| manifest.clusters_in(set, *s).next().is_none()) {
        return Err(Error::Split {
            split: split.to_string(),
            message: "no duplicate clusters of size >= 2".into(),
        });
    }
    let mut out = PerSplit::default();
    for split in Split::ALL {
        *out.get_mut(split) = split_pairs(manifest, set, config, seed, split)?;
    }
    Ok(out)
}

fn split_pairs(
    manifest: &SplitManifest,
    set: &ClusterSet,
    config: &PairConfig,
    seed: u64,
    split: Split,
) -> Result<Vec<LabeledPair>> {
    let clusters: Vec<&Cluster> = manifest.clusters_in(set, split).collect();
    if clusters.is_empty() {
        return Err(Error::Split {
            split: split.to_string(),
            message: "no duplicate clusters of size >= 2".into(),
        });
    }

    let mut dups: Vec<(&str, &str)> = clusters
        .iter()
        .flat_map(|c| {
            c.members.iter().enumerate().flat_map(move |(i, a)| {
                c.members[i + 1..].iter().map(move |b| (a.as_str(), b.as_str()))
            })
        })
        .collect();
    if let Some(cap) = config.caps.get(split) {
        if cap < dups.len() {
            let mut rng = rng::substream(seed, &format!("{}/{split}", rng::DUP_CAP));
            let mut keep = index::sample(&mut rng, dups.len(), cap).into_vec();
            keep.sort_unstable();
            dups = keep.into_iter().map(|i| dups[i]).collect();
        }
    }

    let needed = match split {
        Split::Train => dups.len(),
        _ => nondup_count_for_ratio(dups.len(), config.target_dup_ratio),
    };

    // members laid out cluster by cluster, then independents; group None = singleton
    let mut members: Vec<&str> = Vec::new();
    let mut group: Vec<Option<usize>> = Vec::new();
    for c in &clusters {
        for m in &c.members {
            members.push(m);
            group.push(Some(c.id));
        }
    }
    for id in manifest.independents_in(split) {
        members.push(id);
        group.push(None);
    }
    let sizes: Vec<usize> = clusters.iter().map(|c| c.members.len()).collect();
    let independents = members.len() - sizes.iter().sum::<usize>();
    let pool = nondup_pool_size(&sizes, independents);
    if needed > pool {
        return Err(Error::Split {
            split: split.to_string(),
            message: format!("needs {needed} non-duplicate pairs but only {pool} exist"),
        });
    }

    let distinct = |i: usize, j: usize| group[i].is_none() || group[i] != group[j];
    let mut rng = rng::substream(seed, &format!("{}/{split}", rng::NEGATIVES));
    let chosen: BTreeSet<(usize, usize)> = if needed * 2 >= pool {
        let mut eligible = Vec::with_capacity(pool);
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                if distinct(i, j) {
                    eligible.push((i, j));
                }
            }
        }
        index::sample(&mut rng, eligible.len(), needed)
            .into_iter()
            .map(|k| eligible[k])
            .collect()
    } else {
        let mut chosen = BTreeSet::new();
        while chosen.len() < needed {
            let i = rng.random_range(0..members.len());
            let j = rng.random_range(0..members.len());
            if i != j && distinct(i, j) {
                chosen.insert((i.min(j), i.max(j)));
            }
        }
        chosen
    };

    let mut pairs: Vec<LabeledPair> = dups
        .into_iter()
        .map(|(a, b)| LabeledPair {
            bug_a: a.to_string(),
            bug_b: b.to_string(),
            label: PairLabel::Duplicate,
        })
        .collect();
    pairs.extend(chosen.into_iter().map(|(i, j)| LabeledPair {
        bug_a: members[i].to_string(),
        bug_b: members[j].to_string(),
        label: PairLabel::NonDuplicate,
    }));
    Ok(pairs)
}

/// One triplet per ordered train duplicate pair, with a negative drawn
/// uniformly from train bugs outside the anchor's cluster.
pub fn generate_triplets(
    manifest: &SplitManifest,
    set: &ClusterSet,
    seed: u64,
) -> Result<Vec<TripletExample>> {
    let clusters: Vec<&Cluster> = manifest.clusters_in(set, Split::Train).collect();
    let mut bugs: Vec<&str> = Vec::new();
    let mut span: HashMap<&str, (usize, usize)> = HashMap::new();
    for c in &clusters {
        let start = bugs.len();
        bugs.extend(c.members.iter().map(String::as_str));
        for m in &c.members {
            span.insert(m, (start, c.members.len()));
        }
    }
    bugs.extend(manifest.independents_in(Split::Train));

    let mut rng = rng::substream(seed, rng::TRIPLETS);
    let mut triplets = Vec::new();
    let dup_pairs = manifest
        .pairs
        .train
        .iter()
        .filter(|p| p.label == PairLabel::Duplicate);
    for pair in dup_pairs {
        for (anchor, positive) in [(&pair.bug_a, &pair.bug_b), (&pair.bug_b, &pair.bug_a)] {
            let &(start, len) = span.get(anchor.as_str()).ok_or_else(|| Error::Split {
                split: "train".into(),
                message: format!("duplicate pair member `{anchor}` is not a train cluster member"),
            })?;
            let eligible = bugs.len() - len;
            if eligible == 0 {
                return Err(Error::Split {
                    split: "train".into(),
                    message: "no eligible negatives for triplets".into(),
                });
            }
            let mut k = rng.random_range(0..eligible);
            if k >= start {
                k += len;
            }
            triplets.push(TripletExample {
                anchor: anchor.clone(),
                positive: positive.clone(),
                negative: bugs[k].to_string(),
            });
        }
    }
    Ok(triplets)
}

/// `[query: relevant...]` groups for every clustered bug of a split.
pub fn generate_retrieval_groups(
    manifest: &SplitManifest,
    set: &ClusterSet,
    split: Split,
) -> Vec<RetrievalGroup> {
    manifest
        .clusters_in(set, split)
        .flat_map(|c| {
            c.members.iter().map(move |q| RetrievalGroup {
                query: q.clone(),
                relevant: c.members.iter().filter(|m| *m != q).cloned().collect(),
            })
        })
        .collect()
}

/// Runs every splitting stage and returns a complete manifest.
pub fn build_manifest(
    set: &ClusterSet,
    ratios: SplitRatios,
    config: &PairConfig,
    seed: u64,
) -> Result<SplitManifest> {
    let mut manifest = split_clusters(set, ratios, seed)?;
    manifest.caps = config.caps;
    manifest.target_dup_ratio = config.target_dup_ratio;
    manifest.pairs = generate_pairs(&manifest, set, config, seed)?;
    manifest.triplets = generate_triplets(&manifest, set, seed)?;
    for split in Split::ALL {
        *manifest.groups.get_mut(split) = generate_retrieval_groups(&manifest, set, split);
    }
    Ok(manifest)
}
