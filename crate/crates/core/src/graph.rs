//! Transitive duplicate clusters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Disjoint-set forest with path compression and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Sorted ascending, at least two members.
    pub members: Vec<String>,
}

/// Duplicate clusters plus the bugs with no duplicate at all.
///
/// Clusters are ordered by their smallest member and `id` equals the
/// position in that order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub independents: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ClusterFile {
    clusters: Vec<Vec<String>>,
    independents: Vec<String>,
}

impl Serialize for ClusterSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ClusterFile {
            clusters: self.clusters.iter().map(|c| c.members.clone()).collect(),
            independents: self.independents.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClusterSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = ClusterFile::deserialize(d)?;
        ClusterSet::from_groups(file.clusters, file.independents).map_err(serde::de::Error::custom)
    }
}

impl ClusterSet {
    /// Canonicalizes raw groups and checks the partition invariants.
    pub fn from_groups(groups: Vec<Vec<String>>, mut independents: Vec<String>) -> Result<Self> {
        let mut groups: Vec<Vec<String>> = groups
            .into_iter()
            .map(|mut g| {
                g.sort();
                g
            })
            .collect();
        if let Some(g) = groups.iter().find(|g| g.len() < 2) {
            return Err(Error::Artifact(format!("cluster {g:?} has fewer than two members")));
        }
        groups.sort();
        independents.sort();
        let set = ClusterSet {
            clusters: groups
                .into_iter()
                .enumerate()
                .map(|(id, members)| Cluster { id, members })
                .collect(),
            independents,
        };
        let mut seen = std::collections::HashSet::new();
        for id in set.all_bugs() {
            if !seen.insert(id) {
                return Err(Error::Artifact(format!("bug `{id}` appears twice in cluster set")));
            }
        }
        Ok(set)
    }

    pub fn all_bugs(&self) -> impl Iterator<Item = &str> {
        self.clusters
            .iter()
            .flat_map(|c| c.members.iter())
            .chain(self.independents.iter())
            .map(String::as_str)
    }

    pub fn bug_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum::<usize>() + self.independents.len()
    }

    /// Maps every clustered bug to its cluster id. Independents are absent.
    pub fn membership(&self) -> HashMap<&str, usize> {
        self.clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (m.as_str(), c.id)))
            .collect()
    }
}

pub fn build_clusters(corpus: &Corpus) -> ClusterSet {
    let reports = corpus.reports();
    let index: HashMap<&str, usize> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| (r.bug_id.as_str(), i))
        .collect();
    let mut uf = UnionFind::new(reports.len());
    let mut linked = vec![false; reports.len()];
    for (a, b) in corpus.relations() {
        let (ia, ib) = (index[a.as_str()], index[b.as_str()]);
        linked[ia] = true;
        linked[ib] = true;
        uf.union(ia, ib);
    }
    let mut by_root: HashMap<usize, Vec<String>> = HashMap::new();
    let mut independents = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        if linked[i] {
            by_root.entry(uf.find(i)).or_default().push(r.bug_id.clone());
        } else {
            independents.push(r.bug_id.clone());
        }
    }
    ClusterSet::from_groups(by_root.into_values().collect(), independents)
        .expect("union-find components form a partition")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub count: usize,
    pub mean_size: f64,
    /// Set when there are no clusters and `mean_size` is a placeholder 0.
    pub empty: bool,
}

pub fn cluster_stats(set: &ClusterSet) -> ClusterStats {
    let count = set.clusters.len();
    if count == 0 {
        return ClusterStats {
            count,
            mean_size: 0.0,
            empty: true,
        };
    }
    let total: usize = set.clusters.iter().map(|c| c.members.len()).sum();
    ClusterStats {
        count,
        mean_size: total as f64 / count as f64,
        empty: false,
    }
}
