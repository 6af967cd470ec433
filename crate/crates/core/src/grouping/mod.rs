//! Inter-modal grouping: embed modalities in 2-D, measure distances between
//! modality centroids, and partition modalities so that each group is
//! connected under "distance < threshold" while distinct groups are at least
//! the threshold apart.

mod pca;
mod tsne;

pub use pca::pca_2d;
pub use tsne::{tsne_2d, TsneParams};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::MultiModalDataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMethod {
    Tsne,
    Pca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingVariant {
    /// Threshold-connected grouping of embedded modalities.
    Img,
    /// One group holding every modality.
    None,
    /// Uniformly random partition with as many groups as `Img` produces.
    Random,
    /// One group per modality.
    Full,
}

/// How the distance threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdPolicy {
    /// Median of the off-diagonal distances.
    Median,
    Fixed(f64),
}

impl ThresholdPolicy {
    pub fn resolve(&self, distances: &[Vec<f64>]) -> f64 {
        match *self {
            ThresholdPolicy::Fixed(v) => v,
            ThresholdPolicy::Median => {
                let mut off: Vec<f64> = distances
                    .iter()
                    .enumerate()
                    .flat_map(|(i, row)| row[i + 1..].iter().copied())
                    .collect();
                if off.is_empty() {
                    return f64::INFINITY;
                }
                off.sort_by(f64::total_cmp);
                let k = off.len();
                if k % 2 == 1 {
                    off[k / 2]
                } else {
                    (off[k / 2 - 1] + off[k / 2]) / 2.0
                }
            }
        }
    }
}

impl Serialize for ThresholdPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ThresholdPolicy::Median => s.serialize_str("median"),
            ThresholdPolicy::Fixed(v) if v.is_infinite() => s.serialize_str("inf"),
            ThresholdPolicy::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for ThresholdPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(ThresholdPolicy::Fixed(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("threshold must be > 0, got {v}"))),
            Raw::Str(s) if s == "median" => Ok(ThresholdPolicy::Median),
            Raw::Str(s) if s == "inf" => Ok(ThresholdPolicy::Fixed(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "threshold must be \"median\", \"inf\" or a positive number, got \"{s}\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub method: EmbedMethod,
    pub threshold: ThresholdPolicy,
    pub variant: GroupingVariant,
    pub sample_cap: usize,
    pub tsne: TsneParams,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            method: EmbedMethod::Tsne,
            threshold: ThresholdPolicy::Median,
            variant: GroupingVariant::Img,
            sample_cap: 200,
            tsne: TsneParams::default(),
        }
    }
}

/// One embedded sample: a z-scored channel window of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub modality: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEmbedding {
    /// Per-modality centroid of its embedded samples.
    pub centroids: Vec<[f64; 2]>,
    pub points: Vec<EmbeddedPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingResult {
    pub groups: Vec<Vec<usize>>,
    pub distance_matrix: Vec<Vec<f64>>,
    /// Per-modality 2-D coordinates the distances were measured on.
    pub embedding: Vec<[f64; 2]>,
    #[serde(with = "inf_as_null")]
    pub threshold: f64,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl GroupingResult {
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Group index of every modality.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_modalities()];
        for (g, members) in self.groups.iter().enumerate() {
            for &m in members {
                out[m] = g;
            }
        }
        out
    }

    /// Check partition validity, that every group is connected through
    /// `d < threshold` links, and that groups are at least the threshold apart.
    pub fn check_invariants(&self) -> Result<()> {
        let m = self.distance_matrix.len();
        let mut seen = vec![false; m];
        for g in &self.groups {
            for &i in g {
                if i >= m || seen[i] {
                    return Err(Error::contract(format!("modality {i} not partitioned once")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("groups do not cover every modality"));
        }
        let d = &self.distance_matrix;
        for g in &self.groups {
            // every member reachable from the first through d < threshold hops
            let mut reached = vec![false; g.len()];
            reached[0] = true;
            let mut stack = vec![0];
            while let Some(a) = stack.pop() {
                for (b, r) in reached.iter_mut().enumerate() {
                    if !*r && d[g[a]][g[b]] < self.threshold {
                        *r = true;
                        stack.push(b);
                    }
                }
            }
            if let Some(b) = reached.iter().position(|r| !r) {
                return Err(Error::contract(format!(
                    "modality {} is not connected to its group within the threshold",
                    g[b]
                )));
            }
        }
        for (a, ga) in self.groups.iter().enumerate() {
            for gb in &self.groups[a + 1..] {
                for &i in ga {
                    for &j in gb {
                        if d[i][j] < self.threshold {
                            return Err(Error::contract(format!(
                                "modalities {i} and {j} are closer than the threshold but apart"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Canonical order: members ascending, groups by smallest member.
fn canonical(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    groups.retain(|g| !g.is_empty());
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

fn zscore(row: &[f32]) -> Option<Vec<f64>> {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (sd > 1e-12 * (1.0 + mean.abs())).then(|| row.iter().map(|&v| (f64::from(v) - mean) / sd).collect())
}

/// Jointly embed up to `sample_cap` z-scored channel windows per modality
/// into 2-D; a modality's coordinate is the centroid of its points.
pub fn embed_modalities(
    ds: &MultiModalDataset,
    method: EmbedMethod,
    seed: u64,
    sample_cap: usize,
    tsne: &TsneParams,
) -> Result<ModalityEmbedding> {
    if sample_cap < 10 {
        return Err(Error::param("sample_cap must be >= 10"));
    }
    if ds.n_windows() < 2 {
        return Err(Error::param("embedding needs at least 2 windows per modality"));
    }
    let len = ds.window_len;
    let mut features = Vec::new();
    let mut owner = Vec::new();
    for (m, spec) in ds.modalities.iter().enumerate() {
        let mut candidates: Vec<usize> = (0..ds.n_windows() * spec.channels).collect();
        candidates.shuffle(&mut rng_from(seed, &[0xe3b, m as u64]));
        candidates.truncate(sample_cap);
        candidates.sort_unstable();
        let mut informative = 0;
        for &c in &candidates {
            let row = &ds.windows[m][c * len..(c + 1) * len];
            let z = zscore(row);
            informative += usize::from(z.is_some());
            features.push(z.unwrap_or_else(|| vec![0.0; len]));
            owner.push(m);
        }
        if informative == 0 {
            return Err(Error::Degenerate(format!(
                "modality `{}` is constant in every sampled window",
                spec.name
            )));
        }
    }
    let coords = match method {
        EmbedMethod::Pca => pca_2d(&features),
        EmbedMethod::Tsne => tsne_2d(&features, tsne, seed),
    };
    let m = ds.n_modalities();
    let mut sums = vec![[0.0f64; 2]; m];
    let mut counts = vec![0usize; m];
    for (&o, c) in owner.iter().zip(&coords) {
        sums[o][0] += c[0];
        sums[o][1] += c[1];
        counts[o] += 1;
    }
    let centroids = sums
        .iter()
        .zip(&counts)
        .map(|(s, &k)| [s[0] / k as f64, s[1] / k as f64])
        .collect();
    let points = owner
        .iter()
        .zip(&coords)
        .map(|(&modality, c)| EmbeddedPoint {
            modality,
            x: c[0],
            y: c[1],
        })
        .collect();
    Ok(ModalityEmbedding { centroids, points })
}

/// Euclidean distances between 2-D coordinates.
pub fn inter_modal_distances(coords: &[[f64; 2]]) -> Vec<Vec<f64>> {
    coords
        .iter()
        .map(|a| {
            coords
                .iter()
                .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .collect()
        })
        .collect()
}

fn validate_distances(d: &[Vec<f64>]) -> Result<()> {
    let m = d.len();
    for (i, row) in d.iter().enumerate() {
        if row.len() != m {
            return Err(Error::contract("distance matrix is not square"));
        }
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() || v < 0.0 {
                return Err(Error::contract(format!("distance ({i},{j}) = {v} is invalid")));
            }
            let scale = 1.0 + v.abs().max(d[j][i].abs());
            if (v - d[j][i]).abs() > 1e-12 * scale {
                return Err(Error::contract(format!("distance matrix not symmetric at ({i},{j})")));
            }
        }
        if row[i] != 0.0 {
            return Err(Error::contract(format!("distance ({i},{i}) is not zero")));
        }
    }
    Ok(())
}

/// Connected components of the graph with an edge wherever `d < threshold`.
pub fn group_by_threshold(distances: &[Vec<f64>], threshold: f64) -> Result<GroupingResult> {
    if !(threshold > 0.0) {
        return Err(Error::contract(format!("threshold must be > 0, got {threshold}")));
    }
    validate_distances(distances)?;
    let m = distances.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if distances[i][j] < threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups = vec![Vec::new(); m];
    for i in 0..m {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    Ok(GroupingResult {
        groups: canonical(groups),
        distance_matrix: distances.to_vec(),
        embedding: Vec::new(),
        threshold,
    })
}

/// Uniformly random partition of `m` items into exactly `k` non-empty blocks.
pub fn random_partition(m: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > m {
        return Err(Error::param(format!("cannot split {m} modalities into {k} groups")));
    }
    // stirling[n][j] = S(n, j), second kind
    let mut stirling = vec![vec![0.0f64; k + 1]; m + 1];
    stirling[0][0] = 1.0;
    for n in 1..=m {
        for j in 1..=k.min(n) {
            stirling[n][j] = j as f64 * stirling[n - 1][j] + stirling[n - 1][j - 1];
        }
    }
    // Decide from the last item down: item n-1 opens a new block with
    // probability S(n-1, j-1) / S(n, j), otherwise it joins one of the j
    // blocks formed by the lower items.
    let mut choice: Vec<Option<usize>> = vec![None; m];
    let mut j = k;
    for n in (1..=m).rev() {
        let p_new = stirling[n - 1][j - 1] / stirling[n][j];
        if rng.random::<f64>() < p_new {
            j -= 1;
        } else {
            choice[n - 1] = Some(rng.random_range(0..j));
        }
    }
    let mut opened: Vec<Vec<usize>> = Vec::new();
    for (item, c) in choice.into_iter().enumerate() {
        match c {
            None => opened.push(vec![item]),
            Some(slot) => opened[slot].push(item),
        }
    }
    Ok(canonical(opened))
}

/// Grouping under one of the ablation variants.
pub fn grouping_variant(
    ds: &MultiModalDataset,
    cfg: &GroupingConfig,
    variant: GroupingVariant,
    seed: u64,
) -> Result<GroupingResult> {
    Ok(embed_and_group(ds, cfg, variant, seed)?.0)
}

/// As [`grouping_variant`], also returning the embedded points.
pub fn embed_and_group(
    ds: &MultiModalDataset,
    cfg: &GroupingConfig,
    variant: GroupingVariant,
    seed: u64,
) -> Result<(GroupingResult, ModalityEmbedding)> {
    let embedding = embed_modalities(ds, cfg.method, seed, cfg.sample_cap, &cfg.tsne)?;
    let distances = inter_modal_distances(&embedding.centroids);
    let threshold = cfg.threshold.resolve(&distances);
    let mut result = group_by_threshold(&distances, threshold)?;
    let m = ds.n_modalities();
    result.groups = match variant {
        GroupingVariant::Img => result.groups,
        GroupingVariant::None => vec![(0..m).collect()],
        GroupingVariant::Full => (0..m).map(|i| vec![i]).collect(),
        GroupingVariant::Random => random_partition(m, result.k(), &mut rng_from(seed, &[0x6a4d]))?,
    };
    result.embedding = embedding.centroids.clone();
    Ok((result, embedding))
}
