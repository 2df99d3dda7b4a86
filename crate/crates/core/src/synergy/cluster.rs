use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::nmf::SynergyDecomposition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Procedure {
    /// Every synergy vector is a point.
    Individual,
    /// Each participant's `n` most active synergies are points; participants
    /// take the majority label.
    TopN(usize),
    /// One point per participant: synergies concatenated by activation
    /// energy and zero-padded to the cohort maximum.
    Concatenated,
}

impl Procedure {
    pub fn id(self) -> u8 {
        match self {
            Procedure::Individual => 1,
            Procedure::TopN(_) => 2,
            Procedure::Concatenated => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub procedure: u8,
    pub clusters: usize,
    /// `participant` for procedure 3, `participant#synergy` otherwise.
    pub items: Vec<String>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub participant_labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub base_seed: u64,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 20,
            base_seed: 0,
            max_iter: 300,
        }
    }
}

fn majority(labels: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    // Highest count, lowest label on ties.
    counts
        .into_iter()
        .fold((0, 0), |best, (l, c)| if c > best.1 { (l, c) } else { best })
        .0
}

/// Runs one clustering procedure for every cluster count in `k_range` that
/// does not exceed the number of points.
pub fn cluster_procedure(
    procedure: Procedure,
    decompositions: &BTreeMap<String, SynergyDecomposition>,
    k_range: RangeInclusive<usize>,
    opts: &KMeansOptions,
) -> Result<Vec<ClusterAssignment>> {
    if decompositions.is_empty() {
        return Err(Error::InsufficientData("no synergy decompositions to cluster".into()));
    }
    let mut items = Vec::new();
    let mut owners = Vec::new();
    let mut points = Vec::new();
    match procedure {
        Procedure::Individual | Procedure::TopN(_) => {
            for (pid, d) in decompositions {
                let order = d.energy_order();
                let take = match procedure {
                    Procedure::TopN(n) => n.min(d.rank),
                    _ => d.rank,
                };
                for &j in &order[..take] {
                    items.push(format!("{pid}#{j}"));
                    owners.push(pid.clone());
                    points.push(d.synergy(j));
                }
            }
        }
        Procedure::Concatenated => {
            let dim = decompositions.values().map(|d| d.w.len()).max().unwrap_or(0);
            for (pid, d) in decompositions {
                let mut v: Vec<f64> = d.energy_order().into_iter().flat_map(|j| d.synergy(j)).collect();
                v.resize(dim, 0.0);
                items.push(pid.clone());
                owners.push(pid.clone());
                points.push(v);
            }
        }
    }
    let seeds: Vec<u64> = (0..opts.restarts.max(1) as u64).map(|i| opts.base_seed + i).collect();
    let mut out = Vec::new();
    for k in k_range.filter(|&k| k >= 1 && k <= points.len()) {
        let r = kmeans(&points, k, &seeds, opts.max_iter)?;
        let mut by_owner: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (o, &l) in owners.iter().zip(&r.labels) {
            by_owner.entry(o.clone()).or_default().push(l);
        }
        out.push(ClusterAssignment {
            procedure: procedure.id(),
            clusters: k,
            items: items.clone(),
            labels: r.labels,
            inertia: r.inertia,
            participant_labels: by_owner.into_iter().map(|(p, ls)| (p, majority(&ls))).collect(),
        });
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy one-to-one pairing of synergies in `other` to those in `reference`
/// by descending cosine similarity: (reference index, other index, cosine).
pub fn match_synergies(reference: &SynergyDecomposition, other: &SynergyDecomposition) -> Vec<(usize, usize, f64)> {
    let mut candidates = Vec::new();
    for i in 0..reference.rank {
        for j in 0..other.rank {
            candidates.push((i, j, cosine(&reference.synergy(i), &other.synergy(j))));
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut used_i = vec![false; reference.rank];
    let mut used_j = vec![false; other.rank];
    let mut out = Vec::new();
    for (i, j, c) in candidates {
        if !used_i[i] && !used_j[j] {
            used_i[i] = true;
            used_j[j] = true;
            out.push((i, j, c));
        }
    }
    out.sort_by_key(|&(i, j, _)| (i, j));
    out
}
