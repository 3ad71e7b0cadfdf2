use super::{Gram, SgCluster};
use crate::error::{Error, Result};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy leader clustering.
///
/// Grams are visited by descending `counts` (ties by surface). Each joins the
/// first cluster whose leader has cosine similarity `>= tau`, otherwise it
/// founds a new cluster and leads it. Cluster ids follow creation order, so
/// the result does not depend on the input order.
pub fn cluster_grams(
    grams: &[Gram],
    counts: &[u64],
    vectors: &[Vec<f64>],
    tau: f64,
) -> Result<Vec<SgCluster>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Miner(format!("tau must be in (0, 1], got {tau}")));
    }
    if grams.len() != vectors.len() || grams.len() != counts.len() {
        return Err(Error::Miner(format!(
            "{} grams, {} counts and {} vectors are not aligned",
            grams.len(),
            counts.len(),
            vectors.len()
        )));
    }

    let mut order: Vec<usize> = (0..grams.len()).collect();
    order.sort_by(|&a, &b| {
        counts[b]
            .cmp(&counts[a])
            .then_with(|| grams[a].surface.cmp(&grams[b].surface))
    });

    let mut leaders: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<Gram>> = Vec::new();
    for i in order {
        let home = leaders
            .iter()
            .position(|&l| cosine(&vectors[l], &vectors[i]) >= tau);
        match home {
            Some(c) => members[c].push(grams[i].clone()),
            None => {
                leaders.push(i);
                members.push(vec![grams[i].clone()]);
            }
        }
    }

    Ok(members
        .into_iter()
        .enumerate()
        .map(|(id, mut m)| {
            m.sort();
            SgCluster {
                id: id as u32,
                members: m,
                cluster_df: None,
                df_fraction: None,
            }
        })
        .collect())
}
