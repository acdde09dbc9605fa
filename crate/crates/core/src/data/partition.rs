use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ClientPartition, Dataset};
use crate::error::{Error, Result};
use crate::rng;

const MAX_DIRICHLET_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Splits `data` into a disjoint exact cover of `num_clients` non-empty partitions.
pub fn partition(
    data: &Dataset,
    num_clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    if num_clients < 2 {
        return Err(Error::param("partition needs at least 2 clients"));
    }
    if data.len() < num_clients {
        return Err(Error::param(format!(
            "cannot split {} samples across {num_clients} clients",
            data.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let assignment = match scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let base = data.len() / num_clients;
            let extra = data.len() % num_clients;
            let mut out = Vec::with_capacity(num_clients);
            let mut start = 0;
            for c in 0..num_clients {
                let size = base + usize::from(c < extra);
                out.push(idx[start..start + size].to_vec());
                start += size;
            }
            out
        }
        PartitionScheme::Dirichlet { alpha } => dirichlet_assignment(data, num_clients, alpha, &mut rng)?,
    };

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(c, idx)| ClientPartition::new(c, data.subset(&idx).samples))
        .collect())
}

fn dirichlet_assignment(
    data: &Dataset,
    num_clients: usize,
    alpha: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::param(format!("dirichlet alpha {alpha}: {e}")))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }

    for _ in 0..MAX_DIRICHLET_DRAWS {
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut acc = 0.0;
            let mut start = 0;
            for (c, d) in draws.iter().enumerate() {
                acc += d;
                let end = if c + 1 == num_clients || total <= 0.0 {
                    members.len()
                } else {
                    ((acc / total) * members.len() as f64).round() as usize
                };
                let end = end.clamp(start, members.len());
                out[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if out.iter().all(|p| !p.is_empty()) {
            for p in &mut out {
                p.sort_unstable();
            }
            return Ok(out);
        }
    }
    Err(Error::param(format!(
        "no dirichlet(alpha={alpha}) draw gave every one of {num_clients} clients a sample"
    )))
}
