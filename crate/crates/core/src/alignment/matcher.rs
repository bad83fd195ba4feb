use serde::{Deserialize, Serialize};

use super::orb::BinaryDescriptor;
use crate::error::{Error, Result};

pub const DEFAULT_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub query_idx: usize,
    pub train_idx: usize,
    pub distance: u32,
}

/// Brute-force Hamming matching with the nearest/second-nearest ratio test.
///
/// A query keeps its nearest train descriptor when `d1 <= ratio * d2`. With a
/// single train descriptor, or when the runner-up is at distance zero, only
/// exact (`d1 == 0`) matches are emitted. Ties on the nearest distance go to
/// the lowest train index.
pub fn match_descriptors(
    query: &[BinaryDescriptor],
    train: &[BinaryDescriptor],
    ratio: f64,
) -> Result<Vec<Match>> {
    if query.is_empty() || train.is_empty() {
        return Err(Error::param("descriptor lists must be non-empty"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param(format!(
            "ratio must be in (0, 1], got {ratio}"
        )));
    }

    let mut matches = Vec::new();
    for (qi, q) in query.iter().enumerate() {
        let mut best = (u32::MAX, usize::MAX);
        let mut second = u32::MAX;
        for (ti, t) in train.iter().enumerate() {
            let d = q.hamming(t);
            if d < best.0 {
                second = best.0;
                best = (d, ti);
            } else if d < second {
                second = d;
            }
        }
        let (d1, ti) = best;
        let keep = if train.len() == 1 || second == 0 {
            d1 == 0
        } else {
            f64::from(d1) <= ratio * f64::from(second)
        };
        if keep {
            matches.push(Match {
                query_idx: qi,
                train_idx: ti,
                distance: d1,
            });
        }
    }
    Ok(matches)
}
