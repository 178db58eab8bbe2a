use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{avg_path_c, height_limit, IsolationTree};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// ψ; clamped to the number of training rows when larger.
    pub subsample_size: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            subsample_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub trees: Vec<IsolationTree>,
    pub subsample_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

/// Fits `params.n_trees` trees, each on ψ rows drawn without replacement.
/// Tree `i` draws from its own stream `mix(seed, i)`, so the result does not
/// depend on how trees are scheduled across threads.
pub fn fit<R: AsRef<[f64]> + Sync>(rows: &[R], params: &ForestParams) -> Result<IsolationForestModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid(format!("isolation forest needs at least 2 rows, got {n}")));
    }
    if params.n_trees == 0 {
        return Err(Error::invalid("isolation forest needs at least one tree"));
    }
    if params.subsample_size < 2 {
        return Err(Error::invalid("subsample size must be at least 2"));
    }
    let d = rows[0].as_ref().len();
    if d == 0 {
        return Err(Error::invalid("feature vectors are empty"));
    }
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != d {
            return Err(Error::Shape {
                expected: format!("{d} features"),
                actual: format!("{} in row {i}", r.len()),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("row {i} has a non-finite feature")));
        }
    }
    let psi = params.subsample_size.min(n);
    let limit = height_limit(psi);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::mix(params.seed, i as u64));
            let sample = rand::seq::index::sample(&mut rng, n, psi).into_vec();
            IsolationTree::grow(rows, sample, limit, &mut rng)
        })
        .collect();
    Ok(IsolationForestModel {
        trees,
        subsample_size: psi,
        feature_dim: d,
        seed: params.seed,
    })
}

/// `s = 2^(−E[h]/c(ψ))`.
pub fn anomaly_score(mean_path: f64, subsample_size: usize) -> f64 {
    let c = avg_path_c(subsample_size);
    if c == 0.0 {
        return 1.0;
    }
    (-mean_path / c).exp2()
}

impl IsolationForestModel {
    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Anomaly score in (0, 1]; higher is more anomalous.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_dim {
            return Err(Error::Shape {
                expected: format!("{} features", self.feature_dim),
                actual: format!("{}", x.len()),
            });
        }
        Ok(anomaly_score(self.mean_path_length(x), self.subsample_size))
    }

    pub fn score_all<R: AsRef<[f64]> + Sync>(&self, rows: &[R]) -> Result<Vec<f64>> {
        rows.par_iter().map(|r| self.score(r.as_ref())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isoforest::tree::Node;

    #[test]
    fn score_anchors() {
        assert_eq!(anomaly_score(avg_path_c(256), 256), 0.5);
        assert_eq!(anomaly_score(0.0, 256), 1.0);
        assert_eq!(anomaly_score(avg_path_c(7), 7), 0.5);
    }

    #[test]
    fn hand_built_forest_score() {
        // x reaches depth 1 in one tree and depth 3 in the other: E[h] = 2
        let shallow = IsolationTree {
            nodes: vec![
                Node::Internal { feature: 0, split: 0.0, left: 1, right: 2 },
                Node::External { size: 1 },
                Node::External { size: 1 },
            ],
            height_limit: 8,
        };
        let mut nodes = Vec::new();
        for d in 0..3 {
            nodes.push(Node::Internal { feature: 0, split: 0.0, left: 2 * d + 1, right: 2 * d + 2 });
            nodes.push(Node::External { size: 1 });
        }
        nodes.push(Node::External { size: 1 });
        let deep = IsolationTree { nodes, height_limit: 8 };
        assert_eq!(deep.path_length(&[1.0]), 3.0);
        let model = IsolationForestModel {
            trees: vec![shallow, deep],
            subsample_size: 256,
            feature_dim: 1,
            seed: 0,
        };
        let s = model.score(&[1.0]).unwrap();
        assert!((s - 0.8734387579118306).abs() < 1e-12, "{s}");
        assert!(model.score(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit(&[vec![1.0]], &ForestParams::default()).is_err());
        assert!(fit(&[vec![1.0], vec![f64::NAN]], &ForestParams::default()).is_err());
        assert!(fit(&[vec![1.0], vec![1.0, 2.0]], &ForestParams::default()).is_err());
    }

    #[test]
    fn identical_pair_gives_single_leaves() {
        let model = fit(&[vec![0.5], vec![0.5]], &ForestParams::default()).unwrap();
        assert_eq!(model.trees.len(), 100);
        assert_eq!(model.subsample_size, 2);
        for t in &model.trees {
            assert_eq!(t.nodes, vec![Node::External { size: 2 }]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i * 37 % 11) as f64, i as f64 * 0.1]).collect();
        let p = ForestParams { n_trees: 20, subsample_size: 16, seed: 9 };
        assert_eq!(fit(&rows, &p).unwrap(), fit(&rows, &p).unwrap());
        let other = fit(&rows, &ForestParams { seed: 10, ..p }).unwrap();
        assert_ne!(fit(&rows, &p).unwrap().trees, other.trees);
    }
}
