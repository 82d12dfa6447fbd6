use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Settings for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step; also the floor added to the relative-error denominator.
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor (all of them when the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            coords_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of `build` against central finite differences.
///
/// `build` records a scalar loss on the graph given one node per parameter; it is
/// called once for the analytic pass and twice per sampled coordinate. Returns the
/// maximum of `|analytic − numeric| / (|analytic| + |numeric| + epsilon)`.
pub fn check_gradients<T, F>(
    params: &[Tensor<T>],
    build: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    if config.epsilon <= 0.0 {
        return Err(Error::Graph("gradient check epsilon must be positive".into()));
    }
    let eval = |params: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item().as_f64())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let h = T::lit(config.epsilon);
    for (pi, id) in ids.iter().enumerate() {
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= config.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, config.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let analytic = grads.get(*id).map_or(0.0, |t| t.data()[c].as_f64());
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            // use the realised step so rounding of orig ± h does not bias the estimate
            let step = (orig + h).as_f64() - (orig - h).as_f64();
            let numeric = (plus - minus) / step;
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + config.epsilon);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
