//! Central finite-difference verification of taped gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of coordinates to probe, spread round-robin over the parameter
    /// tensors. `None` probes every coordinate.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Run the analytic pass on a sabotaged tape (negative control).
    pub sabotage: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            samples: None,
            seed: 0,
            sabotage: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the backward pass of `f` against `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `f` must be deterministic; callers run stochastic layers in eval mode.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    if opts.sabotage {
        tape = tape.sabotaged();
    }
    let watched: Vec<Tensor> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = f(&mut tape, &watched)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = watched.iter().map(|w| grads.get_or_zeros(w)).collect();

    let coords: Vec<(usize, usize)> = match opts.samples {
        Some(n) if !params.is_empty() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            (0..n)
                .map(|s| {
                    let t = s % params.len();
                    (t, rng.random_range(0..params[t].len()))
                })
                .collect()
        }
        _ => params
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.len()).map(move |c| (t, c)))
            .collect(),
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::detached();
        f(&mut tape, ps)?.item()
    };

    let mut probes = Vec::with_capacity(coords.len());
    let mut work: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    for (t, c) in coords {
        let orig = params[t].data()[c];
        work[t].update(|d| d[c] = orig + opts.eps);
        let plus = eval(&work)?;
        work[t].update(|d| d[c] = orig - opts.eps);
        let minus = eval(&work)?;
        work[t].update(|d| d[c] = orig);
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[t][c];
        probes.push(Probe {
            tensor: t,
            coord: c,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, probes })
}
