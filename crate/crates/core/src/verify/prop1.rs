use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{filter_apply, ChannelFilter, Multiset};
use crate::nn::Mlp;
use crate::rng::substream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Separation below which two embeddings count as equal.
pub const COLLISION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub trial: usize,
    pub width: usize,
    pub multiset_len: usize,
    pub theta: Vec<f64>,
    pub bias: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Prop1Report {
    pub trials: usize,
    /// Collisions with `θ ≠ 0`, each retried with a fresh draw.
    pub collisions: usize,
    pub min_distance: f64,
    /// Trials where the `θ = 0` control gave equal embeddings.
    pub zero_theta_collisions: usize,
    pub counterexamples: Vec<Counterexample>,
    pub passed: bool,
}

/// Embeds two multisets stacked as rows 0 and 1 and returns the L∞
/// distance between the two output rows.
fn embed_distance(a: &[Vec<f64>], c: &[Vec<f64>], theta: &[f64], bias: f64) -> Result<f64> {
    let d = a[0].len();
    let mut tape = Tape::new();
    let entries = a
        .iter()
        .zip(c)
        .map(|(ea, ec)| {
            let mut rows = ea.clone();
            rows.extend_from_slice(ec);
            tape.constant(Tensor::from_parts(vec![2, d], rows))
        })
        .collect();
    let filter = ChannelFilter {
        theta: tape.constant(Tensor::vector(theta.to_vec())),
        bias: tape.constant(Tensor::scalar(bias)),
        phi: Mlp { layers: Vec::new() },
    };
    let z = filter_apply(&mut tape, &Multiset { entries }, &filter, &[1.0, 1.0])?;
    let v = tape.value(z).data();
    Ok((0..d).map(|j| (v[j] - v[d + j]).abs()).fold(0.0, f64::max))
}

fn draw_multiset(rng: &mut impl Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Random distinct multiset pairs through the channel filter with `φ` the
/// identity: nonzero `θ` must separate them, `θ = 0` must not.
pub fn proposition1_check(trials: usize, seed: u64) -> Result<Prop1Report> {
    if trials < 100 {
        return Err(Error::Config("proposition check needs at least 100 trials".into()));
    }
    let mut rng = substream(seed, "prop1", 0);
    let mut collisions = 0;
    let mut zero_theta_collisions = 0;
    let mut min_distance = f64::INFINITY;
    let mut counterexamples = Vec::new();
    for trial in 0..trials {
        let d = rng.random_range(1..=4);
        let m = rng.random_range(1..=7);
        let bias = rng.random_range(-2.0..2.0);
        let a = draw_multiset(&mut rng, m, d);
        let c = draw_multiset(&mut rng, m, d);
        if embed_distance(&a, &c, &vec![0.0; m], bias)? <= COLLISION_TOL {
            zero_theta_collisions += 1;
        }
        loop {
            let theta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            if theta.iter().all(|&t| t == 0.0) {
                continue;
            }
            let dist = embed_distance(&a, &c, &theta, bias)?;
            if dist > COLLISION_TOL {
                min_distance = min_distance.min(dist);
                break;
            }
            collisions += 1;
            counterexamples.push(Counterexample {
                trial,
                width: d,
                multiset_len: m,
                theta,
                bias,
                distance: dist,
            });
            if collisions >= 2 {
                break;
            }
        }
        if collisions >= 2 {
            break;
        }
    }
    Ok(Prop1Report {
        trials,
        collisions,
        min_distance,
        zero_theta_collisions,
        counterexamples,
        passed: collisions <= 1 && zero_theta_collisions == trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_multisets_embed_identically() {
        let a = vec![vec![0.3, -0.2], vec![1.0, 0.5]];
        assert_eq!(embed_distance(&a, &a, &[0.7, -1.1], 0.4).unwrap(), 0.0);
    }

    #[test]
    fn zero_theta_ignores_input() {
        let a = vec![vec![0.3], vec![1.0]];
        let c = vec![vec![-5.0], vec![2.0]];
        assert_eq!(embed_distance(&a, &c, &[0.0, 0.0], 1.5).unwrap(), 0.0);
    }
}
