//! Iterative decoding control: how many tokens each step reveals, how
//! predictions are sampled, and which of them become visible.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub reveal_counts: Vec<usize>,
}

impl Schedule {
    pub fn num_tokens(&self) -> usize {
        self.reveal_counts.iter().sum()
    }

    /// Masked count before step 1 and after every step.
    pub fn remaining(&self) -> Vec<usize> {
        let mut left = self.num_tokens();
        let mut out = vec![left];
        for &n in &self.reveal_counts {
            left -= n;
            out.push(left);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let rem = self.remaining();
        let mut s = String::from("step,n_t,remaining\n");
        for (t, &n) in self.reveal_counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", t + 1, n, rem[t + 1]));
        }
        s
    }
}

/// Reveal plan whose masked count follows `floor(N cos(πt/2T))`. Steps that
/// would reveal nothing borrow one token from the largest step (earliest
/// first on ties). When the last step would then reveal no more than the
/// first, it borrows the same way until it reveals strictly more; this only
/// matters for `T > πN/4` and is impossible at `T = N`.
pub fn make_cosine_schedule(n: usize, t: usize) -> Result<Schedule> {
    if t == 0 {
        return Err(Error::Schedule("at least one step is required".into()));
    }
    if t > n {
        return Err(Error::Schedule(format!(
            "{t} steps cannot each reveal one of {n} tokens"
        )));
    }
    let remaining = |step: usize| -> usize {
        if step == 0 {
            return n;
        }
        if step == t {
            return 0;
        }
        (n as f64 * (PI * step as f64 / (2.0 * t as f64)).cos()).floor() as usize
    };
    let mut counts: Vec<usize> = (1..=t).map(|s| remaining(s - 1) - remaining(s)).collect();
    let zeros: Vec<usize> = (0..t).filter(|&i| counts[i] == 0).collect();
    let mut donors: BinaryHeap<(usize, Reverse<usize>)> = (0..t)
        .filter(|&i| counts[i] > 0)
        .map(|i| (counts[i], Reverse(i)))
        .collect();
    for z in zeros {
        let (c, Reverse(i)) = donors.pop().expect("sum N >= T leaves a donor");
        counts[i] = c - 1;
        counts[z] = 1;
        donors.push((c - 1, Reverse(i)));
        donors.push((1, Reverse(z)));
    }
    while t >= 2 && counts[t - 1] <= counts[0] {
        let Some(donor) = (0..t - 1)
            .filter(|&i| counts[i] >= 2)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        else {
            break;
        };
        counts[donor] -= 1;
        counts[t - 1] += 1;
    }
    Ok(Schedule {
        total_steps: t,
        reveal_counts: counts,
    })
}

/// Per-step record of the sampled predictions at the masked positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub positions: Vec<usize>,
    pub sampled_tokens: Vec<usize>,
    pub confidences: Vec<f64>,
    pub chosen: Vec<bool>,
}

impl StepOutcome {
    pub fn chosen_positions(&self) -> Vec<usize> {
        self.positions
            .iter()
            .zip(&self.chosen)
            .filter(|(_, &c)| c)
            .map(|(&p, _)| p)
            .collect()
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Draws one token per row of `logits` (`rows × k`, row major).
/// Temperature 0 takes the argmax (lowest index on ties). Confidence is the
/// log-probability of the drawn token under the untempered softmax.
pub fn sample_step<R: Rng + ?Sized>(
    logits: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || logits.len() % k != 0 {
        return Err(Error::Schedule(format!(
            "{} logits do not form rows of {k}",
            logits.len()
        )));
    }
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::Schedule(format!(
            "temperature {temperature} must be non-negative"
        )));
    }
    let mut tokens = Vec::with_capacity(logits.len() / k);
    let mut conf = Vec::with_capacity(logits.len() / k);
    for row in logits.chunks_exact(k) {
        let lp = log_softmax(row);
        let tok = if temperature == 0.0 {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = row.iter().map(|&v| v / temperature).collect();
            let lpt = log_softmax(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = k - 1;
            for (j, &l) in lpt.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            pick
        };
        tokens.push(tok);
        conf.push(lp[tok]);
    }
    Ok((tokens, conf))
}

/// Noise scale at step `t` (1-based) of `total`: linear decay to zero.
pub fn noise_scale(initial: f64, t: usize, total: usize) -> f64 {
    initial * (1.0 - t as f64 / total as f64)
}

pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Marks the `n_t` entries with the highest `confidence + scale·Gumbel`
/// scores; equal scores go to the earlier entry.
pub fn select_reveal<R: Rng + ?Sized>(
    confidences: &[f64],
    n_t: usize,
    initial_noise: f64,
    t: usize,
    total: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if n_t > confidences.len() {
        return Err(Error::Schedule(format!(
            "cannot reveal {n_t} of {} masked positions",
            confidences.len()
        )));
    }
    let scale = noise_scale(initial_noise, t, total);
    let scores: Vec<f64> = confidences
        .iter()
        .map(|&c| {
            if scale > 0.0 {
                c + scale * gumbel(rng)
            } else {
                c
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = vec![false; scores.len()];
    for &i in &order[..n_t] {
        chosen[i] = true;
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_reveals_everything() {
        assert_eq!(make_cosine_schedule(64, 1).unwrap().reveal_counts, vec![64]);
    }

    #[test]
    fn too_many_steps_is_an_error() {
        assert!(make_cosine_schedule(4, 5).is_err());
        assert!(make_cosine_schedule(4, 0).is_err());
    }

    #[test]
    fn repair_fills_zero_steps() {
        for n in 1..40 {
            for t in 1..=n {
                let s = make_cosine_schedule(n, t).unwrap();
                assert_eq!(s.num_tokens(), n);
                assert!(
                    s.reveal_counts.iter().all(|&c| c >= 1),
                    "{n} {t} {:?}",
                    s.reveal_counts
                );
                let r = s.remaining();
                assert_eq!((r[0], r[t]), (n, 0));
                if t >= 2 && t < n {
                    assert!(
                        s.reveal_counts[0] < s.reveal_counts[t - 1],
                        "{n} {t} {:?}",
                        s.reveal_counts
                    );
                }
            }
        }
    }

    #[test]
    fn csv_lists_every_step() {
        let s = make_cosine_schedule(10, 3).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("3,"));
        assert!(csv.lines().last().unwrap().ends_with(",0"));
    }

    #[test]
    fn argmax_at_zero_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.1, 2.0, -1.0, 0.5];
        let (tok, conf) = sample_step(&logits, 4, 0.0, &mut rng).unwrap();
        assert_eq!(tok, vec![1]);
        let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((conf[0] - (2.0 - lse)).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_always_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.0, 100.0, 0.0];
        for &temp in &[0.0, 0.3, 1.0] {
            for _ in 0..1000 {
                assert_eq!(sample_step(&logits, 3, temp, &mut rng).unwrap().0, vec![1]);
            }
        }
    }

    #[test]
    fn noiseless_selection_is_top_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = [-1.0, -0.2, -3.0, -0.2, -0.1];
        let chosen = select_reveal(&c, 2, 0.0, 1, 4, &mut rng).unwrap();
        assert_eq!(chosen, vec![false, true, false, false, true]);
        assert_eq!(
            select_reveal(&c, 5, 1.0, 1, 4, &mut rng).unwrap(),
            vec![true; 5]
        );
        assert!(select_reveal(&c, 6, 0.0, 1, 4, &mut rng).is_err());
    }

    #[test]
    fn noise_anneals_to_zero() {
        assert_eq!(noise_scale(1.0, 4, 4), 0.0);
        assert!((noise_scale(2.0, 1, 4) - 1.5).abs() < 1e-15);
    }
}
