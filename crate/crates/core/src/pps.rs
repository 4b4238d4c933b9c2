//! Probability prompt selection for queries.
//!
//! A query has no label, but its class is one of the episode's support
//! classes. The query's pooled visual vector is compared with every support
//! prompt by cosine similarity, the similarities are turned into a
//! temperature softmax, and one support prompt is drawn from it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{PromptEmbedding, PromptOrigin};
use crate::error::{Error, Result};
use crate::tensor::{self, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct PromptDistribution {
    pub probs: Vec<f64>,
    pub class_set: Vec<String>,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    #[default]
    Sample,
    Argmax,
}

impl std::str::FromStr for SelectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(SelectMode::Sample),
            "argmax" => Ok(SelectMode::Argmax),
            other => Err(Error::Config(format!("unknown pps.mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SelectMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectMode::Sample => "sample",
            SelectMode::Argmax => "argmax",
        })
    }
}

/// Temporal mean of the frame embeddings.
pub fn query_video_vector(frames: &Mat) -> Vec<f64> {
    frames.mean_rows().into_vec()
}

pub fn similarity(fq: &[f64], token: &[f64]) -> Result<f64> {
    if fq.len() != token.len() {
        return Err(Error::Shape(format!("vector dims {} and {}", fq.len(), token.len())));
    }
    tensor::cosine(fq, token).ok_or_else(|| Error::Degenerate("cosine similarity of a zero-norm vector".into()))
}

pub fn prompt_distribution(sims: &[f64], temperature: f64, class_set: &[String]) -> Result<PromptDistribution> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    if sims.len() != class_set.len() || sims.is_empty() {
        return Err(Error::Shape(format!("{} similarities for {} classes", sims.len(), class_set.len())));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("similarities must be finite".into()));
    }
    let scaled: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    Ok(PromptDistribution { probs: tensor::softmax(&scaled), class_set: class_set.to_vec(), temperature })
}

/// Index of the drawn class. Sampling inverts the CDF at one uniform
/// variate; argmax breaks ties towards the lowest index.
pub fn select_index(dist: &PromptDistribution, mode: SelectMode, rng: &mut impl Rng) -> usize {
    match mode {
        SelectMode::Argmax => tensor::argmax(&dist.probs),
        SelectMode::Sample => {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            for (i, p) in dist.probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            // Rounding left the CDF just short of 1: take the last class with mass.
            dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

pub fn select_prompt(
    dist: &PromptDistribution,
    support_tokens: &[PromptEmbedding],
    mode: SelectMode,
    rng: &mut impl Rng,
) -> Result<PromptEmbedding> {
    if support_tokens.len() != dist.probs.len() {
        return Err(Error::Shape(format!(
            "{} support prompts for a {}-way distribution",
            support_tokens.len(),
            dist.probs.len()
        )));
    }
    for (tok, class) in support_tokens.iter().zip(&dist.class_set) {
        if &tok.source_class != class {
            return Err(Error::Input(format!(
                "support prompt for {:?} misaligned with class {class:?}",
                tok.source_class
            )));
        }
    }
    let idx = select_index(dist, mode, rng);
    let chosen = &support_tokens[idx];
    Ok(PromptEmbedding { data: chosen.data.clone(), source_class: chosen.source_class.clone(), origin: PromptOrigin::PpsSampled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn tokens(n: usize) -> Vec<PromptEmbedding> {
        (0..n)
            .map(|i| {
                let mut data = vec![0.0; n];
                data[i] = 1.0;
                PromptEmbedding { data, source_class: format!("c{i}"), origin: PromptOrigin::TextEncoder }
            })
            .collect()
    }

    #[test]
    fn pooled_query_vector() {
        let m = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(query_video_vector(&m), vec![0.5, 0.5]);
        let same = Mat::from_rows(&vec![vec![2.0, 3.0]; 4]).unwrap();
        assert_eq!(query_video_vector(&same), vec![2.0, 3.0]);
        let single = Mat::from_rows(&[vec![7.0, -1.0]]).unwrap();
        assert_eq!(query_video_vector(&single), vec![7.0, -1.0]);
    }

    #[test]
    fn cosine_examples() {
        assert!((similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn temperature_softmax_examples() {
        let d = prompt_distribution(&[0.3; 5], 0.1, &classes(5)).unwrap();
        assert!(d.probs.iter().all(|p| (p - 0.2).abs() < 1e-12));
        let d = prompt_distribution(&[1.0, 0.0], 1.0, &classes(2)).unwrap();
        assert!((d.probs[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((d.probs[1] - 0.2689414213699951).abs() < 1e-12);
        let d = prompt_distribution(&[1.0, 0.0], 100.0, &classes(2)).unwrap();
        // sigmoid(0.01): 0.0025 above one half, not within 1e-3 of it.
        assert!((d.probs[0] - 1.0 / (1.0 + (-0.01f64).exp())).abs() < 1e-12);
        assert!((d.probs[0] - 0.5).abs() < 3e-3);
        assert!(matches!(prompt_distribution(&[1.0, 0.0], 0.0, &classes(2)), Err(Error::Parameter(_))));
    }

    #[test]
    fn degenerate_distribution_always_selects_its_class() {
        let dist = PromptDistribution { probs: vec![1.0, 0.0, 0.0, 0.0, 0.0], class_set: classes(5), temperature: 1.0 };
        let toks = tokens(5);
        let mut rng = seed::rng(1);
        for mode in [SelectMode::Sample, SelectMode::Argmax] {
            for _ in 0..100 {
                let p = select_prompt(&dist, &toks, mode, &mut rng).unwrap();
                assert_eq!(p.source_class, "c0");
                assert_eq!(p.origin, PromptOrigin::PpsSampled);
            }
        }
    }

    #[test]
    fn argmax_mode() {
        let dist = PromptDistribution { probs: vec![0.2, 0.5, 0.3], class_set: classes(3), temperature: 1.0 };
        let p = select_prompt(&dist, &tokens(3), SelectMode::Argmax, &mut seed::rng(0)).unwrap();
        assert_eq!(p.source_class, "c1");
    }

    proptest! {
        #[test]
        fn shift_invariance(sims in prop::collection::vec(-1.0f64..1.0, 2..8), shift in -5.0f64..5.0, t in 0.05f64..2.0) {
            let cs = classes(sims.len());
            let a = prompt_distribution(&sims, t, &cs).unwrap();
            let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
            let b = prompt_distribution(&shifted, t, &cs).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_scale_invariance(v in prop::collection::vec(-1.0f64..1.0, 4), w in prop::collection::vec(-1.0f64..1.0, 4), s in 0.01f64..100.0) {
            prop_assume!(tensor::norm(&v) > 1e-3 && tensor::norm(&w) > 1e-3);
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            prop_assert!((similarity(&v, &w).unwrap() - similarity(&scaled, &w).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn sampled_class_is_in_the_support_set(sims in prop::collection::vec(-1.0f64..1.0, 2..8), seed in any::<u64>()) {
            let n = sims.len();
            let dist = prompt_distribution(&sims, 0.1, &classes(n)).unwrap();
            let p = select_prompt(&dist, &tokens(n), SelectMode::Sample, &mut seed::rng(seed)).unwrap();
            prop_assert!(dist.class_set.contains(&p.source_class));
        }
    }
}
