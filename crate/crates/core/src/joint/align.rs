use std::cmp::Ordering;

use super::lattice::{build_lattice, Graphone, GraphoneInventory, GraphoneLattice, GraphoneShape};
use super::JointError;
use super::log_add;

/// Unigram distribution over graphones, learned by EM.
///
/// Pruned graphones stay in the inventory with log-probability `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub shape: GraphoneShape,
    pub inventory: GraphoneInventory,
    pub log_probs: Vec<f64>,
    /// Corpus log-likelihood before the first update and after each iteration.
    pub log_likelihoods: Vec<f64>,
}

impl AlignmentModel {
    /// Builds a model from explicit probabilities (normalized here).
    pub fn from_probs(shape: GraphoneShape, probs: Vec<(Graphone, f64)>) -> Result<Self, JointError> {
        let total: f64 = probs.iter().map(|(_, p)| *p).sum();
        if probs.is_empty() || !(total > 0.0) || probs.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err(JointError::InvalidConfig("probabilities must be non-negative with positive sum".into()));
        }
        let mut inventory = GraphoneInventory::new();
        let mut log_probs = Vec::with_capacity(probs.len());
        for (g, p) in probs {
            if g.input.is_empty() && g.output.is_empty() {
                return Err(JointError::InvalidConfig("graphone with two empty parts".into()));
            }
            let id = inventory.intern(g);
            if id as usize != log_probs.len() {
                return Err(JointError::InvalidConfig("duplicate graphone".into()));
            }
            log_probs.push((p / total).ln());
        }
        Ok(Self {
            shape,
            inventory,
            log_probs,
            log_likelihoods: Vec::new(),
        })
    }

    pub fn log_prob(&self, id: u32) -> f64 {
        self.log_probs.get(id as usize).copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn is_retained(&self, id: u32) -> bool {
        self.log_prob(id) > f64::NEG_INFINITY
    }

    /// Ids of graphones with non-zero probability, in id order.
    pub fn retained(&self) -> Vec<u32> {
        (0..self.log_probs.len() as u32).filter(|&id| self.is_retained(id)).collect()
    }
}

fn unalignable(index: usize, source: &[String], target: &[String]) -> JointError {
    JointError::UnalignablePair {
        index,
        input: source.concat(),
        output: target.concat(),
    }
}

/// Log-domain forward scores; `alpha[end]` is the pair log-likelihood.
fn forward(lattice: &GraphoneLattice, log_probs: &[f64]) -> Vec<f64> {
    let mut alpha = vec![f64::NEG_INFINITY; lattice.num_nodes()];
    alpha[0] = 0.0;
    for v in 0..lattice.num_nodes() {
        if alpha[v] == f64::NEG_INFINITY {
            continue;
        }
        for e in &lattice.edges[v] {
            let lp = log_probs[e.graphone as usize];
            if lp > f64::NEG_INFINITY {
                alpha[e.to] = log_add(alpha[e.to], alpha[v] + lp);
            }
        }
    }
    alpha
}

fn backward(lattice: &GraphoneLattice, log_probs: &[f64]) -> Vec<f64> {
    let mut beta = vec![f64::NEG_INFINITY; lattice.num_nodes()];
    beta[lattice.end()] = 0.0;
    for v in (0..lattice.num_nodes()).rev() {
        let mut acc = f64::NEG_INFINITY;
        for e in &lattice.edges[v] {
            let lp = log_probs[e.graphone as usize];
            if lp > f64::NEG_INFINITY && beta[e.to] > f64::NEG_INFINITY {
                acc = log_add(acc, lp + beta[e.to]);
            }
        }
        if v != lattice.end() {
            beta[v] = acc;
        }
    }
    beta
}

/// Runs forward-backward over every lattice, accumulating expected counts.
fn e_step(
    lattices: &[GraphoneLattice],
    pairs: &[(&[String], &[String])],
    log_probs: &[f64],
    counts: &mut [f64],
) -> Result<f64, JointError> {
    let mut ll = 0.0;
    for (idx, lattice) in lattices.iter().enumerate() {
        let alpha = forward(lattice, log_probs);
        let total = alpha[lattice.end()];
        if total == f64::NEG_INFINITY {
            return Err(unalignable(idx, pairs[idx].0, pairs[idx].1));
        }
        let beta = backward(lattice, log_probs);
        for v in 0..lattice.num_nodes() {
            if alpha[v] == f64::NEG_INFINITY {
                continue;
            }
            for e in &lattice.edges[v] {
                let lp = log_probs[e.graphone as usize];
                if lp == f64::NEG_INFINITY || beta[e.to] == f64::NEG_INFINITY {
                    continue;
                }
                counts[e.graphone as usize] += (alpha[v] + lp + beta[e.to] - total).exp();
            }
        }
        ll += total;
    }
    Ok(ll)
}

/// Corpus log-likelihood of `pairs` under a fixed model.
pub fn corpus_log_likelihood(model: &AlignmentModel, pairs: &[(&[String], &[String])]) -> Result<f64, JointError> {
    let mut inventory = model.inventory.clone();
    let mut ll = 0.0;
    for (idx, (s, t)) in pairs.iter().enumerate() {
        let lattice = build_lattice(s, t, model.shape, &mut inventory);
        let mut lp = model.log_probs.clone();
        lp.resize(inventory.len(), f64::NEG_INFINITY);
        let total = forward(&lattice, &lp)[lattice.end()];
        if total == f64::NEG_INFINITY {
            return Err(unalignable(idx, s, t));
        }
        ll += total;
    }
    Ok(ll)
}

/// EM training of the graphone unigram.
///
/// Starts uniform over every graphone appearing in some lattice. After each
/// M-step, graphones whose share of the expected mass falls below
/// `prune_eps` are removed and the rest renormalized.
pub fn em_train(
    pairs: &[(&[String], &[String])],
    shape: GraphoneShape,
    iterations: usize,
    prune_eps: f64,
) -> Result<AlignmentModel, JointError> {
    if iterations == 0 {
        return Err(JointError::InvalidConfig("EM needs at least one iteration".into()));
    }
    if shape.max_in == 0 || shape.max_out == 0 {
        return Err(JointError::InvalidConfig("graphone bounds must be at least 1".into()));
    }
    if pairs.is_empty() {
        return Err(JointError::EmptyModel);
    }
    let mut inventory = GraphoneInventory::new();
    let mut lattices = Vec::with_capacity(pairs.len());
    for (idx, (s, t)) in pairs.iter().enumerate() {
        if s.is_empty() || t.is_empty() {
            return Err(unalignable(idx, s, t));
        }
        lattices.push(build_lattice(s, t, shape, &mut inventory));
    }
    let g = inventory.len();
    let mut log_probs = vec![-(g as f64).ln(); g];
    let mut log_likelihoods = Vec::with_capacity(iterations + 1);
    let mut counts = vec![0.0; g];

    for _ in 0..iterations {
        counts.iter_mut().for_each(|c| *c = 0.0);
        let ll = e_step(&lattices, pairs, &log_probs, &mut counts)?;
        log_likelihoods.push(ll);
        let total: f64 = counts.iter().sum();
        for c in counts.iter_mut() {
            if *c / total < prune_eps {
                *c = 0.0;
            }
        }
        let kept: f64 = counts.iter().sum();
        for (lp, &c) in log_probs.iter_mut().zip(&counts) {
            *lp = if c > 0.0 { (c / kept).ln() } else { f64::NEG_INFINITY };
        }
    }
    // Final E-step pass: scores the last update and catches over-pruning.
    let mut final_ll = 0.0;
    for (idx, lattice) in lattices.iter().enumerate() {
        let total = forward(lattice, &log_probs)[lattice.end()];
        if total == f64::NEG_INFINITY {
            return Err(unalignable(idx, pairs[idx].0, pairs[idx].1));
        }
        final_ll += total;
    }
    log_likelihoods.push(final_ll);

    Ok(AlignmentModel {
        shape,
        inventory,
        log_probs,
        log_likelihoods,
    })
}

#[derive(Clone)]
struct Best {
    score: f64,
    path: Vec<u32>,
}

/// Orders candidates: higher score, then fewer graphones, then lexicographic
/// by graphone. `Ordering::Less` means `a` is preferred.
pub(crate) fn prefer(
    inventory: &GraphoneInventory,
    a_score: f64,
    a: &[u32],
    b_score: f64,
    b: &[u32],
) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then(a.len().cmp(&b.len()))
        .then_with(|| {
            let ga = a.iter().map(|&id| inventory.get(id));
            let gb = b.iter().map(|&id| inventory.get(id));
            ga.cmp(gb)
        })
}

/// Most probable segmentation of `(source, target)` into retained graphones.
pub fn viterbi_segment(
    source: &[String],
    target: &[String],
    model: &AlignmentModel,
) -> Result<Vec<Graphone>, JointError> {
    let mut inventory = model.inventory.clone();
    let lattice = build_lattice(source, target, model.shape, &mut inventory);
    let mut best: Vec<Option<Best>> = vec![None; lattice.num_nodes()];
    best[0] = Some(Best {
        score: 0.0,
        path: Vec::new(),
    });
    for v in 0..lattice.num_nodes() {
        let Some(cur) = best[v].clone() else { continue };
        for e in &lattice.edges[v] {
            let lp = model.log_prob(e.graphone);
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let score = cur.score + lp;
            let mut path = cur.path.clone();
            path.push(e.graphone);
            let replace = match &best[e.to] {
                None => true,
                Some(old) => prefer(&inventory, score, &path, old.score, &old.path) == Ordering::Less,
            };
            if replace {
                best[e.to] = Some(Best { score, path });
            }
        }
    }
    match &best[lattice.end()] {
        Some(b) if !source.is_empty() || !target.is_empty() => {
            Ok(b.path.iter().map(|&id| inventory.get(id).clone()).collect())
        }
        _ => Err(unalignable(0, source, target)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.chars().map(String::from).collect()
    }

    fn as_pairs(v: &[(Vec<String>, Vec<String>)]) -> Vec<(&[String], &[String])> {
        v.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect()
    }

    fn random_corpus(seed: u64, n_pairs: usize, alphabet: usize) -> Vec<(Vec<String>, Vec<String>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_pairs)
            .map(|_| {
                let ls = rng.gen_range(1..=5);
                let lt = rng.gen_range(1..=5);
                let s = (0..ls).map(|_| ((b'a' + rng.gen_range(0..alphabet) as u8) as char).to_string()).collect();
                let t = (0..lt).map(|_| ((b'p' + rng.gen_range(0..alphabet) as u8) as char).to_string()).collect();
                (s, t)
            })
            .collect()
    }

    const NO_EPS: GraphoneShape = GraphoneShape {
        max_in: 1,
        max_out: 1,
        allow_epsilon: false,
    };

    #[test]
    fn single_alignment_gets_all_mass() {
        let data = vec![(toks("a"), toks("b"))];
        let m = em_train(&as_pairs(&data), NO_EPS, 1, 1e-6).unwrap();
        let id = m.inventory.id(&Graphone::new(["a"], ["b"])).unwrap();
        assert_eq!(m.log_prob(id), 0.0);
        assert_eq!(viterbi_segment(&toks("a"), &toks("b"), &m).unwrap(), vec![Graphone::new(["a"], ["b"])]);
    }

    #[test]
    fn prune_everything_is_unalignable() {
        let data = vec![(toks("ab"), toks("xy")), (toks("a"), toks("x"))];
        let err = em_train(&as_pairs(&data), GraphoneShape::default(), 1, 1.0).unwrap_err();
        assert!(matches!(err, JointError::UnalignablePair { index: 0, .. }), "{err:?}");
    }

    #[test]
    fn probabilities_normalized() {
        let data = random_corpus(7, 30, 4);
        let m = em_train(&as_pairs(&data), GraphoneShape::default(), 5, 1e-6).unwrap();
        let total: f64 = m.log_probs.iter().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn log_likelihood_non_decreasing() {
        for seed in 0..5 {
            let data = random_corpus(seed, 40, 5);
            let m = em_train(&as_pairs(&data), GraphoneShape::default(), 20, 1e-6).unwrap();
            assert_eq!(m.log_likelihoods.len(), 21);
            for w in m.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
            }
            let ll = corpus_log_likelihood(&m, &as_pairs(&data)).unwrap();
            assert!((ll - m.log_likelihoods[20]).abs() < 1e-9);
        }
    }

    /// Every monotone segmentation, scored left to right.
    fn all_segmentations(
        s: &[String],
        t: &[String],
        m: &AlignmentModel,
        prefix: &mut Vec<u32>,
        score: f64,
        out: &mut Vec<(f64, Vec<u32>)>,
    ) {
        if s.is_empty() && t.is_empty() {
            out.push((score, prefix.clone()));
            return;
        }
        for (di, dj) in m.shape.steps() {
            if di > s.len() || dj > t.len() {
                continue;
            }
            let g = Graphone {
                input: s[..di].to_vec(),
                output: t[..dj].to_vec(),
            };
            let Some(id) = m.inventory.id(&g) else { continue };
            let lp = m.log_prob(id);
            if lp == f64::NEG_INFINITY {
                continue;
            }
            prefix.push(id);
            all_segmentations(&s[di..], &t[dj..], m, prefix, score + lp, out);
            prefix.pop();
        }
    }

    #[test]
    fn viterbi_matches_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let data = random_corpus(100 + trial, 12, 3);
            let mut m = em_train(&as_pairs(&data), GraphoneShape::default(), 3, 0.0).unwrap();
            // Perturb so that ties are rare but not impossible.
            if trial % 2 == 0 {
                for lp in m.log_probs.iter_mut() {
                    *lp += rng.gen_range(-0.5..0.5);
                }
            }
            for (s, t) in data.iter().filter(|(s, t)| s.len() <= 4 && t.len() <= 4) {
                let mut all = Vec::new();
                all_segmentations(s, t, &m, &mut Vec::new(), 0.0, &mut all);
                let best = all
                    .iter()
                    .min_by(|a, b| prefer(&m.inventory, a.0, &a.1, b.0, &b.1))
                    .unwrap();
                let want: Vec<Graphone> = best.1.iter().map(|&id| m.inventory.get(id).clone()).collect();
                assert_eq!(viterbi_segment(s, t, &m).unwrap(), want);
            }
        }
    }

    #[test]
    fn viterbi_tie_is_lexicographic() {
        let shape = GraphoneShape {
            max_in: 1,
            max_out: 1,
            allow_epsilon: true,
        };
        let m = AlignmentModel::from_probs(
            shape,
            vec![
                (Graphone::new(["a"], ["x"]), 1.0),
                (Graphone::new(["b"], []), 1.0),
                (Graphone::new(["a"], []), 1.0),
                (Graphone::new(["b"], ["x"]), 1.0),
            ],
        )
        .unwrap();
        // Both segmentations score 2 * ln(1/4); "a:_" sorts before "a:x".
        let seg = viterbi_segment(&toks("ab"), &toks("x"), &m).unwrap();
        assert_eq!(seg, vec![Graphone::new(["a"], []), Graphone::new(["b"], ["x"])]);
        assert_eq!(seg, viterbi_segment(&toks("ab"), &toks("x"), &m).unwrap());
    }

    #[test]
    fn viterbi_reports_unalignable() {
        let m = AlignmentModel::from_probs(NO_EPS, vec![(Graphone::new(["a"], ["x"]), 1.0)]).unwrap();
        assert!(matches!(
            viterbi_segment(&toks("ab"), &toks("x"), &m),
            Err(JointError::UnalignablePair { .. })
        ));
    }
}
