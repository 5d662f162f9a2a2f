//! Cosine similarity, sentence-level coverage, keyword upsampling, and
//! batch selection.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::embedder::Embedder;
use super::sentences::split_sentences;
use super::EmbedError;
use crate::corpus::{Corpus, DatasetSplit, SplitRole};
use crate::scalar::{dot, l2_norm, Scalar};
use crate::util::seeded_rng;

/// Cosine similarity of two equal-length, nonzero vectors.
pub fn cosine<F: Scalar>(u: &[F], v: &[F]) -> Result<F, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::LengthMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == F::zero() || nv == F::zero() {
        return Err(EmbedError::ZeroVector);
    }
    let c = dot(u, v) / (nu * nv);
    // rounding can push |c| a hair past 1
    Ok(c.max(-F::one()).min(F::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceVector<F> {
    pub narrative_id: String,
    pub sentence_index: usize,
    pub vector: Vec<F>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageScore<F> {
    pub narrative_id: String,
    pub score: F,
}

/// Unit sentence vectors for one narrative.
pub type SentenceVectors<F> = Arc<Vec<Vec<F>>>;

/// Supplies sentence embeddings by narrative id.
pub trait SentenceSource<F: Scalar>: Send + Sync {
    fn sentences(&self, id: &str) -> Result<SentenceVectors<F>, EmbedError>;
}

/// Fixed, in-memory sentence vectors; used for hand-built fixtures.
#[derive(Clone, Debug, Default)]
pub struct StaticSentences<F> {
    pub vectors: HashMap<String, SentenceVectors<F>>,
}

impl<F: Scalar> StaticSentences<F> {
    pub fn insert(&mut self, id: impl Into<String>, vectors: Vec<Vec<F>>) {
        self.vectors.insert(id.into(), Arc::new(vectors));
    }
}

impl<F: Scalar> SentenceSource<F> for StaticSentences<F> {
    fn sentences(&self, id: &str) -> Result<SentenceVectors<F>, EmbedError> {
        self.vectors
            .get(id)
            .cloned()
            .ok_or_else(|| EmbedError::UnknownId(id.to_string()))
    }
}

/// Splits corpus narratives into sentences and embeds them on first use.
pub struct SentenceIndex<F: Scalar> {
    corpus: Arc<Corpus>,
    embedder: Arc<dyn Embedder<F>>,
    memo: RwLock<HashMap<String, SentenceVectors<F>>>,
}

impl<F: Scalar> SentenceIndex<F> {
    pub fn new(corpus: Arc<Corpus>, embedder: Arc<dyn Embedder<F>>) -> Self {
        Self {
            corpus,
            embedder,
            memo: RwLock::new(HashMap::new()),
        }
    }

    /// Embeds every id not yet memoized in one batched call.
    pub fn warm(&self, ids: &[String]) -> Result<(), EmbedError> {
        let todo: Vec<&String> = {
            let memo = self.memo.read().expect("memo lock");
            ids.iter().filter(|id| !memo.contains_key(*id)).collect()
        };
        if todo.is_empty() {
            return Ok(());
        }
        let mut spans = Vec::with_capacity(todo.len());
        let mut texts = Vec::new();
        for id in &todo {
            let text = self
                .corpus
                .text(id)
                .map_err(|_| EmbedError::UnknownId(id.to_string()))?;
            let sentences = split_sentences(&text)?;
            spans.push((texts.len(), sentences.len()));
            texts.extend(sentences);
        }
        let vectors = self.embedder.embed(&texts)?;
        let mut memo = self.memo.write().expect("memo lock");
        for (id, (start, len)) in todo.into_iter().zip(spans) {
            memo.insert(id.clone(), Arc::new(vectors[start..start + len].to_vec()));
        }
        Ok(())
    }
}

impl<F: Scalar> SentenceSource<F> for SentenceIndex<F> {
    fn sentences(&self, id: &str) -> Result<SentenceVectors<F>, EmbedError> {
        if let Some(v) = self.memo.read().expect("memo lock").get(id) {
            return Ok(v.clone());
        }
        self.warm(&[id.to_string()])?;
        Ok(self.memo.read().expect("memo lock")[id].clone())
    }
}

/// Mean over the candidate's sentences of the best dot product against any
/// chosen sentence. Vectors are assumed unit-norm, so dot = cosine.
fn coverage_of<F: Scalar>(candidate: &[Vec<F>], chosen: &[SentenceVectors<F>]) -> F {
    if candidate.is_empty() || chosen.iter().all(|c| c.is_empty()) {
        return F::zero();
    }
    let total: F = candidate
        .iter()
        .map(|s| {
            chosen
                .iter()
                .flat_map(|c| c.iter())
                .map(|t| dot(s, t))
                .fold(F::neg_infinity(), F::max)
        })
        .sum();
    total / F::from_count(candidate.len())
}

/// Coverage score of each candidate against the chosen set (0 when the chosen set is empty).
pub fn coverage_scores<F: Scalar>(
    candidates: &[String],
    chosen: &[String],
    source: &dyn SentenceSource<F>,
) -> Result<Vec<CoverageScore<F>>, EmbedError> {
    if candidates.is_empty() {
        return Err(EmbedError::EmptyCandidates);
    }
    let chosen_vectors = chosen
        .iter()
        .map(|id| source.sentences(id))
        .collect::<Result<Vec<_>, _>>()?;
    candidates
        .iter()
        .map(|id| {
            let vectors = source.sentences(id)?;
            Ok(CoverageScore {
                narrative_id: id.clone(),
                score: coverage_of(&vectors, &chosen_vectors),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Random,
    Coverage,
}

fn remaining_pool(pool: &[String], history: &[String]) -> Vec<String> {
    let seen: BTreeSet<&String> = history.iter().collect();
    let mut distinct = BTreeSet::new();
    let mut out: Vec<String> = pool
        .iter()
        .filter(|id| !seen.contains(id) && distinct.insert(*id))
        .cloned()
        .collect();
    out.sort();
    out
}

/// Picks `n` ids from `pool` that are not in `history`.
///
/// Random: seeded uniform sample without replacement. Coverage: the `n`
/// lowest coverage scores against `history`, ties by ascending id; with an
/// empty history every score is 0 and the seeded random order is used.
pub fn select_batch<F: Scalar>(
    strategy: SamplingStrategy,
    pool: &[String],
    history: &[String],
    n: usize,
    seed: u64,
    source: &dyn SentenceSource<F>,
) -> Result<Vec<String>, EmbedError> {
    let mut remaining = remaining_pool(pool, history);
    if n > remaining.len() {
        return Err(EmbedError::PoolExhausted {
            requested: n,
            available: remaining.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if strategy == SamplingStrategy::Random || history.is_empty() {
        let mut rng = seeded_rng(seed, 0x5e1e);
        remaining.shuffle(&mut rng);
        remaining.truncate(n);
        return Ok(remaining);
    }
    let mut scores = coverage_scores(&remaining, history, source)?;
    scores.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.narrative_id.cmp(&b.narrative_id))
    });
    Ok(scores.into_iter().take(n).map(|s| s.narrative_id).collect())
}

/// The `k` narratives among `ids` whose text is closest to the keyword
/// phrase (keywords joined with ", "); ties by ascending id.
pub fn keyword_upsample<F: Scalar>(
    corpus: &Corpus,
    ids: &[String],
    keywords: &[String],
    k: usize,
    embedder: &dyn Embedder<F>,
) -> Result<DatasetSplit, EmbedError> {
    if keywords.is_empty() || keywords.iter().all(|k| k.trim().is_empty()) {
        return Err(EmbedError::EmptyKeywords);
    }
    if k > ids.len() {
        return Err(EmbedError::PoolExhausted {
            requested: k,
            available: ids.len(),
        });
    }
    let query = keywords.join(", ");
    let mut texts = vec![query];
    for id in ids {
        texts.push(corpus.text(id).map_err(|_| EmbedError::UnknownId(id.clone()))?);
    }
    let vectors = embedder.embed(&texts)?;
    let q = &vectors[0];
    let mut ranked: Vec<(F, &String)> = ids
        .iter()
        .zip(&vectors[1..])
        .map(|(id, v)| Ok((cosine(q, v)?, id)))
        .collect::<Result<_, EmbedError>>()?;
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1)));
    Ok(DatasetSplit {
        role: SplitRole::Upsampled,
        seed: 0,
        ids: ranked.into_iter().take(k).map(|(_, id)| id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Narrative;
    use crate::embed::HashEmbedder;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let x = [0.6f64, 0.8];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let r = 1.0f64 / 2f64.sqrt();
        assert!((cosine(&[r, r], &[1.0, 0.0]).unwrap() - 0.7071).abs() < 1e-4);
        assert!(matches!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]), Err(EmbedError::ZeroVector)));
        assert!(matches!(cosine(&[1.0f64], &[1.0, 0.0]), Err(EmbedError::LengthMismatch { .. })));
    }

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn unit(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    fn fixture() -> StaticSentences<f64> {
        let mut s = StaticSentences::default();
        s.insert("c1", vec![unit(0.0), unit(0.3)]);
        s.insert("c2", vec![unit(1.2)]);
        s.insert("c3", vec![unit(2.5), unit(0.1), unit(-0.4)]);
        s.insert("h1", vec![unit(0.0), unit(0.5)]);
        s.insert("h2", vec![unit(1.0)]);
        s
    }

    #[test]
    fn coverage_matches_hand_loop() {
        let src = fixture();
        let got = coverage_scores(&ids(&["c1", "c2", "c3"]), &ids(&["h1", "h2"]), &src).unwrap();
        let chosen = [0.0, 0.5, 1.0];
        let expect = |angles: &[f64]| {
            angles
                .iter()
                .map(|a| chosen.iter().map(|b| (a - b).cos()).fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / angles.len() as f64
        };
        let want = [expect(&[0.0, 0.3]), expect(&[1.2]), expect(&[2.5, 0.1, -0.4])];
        for (g, w) in got.iter().zip(want) {
            assert!((g.score - w).abs() < 1e-12, "{} vs {w}", g.score);
        }
    }

    #[test]
    fn identical_candidate_scores_one() {
        let src = fixture();
        let got = coverage_scores(&ids(&["h1"]), &ids(&["h1"]), &src).unwrap();
        assert!((got[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_chosen_scores_zero() {
        let src = fixture();
        let got = coverage_scores(&ids(&["c1", "c2"]), &[], &src).unwrap();
        assert!(got.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn random_selection_is_reproducible_and_excludes_history() {
        let src = fixture();
        let pool = ids(&["c1", "c2", "c3", "h1", "h2"]);
        let a = select_batch(SamplingStrategy::Random, &pool, &ids(&["h1"]), 3, 9, &src).unwrap();
        let b = select_batch(SamplingStrategy::Random, &pool, &ids(&["h1"]), 3, 9, &src).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&"h1".to_string()));
    }

    #[test]
    fn coverage_with_empty_history_is_seeded_random() {
        let src = fixture();
        let pool = ids(&["c1", "c2", "c3"]);
        let cov = select_batch(SamplingStrategy::Coverage, &pool, &[], 2, 4, &src).unwrap();
        let rnd = select_batch(SamplingStrategy::Random, &pool, &[], 2, 4, &src).unwrap();
        assert_eq!(cov, rnd);
    }

    #[test]
    fn coverage_picks_least_covered() {
        let src = fixture();
        let pool = ids(&["c1", "c2", "c3", "h1", "h2"]);
        let got = select_batch(SamplingStrategy::Coverage, &pool, &ids(&["h1", "h2"]), 1, 0, &src).unwrap();
        // c3 has a sentence at angle 2.5, far from every chosen sentence
        assert_eq!(got, ids(&["c3"]));
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let src = fixture();
        let err = select_batch(SamplingStrategy::Random, &ids(&["c1", "c2"]), &ids(&["c1"]), 2, 0, &src).unwrap_err();
        assert!(matches!(err, EmbedError::PoolExhausted { requested: 2, available: 1 }));
    }

    fn keyword_corpus() -> Corpus {
        let mut ns = Vec::new();
        let filler = ["V was found at home", "Family reported stress", "V worked nights", "Neighbors heard a noise"];
        for i in 0..100 {
            let text = if i % 10 == 3 {
                format!("V had called an attorney. {}.", filler[i % 4])
            } else {
                format!("{}. Case {i}.", filler[i % 4])
            };
            ns.push(Narrative::new(format!("n{i:03}"), text, ""));
        }
        ns.push(Narrative::new("twin-a", "Same words here.", ""));
        ns.push(Narrative::new("twin-b", "Same words here.", ""));
        Corpus::from_narratives(ns).unwrap()
    }

    #[test]
    fn keyword_upsample_ranks_keyword_texts_first() {
        let corpus = keyword_corpus();
        let all: Vec<String> = corpus.ids().into_iter().filter(|i| i.starts_with('n')).collect();
        let embedder = HashEmbedder::new(384);
        let kw = ids(&["lawyer", "attorney"]);
        let got = keyword_upsample::<f64>(&corpus, &all, &kw, 10, &embedder).unwrap();
        // brute force: the ten "attorney" narratives are exactly those with positive similarity
        let q: Vec<Vec<f64>> = embedder.embed(&["lawyer, attorney".to_string()]).unwrap();
        let mut brute: Vec<(f64, String)> = all
            .iter()
            .map(|id| {
                let v: Vec<Vec<f64>> = embedder.embed(&[corpus.text(id).unwrap()]).unwrap();
                (q[0].iter().zip(&v[0]).map(|(a, b)| a * b).sum(), id.clone())
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top: Vec<String> = brute.into_iter().take(10).map(|x| x.1).collect();
        assert_eq!(got.ids, top);
        for id in &got.ids {
            assert!(corpus.text(id).unwrap().contains("attorney"), "{id}");
        }
    }

    #[test]
    fn keyword_upsample_edges() {
        let corpus = keyword_corpus();
        let all = corpus.ids();
        let embedder = HashEmbedder::new(64);
        let got = keyword_upsample::<f32>(&corpus, &all, &ids(&["words"]), all.len(), &embedder).unwrap();
        assert_eq!(got.len(), all.len());
        let pos_a = got.ids.iter().position(|i| i == "twin-a").unwrap();
        assert_eq!(got.ids[pos_a + 1], "twin-b");
        assert!(matches!(keyword_upsample::<f32>(&corpus, &all, &[], 1, &embedder), Err(EmbedError::EmptyKeywords)));
    }

    #[test]
    fn sentence_index_embeds_per_sentence() {
        let corpus = Arc::new(Corpus::from_narratives(vec![Narrative::new("a", "V left. V came back.", "X ran.")]).unwrap());
        let index = SentenceIndex::<f32>::new(corpus, Arc::new(HashEmbedder::new(32)));
        assert_eq!(index.sentences("a").unwrap().len(), 3);
        assert!(index.sentences("zzz").is_err());
    }

    fn arb_vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec((0.0f64..6.28).prop_map(unit), 1..4)
    }

    proptest! {
        #[test]
        fn coverage_is_monotone_and_order_free(cands in prop::collection::vec(arb_vectors(), 1..4),
                                               chosen in prop::collection::vec(arb_vectors(), 1..4),
                                               extra in arb_vectors()) {
            let mut src = StaticSentences::default();
            let cand_ids: Vec<String> = (0..cands.len()).map(|i| format!("c{i}")).collect();
            let chosen_ids: Vec<String> = (0..chosen.len()).map(|i| format!("h{i}")).collect();
            for (id, v) in cand_ids.iter().zip(&cands) { src.insert(id.clone(), v.clone()); }
            for (id, v) in chosen_ids.iter().zip(&chosen) { src.insert(id.clone(), v.clone()); }
            src.insert("extra", extra);
            let base = coverage_scores(&cand_ids, &chosen_ids, &src).unwrap();
            let mut reversed = chosen_ids.clone();
            reversed.reverse();
            let perm = coverage_scores(&cand_ids, &reversed, &src).unwrap();
            let mut bigger = chosen_ids.clone();
            bigger.push("extra".into());
            let grown = coverage_scores(&cand_ids, &bigger, &src).unwrap();
            for ((b, p), g) in base.iter().zip(&perm).zip(&grown) {
                prop_assert!((b.score - p.score).abs() < 1e-12);
                prop_assert!(g.score >= b.score - 1e-12);
            }
            let picked = select_batch(SamplingStrategy::Coverage, &cand_ids, &chosen_ids, 1, 0, &src).unwrap();
            prop_assert!(!chosen_ids.contains(&picked[0]));
        }
    }
}
