use proptest::prelude::*;

use super::*;
use crate::data::generate_dataset;

fn scored(sims: &[f64]) -> Vec<ScoredSegment> {
    sims.iter().enumerate().map(|(i, &s)| ScoredSegment { id: i, token_indices: vec![i], similarity: s }).collect()
}

fn brute_top_k(sims: &[f64], k: usize) -> Vec<usize> {
    let mut taken: Vec<usize> = Vec::new();
    while taken.len() < k.min(sims.len()) {
        let mut best: Option<usize> = None;
        for i in 0..sims.len() {
            if !taken.contains(&i) && best.is_none_or(|j| sims[i] > sims[j]) {
                best = Some(i);
            }
        }
        taken.push(best.unwrap());
    }
    taken
}

#[test]
fn cosine_examples() {
    let u = [0.3, -1.2, 2.5, 0.7, -0.1];
    assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    // Reference computed with 40-digit arithmetic.
    let v = [1.1, 0.4, -0.6, 2.2, 0.9];
    assert!((cosine_sim(&u, &v).unwrap() - -0.025585072169916876).abs() < 1e-12);
    assert!(matches!(cosine_sim(&[0.0, 0.0], &v[..2]), Err(Error::DegenerateEmbedding(_))));
}

#[test]
fn top_k_examples() {
    let set = select_top_k(scored(&[0.9, 0.5, 0.2]), 2).unwrap();
    assert_eq!(set.tau_k, 0.5);
    assert_eq!(set.ids(), [0, 1].into_iter().collect());
    let all = select_top_k(scored(&[0.9, 0.5, 0.2]), 5).unwrap();
    assert_eq!(all.segments.len(), 3);
    assert_eq!(all.tau_k, 0.2);
    let tied = select_top_k(scored(&[0.3, 0.7, 0.3, 0.3]), 2).unwrap();
    assert_eq!(tied.ids(), [0, 1].into_iter().collect());
    assert!(matches!(select_top_k(scored(&[0.1]), 0), Err(Error::Parameter(_))));
    assert!(matches!(select_top_k(vec![], 1), Err(Error::Selection(_))));
}

#[test]
fn mask_to_tokens_examples() {
    let full = PixelMask::new(8, 8, vec![true; 64]).unwrap();
    assert_eq!(mask_to_tokens(&full, 4).unwrap(), (0..16).collect::<Vec<_>>());
    let one = PixelMask::from_tokens(&[6], 4, 2);
    assert_eq!(mask_to_tokens(&one, 4).unwrap(), vec![6]);
    let odd = PixelMask::new(9, 8, vec![false; 72]).unwrap();
    assert!(matches!(mask_to_tokens(&odd, 4), Err(Error::Geometry(_))));

    // Half coverage counts; just under half does not.
    let mut data = vec![false; 16];
    data[0] = true;
    data[1] = true;
    let half = PixelMask::new(4, 4, data.clone()).unwrap();
    assert_eq!(mask_to_tokens(&half, 1).unwrap(), Vec::<usize>::new());
    for i in 2..8 {
        data[i] = true;
    }
    assert_eq!(mask_to_tokens(&PixelMask::new(4, 4, data).unwrap(), 1).unwrap(), vec![0]);
}

struct Failing;

impl EmbedderBackend for Failing {
    fn id(&self) -> String {
        "failing".into()
    }
    fn embed_segment(&self, segment: &Segment, _: &SyntheticSample) -> Result<Vec<f64>> {
        if segment.id == 2 {
            Err(Error::Numeric("backend down".into()))
        } else {
            Ok(vec![1.0, 0.0])
        }
    }
    fn embed_prompt(&self, _: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![1.0, 1.0])
    }
}

#[test]
fn backend_failures_name_the_segment() {
    let spec = TaskSpec { train: 1, test: 0, ..TaskSpec::default() };
    let data = generate_dataset(&spec, 1).unwrap();
    let s = &data.train[0];
    let cands = SyntheticProposer::default().propose(s).unwrap();
    let err = select_weak_labels(&cands, &s.prompt, s, &Failing, 2).unwrap_err();
    assert!(matches!(err, Error::Backend { segment: 2, .. }));
}

#[test]
fn noiseless_oracle_ranks_the_ground_truth_first() {
    let spec = TaskSpec { train: 300, test: 0, ..TaskSpec::default() };
    let data = generate_dataset(&spec, 5).unwrap();
    let backend = synthetic_oracle_backend(&spec, 0.0, 0).unwrap();
    let proposer = SyntheticProposer::default();
    for s in &data.train {
        let cands = proposer.propose(s).unwrap();
        let set = select_weak_labels(&cands, &s.prompt, s, &backend, 1).unwrap();
        assert_eq!(set.segments[0].token_indices, s.roi, "{}", s.id);
        assert_eq!(cands[set.segments[0].id].source, "exact");
    }
    assert!(synthetic_oracle_backend(&spec, -1.0, 0).is_err());
}

#[test]
fn noisy_oracle_rank_one_accuracy_is_measured() {
    let spec = TaskSpec { train: 200, test: 0, ..TaskSpec::default() };
    let data = generate_dataset(&spec, 6).unwrap();
    let backend = synthetic_oracle_backend(&spec, 0.5, 1).unwrap();
    let proposer = SyntheticProposer::default();
    let mut hits = 0;
    for s in &data.train {
        let cands = proposer.propose(s).unwrap();
        let set = select_weak_labels(&cands, &s.prompt, s, &backend, 1).unwrap();
        hits += usize::from(set.segments[0].token_indices == s.roi);
    }
    let acc = hits as f64 / 200.0;
    println!("synthetic oracle, noise 0.5: rank-1 accuracy {acc:.3} over 200 trials");
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn cache_round_trips_with_documented_keys() {
    let spec = TaskSpec { train: 3, test: 0, ..TaskSpec::default() };
    let data = generate_dataset(&spec, 2).unwrap();
    let backend = synthetic_oracle_backend(&spec, 0.1, 0).unwrap();
    let cache = build_cache(&data.train, &SyntheticProposer::default(), &backend, 4).unwrap();
    assert_eq!(cache.records.len(), 3);
    assert!(cache.records.iter().all(|r| r.segments.len() == 4));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.json");
    cache.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    for key in ["\"image_id\"", "\"prompt_id\"", "\"K\"", "\"backend\"", "\"token_indices\"", "\"similarity\"", "\"tau_K\""] {
        assert!(text.contains(key), "missing {key}");
    }
    assert_eq!(WeakLabelCache::load(&path).unwrap(), cache);
    let s = &data.train[1];
    assert_eq!(cache.get(&s.id, &s.prompt_id()).unwrap().image_id, s.id);
}

proptest! {
    #[test]
    fn top_k_matches_sort_oracle(raw in proptest::collection::vec(0u8..8, 20), k in 1usize..25) {
        let sims: Vec<f64> = raw.iter().map(|&v| v as f64 / 7.0 - 0.5).collect();
        let set = select_top_k(scored(&sims), k).unwrap();
        let got: Vec<usize> = set.segments.iter().map(|s| s.id).collect();
        prop_assert_eq!(got, brute_top_k(&sims, k));
        for s in &set.segments {
            prop_assert!(s.similarity >= set.tau_k);
        }
        for (id, sim) in &set.all {
            if !set.ids().contains(id) {
                prop_assert!(*sim <= set.tau_k);
            }
        }
    }

    #[test]
    fn top_k_is_order_invariant_and_monotone(raw in proptest::collection::vec(0u8..8, 12), rot in 0usize..12, k in 1usize..12) {
        let sims: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let mut shuffled = scored(&sims);
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let a = select_top_k(scored(&sims), k).unwrap();
        let b = select_top_k(shuffled, k).unwrap();
        prop_assert_eq!(a.ids(), b.ids());
        let bigger = select_top_k(scored(&sims), k + 1).unwrap();
        prop_assert!(a.ids().is_subset(&bigger.ids()));
    }

    #[test]
    fn mask_to_tokens_matches_pixel_count(bits in proptest::collection::vec(any::<bool>(), 144)) {
        let mask = PixelMask::new(12, 12, bits.clone()).unwrap();
        let got = mask_to_tokens(&mask, 4).unwrap();
        let mut expect = Vec::new();
        for t in 0..16 {
            let (r, c) = (t / 4, t % 4);
            let mut on = 0;
            for y in 0..3 {
                for x in 0..3 {
                    if bits[(r * 3 + y) * 12 + c * 3 + x] { on += 1; }
                }
            }
            if on * 2 >= 9 { expect.push(t); }
        }
        prop_assert_eq!(got, expect);
    }
}

/// Scales every embedding of the wrapped backend.
struct Scaled<'a>(&'a SyntheticOracleEmbedder, f64);

impl EmbedderBackend for Scaled<'_> {
    fn id(&self) -> String {
        format!("scaled({})", self.0.id())
    }
    fn embed_segment(&self, segment: &Segment, image: &SyntheticSample) -> Result<Vec<f64>> {
        Ok(self.0.embed_segment(segment, image)?.into_iter().map(|v| v * self.1).collect())
    }
    fn embed_prompt(&self, prompt: &[usize]) -> Result<Vec<f64>> {
        Ok(self.0.embed_prompt(prompt)?.into_iter().map(|v| v * self.1).collect())
    }
}

#[test]
fn common_embedding_scale_leaves_selection_unchanged() {
    let spec = TaskSpec { train: 50, test: 0, ..TaskSpec::default() };
    let data = generate_dataset(&spec, 9).unwrap();
    let backend = synthetic_oracle_backend(&spec, 0.3, 2).unwrap();
    let proposer = SyntheticProposer::default();
    for s in &data.train {
        let cands = proposer.propose(s).unwrap();
        let a = select_weak_labels(&cands, &s.prompt, s, &backend, 4).unwrap();
        for scale in [0.01, 3.7, 250.0] {
            let b = select_weak_labels(&cands, &s.prompt, s, &Scaled(&backend, scale), 4).unwrap();
            assert_eq!(a.ids(), b.ids());
        }
    }
}
