mod common;

use common::*;
use esmem_core::evaluation::{boundary_f1, bleu1, composite_score, pk, qa_token_f1, window_diff};
use esmem_core::memory::VectorIndex;
use esmem_core::providers::mock_embedding_raw;
use esmem_core::retrieval::{retrieve_embedded, RetrievalParams};
use esmem_core::segmentation::{
    boundary_probability, candidate_boundaries, mi_cap, mi_series, pearson_mi, IntentJudgment, Polarity,
};
use esmem_core::{BoundarySet, EmbeddingVector, MemoryRepository, MockProvider, Provider};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn mock_embedding_matches_recomputed_projection() {
    let mock = MockProvider::new(Default::default(), 7, 8).unwrap();
    for text in ["a", "travel plans", "", "cooking pasta", "ünïcode"] {
        let got = mock.embed_one(text).unwrap();
        let want = oracle_mock_embedding(text, 7, 8);
        assert_eq!(got.values(), want.as_slice(), "text {text:?}");
    }
}

#[test]
fn mock_distinct_strings_are_not_parallel() {
    let a = oracle_mock_embedding("travel plans", 7, 8);
    let b = oracle_mock_embedding("cooking pasta", 7, 8);
    let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    assert!(cos < 1.0 - 1e-9);
    let mock = MockProvider::new(Default::default(), 7, 8).unwrap();
    let v = mock.embed(&["travel plans".into(), "cooking pasta".into()]).unwrap();
    assert!(close(v[0].cosine(&v[1]), cos, 1e-12));
}

#[test]
fn mock_seed_changes_vectors() {
    assert_ne!(mock_embedding_raw("x", 1, 8), mock_embedding_raw("x", 2, 8));
}

#[test]
fn pearson_worked_example() {
    let (rho, mi) = pearson_mi(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
    assert!(close(rho, 0.6, 1e-12));
    assert!(close(mi, -0.5 * 0.64f64.ln(), 1e-12));
    assert!(close(mi, 0.22314, 1e-5));
}

#[test]
fn pearson_matches_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let dim = rng.random_range(2..64);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (rho, mi) = pearson_mi(&x, &y).unwrap();
        let (orho, omi) = oracle_pearson_mi(&x, &y);
        assert!(close(rho, orho, 1e-9), "{rho} vs {orho}");
        assert!(close(mi, omi, 1e-9), "{mi} vs {omi}");
    }
}

#[test]
fn pearson_edge_branches() {
    let x = [0.3, -0.1, 0.7, 0.2];
    let (rho, mi) = pearson_mi(&x, &x).unwrap();
    assert!(close(rho, 1.0, 1e-12));
    assert_eq!(mi, mi_cap());
    let neg: Vec<f64> = x.iter().map(|v| -2.0 * v + 1.0).collect();
    assert_eq!(pearson_mi(&x, &neg).unwrap().1, mi_cap());
    assert_eq!(pearson_mi(&[0.5; 4], &x).unwrap(), (0.0, 0.0));
    assert!(pearson_mi(&x, &[1.0, 2.0]).is_err());
    assert!(pearson_mi(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

#[test]
fn mi_series_matches_loop_oracle() {
    let mock = MockProvider::new(Default::default(), 3, 16).unwrap();
    let texts: Vec<String> = ["alpha", "beta", "gamma", "delta"].iter().map(|s| s.to_string()).collect();
    let vecs = mock.embed(&texts).unwrap();
    let series = mi_series(&vecs).unwrap();
    assert_eq!(series.mi.len(), 3);
    for t in 0..3 {
        let (orho, omi) = oracle_pearson_mi(vecs[t].values(), vecs[t + 1].values());
        assert!(close(series.rho[t], orho, 1e-12));
        assert!(close(series.mi[t], omi, 1e-12));
    }
}

#[test]
fn quantile_worked_examples() {
    let c = candidate_boundaries(&[0.9, 0.1, 0.8, 0.05, 0.7, 0.2], 0.35).unwrap();
    assert_eq!(c.quantile_threshold, 0.2);
    assert_eq!(c.positions, vec![2, 4, 6]);
    let c = candidate_boundaries(&[0.4, 0.3], 0.35).unwrap();
    assert_eq!(c.positions, vec![2]);
    let c = candidate_boundaries(&[0.5; 5], 0.1).unwrap();
    assert_eq!(c.positions, vec![1, 2, 3, 4, 5]);
}

#[test]
fn quantile_matches_integer_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..300 {
        let n = rng.random_range(1..60);
        let levels = if case % 3 == 0 { 3 } else { 1000 };
        let mi: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 10.0).collect();
        for q in [10, 20, 35, 50, 90, 100] {
            let got = candidate_boundaries(&mi, q as f64 / 100.0).unwrap();
            let (th, pos) = oracle_candidates(&mi, q);
            assert_eq!(got.quantile_threshold, th, "n={n} q={q}");
            assert_eq!(got.positions, pos, "n={n} q={q}");
        }
    }
}

#[test]
fn boundary_probability_hand_table() {
    use Polarity::{Cont, Shift};
    let j = |l: &str, p, c| IntentJudgment::new(l, p, c);
    let cases: Vec<(Vec<IntentJudgment>, f64)> = vec![
        (vec![j("TOPIC_SHIFT", Shift, 0.9), j("DIRECT_RESP", Cont, 0.3)], 0.8),
        (vec![j("TOPIC_SHIFT", Shift, 0.6)], 0.6),
        (vec![j("DETAIL_ELABORATE", Cont, 0.95), j("TOPIC_INTRO", Shift, 0.2)], 0.125),
        (vec![j("DIRECT_RESP", Cont, 0.8), j("DETAIL_ELABORATE", Cont, 0.4)], 0.4),
    ];
    for (judgments, want) in cases {
        assert!(close(boundary_probability(&judgments), want, 1e-12), "{judgments:?}");
    }
}

#[test]
fn metric_worked_examples() {
    let b = |p: Vec<usize>, t| BoundarySet::new(p, t).unwrap();
    let r = b(vec![2], 4);
    let h = b(vec![], 4);
    assert_eq!(pk(&r, &r, None).unwrap(), 0.0);
    assert!(close(pk(&r, &h, Some(1)).unwrap(), oracle_pk(&[2], &[], 4, 1), 1e-15));
    assert!(close(window_diff(&r, &h, Some(1)).unwrap(), oracle_wd(&[2], &[], 4, 1), 1e-15));
    let f = boundary_f1(&b(vec![3, 7], 10), &b(vec![3], 10)).unwrap();
    assert!(close(f, 2.0 / 3.0, 1e-15));
    assert!(close(composite_score(0.692, 0.172, 0.098).unwrap(), 0.7785, 1e-12));
    assert!(close(composite_score(0.245, 0.470, 0.493).unwrap(), 0.38175, 1e-12));
}

#[test]
fn window_diff_maximal_penalty() {
    let r = BoundarySet::new(vec![1, 2, 3, 4, 5], 6).unwrap();
    let h = BoundarySet::empty(6);
    assert_eq!(window_diff(&r, &h, Some(1)).unwrap(), 1.0);
}

#[test]
fn segmentation_metrics_match_label_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..400 {
        let t = rng.random_range(2..40);
        let pick = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let p = rng.random_range(0.0..0.5);
            (1..t).filter(|_| rng.random_bool(p)).collect()
        };
        let rp = pick(&mut rng);
        let hp = pick(&mut rng);
        let r = BoundarySet::new(rp.clone(), t).unwrap();
        let h = BoundarySet::new(hp.clone(), t).unwrap();
        let k = rng.random_range(1..t);
        assert!(close(pk(&r, &h, Some(k)).unwrap(), oracle_pk(&rp, &hp, t, k), 1e-15));
        assert!(close(window_diff(&r, &h, Some(k)).unwrap(), oracle_wd(&rp, &hp, t, k), 1e-15));
        assert!(close(boundary_f1(&r, &h).unwrap(), oracle_f1(&rp, &hp), 1e-15));
    }
}

#[test]
fn qa_worked_examples() {
    assert!(close(qa_token_f1("the blue car", "blue car"), 0.8, 1e-15));
    assert!(close(bleu1("blue car", "a blue car"), (1.0f64 - 1.5).exp(), 1e-15));
    assert_eq!(qa_token_f1("", "blue"), 0.0);
    assert_eq!(bleu1("", "blue"), 0.0);
}

fn repo_from(units: Vec<esmem_core::MemoryUnit>) -> MemoryRepository {
    MemoryRepository::new("synthetic", Value::Null, units).unwrap()
}

#[test]
fn index_scores_equal_brute_force_dots() {
    let units = synthetic_units(10, 12, 4, 1000, 1);
    let index = VectorIndex::build(&units).unwrap();
    let q = EmbeddingVector::from_normalized(oracle_mock_embedding("query", 4, 12)).unwrap();
    let scores = index.boundary_scores(&q).unwrap();
    for (i, u) in units.iter().enumerate() {
        let want: f64 = u.e_bnd.values().iter().zip(q.values()).map(|(a, b)| a * b).sum();
        assert_eq!(scores[i], want);
    }
    let self_q = units[3].e_bnd.clone();
    assert!(close(index.boundary_scores(&self_q).unwrap()[3], 1.0, 1e-6));
}

#[test]
fn retrieval_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..50u64 {
        let n = rng.random_range(1..=20);
        let vocab = if case % 2 == 0 { 3 } else { 1000 };
        let units = synthetic_units(n, 8, case, vocab, case);
        let repo = repo_from(units.clone());
        let q = EmbeddingVector::from_normalized(oracle_mock_embedding(&format!("q{case}"), case, 8)).unwrap();
        let anchor_k = rng.random_range(1..=12);
        let final_k = rng.random_range(1..=12);
        let alpha = [0.0, 0.3, 0.7, 1.0][rng.random_range(0..4)];

        let wide = RetrievalParams { anchor_k, window_w: n, alpha, final_k };
        let got = retrieve_embedded("q", &q, &repo, &wide).unwrap();
        assert_eq!(got.selected, oracle_global_fused(q.values(), &units, alpha, final_k), "case {case}");

        let narrow = RetrievalParams { window_w: 3, ..wide };
        let got = retrieve_embedded("q", &q, &repo, &narrow).unwrap();
        let want = oracle_retrieve(q.values(), &units, anchor_k, 3, alpha, final_k);
        assert_eq!(got.selected, want, "case {case}");
    }
}
