//! k-reciprocal re-ranking against a dense, matrix-at-a-time transcription of
//! the reference algorithm, plus a hand-checked four-point instance.

mod common;

use prkt_core::retrieval::{
    k_reciprocal_rerank, k_reciprocal_rerank_within, rank_rows, search, EmbeddingStore, RerankParams,
};
use common::oracles::{dense_rerank, unit};
use prkt_core::Tensor;
use rand::Rng;

fn store_of(rows: &[Vec<f32>]) -> EmbeddingStore {
    let d = rows[0].len();
    let data = rows.iter().flatten().copied().collect();
    let labels = (0..rows.len()).map(|i| format!("L{}", i / 2)).collect();
    let refs = (0..rows.len()).map(|i| format!("r{i}")).collect();
    EmbeddingStore::new(&Tensor::new([rows.len(), d], data).unwrap(), labels, refs).unwrap()
}

fn rows_of(store: &EmbeddingStore) -> Vec<Vec<f32>> {
    (0..store.len()).map(|i| store.row(i).to_vec()).collect()
}

const TOL: f64 = 1e-12;

#[test]
fn four_point_instance_promotes_the_runner_up() {
    // Query at 0 degrees. A (-20) is its nearest neighbour but A's own two
    // nearest are C (-30) and D (-38), so A is not k-reciprocal with the
    // query. B (+25) is, and shares the query's neighbourhood.
    let gallery: Vec<Vec<f32>> = [-20.0, 25.0, -30.0, -38.0].map(unit).to_vec();
    let store = store_of(&gallery);
    let query = unit(0.0);
    let p = RerankParams {
        k1: 2,
        k2: 1,
        lambda: 0.3,
    };

    let plain = search(&store, &query, 4).unwrap();
    let cos_order: Vec<usize> = plain.hits.iter().map(|h| h.row).collect();
    assert_eq!(cos_order, [0, 1, 2, 3]);

    let rr = k_reciprocal_rerank(&store, &[query.clone()], &p).unwrap();
    assert_eq!(rr.ranking(0), [1, 0, 2, 3], "B must overtake A at rank 1");

    let mut feat = vec![query];
    feat.extend(rows_of(&store));
    let dense = dense_rerank(&feat, 1, p.k1, p.k2, p.lambda);
    // values worked out by hand from the definitions
    let expected = [0.785345, 0.316807, 0.889596, 1.0];
    for g in 0..4 {
        assert!((rr.dist(0, g) - dense[0][1 + g]).abs() < TOL);
        assert!((rr.dist(0, g) - expected[g]).abs() < 1e-5, "g={g}: {}", rr.dist(0, g));
    }

    // With pure Jaccard distance only B shares support with the query.
    let jac = k_reciprocal_rerank(&store, &[unit(0.0)], &RerankParams { lambda: 0.0, ..p }).unwrap();
    assert!((jac.dist(0, 1) - 0.263167).abs() < 1e-5);
    for g in [0, 2, 3] {
        assert_eq!(jac.dist(0, g), 1.0);
    }
    assert_eq!(jac.ranking(0), [1, 0, 2, 3]);
}

fn random_rows(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

fn random_params(rng: &mut rand_chacha::ChaCha8Rng, gallery: usize) -> RerankParams {
    let k1 = rng.random_range(2..gallery.min(12));
    RerankParams {
        k1,
        k2: rng.random_range(1..k1),
        lambda: [0.0, 0.3, 0.5, 1.0][rng.random_range(0..4)],
    }
}

#[test]
fn external_queries_match_dense_transcription() {
    let mut rng = common::rng(5);
    for _ in 0..40 {
        let g = rng.random_range(4..30);
        let d = rng.random_range(2..8);
        let store = store_of(&random_rows(&mut rng, g, d));
        let nq = rng.random_range(1..4);
        let queries: Vec<Vec<f32>> = random_rows(&mut rng, nq, d)
            .into_iter()
            .map(|q| prkt_core::retrieval::l2_normalized(&q).unwrap())
            .collect();
        let p = random_params(&mut rng, g);
        let rr = k_reciprocal_rerank(&store, &queries, &p).unwrap();
        let mut feat = queries.clone();
        feat.extend(rows_of(&store));
        let dense = dense_rerank(&feat, queries.len(), p.k1, p.k2, p.lambda);
        for q in 0..queries.len() {
            for j in 0..g {
                let want = dense[q][queries.len() + j];
                assert!((rr.dist(q, j) - want).abs() < TOL, "{p:?} q={q} j={j}: {} vs {want}", rr.dist(q, j));
            }
        }
    }
}

#[test]
fn leave_one_out_matches_dense_transcription() {
    let mut rng = common::rng(6);
    for _ in 0..40 {
        let n = rng.random_range(4..30);
        let d = rng.random_range(2..8);
        let store = store_of(&random_rows(&mut rng, n, d));
        let p = random_params(&mut rng, n);
        let rr = k_reciprocal_rerank_within(&store, &p).unwrap();
        let dense = dense_rerank(&rows_of(&store), n, p.k1, p.k2, p.lambda);
        for q in 0..n {
            for j in 0..n {
                assert!((rr.dist(q, j) - dense[q][j]).abs() < TOL, "{p:?} q={q} j={j}");
            }
        }
    }
}

#[test]
fn lambda_one_keeps_cosine_order() {
    let mut rng = common::rng(8);
    for _ in 0..50 {
        let n = rng.random_range(4..60);
        let d = rng.random_range(2..10);
        let store = store_of(&random_rows(&mut rng, n, d));
        let k1 = rng.random_range(2..n.min(25));
        let p = RerankParams {
            k1,
            k2: rng.random_range(1..k1),
            lambda: 1.0,
        };
        let query = random_rows(&mut rng, 1, d).remove(0);
        let rr = k_reciprocal_rerank(&store, &[query.clone()], &p).unwrap();
        let cos_order: Vec<usize> = search(&store, &query, n).unwrap().hits.iter().map(|h| h.row).collect();
        assert_eq!(rr.ranking(0), cos_order);

        let within = k_reciprocal_rerank_within(&store, &p).unwrap();
        for q in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| prkt_core::retrieval::dot_f64(store.row(q), store.row(j)))
                .collect();
            let plain: Vec<usize> = rank_rows(&scores).into_iter().filter(|&j| j != q).collect();
            assert_eq!(within.ranking(q), plain);
        }
    }
}
