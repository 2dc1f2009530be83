//! The forward pass matches an independent scalar-loop recomputation at
//! every intermediate stage.

#[path = "support/oracle.rs"]
mod oracle;

#[test]
fn forward_matches_scalar_reference() {
    let net = oracle::model();
    for id in 0..6 {
        let (emb, sim, max, logits) = oracle::compare(&net, &oracle::probe(id));
        for (name, err) in [("embeddings", emb), ("similarity", sim), ("max", max), ("logits", logits)] {
            assert!(err < 1e-6, "probe {id}: {name} differs by {err:e}");
        }
    }
}

#[test]
fn reference_is_not_degenerate() {
    let a = oracle::reference(&oracle::probe(0));
    let b = oracle::reference(&oracle::probe(1));
    assert_ne!(a.logits, b.logits);
    assert!(a.max.iter().all(|v| v.is_finite() && *v > 0.0));
}
