use splatocc::attention::*;

fn perturb_view(t: &TokenSet, view: usize, delta: f64) -> TokenSet {
    let mut views = t.views().to_vec();
    let m = &mut views[view];
    let v = m.get(0, 0);
    m.set(0, 0, v + delta);
    TokenSet::new(views, t.registers()).unwrap()
}

#[test]
fn attention_rows_are_distributions() {
    for seed in 0..20 {
        let t = TokenSet::random(3, 5, 2, 6, seed).unwrap();
        let all = Mat::vstack(t.views()).unwrap();
        let w = attention_weights(&all, &all).unwrap();
        for r in 0..w.rows() {
            assert!(w.row(r).iter().all(|&x| x >= 0.0));
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn in_frame_output_is_view_local() {
    let w = AttentionWeights::seeded(6, 4, 1);
    let t = TokenSet::random(4, 5, 1, 6, 2).unwrap();
    let base = in_frame_stage(&t, &w).unwrap();
    let moved = in_frame_stage(&perturb_view(&t, 1, 0.7), &w).unwrap();
    for v in [0, 2, 3] {
        assert_eq!(base[v], moved[v]);
    }
    assert_ne!(base[1], moved[1]);
}

#[test]
fn cross_frame_is_permutation_equivariant() {
    let w = AttentionWeights::seeded(6, 3, 4);
    let t = TokenSet::random(4, 3, 1, 6, 5).unwrap();
    let out = alternating_block(&t, &w).unwrap();
    let perm = [2, 0, 3, 1];
    let permuted = TokenSet::new(perm.iter().map(|&i| t.views()[i].clone()).collect(), t.registers()).unwrap();
    let pout = alternating_block(&permuted, &w).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(pout.views()[k], out.views()[i]);
    }
}

#[test]
fn fixture_file_reproduces_block_output() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("weights");
    let w = AttentionWeights::seeded(8, 4, 9);
    w.save_fixture(&stem).unwrap();
    assert!(stem.with_extension("json").is_file() && stem.with_extension("f32").is_file());
    let back = AttentionWeights::load_fixture(&stem).unwrap();
    for (x, y) in [
        (&w.in_frame.query, &back.in_frame.query),
        (&w.in_frame.value, &back.in_frame.value),
        (&w.cross_frame.key, &back.cross_frame.key),
    ] {
        assert_eq!((x.rows(), x.cols()), (y.rows(), y.cols()));
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1.0)));
    }
    let t = TokenSet::random(2, 4, 1, 8, 1).unwrap();
    let a = alternating_block(&t, &w).unwrap();
    let b = alternating_block(&t, &back).unwrap();
    let diff = a.views().iter().zip(b.views()).flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
    assert!(diff <= 1e-5);
}
