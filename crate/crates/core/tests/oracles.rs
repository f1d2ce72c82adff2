mod common;

use common::*;
use danet::adanet::{assignments_from_anchors, enumerate_subsets, pit_loss, select_attractor_set};
use danet::attractor::form_attractors;
use danet::masks::MaskSet;
use danet::nn::EmbeddingMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn close(a: &Array2<f64>, b: &[Vec<f64>]) -> bool {
    a.nrows() == b.len()
        && a.rows()
            .into_iter()
            .zip(b)
            .all(|(r, s)| r.iter().zip(s).all(|(x, y)| (x - y).abs() <= TOL * (1.0 + y.abs())))
}

#[test]
fn attractors_match_loops() {
    for seed in 0..100 {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let y = random_masks(&mut rng, inst.c, inst.v.ncols());
        let v = EmbeddingMatrix::from_bins(inst.v.t().to_owned()).unwrap();
        let got = form_attractors(&v, y.view(), &inst.w).unwrap();
        let want = ref_attractors(&inst.v, &y, inst.w.values()).unwrap();
        assert!(close(got.values(), &want), "seed {seed}");
    }
}

#[test]
fn anchor_assignments_match_loops() {
    for seed in 0..100 {
        let inst = instance(seed);
        let v = EmbeddingMatrix::from_bins(inst.v.t().to_owned()).unwrap();
        let got = assignments_from_anchors(inst.anchors.view(), &v).unwrap();
        let want = ref_anchor_assignments(&inst.anchors, &inst.v);
        let diff = (got.values() - &want).mapv(f64::abs).fold(0.0f64, |m, x| m.max(*x));
        assert!(diff <= TOL, "seed {seed}: {diff}");
    }
}

#[test]
fn subsets_are_lexicographic() {
    for n in 1..=8 {
        for c in 1..=n {
            assert_eq!(enumerate_subsets(n, c).unwrap(), ref_subsets(n, c), "n={n} c={c}");
        }
    }
}

#[test]
fn selection_matches_exhaustive_search() {
    for seed in 0..100 {
        let inst = instance(seed);
        let v = EmbeddingMatrix::from_bins(inst.v.t().to_owned()).unwrap();
        let got = select_attractor_set(inst.anchors.view(), &v, &inst.w, inst.c).unwrap();
        let (index, want) = ref_select(&inst.anchors, &inst.v, inst.w.values(), inst.c).unwrap();
        assert_eq!(got.index, index, "seed {seed}");
        assert!(close(got.attractors.values(), &want), "seed {seed}");
    }
}

#[test]
fn pit_matches_all_orderings() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..=3);
        let ft = rng.random_range(1..=200);
        let x = ndarray::Array1::from_shape_fn(ft, |_| rng.random_range(0.0..2.0));
        let t = random_masks(&mut rng, c, ft);
        let e = random_masks(&mut rng, c, ft);
        let (loss, perm) = pit_loss(x.view(), &MaskSet::new(t.clone()).unwrap(), &MaskSet::new(e.clone()).unwrap()).unwrap();
        let (want_loss, want_perm) = ref_pit(&x, &t, &e);
        assert!((loss - want_loss).abs() <= TOL * (1.0 + want_loss), "seed {seed}");
        assert_eq!(perm, want_perm, "seed {seed}");
    }
}

#[test]
fn pit_breaks_ties_toward_first_ordering() {
    let x = ndarray::Array1::from_elem(4, 1.0);
    let m = Array2::from_elem((3, 4), 1.0 / 3.0);
    let set = MaskSet::new(m).unwrap();
    let (_, perm) = pit_loss(x.view(), &set, &set).unwrap();
    assert_eq!(perm, vec![0, 1, 2]);
}
