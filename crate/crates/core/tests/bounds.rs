mod common;

use common::random_simplex;
use mixsup::losses::{min_entropy, shannon_entropy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_bounds(p: &mixsup::field::SimplexField<f64>) {
    let ln_c = (p.num_classes() as f64).ln();
    let (hmin, h) = (min_entropy(p), shannon_entropy(p));
    assert!(hmin >= 0.0, "H_min {hmin} < 0");
    assert!(hmin <= h + 1e-12, "H_min {hmin} > H {h}");
    assert!(h <= ln_c + 1e-12, "H {h} > ln C {ln_c}");
}

#[test]
fn ten_thousand_points_respect_the_entropy_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    for _ in 0..10_000 {
        let c = rng.gen_range(2..6);
        assert_bounds(&random_simplex(&mut rng, 1, 1, c));
    }
}

#[test]
fn vertices_and_center() {
    use mixsup::field::SimplexField;
    for c in 2..6 {
        let mut vertex = vec![0.0; c];
        vertex[c - 1] = 1.0;
        let v = SimplexField::new(1, 1, c, vertex).unwrap();
        assert!(shannon_entropy(&v) <= 1e-6 && min_entropy(&v) <= 1e-12);
        let u = SimplexField::new(1, 1, c, vec![1.0 / c as f64; c]).unwrap();
        assert!((shannon_entropy(&u) - (c as f64).ln()).abs() < 1e-12);
        assert!((min_entropy(&u) - (c as f64).ln()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn chain_holds_on_arbitrary_fields(raw in proptest::collection::vec(1e-9f64..1.0, 2..6), n in 1usize..4) {
        let c = raw.len();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = (0..c).flat_map(|k| std::iter::repeat_n(raw[k] / total, n)).collect();
        let p = mixsup::field::SimplexField::new(1, n, c, probs).unwrap();
        assert_bounds(&p);
    }
}
