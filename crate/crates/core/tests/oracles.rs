mod common;

#[test]
fn library_matches_loop_references() {
    for (name, err) in common::oracle_errors(200, 11) {
        assert!(err <= 1e-6, "{name}: max abs error {err}");
    }
}

#[test]
fn component_boxes_match_reference_on_large_masks() {
    use rand::{Rng, SeedableRng};
    use stprompt::spatial_localizer::extract_boxes;
    use stprompt::tensor::Matrix;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(32..=64), rng.random_range(32..=64));
        let density = rng.random_range(0.2..0.7);
        let heat = Matrix::from_vec(
            h,
            w,
            (0..h * w)
                .map(|_| if rng.random_bool(density) { rng.random_range(0.6..1.0) } else { 0.0 })
                .collect(),
        );
        let got = extract_boxes(&heat, 0.6, 1);
        let want = common::component_boxes(&heat, 0.6, 1);
        assert_eq!(got.len(), want.len());
        for (g, (r, c)) in got.iter().zip(&want) {
            assert_eq!(g.rect, *r);
            assert_eq!(g.confidence, *c);
        }
    }
}
