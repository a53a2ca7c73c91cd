mod common;

use proptest::prelude::*;
use stprompt::feature_io::{EmbeddingStream, GroundTruth, Rect};
use stprompt::metrics::{frame_auc, tiou};
use stprompt::prompt_bank::QuerySet;
use stprompt::sa2::{spatial_aggregate, PatchFeatures};
use stprompt::spatial_localizer::{extract_boxes, retrieve, PatchGrid, ScaleSpec, SpatialHeatMap};
use stprompt::temporal_adapter::distance_adjacency;
use stprompt::tensor::Matrix;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn stream_strategy() -> impl Strategy<Value = EmbeddingStream> {
    (1usize..6, 1usize..4, 1usize..4, 1usize..6).prop_flat_map(|(t, h, w, d)| {
        (
            prop::collection::vec(-1e3f32..1e3, t * d),
            prop::collection::vec(-1e3f32..1e3, t * h * w * d),
        )
            .prop_map(move |(f, p)| EmbeddingStream::new("v", (t, h, w, d), f, p).unwrap())
    })
}

fn unit_row_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    matrix(rows, cols, -1.0, 1.0).prop_filter("non-degenerate rows", move |m| {
        (0..m.rows()).all(|r| m.row(r).iter().map(|x| x * x).sum::<f64>() > 1e-3)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stream_bytes_round_trip(s in stream_strategy()) {
        let back = EmbeddingStream::from_bytes("v", &s.to_bytes()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        cases in prop::collection::vec((0u8..8, any::<bool>()), 2..200)
    ) {
        let scores: Vec<f64> = cases.iter().map(|(s, _)| f64::from(*s) / 8.0).collect();
        let flags: Vec<u8> = cases.iter().map(|(_, f)| u8::from(*f)).collect();
        prop_assume!(flags.contains(&0) && flags.contains(&1));
        let got = frame_auc(&scores, &flags).unwrap();
        prop_assert!((got - common::pairwise_auc(&scores, &flags)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_increasing_transforms(
        cases in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..100)
    ) {
        let scores: Vec<f64> = cases.iter().map(|c| c.0).collect();
        let flags: Vec<u8> = cases.iter().map(|c| u8::from(c.1)).collect();
        prop_assume!(flags.contains(&0) && flags.contains(&1));
        let warped: Vec<f64> = scores.iter().map(|x| x.exp() * 2.0 + x.powi(3)).collect();
        prop_assert_eq!(frame_auc(&scores, &flags).unwrap(), frame_auc(&warped, &flags).unwrap());
    }

    #[test]
    fn tiou_never_drops_as_threshold_decreases(
        frames in prop::collection::vec((any::<bool>(), 0.0f64..50.0, 0.0f64..50.0, 1.0f64..40.0, 1.0f64..40.0), 1..20),
        shift in 0.0f64..20.0,
    ) {
        let mut gt = GroundTruth::normal(frames.len());
        let mut pred = vec![Vec::new(); frames.len()];
        for (t, &(flag, x, y, w, h)) in frames.iter().enumerate() {
            if flag {
                gt.frame_flags[t] = 1;
                gt.boxes[t].push(Rect::new(x, y, w, h));
                pred[t].push(Rect::new(x + shift, y, w, h + shift / 2.0));
            }
        }
        let mut last = -1.0;
        for thr in [0.95, 0.8, 0.6, 0.5, 0.3, 0.1, 0.0] {
            if let Some(v) = tiou(&pred, &gt, thr).unwrap() {
                prop_assert!(v >= last);
                last = v;
            }
        }
    }

    #[test]
    fn retrieval_is_a_probability_and_grows_with_abnormal_queries(
        patches in unit_row_matrix(6, 5),
        normal in unit_row_matrix(2, 5),
        abnormal in unit_row_matrix(2, 5),
        tau in 0.05f64..1.0,
    ) {
        let grid = PatchGrid::new(2, 3, ScaleSpec::FINE, patches.clone()).unwrap();
        let q = QuerySet::new(normal.clone(), abnormal.clone(), vec![], vec![]).unwrap();
        let heat = retrieve(&grid, &q, tau).unwrap();
        prop_assert!(heat.values.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        let oracle = common::retrieval(&patches, &normal, &abnormal, tau);
        // Normal and abnormal masses sum to one.
        let normal_mass = common::retrieval(&patches, &abnormal, &normal, tau);
        for (a, b) in oracle.iter().zip(&normal_mass) {
            prop_assert!((a + b - 1.0).abs() < 1e-6);
        }
        // Duplicating an abnormal query adds abnormal mass.
        let more = Matrix::from_rows(&[abnormal.row(0).to_vec(), abnormal.row(1).to_vec(), abnormal.row(0).to_vec()]);
        let q2 = QuerySet::new(normal, more, vec![], vec![]).unwrap();
        let heat2 = retrieve(&grid, &q2, tau).unwrap();
        for (a, b) in heat.values.as_slice().iter().zip(heat2.values.as_slice()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn upsampling_stays_in_unit_range(values in matrix(4, 4, 0.0, 1.0), h in 100u32..260, w in 100u32..260) {
        let map = SpatialHeatMap { scale: ScaleSpec::COARSE, values };
        let up = map.upsample((h, w));
        prop_assert_eq!(up.shape(), (h as usize, w as usize));
        prop_assert!(up.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn boxes_match_labeling_oracle(
        (h, w, cells) in (1usize..=64, 1usize..=64).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(prop_oneof![Just(0.0f64), 0.5f64..1.0], h * w))
        }),
        min_area in 1usize..4,
    ) {
        let heat = Matrix::from_vec(h, w, cells);
        let got = extract_boxes(&heat, 0.6, min_area);
        let want = common::component_boxes(&heat, 0.6, min_area);
        prop_assert_eq!(got.len(), want.len());
        for (g, (r, c)) in got.iter().zip(&want) {
            prop_assert_eq!(g.rect, *r);
            prop_assert_eq!(g.confidence, *c);
            prop_assert!(g.rect.within((h as u32, w as u32)));
        }
    }

    #[test]
    fn aggregation_attention_is_a_distribution(
        data in matrix(5 * 9, 4, -2.0, 2.0),
        k in 1usize..=9,
    ) {
        let p = PatchFeatures::new(5, (3, 3), data).unwrap();
        let out = spatial_aggregate(&p, k).unwrap();
        for t in 0..5 {
            let row = out.attention.row(t);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(out.selected[t].len(), k);
        }
    }

    #[test]
    fn adjacency_rows_are_distributions(frames in 1usize..40, sigma in 0.1f64..10.0) {
        let a = distance_adjacency(frames, sigma).unwrap();
        for i in 0..frames {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.row(i).iter().all(|&v| v > 0.0));
        }
    }
}
