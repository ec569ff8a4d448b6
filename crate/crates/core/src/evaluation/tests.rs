use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::boxes::BoundingBox;
use crate::data::{GroundTruthBox, Sample};
use crate::model::{EncoderConfig, ModelConfig};
use crate::numerics::Tensor;

fn bx(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
    BoundingBox::new(x, y, w, h)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best total IoU over all injective maps from the shorter list into the longer.
fn brute_force(preds: &[BoundingBox], gts: &[BoundingBox]) -> f64 {
    let (short, long) = if preds.len() <= gts.len() {
        (preds, gts)
    } else {
        (gts, preds)
    };
    permutations(long.len())
        .iter()
        .map(|p| {
            short
                .iter()
                .zip(p)
                .map(|(a, &j)| iou(a, &long[j]))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn random_box(rng: &mut impl Rng) -> BoundingBox {
    bx(
        rng.random_range(0..20),
        rng.random_range(0..20),
        rng.random_range(1..15),
        rng.random_range(1..15),
    )
}

#[test]
fn iou_examples() {
    let a = bx(0, 0, 40, 40);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &bx(40, 0, 40, 40)), 0.0);
    assert_eq!(iou(&a, &bx(20, 0, 40, 40)), 1.0 / 3.0);
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in (0u32..30, 0u32..30, 1u32..20, 1u32..20), b in (0u32..30, 0u32..30, 1u32..20, 1u32..20)) {
        let (a, b) = (bx(a.0, a.1, a.2, a.3), bx(b.0, b.1, b.2, b.3));
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v == 1.0, a == b);
    }
}

#[test]
fn matching_examples() {
    let one = match_boxes(&[bx(0, 0, 4, 4)], &[bx(1, 1, 4, 4)]);
    assert_eq!(one.pairs.len(), 1);
    assert_eq!((one.pairs[0].pred, one.pairs[0].gt), (0, 0));

    let gts = [bx(0, 0, 10, 10), bx(30, 30, 10, 10)];
    let a = match_boxes(&gts, &gts);
    assert_eq!(a.total_iou(), 2.0);
    assert!(a.pairs.iter().all(|m| m.pred == m.gt));
    let swapped = match_boxes(&[gts[1], gts[0]], &gts);
    assert_eq!(
        swapped
            .pairs
            .iter()
            .map(|m| (m.pred, m.gt))
            .collect::<Vec<_>>(),
        vec![(0, 1), (1, 0)]
    );
}

#[test]
fn ties_resolve_to_lowest_indices() {
    let far = [bx(0, 0, 2, 2), bx(10, 10, 2, 2)];
    let other = [bx(50, 50, 2, 2), bx(60, 60, 2, 2), bx(70, 70, 2, 2)];
    let a = match_boxes(&far, &other);
    assert_eq!(
        a.pairs.iter().map(|m| (m.pred, m.gt)).collect::<Vec<_>>(),
        vec![(0, 0), (1, 1)]
    );
    assert_eq!(a.unmatched_gts, vec![2]);
    let b = match_boxes(&other, &far);
    assert_eq!(
        b.pairs.iter().map(|m| (m.pred, m.gt)).collect::<Vec<_>>(),
        vec![(0, 0), (1, 1)]
    );
    assert_eq!(b.unmatched_preds, vec![2]);
}

#[test]
fn matching_equals_enumeration() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    for trial in 0..600 {
        let np = 1 + trial % 5;
        let ng = 1 + (trial / 5) % 5;
        let preds: Vec<_> = (0..np).map(|_| random_box(&mut rng)).collect();
        let gts: Vec<_> = (0..ng).map(|_| random_box(&mut rng)).collect();
        let a = match_boxes(&preds, &gts);
        assert_eq!(a.pairs.len(), np.min(ng));
        assert_eq!(a.unmatched_preds.len() + a.pairs.len(), np);
        assert_eq!(a.unmatched_gts.len() + a.pairs.len(), ng);
        assert!((a.total_iou() - brute_force(&preds, &gts)).abs() < 1e-12);
    }
}

#[test]
fn assignment_solver_equals_enumeration_on_arbitrary_costs() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
    for _ in 0..300 {
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(rows..=5);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let got: f64 = min_cost_assignment(rows, cols, |r, c| cost[r][c])
            .iter()
            .enumerate()
            .map(|(r, &c)| cost[r][c])
            .sum();
        let best = permutations(cols)
            .iter()
            .map(|p| (0..rows).map(|r| cost[r][p[r]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!((got - best).abs() < 1e-9);
    }
}

#[test]
fn corloc_examples() {
    assert_eq!(corloc(&[Some(1.0); 4], 0.5).unwrap(), 1.0);
    assert_eq!(corloc(&[Some(0.0); 4], 0.5).unwrap(), 0.0);
    let mixed: Vec<_> = (0..10)
        .map(|i| Some(if i < 7 { 0.6 } else { 0.4 }))
        .collect();
    assert_eq!(corloc(&mixed, 0.5).unwrap(), 0.7);
    assert_eq!(corloc(&[Some(0.9), None], 0.5).unwrap(), 0.5);
    assert!(corloc(&mixed, 1.0).is_err());
    assert!(corloc(&[], 0.5).is_err());
    let mut last = 1.0;
    for t in 1..100 {
        let v = corloc(&mixed, t as f64 / 100.0).unwrap();
        assert!(v <= last);
        last = v;
    }
}

#[test]
fn purity_examples() {
    assert_eq!(purity(&[0, 1, 2], &[5, 6, 7]).unwrap(), 1.0);
    assert_eq!(purity(&[0, 0, 0, 0], &[1, 1, 2, 2]).unwrap(), 0.5);
    assert_eq!(purity(&[0, 0, 0, 1, 1], &[0, 0, 1, 1, 1]).unwrap(), 0.8);
    // Relabelling clusters changes nothing.
    assert_eq!(purity(&[7, 7, 7, 3, 3], &[0, 0, 1, 1, 1]).unwrap(), 0.8);
    assert!(matches!(purity(&[], &[]), Err(Error::Config(_))));
    assert!(matches!(purity(&[0], &[0, 1]), Err(Error::Dimension(_))));
}

fn pinned_model(x: usize, y: usize, stamp: usize) -> StampNet {
    let enc = EncoderConfig {
        block_widths: vec![2, 3],
        convs_per_block: 1,
        dense_width: 6,
        ..EncoderConfig::default()
    };
    let mut model = StampNet::new(ModelConfig::new(16, 6, 1, 2).with_encoder(enc), 3).unwrap();
    model.pin_head(0, x, y, stamp, 50.0).unwrap();
    model
}

/// Images the pinned model renders itself, annotated with its own choices.
fn self_pastes(model: &StampNet, n: usize, label: impl Fn(usize) -> u32) -> Dataset {
    let mut rngs: Vec<SeededRng> = (0..n)
        .map(|i| stream_rng(0, Stream::Eval, i as u64))
        .collect();
    let out = model
        .infer(&Tensor::zeros([n, 1, 16, 16]), 0.01, &mut rngs)
        .unwrap();
    let preds: Vec<_> = out
        .latents
        .iter()
        .map(|l| extract_predictions(l, 6, 6))
        .collect();
    let samples = (0..n)
        .map(|i| Sample {
            image: Tensor::new(
                [16, 16],
                out.reconstruction.data()[i * 256..(i + 1) * 256].to_vec(),
            )
            .unwrap(),
            boxes: vec![GroundTruthBox {
                bbox: preds[i][0].bbox,
                class_label: label(i),
            }],
        })
        .collect();
    Dataset {
        canvas_width: 16,
        canvas_height: 16,
        samples,
    }
}

#[test]
fn pinned_model_on_its_own_pastes_is_perfect() {
    let model = pinned_model(4, 7, 1);
    let data = self_pastes(&model, 6, |_| 0);
    assert_eq!(data.samples[0].boxes[0].bbox, bx(4, 7, 6, 6));
    let report = evaluate(&model, &data, "pastes", 0.01, 9).unwrap();
    assert_eq!(report.corloc, 1.0);
    assert_eq!(report.mean_iou, 1.0);
    assert_eq!(report.purity, 1.0);
    assert_eq!(report.per_stamp_counts, vec![0, 6]);
    assert_eq!(report.samples, 6);
}

#[test]
fn single_cluster_on_balanced_classes_has_half_purity() {
    let model = pinned_model(0, 0, 0);
    let data = self_pastes(&model, 8, |i| (i % 2) as u32);
    let report = evaluate(&model, &data, "balanced", 0.01, 9).unwrap();
    assert_eq!(report.purity, 0.5);
}

#[test]
fn evaluation_is_seeded_and_checks_canvas() {
    let model = pinned_model(2, 2, 1);
    let data = self_pastes(&model, 4, |_| 0);
    let a = predict(&model, &data, 1.0, 5).unwrap();
    assert_eq!(a, predict(&model, &data, 1.0, 5).unwrap());
    let wrong = Dataset {
        canvas_width: 20,
        canvas_height: 20,
        samples: vec![],
    };
    assert!(matches!(
        evaluate(&model, &wrong, "x", 0.01, 0),
        Err(Error::Dimension(_))
    ));
    let empty = Dataset {
        canvas_width: 16,
        canvas_height: 16,
        samples: vec![],
    };
    assert!(evaluate(&model, &empty, "x", 0.01, 0).is_err());
}

fn sample_report() -> MetricsReport {
    MetricsReport {
        dataset: "test \"set\"".into(),
        samples: 1000,
        corloc: 0.987,
        mean_iou: 2.0 / 3.0,
        purity: 0.95,
        threshold: 0.5,
        tau_eval: 0.01,
        per_stamp_counts: vec![100, 0, 900],
    }
}

#[test]
fn report_text_format() {
    let text = sample_report().to_text();
    assert!(text.contains("mean_iou = 0.666667\n"));
    assert!(text.contains("corloc = 0.987000\n"));
    assert!(text.contains("per_stamp_counts = [100, 0, 900]\n"));
    let back = MetricsReport::from_text(&text).unwrap();
    assert_eq!(back.to_text(), text);
    assert_eq!(back.dataset, "test \"set\"");
    assert_eq!(back.per_stamp_counts, vec![100, 0, 900]);
    assert!((back.mean_iou - 2.0 / 3.0).abs() < 5e-7);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.toml");
    sample_report().export(&path).unwrap();
    assert_eq!(read_report(&path).unwrap(), back);
}

#[test]
fn report_rejects_bad_content() {
    let zero = MetricsReport {
        samples: 0,
        ..sample_report()
    };
    assert!(matches!(zero.validated(), Err(Error::Config(_))));
    let bad = MetricsReport {
        purity: 1.5,
        ..sample_report()
    };
    assert!(bad.validated().is_err());
    assert!(matches!(
        MetricsReport::from_text("samples = \"x\""),
        Err(Error::Format { .. })
    ));
}
