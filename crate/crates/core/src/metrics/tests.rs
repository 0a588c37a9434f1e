use super::*;

fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn det(b: BBox, confidence: f64, image_id: usize) -> Detection {
    Detection::from_mask(Mask::from_box(8, 8, &b), confidence, image_id).unwrap()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[test]
fn iou_examples() {
    let a = bx(0, 0, 2, 2);
    assert_eq!(iou_box(&a, &a).unwrap(), 1.0);
    assert_eq!(iou_box(&a, &bx(4, 4, 6, 6)).unwrap(), 0.0);
    assert!((iou_box(&a, &bx(1, 1, 3, 3)).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    let broken = BBox {
        x_min: 3,
        y_min: 0,
        x_max: 3,
        y_max: 2,
    };
    assert!(iou_box(&a, &broken).is_err());

    let ma = Mask::from_box(4, 4, &a);
    let mb = Mask::from_box(4, 4, &bx(1, 1, 3, 3));
    assert!((iou_mask(&ma, &mb).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    assert!(iou_mask(&Mask::new(4, 4), &Mask::new(4, 4)).is_err());
    assert_eq!(iou_mask(&ma, &Mask::new(4, 4)).unwrap(), 0.0);
}

#[test]
fn matching_examples() {
    let gt = vec![det(bx(0, 0, 4, 4), 1.0, 0)];
    let none: Vec<Detection> = vec![];
    let m = match_instances(&none, &gt, IouKind::Box, 0.5).unwrap();
    assert_eq!((m.tp(), m.fp(), m.fn_()), (0, 0, 1));

    let m = match_instances(&gt, &gt, IouKind::Mask, 0.5).unwrap();
    assert_eq!((m.tp(), m.fp(), m.fn_()), (1, 0, 0));

    // Both at IoU 0.8 with the ground truth: 16 / 20.
    let dets = vec![det(bx(0, 0, 4, 5), 0.8, 0), det(bx(0, 0, 5, 4), 0.9, 0)];
    let m = match_instances(&dets, &gt, IouKind::Box, 0.5).unwrap();
    assert_eq!(m.matches.len(), 1);
    assert_eq!(m.matches[0].0, 1);
    assert!((m.matches[0].2 - 0.8).abs() < 1e-15);
    assert_eq!(m.unmatched_detections, vec![0]);

    // Equal confidence: input order decides; equal IoU: lower truth index wins.
    let gts = vec![det(bx(0, 0, 2, 2), 1.0, 0), det(bx(2, 0, 4, 2), 1.0, 0)];
    let d = vec![det(bx(1, 0, 3, 2), 0.5, 0), det(bx(1, 0, 3, 2), 0.5, 0)];
    let m = match_instances(&d, &gts, IouKind::Box, 0.3).unwrap();
    assert_eq!(
        m.matches.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>(),
        [(0, 0), (1, 1)]
    );
}

#[test]
fn f_beta_examples() {
    assert!((f_beta(0.821, 0.721, 1.0) - 0.767757).abs() < 1e-6);
    assert_eq!(round2(f_beta(0.821, 0.721, 1.0)), 0.77);
    for x in [0.0, 0.3, 1.0] {
        for beta in [0.5, 1.0, 2.0] {
            assert!((f_beta(x, x, beta) - x).abs() < 1e-15);
        }
    }
    assert!((f_beta(0.5, 1.0, 2.0) - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(f_beta(0.0, 0.0, 1.0), 0.0);
}

#[test]
fn average_precision_examples() {
    let s = |confidence, tp, i| Scored {
        confidence,
        tp,
        key: (0, i),
    };
    assert_eq!(average_precision(&[s(0.9, true, 0)], 1).unwrap(), 1.0);
    assert_eq!(
        average_precision(&[s(0.9, true, 0), s(0.8, false, 1)], 1).unwrap(),
        1.0
    );
    assert_eq!(
        average_precision(&[s(0.9, false, 0), s(0.8, true, 1)], 1).unwrap(),
        0.5
    );
    assert_eq!(average_precision(&[], 2).unwrap(), 0.0);
    assert!(average_precision(&[s(0.9, false, 0)], 0).is_err());
}

#[test]
fn dataset_iou_examples() {
    let j = |p: f64, r: f64| {
        let f = f_beta(p, r, 1.0);
        f / (2.0 - f)
    };
    assert!((j(0.821, 0.721) - 0.623057).abs() < 1e-6);
    assert_eq!(round2(j(0.821, 0.721)), 0.62);
    assert!((j(0.695, 0.635) - 0.496610).abs() < 1e-6);
    assert_eq!(round2(j(0.695, 0.635)), 0.50);
    assert!((dataset_iou(1, 1, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(dataset_iou(0, 0, 0).is_err());
}

fn maps(
    preds: Vec<(usize, Vec<Detection>)>,
    truth: Vec<(usize, Vec<Detection>)>,
) -> (
    BTreeMap<usize, Vec<Detection>>,
    BTreeMap<usize, Vec<Detection>>,
) {
    (preds.into_iter().collect(), truth.into_iter().collect())
}

#[test]
fn evaluate_examples() {
    let truth = vec![
        (
            0,
            vec![det(bx(0, 0, 3, 3), 1.0, 0), det(bx(5, 5, 8, 8), 1.0, 0)],
        ),
        (1, vec![det(bx(2, 2, 6, 4), 1.0, 1)]),
    ];
    let (p, t) = maps(truth.clone(), truth.clone());
    let r = evaluate(&p, &t, 0.5, serde_json::json!({})).unwrap();
    for b in [&r.box_, &r.mask] {
        assert_eq!(b.table_row(), [1.0; 5]);
        assert!(b.undefined.is_empty());
    }
    assert_eq!((r.pixel_precision, r.pixel_recall), (1.0, 1.0));

    let (p, t) = maps(vec![(0, vec![]), (1, vec![])], truth.clone());
    let r = evaluate(&p, &t, 0.5, serde_json::json!({})).unwrap();
    assert_eq!(r.mask.table_row(), [0.0; 5]);
    assert_eq!(r.mask.fn_, 3);
    assert_eq!(r.mask.undefined, ["precision"]);

    let (p, t) = maps(vec![(0, vec![]), (2, vec![])], truth);
    let err = evaluate(&p, &t, 0.5, serde_json::json!({}))
        .unwrap_err()
        .to_string();
    assert!(err.contains("[2]") && err.contains("[1]"), "{err}");
}

#[test]
fn report_json_and_csv_layout() {
    let truth = vec![(0, vec![det(bx(0, 0, 3, 3), 1.0, 0)])];
    let (p, t) = maps(truth.clone(), truth);
    let r = evaluate(&p, &t, 0.5, serde_json::json!({"iou": 0.5})).unwrap();
    let v = serde_json::to_value(&r).unwrap();
    let mut top: Vec<&String> = v.as_object().unwrap().keys().collect();
    top.sort();
    assert_eq!(
        top,
        ["box", "config", "mask", "pixel_precision", "pixel_recall"]
    );
    for key in [
        "tp",
        "fp",
        "fn",
        "precision",
        "recall",
        "f1",
        "ap50",
        "dataset_iou",
    ] {
        assert!(v["box"].get(key).is_some(), "{key}");
    }
    let back: EvalReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
    let csv = r.to_csv("none");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "Model,Block,Precision,Recall,mAP_0.5,F1-Score,IoU"
    );
    assert_eq!(
        lines[1],
        "none,box,1.000000,1.000000,1.000000,1.000000,1.000000"
    );
    assert_eq!(lines.len(), 3);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dataset_iou_is_f1_over_two_minus_f1(tp in 0usize..200, fp in 0usize..200, fn_ in 0usize..200) {
            prop_assume!(tp + fp + fn_ > 0);
            let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
            let f1 = f_beta(p, r, 1.0);
            prop_assert!((dataset_iou(tp, fp, fn_).unwrap() - f1 / (2.0 - f1)).abs() < 1e-12);
        }

        #[test]
        fn f_beta_is_monotone(p in 0.0f64..1.0, r in 0.0f64..1.0, dp in 0.0f64..0.5, beta in 0.1f64..4.0) {
            let base = f_beta(p, r, beta);
            prop_assert!(f_beta((p + dp).min(1.0), r, beta) >= base - 1e-15);
            prop_assert!(f_beta(p, (r + dp).min(1.0), beta) >= base - 1e-15);
            let two = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            prop_assert!((f_beta(p, r, 1.0) - two).abs() < 1e-15);
        }

        #[test]
        fn evaluation_ignores_image_order(seed in 0u64..200) {
            let mut rng = crate::rng::Pcg32::new(seed, 5);
            let rand_box = |rng: &mut crate::rng::Pcg32| {
                let x = rng.below(6) as usize;
                let y = rng.below(6) as usize;
                bx(x, y, x + 1 + rng.below(2) as usize, y + 1 + rng.below(2) as usize)
            };
            let mut preds = Vec::new();
            let mut truth = Vec::new();
            for id in 0..4 {
                let d: Vec<Detection> = (0..rng.below(4)).map(|_| {
                    let b = rand_box(&mut rng);
                    det(b, (rng.below(3) as f64 + 1.0) / 4.0, id)
                }).collect();
                let g: Vec<Detection> = (0..rng.below(3)).map(|_| det(rand_box(&mut rng), 1.0, id)).collect();
                preds.push((id, d));
                truth.push((id, g));
            }
            let (p, t) = maps(preds.clone(), truth.clone());
            let forward = evaluate(&p, &t, 0.5, serde_json::json!(null)).unwrap();
            preds.reverse();
            truth.reverse();
            let (p, t) = maps(preds, truth);
            prop_assert_eq!(&forward, &evaluate(&p, &t, 0.5, serde_json::json!(null)).unwrap());
            for b in [&forward.box_, &forward.mask] {
                prop_assert!(b.table_row().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
