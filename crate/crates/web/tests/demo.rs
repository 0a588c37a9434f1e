use attnseg_web::{heat_rgba, Scene};

#[test]
fn scene_pixels_and_overlay() {
    let s = Scene::new(3, 48, false).unwrap();
    assert_eq!(s.size(), 48);
    let rgba = s.image_rgba();
    assert_eq!(rgba.len(), 4 * 48 * 48);
    assert!(rgba.chunks(4).all(|p| p[3] == 255));
    let text = s.annotations_text();
    assert_eq!(text.lines().count(), s.instance_count() as usize);

    let plain = s.overlay_rgba(0.0);
    let tinted = s.overlay_rgba(0.5);
    assert_eq!(plain.len(), rgba.len());
    if s.instance_count() > 0 {
        assert_ne!(tinted, rgba);
    } else {
        assert_eq!(tinted, rgba);
    }
    assert_eq!(Scene::new(3, 48, false).unwrap().image_rgba(), rgba);
    assert!(Scene::new(3, 4, false).is_err());
}

#[test]
fn gate_maps() {
    let s = Scene::new(5, 32, true).unwrap();
    for kind in ["coord", "cbam"] {
        let g = s.gate_map(kind, 1, 0, 0).unwrap();
        assert_eq!(g.len(), 32 * 32);
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0), "{kind}");
    }
    let row = s.gate_map("mhsa", 1, 10, 20).unwrap();
    assert_eq!(row.len(), 32 * 32);
    // Each 2x2 block repeats one of 256 weights that sum to 1.
    let total: f64 = row.iter().sum::<f64>() / 4.0;
    assert!((total - 1.0).abs() < 1e-9, "{total}");
    assert!(s.gate_map("mhsa", 1, 32, 0).is_err());
    assert!(s.gate_map("se", 1, 0, 0).is_err());

    let heat = heat_rgba(&row);
    assert_eq!(heat.len(), 4 * row.len());
    assert_eq!(heat_rgba(&[0.5, 0.5]).len(), 8);
}

#[test]
fn explorer_scores_clean_predictions_perfectly() {
    let s = (0..50)
        .map(|seed| Scene::new(seed, 64, false).unwrap())
        .find(|s| s.instance_count() >= 2)
        .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&s.explore(0.0, 0.5, 0.5, 0).unwrap()).unwrap();
    assert_eq!(
        report["instances"].as_u64().unwrap(),
        s.instance_count() as u64
    );
    assert_eq!(report["mask"]["f1"], 1.0);
    assert_eq!(report["box"]["f1"], 1.0);

    let noisy: serde_json::Value =
        serde_json::from_str(&s.explore(0.9, 0.3, 0.5, 1).unwrap()).unwrap();
    assert!(noisy["mask"]["precision"].as_f64().unwrap() < 1.0);
    assert!(s.explore(0.0, 1.5, 0.5, 0).is_err());

    let p = s.probability_map(0.2, 4);
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(s.explore_rgba(0.2, 0.5, 4).unwrap().len(), 4 * 64 * 64);
}
