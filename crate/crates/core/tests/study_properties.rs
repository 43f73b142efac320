use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use bokeh_core::image::save_image;
use bokeh_core::study::{aggregate, read_ndjson, session_order, RatingRecord, Study, StudyConfig, TaskAssignment};
use bokeh_core::ImageF;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn study_dir(dir: &Path, methods: usize, images: usize) -> StudyConfig {
    let ids: Vec<String> = (0..images).map(|i| format!("img{i}")).collect();
    let mut method_dirs = BTreeMap::new();
    for sub in std::iter::once("reference".to_string()).chain((0..methods).map(|m| format!("m{m}"))) {
        let d = dir.join(&sub);
        std::fs::create_dir_all(&d).unwrap();
        for id in &ids {
            save_image(&ImageF::zeros(2, 2, 3), d.join(format!("{id}.png"))).unwrap();
        }
        if sub != "reference" {
            method_dirs.insert(sub, d);
        }
    }
    StudyConfig {
        study_id: "prop".into(),
        reference_dir: dir.join("reference"),
        method_dirs,
        image_ids: ids,
        ratings_per_pair_target: 3,
        shuffle_seed: 11,
    }
}

/// Direct two-stage mean, written independently of the library.
fn oracle(records: &[RatingRecord]) -> HashMap<String, f64> {
    let mut sums: HashMap<(String, String), (f64, f64)> = HashMap::new();
    for r in records {
        let e = sums.entry((r.method.clone(), r.image_id.clone())).or_default();
        e.0 += r.level as f64;
        e.1 += 1.0;
    }
    let mut per_method: HashMap<String, (f64, f64)> = HashMap::new();
    for ((m, _), (s, n)) in sums {
        let e = per_method.entry(m).or_default();
        e.0 += s / n;
        e.1 += 1.0;
    }
    per_method.into_iter().map(|(m, (s, n))| (m, s / n)).collect()
}

fn random_log(rng: &mut ChaCha8Rng, n: usize) -> Vec<RatingRecord> {
    (0..n)
        .map(|i| RatingRecord {
            session_id: format!("s{i}"),
            method: format!("m{}", rng.random_range(0..5)),
            image_id: format!("img{}", rng.random_range(0..40)),
            level: rng.random_range(1..=5),
            timestamp: i as u64,
        })
        .collect()
}

#[test]
fn thousand_record_log_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let log = random_log(&mut rng, 1000);
    let want = oracle(&log);
    let got = aggregate(&log);
    assert_eq!(got.len(), want.len());
    for m in &got {
        assert!((m.mos - want[&m.method]).abs() <= 1e-9, "{}", m.method);
        let mean: f64 = m.per_image.values().sum::<f64>() / m.per_image.len() as f64;
        assert!((m.mos - mean).abs() <= 1e-9);
    }
    assert!(got.windows(2).all(|w| w[0].mos >= w[1].mos));
    assert_eq!(got.iter().map(|m| m.rating_count).sum::<usize>(), 1000);
}

#[test]
fn session_orders_spread_over_all_permutations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = study_dir(dir.path(), 2, 3);
    let n = 7200;
    let mut counts: HashMap<Vec<(String, String)>, usize> = HashMap::new();
    for s in 0..n {
        let order = session_order(&cfg, &format!("session-{s}"));
        *counts.entry(order.into_iter().map(|p| (p.method, p.image_id)).collect()).or_default() += 1;
    }
    // uniform over 6! = 720 orders: expect 10 per cell
    assert!(counts.len() >= 700, "{} distinct orders", counts.len());
    let chi2: f64 = counts.values().map(|&c| (c as f64 - 10.0).powi(2) / 10.0).sum::<f64>()
        + (720 - counts.len()) as f64 * 10.0;
    // 719 degrees of freedom; mean 719, sd ~38
    assert!(chi2 < 719.0 + 5.0 * 38.0, "chi2 {chi2}");
    // two sessions share an order with probability 1/720
    let collide: f64 = counts.values().map(|&c| (c * (c - 1)) as f64).sum::<f64>() / (n * (n - 1)) as f64;
    assert!((collide - 1.0 / 720.0).abs() < 0.5 / 720.0, "{collide}");
}

#[test]
fn export_reimport_reproduces_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = study_dir(dir.path(), 3, 4);
    let study = Study::open(cfg, &dir.path().join("data")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in 0..8 {
        let sid = format!("rater{s}");
        for _ in 0..rng.random_range(1..=12) {
            let TaskAssignment::Task { task_id, .. } = study.next_task(&sid).unwrap() else { break };
            study.submit_rating(&sid, &task_id, rng.random_range(1..=5)).unwrap();
        }
    }
    let mut buf = Vec::new();
    study.export_ratings(&mut buf).unwrap();
    assert_eq!(String::from_utf8_lossy(&buf).lines().count(), study.records().len());
    assert_eq!(aggregate(&read_ndjson(&buf[..]).unwrap()), study.aggregate_mos());
    let on_disk = std::fs::read(study.log_path().unwrap()).unwrap();
    assert_eq!(on_disk, buf);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_insertion_order(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log = random_log(&mut rng, n);
        let mut shuffled = log.clone();
        shuffled.shuffle(&mut rng);
        let (a, b) = (aggregate(&log), aggregate(&shuffled));
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.method, &y.method);
            prop_assert!((x.mos - y.mos).abs() <= 1e-12);
            prop_assert_eq!(&x.per_image, &y.per_image);
        }
    }

    #[test]
    fn mos_within_submitted_range(seed in any::<u64>(), n in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log = random_log(&mut rng, n);
        for m in aggregate(&log) {
            let levels: Vec<u8> = log.iter().filter(|r| r.method == m.method).map(|r| r.level).collect();
            let (lo, hi) = (*levels.iter().min().unwrap() as f64, *levels.iter().max().unwrap() as f64);
            prop_assert!(m.mos >= lo - 1e-12 && m.mos <= hi + 1e-12);
        }
    }
}
