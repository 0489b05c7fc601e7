use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ipsinet::data::{
    generate_synthetic, load_image, load_manifest, make_batches, stratified_split, write_dataset,
    Dataset, IpsilateralCase, LoadOptions, Side, Split, Standardizer, SynthSpec, ViewRoles,
};
use ipsinet::train::TrainConfig;
use ipsinet::Error;

fn pixel_key(pixels: &[f64]) -> Vec<u64> {
    pixels.iter().map(|v| v.to_bits()).collect()
}

/// Accuracy of the best classifier that sees the exact pixels of the inputs
/// chosen by `key`: every distinct input predicts its majority label.
fn best_lookup_accuracy<K: std::hash::Hash + Eq>(
    cases: &[IpsilateralCase],
    key: impl Fn(&IpsilateralCase) -> K,
) -> f64 {
    let mut groups: HashMap<K, [usize; 2]> = HashMap::new();
    for c in cases {
        groups.entry(key(c)).or_default()[c.label] += 1;
    }
    let correct: usize = groups.values().map(|g| g[0].max(g[1])).sum();
    correct as f64 / cases.len() as f64
}

#[test]
fn synthetic_task_needs_both_views() {
    let spec = SynthSpec {
        n_cases: 400,
        noise_level: 0.0,
        ..SynthSpec::default()
    };
    let cases = generate_synthetic(&spec).unwrap();
    // Noise-free: each view shows one of two glyph renderings.
    let distinct_ex: HashSet<_> = cases.iter().map(|c| pixel_key(&c.examined)).collect();
    let distinct_aux: HashSet<_> = cases.iter().map(|c| pixel_key(&c.auxiliary)).collect();
    assert_eq!((distinct_ex.len(), distinct_aux.len()), (2, 2));

    let examined_only = best_lookup_accuracy(&cases, |c| pixel_key(&c.examined));
    let auxiliary_only = best_lookup_accuracy(&cases, |c| pixel_key(&c.auxiliary));
    assert!(
        examined_only <= 0.60,
        "examined view alone: {examined_only}"
    );
    assert!(
        auxiliary_only <= 0.60,
        "auxiliary view alone: {auxiliary_only}"
    );

    let both = best_lookup_accuracy(&cases, |c| {
        (pixel_key(&c.examined), pixel_key(&c.auxiliary))
    });
    assert_eq!(both, 1.0);

    // The pair-to-label map is an XOR: flipping either view flips the label.
    let ex_ids: Vec<_> = distinct_ex.into_iter().collect();
    let aux_ids: Vec<_> = distinct_aux.into_iter().collect();
    let label_of = |e: usize, a: usize| {
        cases
            .iter()
            .find(|c| pixel_key(&c.examined) == ex_ids[e] && pixel_key(&c.auxiliary) == aux_ids[a])
            .map(|c| c.label)
            .expect("all four combinations occur")
    };
    assert_ne!(label_of(0, 0), label_of(1, 0));
    assert_ne!(label_of(0, 0), label_of(0, 1));
    assert_eq!(label_of(0, 0), label_of(1, 1));
}

#[test]
fn synthetic_views_differ_in_layout() {
    let cases = generate_synthetic(&SynthSpec {
        noise_level: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let ex: HashSet<_> = cases.iter().map(|c| pixel_key(&c.examined)).collect();
    let aux: HashSet<_> = cases.iter().map(|c| pixel_key(&c.auxiliary)).collect();
    assert!(
        ex.is_disjoint(&aux),
        "the two views must not share renderings"
    );
}

#[test]
fn positive_rate_binomial_bound() {
    let spec = SynthSpec {
        n_cases: 1000,
        positive_rate: 0.2,
        image_size: 16,
        ..SynthSpec::default()
    };
    let positives = generate_synthetic(&spec)
        .unwrap()
        .iter()
        .filter(|c| c.label == 1)
        .count();
    let bound = 2.0 * (1000.0f64 * 0.2 * 0.8).sqrt();
    assert!(
        (positives as f64 - 200.0).abs() <= bound,
        "{positives} positives"
    );
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SynthSpec {
        n_cases: 20,
        ..SynthSpec::default()
    };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SynthSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a, c);
}

fn dummy_cases(benign: usize, malignant: usize) -> Vec<IpsilateralCase> {
    (0..benign + malignant)
        .map(|i| IpsilateralCase {
            patient_id: format!("p{i}"),
            side: Side::L,
            image_size: 1,
            examined: vec![0.0],
            auxiliary: vec![0.0],
            label: usize::from(i >= benign),
            split: None,
        })
        .collect()
}

fn split_counts(benign: usize, malignant: usize, seed: u64) -> ([usize; 2], [usize; 2]) {
    let (train, test) = stratified_split(dummy_cases(benign, malignant), 0.85, seed).unwrap();
    let count = |v: &[IpsilateralCase]| {
        let pos = v.iter().filter(|c| c.label == 1).count();
        [v.len() - pos, pos]
    };
    (count(&train), count(&test))
}

#[test]
fn training_set_counts_split_to_expected_test_sizes() {
    let (train, test) = split_counts(498, 1157, 0);
    assert!(
        test[0].abs_diff(75) <= 1 && test[1].abs_diff(174) <= 1,
        "{test:?}"
    );
    assert_eq!(train[0] + test[0], 498);
    assert_eq!(train[1] + test[1], 1157);
}

#[test]
fn full_dataset_counts_match_reported_test_split() {
    // Reported test split: 88 benign and 205 malignant.
    let (_, test) = split_counts(586, 1362, 0);
    assert!(
        test[0].abs_diff(88) <= 1 && test[1].abs_diff(205) <= 1,
        "{test:?}"
    );
}

#[test]
fn split_keeps_pairs_and_is_deterministic() {
    let ids = |v: &[IpsilateralCase]| v.iter().map(|c| c.patient_id.clone()).collect::<Vec<_>>();
    let (tr1, te1) = stratified_split(dummy_cases(50, 70), 0.85, 4).unwrap();
    let (tr2, te2) = stratified_split(dummy_cases(50, 70), 0.85, 4).unwrap();
    assert_eq!((ids(&tr1), ids(&te1)), (ids(&tr2), ids(&te2)));
    let train: HashSet<_> = ids(&tr1).into_iter().collect();
    assert!(ids(&te1).iter().all(|p| !train.contains(p)));
    assert_eq!(train.len() + te1.len(), 120);
    assert!(te1.iter().all(|c| c.split == Some(Split::Test)));
    assert!(matches!(
        stratified_split(dummy_cases(5, 5), 1.0, 0),
        Err(Error::Config { .. })
    ));
}

#[test]
fn batches_carry_two_images_per_case() {
    let sizes: Vec<usize> = make_batches(33, 16, 0, 1, true)
        .iter()
        .map(Vec::len)
        .collect();
    assert_eq!(sizes, vec![16, 16, 1]);

    let cfg = TrainConfig::desk();
    let cases = generate_synthetic(&SynthSpec {
        n_cases: 40,
        ..SynthSpec::default()
    })
    .unwrap();
    let data = Dataset::new(cases, Standardizer::default()).unwrap();
    let first = &make_batches(data.len(), cfg.batch_cases, 0, 1, true)[0];
    let batch = data.batch(first).unwrap();
    assert_eq!(batch.examined.batch() + batch.auxiliary.batch(), 32);
    assert_eq!(batch.examined.shape(), [16, 1, 64, 64]);
}

fn write_manifest(dir: &Path, rows: &[&str]) -> std::path::PathBuf {
    let path = dir.join("manifest.csv");
    let mut text = String::from("patient_id,side,view,image_path,label,split\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    path
}

fn synth_on_disk(dir: &Path, n: usize) -> (Vec<IpsilateralCase>, std::path::PathBuf) {
    let cases = generate_synthetic(&SynthSpec {
        n_cases: n,
        image_size: 32,
        ..SynthSpec::default()
    })
    .unwrap();
    let manifest = write_dataset(&cases, dir).unwrap();
    (cases, manifest)
}

#[test]
fn manifest_roundtrip_reproduces_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (cases, manifest) = synth_on_disk(dir.path(), 6);
    let opts = LoadOptions {
        image_size: 32,
        roles: ViewRoles::CcExamined,
    };
    let loaded = load_manifest(&manifest, &opts).unwrap();
    assert_eq!(loaded, cases);
    let swapped = load_manifest(
        &manifest,
        &LoadOptions {
            roles: ViewRoles::MloExamined,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(swapped[0].examined, cases[0].auxiliary);
}

#[test]
fn image_loading_is_deterministic_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    synth_on_disk(dir.path(), 4);
    let path = dir.path().join("images/synth00000_L_CC.png");
    let a = load_image(&path, 20).unwrap();
    assert_eq!(a.len(), 400);
    assert_eq!(a, load_image(&path, 20).unwrap());
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn missing_partner_names_patient_and_side() {
    let dir = tempfile::tempdir().unwrap();
    synth_on_disk(dir.path(), 4);
    let manifest = write_manifest(
        dir.path(),
        &[
            "synth00000,L,CC,images/synth00000_L_CC.png,0,",
            "synth00000,L,MLO,images/synth00000_L_MLO.png,0,",
            "synth00001,R,CC,images/synth00001_R_CC.png,1,",
        ],
    );
    let err = load_manifest(
        &manifest,
        &LoadOptions {
            image_size: 32,
            roles: ViewRoles::CcExamined,
        },
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Manifest(_)));
    assert!(msg.contains("synth00001") && msg.contains(" R"), "{msg}");
}

#[test]
fn inconsistent_or_duplicate_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth_on_disk(dir.path(), 4);
    let opts = LoadOptions {
        image_size: 32,
        roles: ViewRoles::CcExamined,
    };
    let cc = "synth00000,L,CC,images/synth00000_L_CC.png";
    let mlo = "synth00000,L,MLO,images/synth00000_L_MLO.png";
    for rows in [
        vec![format!("{cc},0,"), format!("{mlo},1,")],
        vec![format!("{cc},0,"), format!("{cc},0,"), format!("{mlo},0,")],
        vec![format!("{cc},2,"), format!("{mlo},2,")],
        vec![
            "synth00000,X,CC,images/synth00000_L_CC.png,0,".to_string(),
            format!("{mlo},0,"),
        ],
    ] {
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let manifest = write_manifest(dir.path(), &refs);
        assert!(
            matches!(load_manifest(&manifest, &opts), Err(Error::Manifest(_))),
            "{rows:?}"
        );
    }
    let manifest = write_manifest(
        dir.path(),
        &["synth00000,L,CC,images/nope.png,0,", &format!("{mlo},0,")],
    );
    assert!(matches!(
        load_manifest(&manifest, &opts),
        Err(Error::Image { .. })
    ));
}

#[test]
fn split_column_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = generate_synthetic(&SynthSpec {
        n_cases: 8,
        image_size: 32,
        ..SynthSpec::default()
    })
    .unwrap();
    for (i, c) in cases.iter_mut().enumerate() {
        c.split = Some(if i < 6 { Split::Train } else { Split::Test });
    }
    let manifest = write_dataset(&cases, dir.path()).unwrap();
    let loaded = load_manifest(
        &manifest,
        &LoadOptions {
            image_size: 32,
            roles: ViewRoles::CcExamined,
        },
    )
    .unwrap();
    let (train, test) = ipsinet::data::split_by_column(loaded).unwrap();
    assert_eq!((train.len(), test.len()), (6, 2));
}
