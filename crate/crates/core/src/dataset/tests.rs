use super::*;
use crate::mesh::{average_vertex_distance, FaceMesh};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_config() -> SyntheticConfig {
    SyntheticConfig { rows: 5, cols: 6, subject_count: 6, expression_count: 5, identity_dim: 3, expression_dim: 2, ..Default::default() }
}

fn noiseless() -> SyntheticConfig {
    SyntheticConfig { noise_relative: 0.0, ..small_config() }
}

#[test]
fn neutral_scan_equals_ground_truth_without_noise() {
    let spec = SyntheticFactorSpec::from_config(&noiseless()).unwrap();
    let data = generate_synthetic(&spec).unwrap();
    let all: Vec<_> = data.split.train.iter().chain(&data.split.test).collect();
    assert_eq!(all.len(), 30);
    for rec in all.iter().filter(|r| r.expression_label.as_deref() == Some("e00")) {
        let truth = &data.ground_truth[&rec.subject_id];
        assert_eq!(rec.mesh.vertices(), truth.vertices());
    }
    assert!(data.expression_coeffs.row(0).iter().all(|&x| x == 0.0));
}

/// Brute-force `Σ_jk T[:, j, k] a_j b_k`.
#[test]
fn expression_offsets_match_contraction_oracle() {
    let spec = SyntheticFactorSpec::from_config(&noiseless()).unwrap();
    let data = generate_synthetic(&spec).unwrap();
    let (n, da, db) = spec.core_tensor.dim();
    let b = data.expression_coeffs.row(2).to_owned();
    let mut offsets = Vec::new();
    for s in 0..2 {
        let a = data.identity_coeffs.row(s).to_owned();
        let mut oracle = vec![0.0; n];
        for (i, o) in oracle.iter_mut().enumerate() {
            for j in 0..da {
                for k in 0..db {
                    *o += spec.core_tensor[[i, j, k]] * a[j] * b[k];
                }
            }
        }
        let fast = spec.expression_offset(&a, &b);
        for (x, y) in fast.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        // the generated scan carries exactly this offset
        let name = subject_name(s);
        let rec = data
            .split
            .train
            .iter()
            .chain(&data.split.test)
            .find(|r| r.subject_id == name && r.expression_label.as_deref() == Some("e02"))
            .unwrap();
        let diff: Vec<f64> =
            rec.mesh.flat().iter().zip(data.ground_truth[&name].flat()).map(|(x, y)| x - y).collect();
        for (x, y) in diff.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9);
        }
        offsets.push(oracle);
    }
    let gap: f64 = offsets[0].iter().zip(&offsets[1]).map(|(x, y)| (x - y).abs()).sum();
    assert!(gap > 1e-3, "subject-specific expressions expected");
}

#[test]
fn subject_mean_is_ground_truth_neutral() {
    let spec = SyntheticFactorSpec::from_config(&noiseless()).unwrap();
    let data = generate_synthetic(&spec).unwrap();
    let sums: Array2<f64> = data.expression_coeffs.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
    assert!(sums.iter().all(|x| x.abs() < 1e-12));
    let records: Vec<_> = data.split.train.iter().chain(&data.split.test).cloned().collect();
    for (subject, idx) in group_by_subject(&records) {
        let meshes: Vec<FaceMesh> = idx.iter().map(|&i| records[i].mesh.clone()).collect();
        let sol = crate::neutral_bank::solve_pseudo_neutral(&meshes).unwrap();
        let err = average_vertex_distance(&sol.neutral, &data.ground_truth[subject]).unwrap();
        assert!(err < 1e-9, "{subject}: {err}");
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SyntheticFactorSpec::from_config(&small_config()).unwrap();
    let a = generate_synthetic(&spec).unwrap();
    let spec2 = SyntheticFactorSpec::from_config(&small_config()).unwrap();
    let b = generate_synthetic(&spec2).unwrap();
    let bytes = |d: &SyntheticDataset| -> Vec<u64> {
        d.split.train.iter().chain(&d.split.test).flat_map(|r| r.mesh.flat()).map(f64::to_bits).collect()
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.split.held_out_subjects, b.split.held_out_subjects);
    let other = SyntheticFactorSpec::from_config(&SyntheticConfig { seed: 8, ..small_config() }).unwrap();
    assert_ne!(bytes(&a), bytes(&generate_synthetic(&other).unwrap()));
}

#[test]
fn synthetic_split_is_subject_disjoint() {
    let spec = SyntheticFactorSpec::from_config(&SyntheticConfig { subject_count: 10, ..small_config() }).unwrap();
    let data = generate_synthetic(&spec).unwrap();
    assert!(data.split.is_subject_disjoint());
    assert_eq!(data.split.held_out_subjects.len(), 3);
    assert_eq!(data.split.test.len(), 3 * 5);
}

#[test]
fn default_config_matches_documented_scale() {
    let cfg = SyntheticConfig::default();
    assert_eq!((cfg.vertex_count(), cfg.subject_count, cfg.expression_count), (500, 30, 11));
    assert_eq!((cfg.identity_dim, cfg.expression_dim), (4, 4));
    let spec = SyntheticFactorSpec::from_config(&cfg).unwrap();
    assert!(spec.noise_sigma > 0.0);
    assert!(SyntheticConfig { test_fraction: 1.0, ..cfg.clone() }.validate().is_err());
    assert!(SyntheticConfig { rows: 1, ..cfg }.validate().is_err());
}

fn clean_records(n: usize, seed: u64) -> Vec<ScanRecord> {
    let spec = SyntheticFactorSpec::from_config(&SyntheticConfig { subject_count: n, expression_count: 1, ..noiseless() }).unwrap();
    let data = generate_synthetic(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.split
        .train
        .into_iter()
        .chain(data.split.test)
        .map(|mut r| {
            let mut v = r.mesh.vertices().to_owned();
            v.mapv_inplace(|x| x + 0.05 * rng.sample::<f64, _>(StandardNormal));
            r.mesh = FaceMesh::new(v, r.mesh.topology().clone()).unwrap();
            r
        })
        .collect()
}

#[test]
fn pca_filter_drops_displaced_scan() {
    let mut records = clean_records(21, 1);
    let refs: Vec<&FaceMesh> = records.iter().map(|r| &r.mesh).collect();
    let scale = crate::mesh::NormalizationStats::fit(&refs).unwrap().scale;
    let mut v = records[13].mesh.vertices().to_owned();
    v[[7, 2]] += 100.0 * scale;
    records[13].mesh = FaceMesh::new(v, records[13].mesh.topology().clone()).unwrap();
    records[13].source_tag = "corrupted".into();
    let kept = pca_quality_filter(records.clone(), 0.05).unwrap();
    assert_eq!(kept.len(), 20);
    assert!(kept.iter().all(|r| r.source_tag != "corrupted"));
    // residual ranking oracle: the corrupted scan has the largest residual
    let flat: Vec<Vec<f64>> = records.iter().map(|r| r.mesh.flat()).collect();
    let res = heldout_residuals(&flat, DEFAULT_VARIANCE_KEPT).unwrap();
    let worst = (0..res.len()).max_by(|&a, &b| res[a].total_cmp(&res[b])).unwrap();
    assert_eq!(worst, 13);
    let again = pca_quality_filter(records, 0.05).unwrap();
    assert_eq!(
        kept.iter().map(|r| r.subject_id.clone()).collect::<Vec<_>>(),
        again.iter().map(|r| r.subject_id.clone()).collect::<Vec<_>>()
    );
}

#[test]
fn pca_filter_edge_cases() {
    let records = clean_records(6, 2);
    let same = pca_quality_filter(records.clone(), 0.0).unwrap();
    assert_eq!(same.len(), records.len());
    assert!(pca_quality_filter(records.clone(), 1.0).is_err());
    assert!(pca_quality_filter(records, -0.1).is_err());
    assert!(heldout_residuals(&[vec![1.0, 2.0]], 0.98).is_err());
}

fn uneven_set() -> TrainSet {
    let topo = std::sync::Arc::new(crate::mesh::TopologyTemplate::grid(2, 2, 4).unwrap());
    let mut scans = Vec::new();
    for s in 0..10 {
        let count = if s == 3 { 1 } else { 5 + s % 3 };
        for k in 0..count {
            let mut m = FaceMesh::zeros(topo.clone()).into_vertices();
            m[[0, 0]] = (s * 100 + k) as f64;
            scans.push(TrainScan { subject_id: format!("p{s}"), mesh: FaceMesh::new(m, topo.clone()).unwrap() });
        }
    }
    TrainSet::new(scans)
}

#[test]
fn batches_have_identity_groups() {
    let set = uneven_set();
    let mut sampler = BatchSampler::new(&set, SamplerConfig { seed: 3, ..Default::default() }).unwrap();
    let mut saw_single = false;
    for batch in sampler.by_ref().take(200) {
        assert_eq!(batch.groups.len(), 8);
        assert_eq!(batch.len(), 32);
        let ids: std::collections::BTreeSet<_> = batch.groups.iter().map(|g| &g.subject_id).collect();
        assert_eq!(ids.len(), 8);
        for g in &batch.groups {
            assert_eq!(g.scans.len(), 4);
            assert!(g.scans.iter().all(|&i| set.scan(i).subject_id == g.subject_id));
            if g.subject_id == "p3" {
                saw_single = true;
                assert!(g.scans.iter().all(|&i| i == g.scans[0]));
            } else {
                let uniq: std::collections::BTreeSet<_> = g.scans.iter().collect();
                assert_eq!(uniq.len(), 4);
            }
        }
        assert_eq!(batch.group_rows()[1], vec![4, 5, 6, 7]);
    }
    assert!(saw_single);
}

#[test]
fn sampler_is_seeded_and_resumable() {
    let set = uneven_set();
    let cfg = SamplerConfig { seed: 11, ..Default::default() };
    let a: Vec<Batch> = BatchSampler::new(&set, cfg).unwrap().take(5).collect();
    let b: Vec<Batch> = BatchSampler::new(&set, cfg).unwrap().take(5).collect();
    assert_eq!(a, b);
    let mut s = BatchSampler::new(&set, cfg).unwrap();
    s.next_batch();
    s.next_batch();
    let pos = s.word_pos();
    let mut resumed = BatchSampler::new(&set, cfg).unwrap();
    resumed.set_word_pos(pos);
    assert_eq!(resumed.next_batch(), a[2]);
}

#[test]
fn sampler_rejects_too_few_subjects() {
    let set = uneven_set();
    let cfg = SamplerConfig { ids_per_batch: 11, ..Default::default() };
    assert!(matches!(BatchSampler::new(&set, cfg), Err(crate::WsdfError::Config(_))));
}

#[test]
fn epoch_length() {
    assert_eq!(batches_per_epoch(231, 32), 8);
    assert_eq!(batches_per_epoch(32, 32), 1);
    assert_eq!(batches_per_epoch(0, 32), 1);
}

#[test]
fn epoch_visits_scans_in_expectation() {
    // equal-sized subjects: each draw is uniform over scans
    let topo = std::sync::Arc::new(crate::mesh::TopologyTemplate::grid(2, 2, 4).unwrap());
    let scans: Vec<TrainScan> = (0..21 * 11)
        .map(|i| TrainScan { subject_id: format!("p{}", i / 11), mesh: FaceMesh::zeros(topo.clone()) })
        .collect();
    let set = TrainSet::new(scans);
    let mut counts = vec![0usize; set.len()];
    let epochs = 200;
    let per = batches_per_epoch(set.len(), 32);
    let sampler = BatchSampler::new(&set, SamplerConfig::default()).unwrap();
    for batch in sampler.take(per * epochs) {
        for i in batch.indices() {
            counts[i] += 1;
        }
    }
    let mean = counts.iter().sum::<usize>() as f64 / (counts.len() * epochs) as f64;
    assert!(mean >= 1.0);
    let min = *counts.iter().min().unwrap() as f64 / epochs as f64;
    assert!(min > 0.8, "least visited scan averaged {min} visits per epoch");
}

#[test]
fn subject_disjoint_split_of_loaded_records() {
    let records = clean_records(10, 4);
    let split = DatasetSplit::subject_disjoint(records, 0.3, 5).unwrap();
    assert!(split.is_subject_disjoint());
    assert_eq!(split.test.len(), 3);
    assert_eq!(split.train.len(), 7);
}
