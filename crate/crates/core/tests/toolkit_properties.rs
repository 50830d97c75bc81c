mod common;

use proptest::prelude::*;
use rcdm::toolkit::*;
use rcdm::{EmbeddingMatrix, LabelMap, RepresentationVector};

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, d)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..24).prop_flat_map(|d| (vector(d), vector(d)))
}

fn rv(v: &[f64]) -> RepresentationVector {
    RepresentationVector::new(v.to_vec(), "p").unwrap()
}

proptest! {
    #[test]
    fn perturb_is_coordinatewise_exact((c, noise) in pair(), lambda in 0.0f64..5.0) {
        let out = perturb(&rv(&c), lambda, &noise).unwrap();
        for i in 0..c.len() {
            prop_assert_eq!(out.values()[i], c[i] + lambda * noise[i]);
        }
        prop_assert_eq!(perturb(&rv(&c), 0.0, &noise).unwrap().into_values(), c.clone());
    }

    #[test]
    fn interpolate_is_symmetric_and_hits_endpoints((a, b) in pair(), alpha in -3.0f64..4.0) {
        let (ca, cb) = (rv(&a), rv(&b));
        let forward = interpolate(&ca, &cb, alpha).unwrap();
        let backward = interpolate(&cb, &ca, 1.0 - alpha).unwrap();
        prop_assert_eq!(forward.values(), backward.values());
        prop_assert_eq!(interpolate(&ca, &cb, 1.0).unwrap().into_values(), a.clone());
        prop_assert_eq!(interpolate(&ca, &cb, 0.0).unwrap().into_values(), b.clone());
        for i in 0..a.len() {
            let direct = alpha * a[i] + (1.0 - alpha) * b[i];
            let scale = a[i].abs().max(b[i].abs()).max(1.0) * (alpha.abs() + 1.0);
            prop_assert!((forward.values()[i] - direct).abs() <= 4.0 * f64::EPSILON * scale);
        }
    }

    #[test]
    fn apply_direction_is_exact((c, v) in pair(), alpha in -50.0f64..50.0) {
        let dir = SemanticDirection {
            vector: v.clone(),
            kind: DirectionKind::AttributeDiff,
            component_index: None,
            explained_variance: None,
            attribute: Some("a".into()),
            sample_count: Some(1),
        };
        let out = apply_direction(&rv(&c), &dir, alpha).unwrap();
        for i in 0..c.len() {
            prop_assert_eq!(out.values()[i], c[i] + alpha * v[i]);
        }
        prop_assert_eq!(apply_direction(&rv(&c), &dir, 0.0).unwrap().into_values(), c.clone());
    }

    #[test]
    fn attribute_mean_edit_is_exact(
        rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 3), 1..12),
        c in vector(3),
        scale in -3.0f64..3.0,
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let n = rows.len();
        let mut labels: Vec<f64> = mask[..n].iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        labels[0] = 1.0;
        let mut map = LabelMap::new();
        map.insert("attr".into(), labels.clone());
        let m = EmbeddingMatrix::new(n, 3, rows.concat(), Some(map), "p").unwrap();
        let out = attribute_mean_edit(&rv(&c), &m, "attr", scale).unwrap();
        let positives: Vec<&Vec<f32>> = rows.iter().zip(&labels).filter(|(_, &l)| l == 1.0).map(|(r, _)| r).collect();
        for j in 0..3 {
            let mean = positives.iter().map(|r| r[j] as f64).sum::<f64>() / positives.len() as f64;
            prop_assert_eq!(out.values()[j], c[j] + scale * mean);
        }
        prop_assert_eq!(attribute_mean_edit(&rv(&c), &m, "attr", 0.0).unwrap().into_values(), c.clone());
    }

    #[test]
    fn normalize_gives_unit_norm(c in vector(5)) {
        prop_assume!(c.iter().any(|v| v.abs() > 1e-3));
        let u = normalize(&rv(&c)).unwrap();
        prop_assert!((u.norm() - 1.0).abs() < 1e-12);
        let again = normalize(&u).unwrap();
        for (x, y) in again.values().iter().zip(u.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pca_is_invariant_to_row_order(seed in any::<u64>(), rotate in 1usize..29) {
        let rows = common::random_rows(30, 5, seed);
        let bank = fit_pca_directions(&common::matrix_of(&rows), 4).unwrap();
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rotate);
        shuffled.swap(0, 7);
        let other = fit_pca_directions(&common::matrix_of(&shuffled), 4).unwrap();
        for (a, b) in bank.directions.iter().zip(&other.directions) {
            prop_assert!((a.explained_variance.unwrap() - b.explained_variance.unwrap()).abs() <= 1e-9);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
        for (x, y) in bank.mean.iter().zip(&other.mean) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn pca_is_translation_equivariant(seed in any::<u64>(), shift in prop::collection::vec(-4.0f64..4.0, 5)) {
        let rows = common::random_rows(30, 5, seed);
        // Shifts are multiples of 1/64 so the f32 storage represents shifted rows exactly.
        let shift: Vec<f64> = shift.iter().map(|s| (s * 64.0).round() / 64.0).collect();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(v, s)| v + s).collect()).collect();
        let a = fit_pca_directions(&common::matrix_of(&rows), 3).unwrap();
        let b = fit_pca_directions(&common::matrix_of(&moved), 3).unwrap();
        for (da, db) in a.directions.iter().zip(&b.directions) {
            prop_assert!((da.explained_variance.unwrap() - db.explained_variance.unwrap()).abs() <= 1e-6);
            for (x, y) in da.vector.iter().zip(&db.vector) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
        for ((ma, mb), s) in a.mean.iter().zip(&b.mean).zip(&shift) {
            prop_assert!((mb - ma - s).abs() <= 1e-6);
        }
    }
}

#[test]
fn interpolation_sweep_is_collinear() {
    let a = rv(&[1.0, -2.0, 0.5, 3.0]);
    let b = rv(&[-0.5, 4.0, 2.0, 1.0]);
    let dir: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    let dd: f64 = dir.iter().map(|v| v * v).sum();
    for k in 0..=10 {
        let c = interpolate(&a, &b, k as f64 / 10.0).unwrap();
        let rel: Vec<f64> = c.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
        let t = rel.iter().zip(&dir).map(|(r, d)| r * d).sum::<f64>() / dd;
        let residual: f64 = rel.iter().zip(&dir).map(|(r, d)| (r - t * d).powi(2)).sum::<f64>().sqrt();
        assert!(residual <= 1e-9, "alpha {k}/10 residual {residual}");
    }
}

#[test]
fn bank_file_round_trip() {
    let rows = common::random_rows(20, 4, 5);
    let bank = fit_pca_directions(&common::matrix_of(&rows), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.json");
    bank.save(&path).unwrap();
    assert_eq!(DirectionBank::load(&path).unwrap(), bank);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"total_variance\"") && text.contains("\"component_index\": 1"));
}
