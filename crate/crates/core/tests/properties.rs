use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatialoc::diffcore::{dft, grad_check, highpass_keeps, idft, GradCheckOptions, Graph, ParameterStore, Tensor};
use spatialoc::finestage::{localization_recall, uncertainty_value, PredictionRecord};
use spatialoc::globalalign::{self, GlobalDims};
use spatialoc::instalign::{self, AlignMode, EdgeGraph, InstanceDims, Modality};
use spatialoc::retrieval::{recall_at_k, retrieve, Gallery, Hit, RetrievalResult};
use spatialoc::scenegen::{Color, ObjectClass, ObjectInstance, SceneSubmap};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_primitive_gradients(x in matrix(3, 4), w in matrix(4, 2)) {
        let mut store = ParameterStore::new();
        store.insert("x", x).unwrap();
        store.insert("w", w).unwrap();
        let report = grad_check(&store, |g, p| {
            let x = p.var("x")?;
            let w = p.var("w")?;
            let h = g.matmul(x, w)?;
            let t = g.tanh(h);
            let s = g.sigmoid(x);
            let sm = g.softmax_rows(s)?;
            let a = g.sum(t);
            let b = g.sum(sm);
            let e = g.exp(t);
            let c = g.mean(e);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        }, 1e-5, GradCheckOptions::default()).unwrap();
        prop_assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn dft_round_trip_and_energy(x in prop::collection::vec(-10.0..10.0f64, 1..=64)) {
        let z = dft(&x).unwrap();
        let back = idft(&z).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let t: f64 = x.iter().map(|v| v * v).sum();
        let f: f64 = z.real.data().iter().zip(z.imag.data()).map(|(r, i)| r * r + i * i).sum::<f64>() / x.len() as f64;
        prop_assert!((t - f).abs() <= 1e-9 * t.max(1.0));
    }

    #[test]
    fn dft_matches_complex_reference(x in prop::collection::vec(-10.0..10.0f64, 1..=64)) {
        let t = x.len();
        let z = dft(&x).unwrap();
        for m in 0..t {
            let want: Complex64 = x.iter().enumerate()
                .map(|(n, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (m * n) as f64 / t as f64))
                .sum();
            prop_assert!((z.real.data()[m] - want.re).abs() < 1e-9);
            prop_assert!((z.imag.data()[m] - want.im).abs() < 1e-9);
        }
    }

    #[test]
    fn highpass_cardinality(t in 1usize..=200) {
        let kept = (0..t).filter(|&m| highpass_keeps(m, t)).count();
        let cut = (7 * t).div_ceil(10);
        prop_assert_eq!(kept, t - cut);
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 5)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        let s = g.value(s);
        for r in 0..4 {
            let row = s.row_slice(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn offsets_are_antisymmetric(points in prop::collection::vec(prop::array::uniform3(-50.0..50.0f64), 2..8)) {
        let submap = SceneSubmap {
            id: 0,
            center: [0.0, 0.0],
            extent: 100.0,
            instances: points.iter().enumerate().map(|(i, &c)| ObjectInstance {
                id: i as u32,
                class: ObjectClass::Pole,
                color: Color::Red,
                centroid: c,
            }).collect(),
        };
        let o = instalign::build_offset_tensor(&submap).unwrap();
        for m in 0..points.len() {
            prop_assert_eq!(o.get(m, m), [0.0; 3]);
            for n in 0..points.len() {
                let (a, b) = (o.get(m, n), o.get(n, m));
                for i in 0..3 {
                    prop_assert_eq!(a[i], -b[i]);
                }
            }
        }
    }

    #[test]
    fn retrieval_matches_full_scan(
        vectors in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 1..30),
        query in prop::collection::vec(-3.0..3.0f64, 4),
        k in 1usize..40,
    ) {
        let gallery = Gallery::new(vectors.iter().cloned().enumerate().map(|(i, v)| (i as u32 * 7 % 31, v))).unwrap();
        let got = retrieve(0, &query, &gallery, k).unwrap();
        let mut scan: Vec<Hit> = (0..gallery.len()).map(|i| Hit {
            id: gallery.ids()[i],
            dist: gallery.vector(i).iter().zip(&query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
        }).collect();
        scan.sort_by(|a, b| a.dist.partial_cmp(&b.dist).unwrap().then(a.id.cmp(&b.id)));
        scan.truncate(k);
        prop_assert_eq!(got.topk, scan);
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(0usize..12, 1..50)) {
        let mut results = Vec::new();
        let mut truth = HashMap::new();
        for (q, &rank) in ranks.iter().enumerate() {
            let topk = (0..10u32).map(|i| Hit { id: i, dist: i as f64 }).collect();
            results.push(RetrievalResult { query_id: q as u32, topk });
            truth.insert(q as u32, rank as u32);
        }
        let r = recall_at_k(&results, &truth, &[1, 2, 3, 5, 10]).unwrap();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn localization_recall_is_monotone(errors in prop::collection::vec(prop::collection::vec(0.0..30.0f64, 3), 1..20)) {
        let mut predictions = Vec::new();
        let mut candidates = Vec::new();
        let mut truth = HashMap::new();
        for (q, errs) in errors.iter().enumerate() {
            let q = q as u32;
            truth.insert(q, [0.0, 0.0]);
            candidates.push(RetrievalResult { query_id: q, topk: (0..3).map(|i| Hit { id: i, dist: 0.0 }).collect() });
            for (i, &e) in errs.iter().enumerate() {
                predictions.push(PredictionRecord { query_id: q, submap_id: i as u32, position: [e, 0.0], lambda: 1.0 });
            }
        }
        let t = localization_recall(&predictions, &truth, &candidates, &[5.0, 10.0, 15.0], &[1, 2, 3]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i + 1 < 3 { prop_assert!(t.values[i][j] <= t.values[i + 1][j]); }
                if j + 1 < 3 { prop_assert!(t.values[i][j] <= t.values[i][j + 1]); }
            }
        }
    }

    #[test]
    fn bezier_stack_is_bounded(scale in 1.0..1000.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = InstanceDims { feat: 4, edge: 6, geo: 2, beose_iters: 2 };
        let mut store = ParameterStore::new();
        instalign::init_instalign(&mut store, "ia", dims, &mut rng).unwrap();
        let data: Vec<f64> = (0..9 * 6).map(|i| scale * (((i * 7919 + seed as usize) % 13) as f64 - 6.0)).collect();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let edges = g.constant(Tensor::new(vec![9, 6], data).unwrap());
        let out = instalign::beose(&mut g, &p, "ia", EdgeGraph { edges, nodes: 3, modality: Modality::Point }, 2).unwrap();
        prop_assert!(g.value(out.edges).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn precision_loss_never_beats_its_optimum(lam in 1e-3..50.0f64, e in 1e-3..100.0f64) {
        prop_assert!(uncertainty_value(lam, e).unwrap() >= 2.0 * e.sqrt() - 1e-12);
    }

    #[test]
    fn text_descriptor_ignores_sentence_order(x in matrix(4, 6), shift in 1usize..4) {
        let mut store = ParameterStore::new();
        let dims = GlobalDims { feat: 6, hidden: 6, out: 5, seq_len: 4 };
        globalalign::init_globalalign(&mut store, "ga", dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|r| x.row_slice((r + shift) % 4).to_vec()).collect();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let a = g.constant(x);
        let b = g.constant(Tensor::from_rows(&rows).unwrap());
        let da = globalalign::text_global_encode(&mut g, &p, "ga", a).unwrap();
        let db = globalalign::text_global_encode(&mut g, &p, "ga", b).unwrap();
        for (u, v) in g.value(da).data().iter().zip(g.value(db).data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_alignment_is_free(x in matrix(3, 4), y in matrix(2, 4)) {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let yv = g.constant(y);
        let l = instalign::alignment_loss(&mut g, &[xv], &[yv], 0.1, AlignMode::Corrected).unwrap();
        prop_assert!(g.value(l).item().abs() < 1e-12);
    }
}
