//! Property tests over random inputs.

use std::collections::{BTreeMap, BTreeSet};

use affectkit_core::datamodel::{
    load_labels, make_folds, save_labels, segment_clips, FrameRecord, Task, TaskSpec, N_AU, N_EXPR,
};
use affectkit_core::features::{align_audio, combine, concat_sequences, FeatureSequence, FeatureSetSpec};
use affectkit_core::losses::{ccc, compute_class_weights, expr_loss, ClassWeights};
use affectkit_core::mae::{mask_count, patchify, sample_mask, unpatchify, PatchGrid};
use affectkit_core::metrics::{evaluate, pcc, SequenceStats};
use affectkit_core::postprocess::{average_smooth, fill_missing, gaussian_smooth, median_smooth};
use affectkit_validation as oracle;
use ndarray::{Array1, Array2, Array3};
use proptest::collection::vec;
use proptest::prelude::*;

fn series(min_len: usize, max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-5.0f64..5.0, min_len..=max_len)
}

fn pair(min_len: usize, max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (min_len..=max_len).prop_flat_map(|n| (vec(-5.0f64..5.0, n), vec(-5.0f64..5.0, n)))
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
}

fn arr(v: &[f64]) -> Array1<f64> {
    Array1::from(v.to_vec())
}

fn record(video: usize, frame: usize, seed: u64) -> FrameRecord {
    let mut r = FrameRecord::unlabeled(format!("v{video}"), frame);
    if !seed.is_multiple_of(5) {
        let bits = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut au = [0u8; N_AU];
        au.iter_mut().enumerate().for_each(|(j, a)| *a = ((bits >> j) & 1) as u8);
        r.au = Some(au);
        r.expr = Some((bits % N_EXPR as u64) as u8);
        r.valence = Some(((bits >> 20) % 2001) as f64 / 1000.0 - 1.0);
        r.arousal = Some(-(((bits >> 40) % 2001) as f64 / 1000.0 - 1.0) / 3.0);
    }
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn clips_cover_every_frame_once(lengths in vec(1usize..60, 1..5), k in 1usize..25) {
        let frames: Vec<FrameRecord> = lengths
            .iter()
            .enumerate()
            .flat_map(|(v, &n)| (0..n).map(move |t| FrameRecord::unlabeled(format!("v{v}"), t)))
            .collect();
        let clips = segment_clips(&frames, k).unwrap();
        let mut seen: Vec<(String, usize)> = clips
            .iter()
            .flat_map(|c| c.frame_indices.iter().map(move |&t| (c.video_id.clone(), t)))
            .collect();
        let mut expected: Vec<(String, usize)> =
            frames.iter().map(|f| (f.video_id.clone(), f.frame_index)).collect();
        seen.sort();
        expected.sort();
        prop_assert_eq!(seen, expected);
        let expected_clips: usize = lengths.iter().map(|n| n.div_ceil(k)).sum();
        prop_assert_eq!(clips.len(), expected_clips);
        for c in &clips {
            prop_assert_eq!(c.frame_valid.len(), k);
            prop_assert_eq!(c.n_valid(), c.frame_indices.len());
            let first_invalid = c.frame_valid.iter().position(|v| !v).unwrap_or(k);
            prop_assert!(c.frame_valid[first_invalid..].iter().all(|v| !v));
        }
    }

    #[test]
    fn folds_partition_and_balance(n in 2usize..40, folds in 2usize..8, seed: u64) {
        prop_assume!(n >= folds);
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let split = make_folds(&ids, folds, seed).unwrap();
        let keys: BTreeSet<&String> = split.assignment.keys().collect();
        prop_assert_eq!(keys, ids.iter().collect::<BTreeSet<_>>());
        let sizes = split.fold_sizes();
        prop_assert!(sizes.iter().all(|&s| s >= 1));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..folds {
            let inside: BTreeSet<String> = split.videos_in(f).into_iter().collect();
            let outside: BTreeSet<String> = split.videos_not_in(f).into_iter().collect();
            prop_assert!(inside.is_disjoint(&outside));
            prop_assert_eq!(inside.len() + outside.len(), n);
        }
        prop_assert_eq!(split, make_folds(&ids, folds, seed).unwrap());
    }

    #[test]
    fn labels_round_trip(lengths in vec(1usize..12, 1..4), seeds in vec(any::<u64>(), 40)) {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for (v, &n) in lengths.iter().enumerate() {
            for t in 0..n {
                records.push(record(v, t, seeds[(v * 13 + t) % seeds.len()]));
            }
        }
        for task in Task::ALL {
            let path = dir.path().join(format!("{task}.csv"));
            save_labels(&path, &records, task).unwrap();
            let back = load_labels(&path, &TaskSpec::new(task)).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!((&a.video_id, a.frame_index), (&b.video_id, b.frame_index));
                prop_assert_eq!(a.target_row(task), b.target_row(task));
            }
        }
    }

    #[test]
    fn patchify_matches_index_arithmetic(side in 1usize..5, p in 1usize..5, c in 1usize..4, seed: u64) {
        let size = side * p;
        let grid = PatchGrid::new(size, p, c).unwrap();
        let img = Array3::from_shape_fn((size, size, c), |(y, x, ch)| {
            ((seed ^ (y * 131 + x * 17 + ch) as u64).wrapping_mul(2654435761) % 1000) as f64 / 7.0
        });
        let patches = patchify(img.view(), &grid).unwrap();
        for flat in 0..size * size * c {
            let ch = flat % c;
            let x = (flat / c) % size;
            let y = flat / (c * size);
            let row = (y / p) * side + x / p;
            let col = ((y % p) * p + x % p) * c + ch;
            prop_assert_eq!(patches[[row, col]], img[[y, x, ch]]);
        }
        prop_assert_eq!(unpatchify(patches.view(), &grid).unwrap(), img);
    }

    #[test]
    fn mask_count_is_floor(side in 1usize..20, ratio in 0.001f64..0.999, seed: u64) {
        let grid = PatchGrid::new(side * 2, 2, 1).unwrap();
        let n = grid.n_patches();
        let exact = ratio * n as f64;
        let k = mask_count(n, ratio);
        prop_assert!(k as f64 <= exact && exact < (k + 1) as f64);
        if k == 0 {
            prop_assert!(sample_mask(&grid, ratio, seed).is_err());
            return Ok(());
        }
        let plan = sample_mask(&grid, ratio, seed).unwrap();
        prop_assert_eq!(plan.n_masked(), k);
        prop_assert_eq!(plan, sample_mask(&grid, ratio, seed).unwrap());
    }

    #[test]
    fn ccc_symmetry_bounds_permutation((x, y) in pair(2, 30), rot in 0usize..30) {
        let c = ccc(arr(&x).view(), arr(&y).view()).unwrap();
        prop_assert!(c.abs() <= 1.0 + 1e-12);
        prop_assert!((c - ccc(arr(&y).view(), arr(&x).view()).unwrap()).abs() < 1e-12);
        let r = rot % x.len();
        let (mut xr, mut yr) = (x.clone(), y.clone());
        xr.rotate_left(r);
        yr.rotate_left(r);
        prop_assert!((c - ccc(arr(&xr).view(), arr(&yr).view()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ccc_penalises_scale_and_shift(x in series(2, 30), a in 0.2f64..3.0, b in -2.0f64..2.0) {
        prop_assume!(oracle::var(&x) > 1e-6);
        prop_assume!((a - 1.0).abs() > 1e-3 || b.abs() > 1e-3);
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!(ccc(arr(&x).view(), arr(&y).view()).unwrap() < 1.0);
        prop_assert!((pcc(arr(&x).view(), arr(&y).view()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pcc_affine_invariance((x, y) in pair(3, 30), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        prop_assume!(oracle::var(&x) > 1e-6 && oracle::var(&y) > 1e-6);
        let p = pcc(arr(&x).view(), arr(&y).view()).unwrap();
        prop_assert!(p.abs() <= 1.0);
        let y2: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        prop_assert!((p - pcc(arr(&x).view(), arr(&y2).view()).unwrap()).abs() < 1e-9);
        let s = SequenceStats::compute(arr(&x).view(), arr(&y).view()).unwrap();
        prop_assert!((s.cov - s.pearson * s.std_x * s.std_y).abs() < 1e-9);
    }

    #[test]
    fn metrics_never_nan(n in 1usize..20, seed: u64, constant in any::<bool>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for task in Task::ALL {
            let c = task.n_outputs();
            let n = if task == Task::Va { n.max(2) } else { n };
            let out = if constant {
                Array2::from_elem((n, c), 0.25)
            } else {
                oracle::random_matrix(&mut rng, n, c, 0.0, 1.0)
            };
            let target = match task {
                Task::Au => oracle::random_binary(&mut rng, n, c, 0.3),
                Task::Expr => Array2::from_shape_fn((n, c), |(i, j)| (j == i % c) as u8 as f64),
                Task::Va => Array2::from_elem((n, c), 0.5),
            };
            let report = evaluate(task, out.view(), target.view()).unwrap();
            prop_assert!(report.aggregate.is_finite());
            prop_assert!(report.per_class.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fill_matches_nearest_search(n in 1usize..60, present_mask in vec(any::<bool>(), 60), pick in 0usize..60) {
        let mut present: Vec<usize> = (0..n).filter(|&t| present_mask[t]).collect();
        if present.is_empty() {
            present.push(pick % n);
        }
        let map: BTreeMap<usize, Vec<f64>> = present.iter().map(|&t| (t, vec![t as f64, -(t as f64)])).collect();
        let dense = fill_missing(&map, n).unwrap();
        for t in 0..n {
            let src = oracle::nearest_present(&present, t) as f64;
            prop_assert_eq!(dense.row(t).to_vec(), vec![src, -src]);
        }
        let again: BTreeMap<usize, Vec<f64>> = (0..n).map(|t| (t, dense.row(t).to_vec())).collect();
        prop_assert_eq!(fill_missing(&again, n).unwrap(), dense);
    }

    #[test]
    fn filters_keep_shape_and_range(x in series(1, 80), sigma in 0.3f64..12.0, window in 1usize..30) {
        let s = column(&x);
        let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        for out in [
            gaussian_smooth(s.view(), sigma).unwrap(),
            median_smooth(s.view(), window).unwrap(),
            average_smooth(s.view(), window).unwrap(),
        ] {
            prop_assert_eq!(out.dim(), s.dim());
            prop_assert!(out.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }

    #[test]
    fn combine_is_associative(n in 1usize..20, da in 1usize..5, db in 1usize..5, dc in 1usize..5) {
        let mk = |id: &str, d: usize, base: f64| {
            FeatureSequence::new(id, "vid", Array2::from_shape_fn((n, d), |(i, j)| base + (i * 10 + j) as f64)).unwrap()
        };
        let (a, b, c) = (mk("a", da, 0.0), mk("b", db, 1000.0), mk("c", dc, 2000.0));
        let flat = concat_sequences(&[&a, &b, &c]).unwrap();
        let inner = concat_sequences(&[&b, &c]).unwrap();
        let nested = concat_sequences(&[&a, &inner]).unwrap();
        prop_assert_eq!(&flat.features, &nested.features);
        prop_assert_eq!(flat.d(), da + db + dc);

        let spec = |order: [&str; 3]| FeatureSetSpec {
            vision_providers: vec![order[0].to_string()],
            audio_providers: vec![order[1].to_string(), order[2].to_string()],
        };
        let seqs = [a.clone(), b.clone(), c.clone()];
        let cab = combine(&seqs, &spec(["c", "a", "b"])).unwrap();
        let mut col = 0;
        for s in [&c, &a, &b] {
            let block = cab.features.slice(ndarray::s![.., col..col + s.d()]);
            prop_assert_eq!(block, s.features.view());
            col += s.d();
        }
    }

    #[test]
    fn aligned_audio_has_video_length(m in 1usize..200, n in 1usize..200, ar in 1.0f64..100.0, vr in 1.0f64..60.0) {
        let audio = FeatureSequence::new("aud", "vid", Array2::from_shape_fn((m, 2), |(i, _)| i as f64)).unwrap();
        let out = align_audio(&audio, ar, vr, n).unwrap();
        prop_assert_eq!(out.n_frames(), n);
        prop_assert!(out.features.column(0).iter().all(|v| (*v as usize) < m));
    }

    #[test]
    fn class_weights_mean_one_and_scale_free(counts in vec(1u64..1000, 1..12), scale in 1u64..50) {
        let w = compute_class_weights(&counts).unwrap().weights;
        prop_assert!((oracle::mean(&w) - 1.0).abs() < 1e-12);
        let scaled: Vec<u64> = counts.iter().map(|c| c * scale).collect();
        let w2 = compute_class_weights(&scaled).unwrap().weights;
        prop_assert!(w.iter().zip(&w2).all(|(a, b)| (a - b).abs() < 1e-12));
        {
            let (i, j) = (0, counts.len() - 1);
            prop_assert!((w[i] * counts[i] as f64 - w[j] * counts[j] as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn expr_loss_is_eighth_of_cross_entropy(logits in vec(-3.0f64..3.0, 8 * 6), classes in vec(0usize..8, 6)) {
        let z = Array2::from_shape_vec((6, N_EXPR), logits).unwrap();
        let pred = Array2::from_shape_fn((6, N_EXPR), |(i, j)| {
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            (z[[i, j]] - m).exp() / s
        });
        let target = Array2::from_shape_fn((6, N_EXPR), |(i, j)| (classes[i] == j) as u8 as f64);
        let ce: f64 = (0..6).map(|i| -pred[[i, classes[i]]].ln()).sum::<f64>() / 6.0;
        let l = expr_loss(pred.view(), target.view(), &ClassWeights::uniform(N_EXPR), &[true; 6]).unwrap();
        prop_assert!((l - ce / 8.0).abs() < 1e-12);
    }
}
