mod common;

use gcnn::assign::{assign_grid, build_train_tuples, target_step, ClassId, GroundTruth};
use gcnn::boxgeom::{apply_delta, clip_to_image, delta, iou, BBox};
use gcnn::config::ExperimentConfig;
use gcnn::detect::nms;
use gcnn::eval::{average_precision, fp_breakdown, Detection, ImageGt};
use gcnn::features::{roi_pool, FeatureMap};
use gcnn::gridgen::{generate_grid, GridSpec};
use gcnn::model::TrainMode;
use gcnn::synth::{generate_scene, SynthConfig};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (-200.0..200.0f64, -200.0..200.0f64, 0.5..300.0f64, 0.5..300.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
}

fn arb_inside(size: f64) -> impl Strategy<Value = BBox> {
    (0.0..size - 2.0, 0.0..size - 2.0, 0.05..1.0f64, 0.05..1.0f64).prop_map(move |(x1, y1, fw, fh)| {
        let x2 = x1 + 1.0 + fw * (size - 1.0 - x1);
        let y2 = y1 + 1.0 + fh * (size - 1.0 - y1);
        BBox::from_corners(x1, y1, x2.min(size), y2.min(size)).unwrap()
    })
}

fn close(a: &BBox, b: &BBox, rel: f64) -> bool {
    a.as_array().iter().zip(b.as_array()).all(|(x, y)| (x - y).abs() <= rel * y.abs().max(1.0))
}

fn det(image_id: u64, class: u32, score: f64, b: BBox) -> Detection {
    Detection { image_id, class_label: ClassId(class), score, bbox: b }
}

fn gt(image_id: u64, class: u32, b: BBox) -> ImageGt {
    ImageGt { image_id, gt: GroundTruth::new(b, ClassId(class)).unwrap() }
}

proptest! {
    #[test]
    fn iou_symmetric_bounded_and_reflexive(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_scale_invariant(a in arb_box(), b in arb_box(), s in 0.01..100.0f64) {
        let scaled = iou(&a.scaled(s).unwrap(), &b.scaled(s).unwrap());
        prop_assert!((scaled - iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn delta_round_trip(b in arb_box(), t in arb_box()) {
        prop_assert!(close(&apply_delta(&b, &delta(&b, &t)), &t, 1e-9));
    }

    #[test]
    fn delta_translation_covariant(b in arb_box(), t in arb_box(), dx in -500.0..500.0f64, dy in -500.0..500.0f64) {
        let d0 = delta(&b, &t).as_array();
        let d1 = delta(&b.translated(dx, dy).unwrap(), &t.translated(dx, dy).unwrap()).as_array();
        for (x, y) in d0.iter().zip(d1) {
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn clip_idempotent_and_inside(b in arb_box(), w in 8.0..400.0f64, h in 8.0..400.0f64) {
        let once = clip_to_image(&b, w, h, 1.0);
        prop_assert_eq!(clip_to_image(&once, w, h, 1.0), once);
        prop_assert!(once.is_inside(w, h, 1e-9));
        prop_assert!(once.w() >= 1.0 - 1e-12 && once.h() >= 1.0 - 1e-12);
    }

    #[test]
    fn grid_inside_deterministic_and_counted(
        w in 16u32..800, h in 16u32..800,
        levels in prop::collection::vec((1u32..12, 0.0..0.9f64), 1..4),
    ) {
        let spec = GridSpec::new(levels.iter().map(|l| l.0).collect(), levels.iter().map(|l| l.1).collect()).unwrap();
        let (w, h) = (w as f64, h as f64);
        let grid = generate_grid(&spec, w, h).unwrap();
        prop_assert_eq!(&generate_grid(&spec, w, h).unwrap(), &grid);
        prop_assert!(grid.iter().all(|b| b.is_inside(w, h, 1e-9)));
        // placement walk: keep stepping while the cell still fits
        let walk = |dim: f64, cell: f64, stride: f64| {
            let mut n = 0usize;
            while n as f64 * stride + cell <= dim + 1e-9 {
                n += 1;
            }
            n
        };
        let expected: usize = levels
            .iter()
            .map(|&(k, a)| {
                let (cw, ch) = (w / k as f64, h / k as f64);
                walk(w, cw, cw * (1.0 - a)) * walk(h, ch, ch * (1.0 - a))
            })
            .sum();
        prop_assert_eq!(grid.len(), expected);
    }

    #[test]
    fn phi_contracts_and_telescopes(b in arb_box(), g in arb_box(), s_train in 1usize..7) {
        let mut state = b;
        for s in 1..=s_train {
            let next = target_step(&state, &g, s, s_train).unwrap();
            if s < s_train {
                for ((n, c), t) in next.as_array().iter().zip(state.as_array()).zip(g.as_array()) {
                    if c != t {
                        prop_assert!((n - t).abs() < (c - t).abs());
                    }
                }
            }
            state = next;
        }
        prop_assert!(close(&state, &g, 1e-9));
    }

    #[test]
    fn assignment_stable_and_background_untargeted(
        gts in prop::collection::vec((arb_inside(128.0), 1u32..5), 0..4),
        stage in 1usize..4,
    ) {
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(b, c)| GroundTruth::new(b, ClassId(c)).unwrap()).collect();
        let grid = generate_grid(&GridSpec::default_train(), 128.0, 128.0).unwrap();
        let a = assign_grid(&grid, &gts, 0.2);
        prop_assert_eq!(&assign_grid(&grid, &gts, 0.2), &a);
        for x in &a {
            prop_assert_eq!(x.target.is_some(), x.iou_at_assignment > 0.2);
        }
        let tuples = build_train_tuples(&grid, &a, 3, stage).unwrap();
        for t in &tuples {
            prop_assert!((1..=stage).contains(&t.step));
            prop_assert_eq!(t.is_background(), t.class_label.is_background());
            prop_assert!(!t.is_background() || t.step == 1);
        }
    }

    #[test]
    fn roi_pool_length_is_fixed(b in arb_inside(32.0), ph in 1usize..5, pw in 1usize..5, seed in 0u64..1000) {
        let data: Vec<f64> = (0..2 * 32 * 32).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64).collect();
        let fm = FeatureMap::new(2, 32, 32, data).unwrap();
        prop_assert_eq!(roi_pool(&fm, &b, ph, pw).unwrap().values.len(), 2 * ph * pw);
    }

    #[test]
    fn nms_is_subset_and_idempotent(
        dets in prop::collection::vec((arb_inside(64.0), 0u32..8), 0..20),
        thr in 0.05..0.95f64,
    ) {
        let dets: Vec<(BBox, f64)> = dets.into_iter().map(|(b, s)| (b, s as f64 / 8.0)).collect();
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        prop_assert_eq!(nms(&kept, thr), kept);
    }
}

fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<ImageGt>)> {
    let gts = prop::collection::vec((0u64..2, arb_inside(48.0)), 0..4);
    let dets = prop::collection::vec((0u64..2, 0u32..6, arb_inside(48.0), 0usize..4, -3.0..3.0f64, -3.0..3.0f64), 0..8);
    (gts, dets).prop_map(|(gts, dets)| {
        let gts: Vec<ImageGt> = gts.into_iter().map(|(im, b)| gt(im, 1, b)).collect();
        let dets = dets
            .into_iter()
            .map(|(im, s, b, near, dx, dy)| match gts.get(near) {
                // jitter around a ground truth so matches actually happen
                Some(g) => det(g.image_id, 1, s as f64 / 6.0, g.gt.bbox.translated(dx, dy).unwrap()),
                None => det(im, 1, s as f64 / 6.0, b),
            })
            .collect();
        (dets, gts)
    })
}

proptest! {
    #[test]
    fn ap_bounded_and_matches_oracle((dets, gts) in arb_scene()) {
        let ap = average_precision(&dets, &gts, 0.5);
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - common::naive_ap(&dets, &gts, 0.5).to_f64()).abs() < 1e-15);
    }

    #[test]
    fn ap_invariant_under_monotone_scores((dets, gts) in arb_scene(), a in 0.1..10.0f64, c in -5.0..5.0f64) {
        let moved: Vec<Detection> = dets.iter().map(|d| Detection { score: (a * d.score).exp() + c, ..*d }).collect();
        prop_assert_eq!(average_precision(&moved, &gts, 0.5), average_precision(&dets, &gts, 0.5));
    }

    #[test]
    fn ap_invariant_under_permutation((dets, gts) in arb_scene(), rot in 0usize..8) {
        let mut p = dets.clone();
        p.reverse();
        if !p.is_empty() {
            let k = rot % p.len();
            p.rotate_left(k);
        }
        prop_assert_eq!(average_precision(&p, &gts, 0.5), average_precision(&dets, &gts, 0.5));
    }

    #[test]
    fn fp_categories_partition(
        gts in prop::collection::vec((0u64..2, 1u32..5, arb_inside(48.0)), 0..5),
        dets in prop::collection::vec((0u64..2, 1u32..5, 0u32..10, arb_inside(48.0)), 0..15),
    ) {
        let gts: Vec<ImageGt> = gts.into_iter().map(|(im, c, b)| gt(im, c, b)).collect();
        let dets: Vec<Detection> = dets.into_iter().map(|(im, c, s, b)| det(im, c, s as f64 / 10.0, b)).collect();
        let fb = fp_breakdown(&dets, &gts, &[vec![1, 2], vec![3, 4]], 4, &[1, 3, 100], 0.5).unwrap();
        prop_assert_eq!(fb.categories.len(), fb.total_fp);
        for i in 0..fb.ranks.len() {
            let sum = fb.loc[i] + fb.sim[i] + fb.oth[i] + fb.bg[i];
            prop_assert_eq!(sum, fb.ranks[i].min(fb.total_fp));
        }
    }

    #[test]
    fn config_round_trip(
        mode in 0usize..3, s_test in 0usize..9, n_train in 1usize..1000, seed in any::<u64>(),
        lr in 1e-4..0.5f64, iters in 1usize..5000, score in 0.0..0.9f64, noise in 0.0..0.2f64,
    ) {
        let mut cfg = ExperimentConfig::default().with_seed(seed);
        cfg.mode = TrainMode::ALL[mode];
        cfg.s_test = s_test;
        cfg.n_train = n_train;
        cfg.train.learning_rate = lr;
        cfg.train.n_iter_per_stage = iters;
        cfg.thresholds.score = score;
        cfg.synth.noise_sigma = noise;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_respect_invariants(seed in any::<u64>(), id in 0u64..10_000) {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let scene = generate_scene(&cfg, id).unwrap();
        prop_assert_eq!(&generate_scene(&cfg, id).unwrap(), &scene);
        let (lo, hi) = (cfg.objects_per_scene[0], cfg.objects_per_scene[1]);
        prop_assert!((lo..=hi).contains(&scene.gts.len()));
        for (i, a) in scene.gts.iter().enumerate() {
            prop_assert!(a.bbox.is_inside(cfg.width as f64, cfg.height as f64, 0.0));
            for b in &scene.gts[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= cfg.max_gt_overlap);
            }
        }
    }
}
