//! Property suites spanning the analysis, routing, fine-tuning and metrics modules.

use ecgx_core::analysis::{detect_rpeaks, median_beat, rlign_transform, BeatWindow, FiducialMap, RlignOptions};
use ecgx_core::metrics::{aggregate, f1_scores, LabelMapSet};
use ecgx_core::moa::{
    gumbel_softmax, load_balance_grad, load_balance_loss, mmd_grad_x, mmd_loss, numeric_gradient, route, route_entropy_grad,
    route_entropy_loss, softmax, RouteMode, RouterConfig,
};
use ecgx_core::synth::{synthetic_ecg, BeatShape, EcgSpec};
use ecgx_core::StandardEcg;
use ndarray::Array2;
use proptest::prelude::*;

/// Greedy one-to-one matching within `tol` samples; returns (precision, recall).
fn match_peaks(truth: &[usize], found: &[usize], tol: usize) -> (f64, f64) {
    let mut used = vec![false; found.len()];
    let mut hits = 0;
    for &t in truth {
        if let Some(j) = (0..found.len()).find(|&j| !used[j] && found[j].abs_diff(t) <= tol) {
            used[j] = true;
            hits += 1;
        }
    }
    (hits as f64 / found.len().max(1) as f64, hits as f64 / truth.len().max(1) as f64)
}

fn shape() -> impl Strategy<Value = BeatShape> {
    prop_oneof![Just(BeatShape::Normal), Just(BeatShape::WideQrs), Just(BeatShape::InvertedT)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn rpeaks_found_exactly_across_rates(
        bpm in 40.0f64..=180.0,
        noise in 0.0f64..=0.05,
        first in 0.3f64..0.7,
        scale in 0.8f64..1.2,
        shape in shape(),
        seed in any::<u64>(),
    ) {
        let syn = synthetic_ecg(&EcgSpec { shape, bpm, first_peak_s: first, amplitude_scale: scale, noise_sd: noise, wander_mv: 0.0, seed });
        let fid = detect_rpeaks(&syn.ecg).unwrap();
        let (p, r) = match_peaks(&syn.r_peaks, &fid.r_peaks, 5);
        prop_assert_eq!((p, r), (1.0, 1.0), "truth {:?} found {:?}", syn.r_peaks, fid.r_peaks);
    }

    #[test]
    fn rlign_puts_peaks_on_the_template(bpm in 50.0f64..120.0, seed in any::<u64>(), target in 50.0f64..90.0) {
        let syn = synthetic_ecg(&EcgSpec { bpm, seed, noise_sd: 0.01, ..EcgSpec::default() });
        let fid = FiducialMap::from_peaks(syn.r_peaks.clone(), 100.0, 1000);
        let out = rlign_transform(&syn.ecg, &fid, &RlignOptions { target_bpm: target, ..RlignOptions::default() }).unwrap();
        for (k, &tp) in out.template_rpeaks.iter().enumerate().take(out.beats_used) {
            for lead in 0..12 {
                prop_assert_eq!(out.samples[[lead, tp]], syn.ecg.samples()[[lead, syn.r_peaks[k]]]);
            }
        }
    }

    #[test]
    fn median_of_identical_beats_is_the_beat(period in 60usize..120, offset in 20usize..40, amp in 0.5f64..2.0) {
        let beat: Vec<f64> = (0..period).map(|i| amp * ((i as f64) * 0.37).sin() + if i == offset { 3.0 } else { 0.0 }).collect();
        let m = Array2::from_shape_fn((12, 1000), |(l, t)| beat[t % period] * (1.0 + l as f64 * 0.1));
        let ecg = StandardEcg::new(m, 100.0).unwrap();
        let peaks: Vec<usize> = (0..).map(|k| offset + k * period).take_while(|&r| r < 1000).collect();
        let fid = FiducialMap::from_peaks(peaks, 100.0, 1000);
        let mb = median_beat(&ecg, &fid, &BeatWindow::default()).unwrap();
        for lead in 0..12 {
            for k in 0..60 {
                // the window starts 20 samples before a peak
                let src = (offset + 40 * period - 20 + k) % period;
                let want = beat[src] * (1.0 + lead as f64 * 0.1);
                prop_assert!((mb.samples[[lead, k]] - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn gates_are_k_sparse_simplex(logits in proptest::collection::vec(-8.0f64..8.0, 2..9), k_frac in 0.0f64..1.0, seed in any::<u64>(), step in 0u64..200, train in any::<bool>()) {
        let n = logits.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let cfg = RouterConfig { n_experts: n, k, noise_scale: vec![0.5; n], seed, ..RouterConfig::default() };
        let mode = if train { RouteMode::Train } else { RouteMode::Eval };
        let out = route(&logits, &cfg, mode, step).unwrap();
        prop_assert_eq!(out.selected.len(), k);
        prop_assert!(out.selected.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(out.gates.iter().all(|&g| g >= 0.0));
        prop_assert!(out.gates.iter().filter(|&&g| g > 0.0).count() <= k);
        prop_assert!((out.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(&out, &route(&logits, &cfg, mode, step).unwrap());
    }

    #[test]
    fn eval_routing_ignores_logit_shift(logits in proptest::collection::vec(-5.0f64..5.0, 4), c in -20.0f64..20.0) {
        let cfg = RouterConfig::default();
        let a = route(&logits, &cfg, RouteMode::Eval, 0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let b = route(&shifted, &cfg, RouteMode::Eval, 0).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        for (x, y) in a.gates.iter().zip(&b.gates) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn annealing_is_monotone_and_bounded(tau0 in 0.1f64..5.0, decay in 0.5f64..1.0, s in 0u64..500) {
        let cfg = RouterConfig { gumbel_tau0: tau0, gumbel_tau_min: 0.1, gumbel_decay: decay, ..RouterConfig::default() };
        prop_assert!(cfg.tau_at(s + 1) <= cfg.tau_at(s));
        prop_assert!(cfg.tau_at(s) >= 0.1);
    }

    #[test]
    fn low_temperature_gumbel_is_one_hot(base in proptest::collection::vec(-3.0f64..3.0, 3..8), boost in 1.0f64..4.0) {
        let mut logits = base.clone();
        let top = logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let second = logits.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        logits[top] = second + boost;
        let y = gumbel_softmax(&logits, 0.01, &vec![0.0; logits.len()]).unwrap();
        for (i, v) in y.iter().enumerate() {
            let want = if i == top { 1.0 } else { 0.0 };
            prop_assert!((v - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn routing_losses_are_bounded(rows in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 4), 1..12)) {
        let b = rows.len();
        let probs = Array2::from_shape_fn((b, 4), |(i, j)| softmax(&rows[i])[j]);
        let h = route_entropy_loss(probs.view()).unwrap();
        prop_assert!((-1e-12..=4f64.ln() + 1e-12).contains(&h));
        let sel: Vec<Vec<usize>> = (0..b).map(|i| vec![i % 4]).collect();
        prop_assert!(load_balance_loss(probs.view(), &sel).unwrap() >= 0.0);
    }

    #[test]
    fn mmd_is_non_negative(x in proptest::collection::vec(-3.0f64..3.0, 6..24), y in proptest::collection::vec(-3.0f64..3.0, 6..24), sigma in 0.3f64..3.0) {
        let xa = Array2::from_shape_vec((x.len() / 3, 3), x[..x.len() / 3 * 3].to_vec()).unwrap();
        let ya = Array2::from_shape_vec((y.len() / 3, 3), y[..y.len() / 3 * 3].to_vec()).unwrap();
        prop_assert!(mmd_loss(xa.view(), ya.view(), sigma).unwrap() >= -1e-12);
        prop_assert!(mmd_loss(xa.view(), xa.view(), sigma).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn f1_ignores_sample_order(pairs in proptest::collection::vec((0usize..3, 0usize..3), 4..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let to_rows = |ps: &[(usize, usize)]| -> (Vec<Vec<String>>, Vec<Vec<String>>) {
            ps.iter().map(|&(t, p)| (vec![classes[t].clone()], vec![classes[p].clone()])).unzip()
        };
        let (t, p) = to_rows(&pairs);
        let a = f1_scores(&t, &p, &classes).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (t2, p2) = to_rows(&shuffled);
        let b = f1_scores(&t2, &p2, &classes).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn equal_supports_make_weighted_equal_macro(preds in proptest::collection::vec(0usize..3, 12)) {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let truth: Vec<Vec<String>> = (0..12).map(|i| vec![classes[i % 3].clone()]).collect();
        let pred: Vec<Vec<String>> = preds.iter().map(|&p| vec![classes[p].clone()]).collect();
        let r = f1_scores(&truth, &pred, &classes).unwrap();
        prop_assert!((r.weighted_f1 - r.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_spread_is_non_negative(v in proptest::collection::vec(0.01f64..1.0, 2..20)) {
        let s = aggregate(&v).unwrap();
        prop_assert!(s.iqr >= 0.0 && s.cv >= 0.0);
        prop_assert!(s.median >= v.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn label_mapping_is_idempotent(codes in proptest::collection::vec(prop_oneof![
        Just("I21.0"), Just("I21.1"), Just("I22"), Just("I11.9"), Just("I44.7"), Just("I45.1"), Just("Z99"),
        Just("CLBBB"), Just("RBBB"), Just("IRBBB"), Just("Ab"), Just("HEH"), Just("LBBB"), Just("MI")
    ], 0..6), sel in prop_oneof![Just("icd10"), Just("physionet"), Just("edms"), Just("ptbxl"), Just("icd10.superclasses")]) {
        let maps = LabelMapSet::builtin();
        let once = maps.map_labels(sel, &codes).unwrap();
        let v: Vec<String> = once.iter().cloned().collect();
        prop_assert_eq!(maps.map_labels(sel, &v).unwrap(), once);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[test]
fn routing_loss_gradients_match_central_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let (b, n) = (6, 4);
        let logits: Vec<f64> = (0..b * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let la = Array2::from_shape_vec((b, n), logits.clone()).unwrap();
        let sel: Vec<Vec<usize>> = (0..b).map(|i| vec![i % n, (i + 1) % n]).collect();
        let to_probs = |p: &[f64]| Array2::from_shape_fn((b, n), |(i, j)| softmax(&p[i * n..(i + 1) * n])[j]);

        let g = load_balance_grad(la.view(), &sel).unwrap();
        let num = numeric_gradient(|p| load_balance_loss(to_probs(p).view(), &sel).unwrap(), &logits, 1e-6).unwrap();
        assert!(g.iter().zip(&num).all(|(a, b)| rel_err(*a, *b) <= 1e-4));

        let g = route_entropy_grad(la.view()).unwrap();
        let num = numeric_gradient(|p| route_entropy_loss(to_probs(p).view()).unwrap(), &logits, 1e-6).unwrap();
        assert!(g.iter().zip(&num).all(|(a, b)| rel_err(*a, *b) <= 1e-4));

        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let xa = Array2::from_shape_vec((5, 3), x.clone()).unwrap();
        let g = mmd_grad_x(xa.view(), y.view(), 1.0).unwrap();
        let num = numeric_gradient(|p| mmd_loss(Array2::from_shape_vec((5, 3), p.to_vec()).unwrap().view(), y.view(), 1.0).unwrap(), &x, 1e-6).unwrap();
        assert!(g.iter().zip(&num).all(|(a, b)| rel_err(*a, *b) <= 1e-4));
    }
}
