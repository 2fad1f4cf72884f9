use mtdlab::attacks::{cluster_observations, DbscanParams, ObservationSet};
use mtdlab::casefile::{branch_admittance, load_case, Branch, Bus, BusKind, NetworkCase};
use mtdlab::error::Error;
use mtdlab::harness::{observation_history, run_scenario, AttackKind, ScenarioConfig};
use mtdlab::learning::TsneParams;
use mtdlab::mtd::*;
use mtdlab::powerflow::build_h_dc;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn case14() -> NetworkCase {
    load_case("case14").unwrap()
}

fn position(case: &NetworkCase, f: usize, t: usize) -> usize {
    case.branches.iter().position(|b| b.from_bus == f && b.to_bus == t).unwrap()
}

#[test]
fn switching_out_and_back_is_identity() {
    let case = case14();
    for line in [0, 5, 19] {
        let out = switch_line(&case, line, false).unwrap();
        assert!(!out.branches[line].in_service);
        assert_eq!(switch_line(&out, line, true).unwrap(), case);
    }
}

#[test]
fn switched_line_leaves_zero_flow_row() {
    let case = case14();
    let line = position(&case, 1, 2);
    let before = build_h_dc(&case).unwrap().entries;
    let after = build_h_dc(&switch_line(&case, line, false).unwrap()).unwrap().entries;
    assert_eq!(after.nrows(), 34);
    assert!(after.row(line).iter().all(|&v| v == 0.0));
    assert!(before.row(line).iter().any(|&v| v != 0.0));
    // injections at buses 1 and 2 lose the branch's stamp
    let b = 1.0 / case.branches[line].reactance_x;
    let nl = case.branch_count();
    assert!((before[(nl, 0)] - after[(nl, 0)] - (-b)).abs() < 1e-9);
    assert!((before[(nl + 1, 0)] - after[(nl + 1, 0)] - b).abs() < 1e-9);
    for k in (0..nl).filter(|&k| k != line) {
        assert_eq!(before.row(k), after.row(k));
    }
}

#[test]
fn switching_a_radial_line_is_rejected() {
    let case = case14();
    let radial = position(&case, 7, 8);
    assert!(matches!(switch_line(&case, radial, false), Err(Error::Islanding(l)) if l == radial));
    assert!(matches!(switch_line(&case, 99, false), Err(Error::UnknownLine(99))));
}

#[test]
fn zero_perturbation_is_identity() {
    let case = case14();
    assert_eq!(perturb_admittance(&case, 3, 0.0).unwrap(), case);
}

#[test]
fn ten_percent_perturbation_scales_susceptance() {
    let case = case14();
    let line = position(&case, 1, 2);
    assert_eq!(case.branches[line].reactance_x, 0.05917);
    let out = perturb_admittance(&case, line, 0.10).unwrap();
    let (_, b0) = branch_admittance(&case.branches[line]).unwrap();
    let (_, b1) = branch_admittance(&out.branches[line]).unwrap();
    assert!((b1 / b0 - 1.10).abs() < 1e-12);
    let dc = (1.0 / out.branches[line].reactance_x) / (1.0 / case.branches[line].reactance_x);
    assert!((dc - 1.10).abs() < 1e-12);
    for k in (0..case.branch_count()).filter(|&k| k != line) {
        assert_eq!(out.branches[k], case.branches[k]);
    }
    assert_eq!(out.buses, case.buses);
}

#[test]
fn perturbation_restores() {
    let case = case14();
    let down = perturb_admittance(&case, 0, -0.10).unwrap();
    let back = perturb_admittance(&down, 0, 1.0 / 9.0).unwrap();
    let (_, b0) = branch_admittance(&case.branches[0]).unwrap();
    let (_, b2) = branch_admittance(&back.branches[0]).unwrap();
    assert!((b2 - b0).abs() <= 1e-12 * b0.abs());
}

#[test]
fn perturbation_errors() {
    let case = case14();
    assert!(matches!(perturb_admittance(&case, 20, 0.1), Err(Error::UnknownLine(20))));
    assert!(perturb_admittance(&case, 0, 1.0).is_err());
    assert!(perturb_admittance(&case, 0, -1.0).is_err());
    let out = switch_line(&case, 0, false).unwrap();
    assert!(perturb_admittance(&out, 0, 0.1).is_err());
}

#[test]
fn zero_watermark_is_identity() {
    let case = case14();
    let (out, w) = gaussian_watermark(&case, &[0, 1, 2], 0.0, 42).unwrap();
    assert_eq!(out, case);
    assert!(w.factors.iter().all(|&g| g == 0.0));
    assert!(w.susceptance_deltas.iter().all(|&d| d == 0.0));
}

#[test]
fn watermark_is_seeded() {
    let case = case14();
    let a = gaussian_watermark(&case, &[0, 4, 9], 0.01, 7).unwrap();
    let b = gaussian_watermark(&case, &[0, 4, 9], 0.01, 7).unwrap();
    assert_eq!(a, b);
    let c = gaussian_watermark(&case, &[0, 4, 9], 0.01, 8).unwrap();
    assert_ne!(a.1.factors, c.1.factors);
}

#[test]
fn watermark_spread_matches_scale() {
    let case = case14();
    let mut draws = Vec::with_capacity(10_000);
    for seed in 0..10_000u64 {
        draws.extend(gaussian_watermark(&case, &[0], 0.01, seed).unwrap().1.factors);
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.01).abs() <= 0.05 * 0.01, "sd {sd}");
}

#[test]
fn extreme_watermark_draws_are_redrawn() {
    let case = case14();
    let lines: Vec<usize> = (0..20).collect();
    let (_, w) = gaussian_watermark(&case, &lines, 2.0, 3).unwrap();
    assert!(w.redraws > 0);
    assert!(w.factors.iter().all(|g| g.abs() < 1.0));
}

#[test]
fn watermark_deltas_match_case() {
    let case = case14();
    let (out, w) = gaussian_watermark(&case, &[2, 6], 0.05, 11).unwrap();
    for (j, &l) in [2usize, 6].iter().enumerate() {
        let (_, b0) = branch_admittance(&case.branches[l]).unwrap();
        let (_, b1) = branch_admittance(&out.branches[l]).unwrap();
        assert!((b1 - b0 - w.susceptance_deltas[j]).abs() < 1e-12 * b0.abs());
        assert!((b1 / b0 - (1.0 + w.factors[j])).abs() < 1e-12);
    }
}

#[test]
fn action_validation() {
    assert!(MtdAction::new(MtdKind::Switch, vec![], 0.0, None).is_err());
    assert!(MtdAction::new(MtdKind::Perturb, vec![0], 1.0, None).is_err());
    assert!(MtdAction::new(MtdKind::Perturb, vec![0], -0.1, None).is_err());
    assert!(MtdAction::new(MtdKind::Watermark, vec![0], 0.01, None).is_err());
    let case = case14();
    let act = MtdAction::new(MtdKind::Watermark, vec![0, 1], 0.01, Some(5)).unwrap();
    let (out, w) = act.apply(&case).unwrap();
    assert_eq!((out, w.unwrap()), gaussian_watermark(&case, &[0, 1], 0.01, 5).unwrap());
    assert_eq!("perturb".parse::<MtdKind>().unwrap(), MtdKind::Perturb);
    assert!("dfacts".parse::<MtdKind>().is_err());
}

#[test]
fn fourteen_bus_order_follows_table() {
    let case = case14();
    let order = line_order(&case);
    let pairs: Vec<(usize, usize)> = order.iter().map(|&l| (case.branches[l].from_bus, case.branches[l].to_bus)).collect();
    assert_eq!(pairs, IEEE14_LINE_ORDER.to_vec());
    let big = load_case("case118").unwrap();
    assert_eq!(line_order(&big), (0..16).collect::<Vec<_>>());
}

#[test]
fn schedule_without_lines_stays_on_base() {
    let order = line_order(&case14());
    let s = mtd_schedule(0, 500, &order, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(s.topology_ids.iter().all(|&t| t == 0));
    assert_eq!(s.line_for(0), None);
}

#[test]
fn single_line_schedule_uses_both_topologies() {
    let order = line_order(&case14());
    let s = mtd_schedule(1, 200, &order, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(s.topology_ids.iter().all(|&t| t <= 1));
    assert!(s.topology_ids.contains(&0) && s.topology_ids.contains(&1));
    assert_eq!(s.line_for(1), Some(order[0]));
}

#[test]
fn fifteen_line_schedule_is_uniform() {
    let order = line_order(&case14());
    let s = mtd_schedule(15, 1000, &order, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut counts = [0usize; 16];
    for &t in &s.topology_ids {
        counts[t] += 1;
    }
    for (id, &c) in counts.iter().enumerate() {
        assert!(c > 0, "topology {id} never drawn");
        assert!((c as f64 / 1000.0 - 1.0 / 16.0).abs() <= 0.05, "topology {id}: {c}");
    }
}

#[test]
fn schedule_rejects_too_many_lines() {
    let order = line_order(&case14());
    assert!(mtd_schedule(17, 10, &order, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn scheduled_topologies_move_one_line(nlp in 0usize..=16, seed in any::<u64>()) {
        let case = case14();
        let order = line_order(&case);
        let s = mtd_schedule(nlp, 50, &order, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s.line_order.len(), nlp);
        for &id in &s.topology_ids {
            prop_assert!(id <= nlp);
            let Some(line) = s.line_for(id) else { continue };
            let moved = perturb_admittance(&case, line, 0.1).unwrap();
            let changed = (0..case.branch_count()).filter(|&k| moved.branches[k] != case.branches[k]).count();
            prop_assert_eq!(changed, 1);
        }
    }
}

fn residuals(mut cfg: ScenarioConfig) -> Vec<f64> {
    cfg.attack = AttackKind::None;
    cfg.observations = 2;
    cfg.trials = 500;
    run_scenario(&cfg).unwrap().rows.iter().map(|r| r.outcome.as_ref().unwrap().residual).collect()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var / n)
}

#[test]
fn defender_with_true_topology_sees_baseline_residuals() {
    let base = residuals(ScenarioConfig { seed: 1, ..ScenarioConfig::default() });
    for (kind, nlp) in [(MtdKind::Perturb, 5), (MtdKind::Switch, 5), (MtdKind::Watermark, 14)] {
        let cfg = ScenarioConfig { seed: 2, mtd: Some(kind), nlp, detector: Some(mtdlab::harness::Detector::Instant), ..ScenarioConfig::default() };
        let moved = residuals(cfg);
        let ((m0, v0), (m1, v1)) = (mean_se(&base), mean_se(&moved));
        let se = (v0 + v1).sqrt();
        assert!((m0 - m1).abs() <= 2.0 * se, "{kind}: {m0:.3} vs {m1:.3} (se {se:.3})");
    }
}

#[test]
fn watermark_hides_from_clustering() {
    let runs = 20;
    let mut single = 0;
    for seed in 0..runs {
        let cfg = ScenarioConfig {
            seed,
            mtd: Some(MtdKind::Watermark),
            nlp: 14,
            watermark_p: 0.01,
            noise_ratio: 0.01,
            observations: 300,
            ..ScenarioConfig::default()
        };
        let (rows, _) = observation_history(&cfg, 0).unwrap();
        let obs = ObservationSet::from_rows(rows).unwrap();
        let tsne = TsneParams { cost_every: 1000, ..TsneParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, labels) = cluster_observations(&obs, &tsne, &DbscanParams::default(), &mut rng).unwrap();
        if labels.cluster_count == 1 {
            single += 1;
        }
    }
    assert!(single as f64 >= 0.9 * runs as f64, "single cluster in {single}/{runs} runs");
}

#[test]
fn islanding_guard_on_small_case() {
    let bus = |id, kind| Bus { id, kind, load_p: 0.1, load_q: 0.0, v_setpoint: 1.0, gen_p: 0.0 };
    let case = NetworkCase::new(
        100.0,
        vec![bus(1, BusKind::Slack), bus(2, BusKind::Load), bus(3, BusKind::Load)],
        vec![Branch::new(1, 2, 0.01, 0.1, 0.0), Branch::new(2, 3, 0.01, 0.1, 0.0), Branch::new(1, 3, 0.01, 0.1, 0.0)],
    )
    .unwrap();
    let open = switch_line(&case, 0, false).unwrap();
    assert!(matches!(switch_line(&open, 1, false), Err(Error::Islanding(1))));
}
