mod common;

use std::collections::BTreeSet;

use common::{small_config, small_corpus};
use ssboost::runtime::{profile_csv, profile_rows};
use ssboost::{evaluate, infer, profile_corpus, train, AdditiveModel, Budget, StructuredInstance};

fn fixture() -> (AdditiveModel, Vec<StructuredInstance>) {
    let corpus = small_corpus(21, 6);
    let model = train(&corpus, &small_config(8)).unwrap();
    assert!(model.stages.len() >= 2);
    (model, small_corpus(22, 3))
}

#[test]
fn zero_budget_returns_initial_scores() {
    let (model, test) = fixture();
    for inst in &test {
        let out = infer(&model, inst, Budget::Limited(0.0)).unwrap();
        assert_eq!(out.stages_executed(), 0);
        assert_eq!(out.ledger.total(), 0.0);
        assert!(out.ledger.entries().is_empty());
        for p in 0..inst.num_pixels() {
            assert_eq!(out.scores.row(p), &model.initial[..]);
        }
    }
}

#[test]
fn ledger_matches_fixed_costs_plus_triggered_features() {
    let (model, test) = fixture();
    let costs = model.bank.costs();
    let static_total: f64 = model.stages.iter().map(|s| s.cost).sum();
    for inst in &test {
        let out = infer(&model, inst, Budget::Unlimited).unwrap();
        assert_eq!(out.stages_executed(), model.stages.len());
        let total = out.ledger.total();
        assert!(total <= static_total + 1e-9, "{total} > {static_total}");

        let mut groups = BTreeSet::new();
        let mut centers = BTreeSet::new();
        let mut expect = 0.0;
        for e in out.ledger.entries() {
            let s = &model.stages[e.stage];
            expect += s.selector.cost + s.tree.params().prediction_cost;
            for &(g, c) in &e.requested {
                if groups.insert(g) {
                    expect += costs.base[g];
                }
                if centers.insert((g, c)) {
                    expect += costs.per_center[g];
                }
            }
        }
        assert!((total - expect).abs() < 1e-9);
        assert_eq!(&centers, &out.ledger.paid().centers);
        assert_eq!(&groups, &out.ledger.paid().groups);
    }
}

#[test]
fn degenerate_profile_grids() {
    let (model, test) = fixture();
    let rows = profile_corpus(&model, &test, &[Budget::Limited(0.0)]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].cost, 0.0);

    let rows = profile_corpus(&model, &test, &[Budget::Limited(0.0), Budget::Unlimited]).unwrap();
    assert_eq!(rows.len(), 2);
    let full: Vec<_> = test
        .iter()
        .map(|i| infer(&model, i, Budget::Unlimited).unwrap())
        .collect();
    let acc = full
        .iter()
        .zip(&test)
        .map(|(r, i)| evaluate(&r.scores, i.labels()).unwrap().pixel_accuracy)
        .sum::<f64>()
        / test.len() as f64;
    assert!((rows[1].pixel_acc - acc).abs() < 1e-12);

    let csv = profile_csv(&rows);
    assert!(csv.starts_with("budget,pixel_acc,class_acc,risk\n"));
    assert!(csv.lines().nth(2).unwrap().starts_with("unlimited,"));
    assert!(profile_corpus(&model, &[], &[Budget::Unlimited]).is_err());
}

#[test]
fn duplicate_budgets_give_identical_rows() {
    let (model, test) = fixture();
    let rows = profile_corpus(&model, &test, &[Budget::Limited(40.0), Budget::Limited(40.0)]).unwrap();
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn profile_rows_equal_direct_budgeted_runs() {
    let (model, test) = fixture();
    let total: f64 = model.stages.iter().map(|s| s.cost).sum();
    let grid: Vec<Budget> = (0..=8).map(|i| Budget::Limited(total * i as f64 / 8.0)).collect();
    let rows = profile_corpus(&model, &test, &grid).unwrap();
    for (row, &b) in rows.iter().zip(&grid) {
        let mut acc = 0.0;
        let mut cost = 0.0;
        for inst in &test {
            let out = infer(&model, inst, b).unwrap();
            acc += evaluate(&out.scores, inst.labels()).unwrap().pixel_accuracy;
            cost += out.ledger.total();
            assert!(b.allows(out.ledger.total()));
        }
        assert!((row.pixel_acc - acc / test.len() as f64).abs() < 1e-12);
        assert!((row.cost - cost / test.len() as f64).abs() < 1e-9);
    }
    let profiles: Vec<_> = test
        .iter()
        .map(|i| infer(&model, i, Budget::Unlimited).unwrap().profile)
        .collect();
    assert_eq!(profile_rows(&profiles, &grid), rows);
}

#[test]
fn every_prefix_gives_finite_scores() {
    let (model, test) = fixture();
    for t in 0..=model.stages.len() {
        let prefix = model.prefix(t);
        for inst in &test {
            let out = infer(&prefix, inst, Budget::Unlimited).unwrap();
            assert_eq!(out.stages_executed(), t);
            assert!((0..inst.num_pixels()).all(|p| out.scores.row(p).iter().all(|v| v.is_finite())));
        }
    }
}

#[test]
fn mismatched_instances_are_rejected() {
    let (model, _) = fixture();
    let other = ssboost::scene::generate_corpus(
        &ssboost::SyntheticSceneConfig {
            width: 16,
            height: 16,
            num_classes: 4,
            hierarchy_levels: 3,
            ..Default::default()
        },
        1,
        1,
    )
    .unwrap();
    assert!(matches!(
        infer(&model, &other[0], Budget::Unlimited),
        Err(ssboost::Error::Incompatible(_))
    ));
}

#[test]
fn budget_parsing() {
    assert_eq!("unlimited".parse::<Budget>().unwrap(), Budget::Unlimited);
    assert_eq!("inf".parse::<Budget>().unwrap(), Budget::Unlimited);
    assert_eq!("12.5".parse::<Budget>().unwrap(), Budget::Limited(12.5));
    assert!("-1".parse::<Budget>().is_err());
    assert!("NaN".parse::<Budget>().is_err());
    assert!("ten".parse::<Budget>().is_err());
}
