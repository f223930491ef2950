use std::sync::Arc;

use pimdcc::backend::{hbm_pim_like, BackendDescriptor};
use pimdcc::ir::builtin;
use pimdcc::predictor::{
    offline_train, table_key, GbtModel, Hyper, LookupTable, Predictor, ProfiledSpace,
};
use pimdcc::prune::PruneOptions;
use pimdcc::schedule::Space;
use pimdcc::sim::evaluate_draft;

fn small() -> BackendDescriptor {
    let mut b = hbm_pim_like();
    b.num_channels = 2;
    b.groups = 2;
    b.cores_per_group = 4;
    b
}

fn quick() -> Hyper {
    Hyper {
        iterations: 150,
        ..Hyper::default()
    }
}

fn kernels() -> Vec<pimdcc::ir::Kernel> {
    let mut ks = Vec::new();
    for n in [64, 100, 256] {
        ks.push(builtin("red", &[1, n]).unwrap());
        ks.push(builtin("va", &[n]).unwrap());
    }
    ks
}

#[test]
fn one_entry_per_configuration_and_repeatable() {
    let b = small();
    let a = offline_train(&kernels(), &b, 0.5, &quick()).unwrap();
    let again = offline_train(&kernels(), &b, 0.5, &quick()).unwrap();
    assert_eq!(a.table.entries.len(), 6);
    for k in kernels() {
        assert!(a.table.entries.contains_key(&table_key(&k, &b.name)));
    }
    assert_eq!(a.table.to_json(), again.table.to_json());
    assert_eq!(a.model.to_bytes(), again.model.to_bytes());
}

#[test]
fn full_sample_finds_a_near_optimal_draft() {
    let b = small();
    let k = builtin("va", &[96]).unwrap();
    let r = offline_train(std::slice::from_ref(&k), &b, 1.0, &quick()).unwrap();
    let ps = ProfiledSpace::build(k.clone(), &b, PruneOptions::default()).unwrap();
    let e = &r.table.entries[&table_key(&k, &b.name)];
    let got = evaluate_draft(&ps.space, &e.draft, &b)
        .unwrap()
        .into_iter()
        .find(|(s, _)| *s == e.strategy)
        .unwrap()
        .1
        .t_total;
    assert!(got <= ps.best_time() * 1.05, "{got} vs {}", ps.best_time());
}

#[test]
fn table_round_trips_and_hits() {
    let b = small();
    let r = offline_train(&kernels(), &b, 0.5, &quick()).unwrap();
    let table = LookupTable::from_json(&r.table.to_json()).unwrap();
    assert_eq!(table, r.table);
    let model = GbtModel::from_bytes(&r.model.to_bytes()).unwrap();
    let p = Predictor::new(model, table, 0);
    let space = Space::new(builtin("red", &[1, 100]).unwrap());
    let hit = p
        .dynamic_predict(&space, &b, PruneOptions::default())
        .unwrap();
    assert!(hit.hit);
    assert_eq!(hit.candidates, 0);
}

#[test]
fn concurrent_misses_agree() {
    let b = small();
    let r = offline_train(&kernels(), &b, 0.5, &quick()).unwrap();
    let p = Arc::new(Predictor::new(r.model, LookupTable::new(), 3));
    let picks: Vec<String> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|_| {
                let p = Arc::clone(&p);
                let b = b.clone();
                s.spawn(move || {
                    let space = Space::new(builtin("gemv", &[1, 8, 40]).unwrap());
                    p.dynamic_predict(&space, &b, PruneOptions::default())
                        .unwrap()
                        .draft
                        .render(&space)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(picks.windows(2).all(|w| w[0] == w[1]), "{picks:?}");
    assert_eq!(p.table().entries.len(), 1);
}

#[test]
fn refresh_fits_new_samples_better() {
    let b = small();
    let r = offline_train(&kernels()[..2], &b, 0.5, &quick()).unwrap();
    let mut p = Predictor::new(r.model, LookupTable::new(), 0);
    let fresh = ProfiledSpace::build(
        builtin("relu", &[200]).unwrap(),
        &b,
        PruneOptions::default(),
    )
    .unwrap();
    let xs: Vec<Vec<f64>> = fresh
        .candidates
        .iter()
        .map(|c| c.features.clone())
        .collect();
    let ys: Vec<f64> = fresh.candidates.iter().map(|c| c.t_total.ln()).collect();
    let before = p.model.rmse(&xs, &ys);
    p.refresh(&fresh.candidates, &quick());
    let after = p.model.rmse(&xs, &ys);
    assert!(after < before, "{after} >= {before}");
}
