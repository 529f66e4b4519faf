//! Pipeline C at the default protocol. Trains a full-size model, so this
//! takes about two minutes on one core.

use anomseg_cli::experiment::{self as exp, Protocol};

#[test]
fn anomaly_free_novel_split_reports_no_cluster() {
    let p = Protocol::default();
    let seed = 1;
    let mut world = exp::generate_world(&p, seed).unwrap();
    let baseline = exp::train_baseline(&p, &world.train, seed).unwrap();
    let entmax = exp::train_entmax(&p, &baseline, &world.train, &world.proxy, seed).unwrap();
    // train scenes hold trained shapes only
    world.novel = world.train[..p.n_novel].to_vec();
    let meta = exp::fit_meta(&entmax, &world.meta, p.discovery.tau, &p.meta).unwrap();
    let outcome = exp::pipeline_c(&p, &entmax, Some(&meta), &world, seed).unwrap();
    assert!(outcome.report.status.starts_with("no cluster"), "{:?}", outcome.report);
    assert!(outcome.report.eval.is_none());
    assert!(outcome.extended.is_none());
    assert!(outcome.discovery.pseudo.is_empty());
}
