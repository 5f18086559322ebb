mod common;

use kbgn::harness::ablation::parse_ablations;
use kbgn::harness::data::ClueModality;
use kbgn::harness::{export_trace, run_ablation_suite, ClueMode};
use kbgn::{Ablation, Error, Kbgn};

use common::{dataset, small_run};

#[test]
fn suite_rows_follow_request_order() {
    let mut cfg = small_run(0);
    cfg.train.epochs = 1;
    let list = [Ablation::Kbgn, Ablation::Vta, Ablation::TNoRel];
    let table = run_ablation_suite(&cfg, &list, &[0, 1]).unwrap();
    let order: Vec<Ablation> = table.rows.iter().map(|r| r.ablation).collect();
    assert_eq!(order, list);
    assert!(table.rows.iter().all(|r| r.per_seed.len() == 2));
    let md = table.to_markdown();
    assert_eq!(md.lines().count(), 2 + list.len());
    assert!(md.contains("T-NoRel"));
}

#[test]
fn parameter_count_grows_along_the_ladder() {
    let ds = dataset(0, 2, ClueMode::Vision);
    let ladder = [
        Ablation::Vta,
        Ablation::Veta,
        Ablation::Vete,
        Ablation::Vt2v,
        Ablation::Tv2t,
        Ablation::Kbgn,
    ];
    let counts: Vec<usize> = ladder
        .iter()
        .map(|&a| {
            let mut cfg = small_run(0).with_ablation(a);
            cfg.resolve(&ds).unwrap();
            Kbgn::new(cfg.model).unwrap().1.scalar_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
}

#[test]
fn unknown_ablation_is_a_config_error() {
    assert!(matches!(parse_ablations("VTA,Nope"), Err(Error::Config(_))));
    assert_eq!(parse_ablations("vta, kbgn").unwrap(), vec![Ablation::Vta, Ablation::Kbgn]);
    assert_eq!("v-rrel".parse::<Ablation>().unwrap(), Ablation::VRRel);
}

#[test]
fn full_model_trace_is_complete_and_normalised() {
    let ds = dataset(1, 5, ClueMode::Vision);
    let mut cfg = small_run(1);
    cfg.resolve(&ds).unwrap();
    let (model, params) = Kbgn::new(cfg.model).unwrap();
    for (k, ep) in ds.episodes.iter().enumerate() {
        let tr = export_trace(&model, &params, &ep.encode(&ds.vocab).unwrap(), format!("{k}"), ep.planted_clue).unwrap();
        assert!(tr.is_complete());
        assert!(tr.max_row_error().0 < 1e-12);
        let chain = tr.chain.as_ref().unwrap();
        assert_eq!(chain.path[0], chain.top_vision_object);
        assert_eq!(chain.path[1], chain.top_vt_round[chain.path[0]]);
        assert_eq!(chain.path[2], chain.top_tv_object[chain.path[1]]);
        assert_eq!(ep.planted_clue.unwrap().clue_modality, ClueModality::Vision);
        assert_eq!(tr.clue_hit, Some(chain.top_vision_object == ep.planted_clue.unwrap().clue_node_index));
        assert_eq!(tr.gt_rank, tr.ranking.iter().position(|&c| c == tr.gt_index).map(|p| p + 1));
    }
}

#[test]
fn baseline_trace_has_no_bridges() {
    let ds = dataset(1, 1, ClueMode::Vision);
    let mut cfg = small_run(1).with_ablation(Ablation::Vta);
    cfg.resolve(&ds).unwrap();
    let (model, params) = Kbgn::new(cfg.model).unwrap();
    let tr = export_trace(&model, &params, &ds.encode().unwrap()[0], "0", None).unwrap();
    assert!(!tr.is_complete());
    assert!(tr.chain.is_none() && tr.gamma_t2v.is_none() && tr.alpha.is_none());
    assert!(tr.clue_hit.is_none());
}
