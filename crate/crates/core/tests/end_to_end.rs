use bit_core::pipeline::{evaluate_run, imbalance, train_stage1, train_stage2};
use bit_core::retrieval::{bit_rank, encode_gallery, evaluate};
use bit_core::synthdata::{generate, reduce_modality};
use bit_core::{Checkpoint, EncoderConfig, GenConfig, InferenceConfig, Modality, RunConfig, Split};

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.gen = GenConfig {
        num_identities: 12,
        num_test_identities: 4,
        vis_per_id: 4,
        ir_per_id: 2,
        patches: 4,
        raw_dim: 8,
        collision_groups: 3,
        ..GenConfig::default()
    };
    cfg.encoder = EncoderConfig {
        raw_dim: 8,
        patches: 4,
        dim: 8,
        depth: 1,
        heads: 1,
        num_train_identities: 8,
    };
    cfg.bci.dim = 8;
    cfg.bci.depth = 1;
    cfg.qa.k = 2;
    cfg.batch.p = 2;
    cfg.batch.k = 2;
    cfg.stage1_epochs = 2;
    cfg.stage2_epochs = 1;
    cfg.top_k = 3;
    cfg
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let cfg = small();
    let ds = generate(&cfg.gen).unwrap();
    let enc = train_stage1(&cfg, &ds, |_| {}).unwrap();
    let m = train_stage2(&cfg, &ds, &enc, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    Checkpoint::new(&cfg, &enc, Some(&m)).save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.config, cfg);
    let (enc2, m2) = (ck.encoder().unwrap(), ck.matcher().unwrap());
    let before = evaluate_run(&cfg, &ds, &enc, Some(&m)).unwrap();
    let after = evaluate_run(&cfg, &ds, &enc2, Some(&m2)).unwrap();
    assert_eq!(before, after);
}

#[test]
fn stage_one_checkpoint_has_no_matcher() {
    let cfg = small();
    let ds = generate(&cfg.gen).unwrap();
    let enc = train_stage1(&cfg, &ds, |_| {}).unwrap();
    let ck =
        Checkpoint::from_bytes(&Checkpoint::new(&cfg, &enc, None).to_bytes().unwrap()).unwrap();
    assert!(ck.matcher().is_err());
    assert!(ck.encoder().is_ok());
}

#[test]
fn baseline_and_bit_share_coarse_candidates() {
    let cfg = small();
    let ds = generate(&cfg.gen).unwrap();
    let enc = train_stage1(&cfg, &ds, |_| {}).unwrap();
    let m = train_stage2(&cfg, &ds, &enc, |_| {}).unwrap();
    let gallery = encode_gallery(&enc, &ds).unwrap();
    let inf = InferenceConfig {
        top_k: 3,
        use_bit_head: true,
    };
    let plain = InferenceConfig {
        top_k: 3,
        use_bit_head: false,
    };
    for qi in ds.indices(Split::Query) {
        let f = enc.encode(&ds.samples[qi]).unwrap();
        let bit = bit_rank(&f, &gallery, Some(&m), &inf).unwrap();
        let base = bit_rank(&f, &gallery, None, &plain).unwrap();
        assert_eq!(bit.psi_evals, 3);
        assert_eq!(base.psi_evals, 0);
        let head = |r: &[bit_core::retrieval::Ranked]| {
            let mut ids: Vec<usize> = r[..3].iter().map(|x| x.index).collect();
            ids.sort_unstable();
            ids
        };
        assert_eq!(head(&bit.order), head(&base.order));
        assert_eq!(&bit.order[3..], &base.order[3..]);
    }
}

#[test]
fn evaluation_counts_every_query() {
    let cfg = small();
    let ds = generate(&cfg.gen).unwrap();
    let enc = train_stage1(&cfg, &ds, |_| {}).unwrap();
    let report = evaluate(
        &enc,
        None,
        &ds,
        &InferenceConfig {
            top_k: 1,
            use_bit_head: false,
        },
    )
    .unwrap();
    assert_eq!(report.num_queries, ds.indices(Split::Query).len());
    assert_eq!(report.cmc.len(), ds.indices(Split::Gallery).len());
    assert!((report.cmc.last().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn reduced_modality_keeps_one_sample_per_identity() {
    let cfg = small();
    let ds = generate(&cfg.gen).unwrap();
    let thin = reduce_modality(&ds, Modality::Infrared, 0.5, 3).unwrap();
    assert_eq!(
        thin.count(Split::Train, Modality::Infrared),
        ds.count(Split::Train, Modality::Infrared) / 2
    );
    for id in 0..cfg.gen.num_train_identities() {
        let n = thin
            .samples
            .iter()
            .filter(|s| {
                s.split == Split::Train && s.identity == id && s.modality == Modality::Infrared
            })
            .count();
        assert!(n >= 1, "identity {id} lost all infrared samples");
    }
    assert_eq!(
        thin.count(Split::Train, Modality::Visible),
        ds.count(Split::Train, Modality::Visible)
    );
    assert_eq!(
        thin.indices(Split::Query).len(),
        ds.indices(Split::Query).len()
    );
}

#[test]
fn reduction_that_would_empty_an_identity_is_rejected() {
    let cfg = small();
    let ds = generate(&cfg.gen).unwrap();
    assert!(reduce_modality(&ds, Modality::Infrared, 0.9, 3).is_err());
}

#[test]
fn imbalance_zero_fraction_matches_plain_run() {
    let cfg = small();
    let ds = generate(&cfg.gen).unwrap();
    let rows = imbalance(&cfg, &ds, &[0.0], Modality::Visible).unwrap();
    let enc = train_stage1(&cfg, &ds, |_| {}).unwrap();
    let base = evaluate_run(&cfg, &ds, &enc, None).unwrap();
    let row = rows.iter().find(|r| r.model == "baseline").unwrap();
    assert_eq!(row.rank1, base.rank1());
    assert_eq!(row.map, base.map);
}
