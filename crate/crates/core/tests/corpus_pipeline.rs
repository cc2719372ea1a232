use mgll_core::annotations::{
    generate_synthetic, ingest_manifest, save_dataset, SampleAnnotation, SyntheticSpec, WeightsMode,
};
use mgll_core::gradients::{finite_difference_check, FdOptions};
use mgll_core::losses::{loss_value, AlignmentBatch, LossConfig, LossKind};
use mgll_core::trainer::{ablation_run, ladder, AblationConfig, Dataset, Ladder};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        n_samples: 60,
        dim: 12,
        coarse_labels: 3,
        fine_per_coarse: 2,
        ..Default::default()
    }
}

#[test]
fn saved_dataset_reloads_identically() {
    let (manifest, embeddings) = generate_synthetic(&small_spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_dataset(dir.path(), &manifest, &embeddings).unwrap();

    let loaded = ingest_manifest(&path).unwrap();
    assert_eq!(loaded.samples, manifest.samples);
    assert_eq!(loaded.schema, manifest.schema);
    assert_eq!(loaded.load_embeddings().unwrap(), embeddings);
}

#[test]
fn corpus_batch_gradients_agree_with_differences() {
    let (manifest, embeddings) = generate_synthetic(&small_spec(5)).unwrap();
    let rows: Vec<usize> = (0..8).collect();
    let anns: Vec<SampleAnnotation> = rows.iter().map(|&i| manifest.samples[i].clone()).collect();
    let images = embeddings.images.select_rows(&rows);
    let batch = AlignmentBatch::from_annotations(
        &anns,
        &images,
        &embeddings.texts,
        WeightsMode::Cooccurrence,
    )
    .unwrap();
    let cfg = LossConfig::default();
    for kind in [LossKind::SoftClip, LossKind::SmoothKl, LossKind::Mgll] {
        let report = finite_difference_check(
            &batch,
            &cfg,
            kind,
            &FdOptions {
                step: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "{kind:?}: {}",
            report.max_rel_error
        );
        assert_eq!(report.value, loss_value(&batch, &cfg, kind).unwrap());
    }
}

#[test]
fn masked_ladder_rows_match_direct_kinds() {
    let (manifest, embeddings) = generate_synthetic(&small_spec(7)).unwrap();
    let data = Dataset::new(&manifest, embeddings).unwrap();
    let cfg = AblationConfig {
        iterations: 5,
        ..Default::default()
    };
    let base = LossConfig::default();
    let variants = ladder(Ladder::Paper, &base);
    let table = ablation_run(&data, &variants, &cfg).unwrap();
    assert_eq!(table.rows.len(), variants.len());
    assert_eq!(table.train_samples + table.held_out_samples, 60);

    let direct = mgll_core::trainer::AblationVariant::new("p", LossKind::Pointwise, base);
    let direct = ablation_run(&data, &[direct], &cfg).unwrap();
    let masked = table.row("p").unwrap();
    assert_eq!(masked.auc.to_bits(), direct.rows[0].auc.to_bits());
    assert_eq!(
        masked.final_loss.to_bits(),
        direct.rows[0].final_loss.to_bits()
    );
}
