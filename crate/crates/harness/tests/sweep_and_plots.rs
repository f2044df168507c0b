mod common;

use std::collections::BTreeSet;

use common::{tiny_classifier, tiny_config, tiny_data};
use condsep::frontend::MelFrontend;
use condsep::synthdata::{load_example, Split};
use harness::config::{expand_grid, Setting};
use harness::plot::{plot_embeddings, TOP_K};
use harness::sweep::{collect_records, summary, sweep};
use harness::train::RunStatus;

#[test]
fn two_by_two_grid_gives_four_sorted_records() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = tiny_data(data.path());
    let classifier = tiny_classifier(&manifest);
    let grid = expand_grid("combine = concat, gate\nsigmoid_kind = trainable, fixed\n", &tiny_config(Setting::PretrainedMixture, 2)).unwrap();
    assert_eq!(grid.len(), 4);
    let records = sweep(&grid, &manifest, Some(&classifier), Some(out.path())).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.status == RunStatus::Completed));
    let ids: BTreeSet<_> = records.iter().map(|r| r.run_id.clone()).collect();
    assert_eq!(ids.len(), 4);

    let rows = summary(&records);
    let values: Vec<f64> = rows.iter().map(|r| r.validation_si_sdri.unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] >= w[1]), "{values:?}");
    let csv = std::fs::read_to_string(out.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(collect_records(out.path()).unwrap().len(), 4);
}

#[test]
fn duplicates_and_failures_are_kept_apart() {
    let data = tempfile::tempdir().unwrap();
    let manifest = tiny_data(data.path());
    let ok = tiny_config(Setting::BaselineTdcn, 1);
    // no classifier given, so this one fails
    let bad = tiny_config(Setting::OracleAll, 1);
    let records = sweep(&[ok.clone(), bad, ok], &manifest, None, None).unwrap();
    assert_eq!(records.len(), 3);
    assert_ne!(records[0].run_id, records[2].run_id);
    assert_eq!(records[0].trace, records[2].trace);
    assert!(matches!(records[1].status, RunStatus::Failed(_)));
    let rows = summary(&records);
    assert_eq!(rows.last().unwrap().status, "failed");
}

#[test]
fn embedding_plots_have_four_consistent_panels() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = tiny_data(data.path());
    let classifier = tiny_classifier(&manifest);
    let example = load_example(&manifest, &manifest.ids(Split::Test)[0]).unwrap();
    let names: Vec<String> = manifest.info.classes.iter().map(|c| c.name.clone()).collect();
    let panels = plot_embeddings(&example, &classifier, &names, out.path()).unwrap();
    let labels: Vec<&str> = panels.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(labels, ["source1", "source2", "mixture", "soft_or"]);

    let frames = MelFrontend::frame_count(example.mixture.len());
    for p in &panels {
        assert_eq!(p.classes.len(), TOP_K.min(common::CLASSES));
        assert!(p.png.is_file());
        let csv = std::fs::read_to_string(&p.csv).unwrap();
        assert_eq!(csv.lines().count(), frames + 1, "{}", p.name);
    }

    let curve = |panel: usize, class: usize| panels[panel].classes.iter().position(|&c| c == class).map(|k| &panels[panel].curves[k]);
    let or = &panels[3];
    for &c in &or.classes {
        let or_curve = curve(3, c).unwrap();
        for src in 0..2 {
            if let Some(s) = curve(src, c) {
                assert!(or_curve.iter().zip(s).all(|(o, v)| *o >= *v - 1e-12), "class {c}");
            }
        }
    }
}
