use super::*;
use crate::taskgen::{render_kind_set, render_pool, SceneConfig};

fn mixed_set() -> EvalSet {
    EvalSet::new("mixed", render_pool(30, 4242).unwrap())
}

fn prediction(kind: TaskKind, accuracy: f64, iou: Option<f64>) -> Prediction {
    Prediction {
        id: "x".into(),
        kind,
        completion: String::new(),
        format: 1.0,
        accuracy,
        total: 1.0 + accuracy,
        iou,
        parsed: true,
    }
}

fn synthetic(step: u64, cls: f64) -> EvalReport {
    let set = EvalSet::new("s", Vec::new());
    let mut r = assemble(Some(step), &set, &EvalOptions::default(), vec![prediction(TaskKind::Cls, cls, None)]);
    r.checkpoint_step = Some(step);
    r
}

#[test]
fn oracle_scores_one_everywhere() {
    let set = mixed_set();
    let r = evaluate(&OraclePolicy, &set, &EvalOptions::default()).unwrap();
    assert_eq!(r.cls_accuracy, Some(1.0));
    assert_eq!(r.vqa_accuracy, Some(1.0));
    assert_eq!(r.vg_precision_at_50, Some(1.0));
    assert_eq!(r.format_rate, 1.0);
    assert_eq!(r.mean_total_reward, 2.0);
    assert_eq!(r.unparseable, 0);
    assert_eq!(r.counts, KindCounts { cls: 10, vqa: 10, vg: 10 });
}

#[test]
fn uniform_guessing_is_at_chance_on_classification() {
    let set = EvalSet::new("cls", render_kind_set(&SceneConfig::default(), TaskKind::Cls, 512, 77));
    let r = evaluate(&UniformGuessPolicy, &set, &EvalOptions::default()).unwrap();
    let p: f64 = 1.0 / 8.0;
    let sigma = (p * (1.0 - p) / 512.0).sqrt();
    let acc = r.cls_accuracy.unwrap();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
    assert_eq!(r.vqa_accuracy, None);
    assert_eq!(r.vg_precision_at_50, None);
}

#[test]
fn grounding_hit_threshold_is_half() {
    let set = EvalSet::new("s", Vec::new());
    let preds = vec![
        prediction(TaskKind::Vg, 0.0, Some(0.49)),
        prediction(TaskKind::Vg, 0.51, Some(0.51)),
        prediction(TaskKind::Vg, 0.5, Some(0.5)),
        prediction(TaskKind::Vg, 0.0, None),
    ];
    let r = assemble(None, &set, &EvalOptions::default(), preds);
    assert_eq!(r.vg_precision_at_50, Some(0.5));
    assert_eq!(r.recompute_vg_precision(), Some(0.5));
}

#[test]
fn evaluation_is_pure_and_thread_independent() {
    let set = mixed_set();
    let opts = EvalOptions::default();
    let a = evaluate(&UniformGuessPolicy, &set, &opts).unwrap();
    let b = evaluate(&UniformGuessPolicy, &set, &opts).unwrap();
    let c = evaluate(&UniformGuessPolicy, &set, &EvalOptions { threads: 3, ..opts.clone() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = evaluate(&UniformGuessPolicy, &set, &EvalOptions { seed: 1, ..opts }).unwrap();
    assert_ne!(a.predictions, d.predictions);
    assert_eq!(a.recompute_vg_precision(), a.vg_precision_at_50);
}

#[test]
fn untagged_output_is_tallied_as_unparseable() {
    struct Mute;
    impl EvalPolicy for Mute {
        fn complete(&self, _: &Sample, _: &mut ChaCha8Rng) -> Result<String> {
            Ok("harbor".into())
        }
    }
    let set = mixed_set();
    let r = evaluate(&Mute, &set, &EvalOptions::default()).unwrap();
    assert_eq!(r.unparseable, 30);
    assert_eq!(r.cls_accuracy, Some(0.0));
    assert_eq!(r.format_rate, 0.0);
}

#[test]
fn sweep_prefers_best_then_earliest() {
    let single = select_best(vec![synthetic(0, 0.3)]).unwrap();
    for m in ["cls_accuracy", "format_rate", "mean_total_reward"] {
        assert_eq!(single.best_report(m).unwrap().checkpoint_step, Some(0));
    }
    assert!(single.best_report("vqa_accuracy").is_none());

    let rising = select_best((0..5).map(|k| synthetic(k * 100, k as f64 / 10.0)).collect()).unwrap();
    assert_eq!(rising.best_report("cls_accuracy").unwrap().checkpoint_step, Some(400));

    let tied = select_best(vec![synthetic(200, 0.5), synthetic(100, 0.5)]).unwrap();
    assert_eq!(tied.best_report("cls_accuracy").unwrap().checkpoint_step, Some(100));
    assert!(select_best(Vec::new()).is_err());
    assert!(sweep_table(&tied).contains("N/A"));
}

#[test]
fn sweep_of_empty_directory_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let set = mixed_set();
    let err = sweep(dir.path(), &set, &EvalOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));
}

#[test]
fn comparison_deltas_and_warnings() {
    let set = mixed_set();
    let r = evaluate(&UniformGuessPolicy, &set, &EvalOptions::default()).unwrap();
    let same = compare(&[("a".into(), r.clone()), ("b".into(), r.clone())]).unwrap();
    assert!(same.warnings.is_empty());
    for (_, _, d) in &same.rows {
        assert!(d.iter().all(|x| x.is_none_or(|v| v == 0.0)));
    }
    let other = evaluate(&OraclePolicy, &EvalSet::new("other", render_pool(9, 1).unwrap()), &EvalOptions::default()).unwrap();
    let mixed = compare(&[("a".into(), r.clone()), ("b".into(), other)]).unwrap();
    assert_eq!(mixed.warnings.len(), 1);
    assert!(mixed.to_csv().unwrap().starts_with("# WARNING"));
    assert!(mixed.to_text().contains("delta b"));
    assert!(compare(&[("a".into(), r)]).is_err());
}

#[test]
fn prediction_log_round_trips() {
    let set = mixed_set();
    let r = evaluate(&UniformGuessPolicy, &set, &EvalOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.jsonl");
    r.write_predictions(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<Prediction> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, r.predictions);
}

#[test]
fn overlap_detects_shared_samples() {
    let pool = render_pool(12, 3).unwrap();
    assert_eq!(overlap(&pool[..4], &pool), 4);
    let other = render_pool(12, 4).unwrap();
    assert_eq!(overlap(&other, &pool), 0);
}
