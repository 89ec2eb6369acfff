use std::sync::Arc;

use speech_refine::backends::{BackendError, BackendHealth, BackendKind, Backends, CompletionParams, Llm};
use speech_refine::fixtures::command_corpus;
use speech_refine::refine::PromptTemplates;
use speech_refine::sir::ImpairmentClass;
use speech_refine_bench::text_eval::{run_text_eval, run_text_eval_with, IMPAIRED_ROW};
use speech_refine_bench::{BenchError, EvalRunConfig, Manifest, ManifestEntry, RefinerVariant};

fn entry(id: &str, class: ImpairmentClass, intent: &str, impaired: Option<&str>) -> ManifestEntry {
    ManifestEntry {
        sample_id: id.into(),
        class_label: class,
        audio_path: None,
        intent_text: Some(intent.into()),
        impaired_text: impaired.map(str::to_string),
    }
}

fn corpus(classes: &[ImpairmentClass], n: usize) -> Manifest {
    let entries = classes
        .iter()
        .flat_map(|&c| command_corpus(n).into_iter().enumerate().map(move |(i, t)| entry(&format!("{c}-{i}"), c, &t, None)))
        .collect();
    Manifest::new(entries, ".")
}

struct BrokenLlm;

impl Llm for BrokenLlm {
    fn id(&self) -> &str {
        "broken"
    }

    fn complete(&self, _prompt: &str, _params: &CompletionParams) -> Result<String, BackendError> {
        Err(BackendError::Unavailable { backend: "broken".into(), detail: "down".into() })
    }

    fn health(&self) -> BackendHealth {
        BackendHealth { id: "broken".into(), kind: BackendKind::Http, reachable: false, detail: None }
    }
}

#[test]
fn clean_text_scores_perfectly_with_no_spread() {
    let manifest = Manifest::new(
        vec![
            entry("a", ImpairmentClass::Stutter, "turn on the kitchen lights", Some("turn on the kitchen lights")),
            entry("b", ImpairmentClass::Stutter, "play some jazz please", Some("play some jazz please")),
        ],
        ".",
    );
    let cfg = EvalRunConfig { variants: vec![RefinerVariant::Rule], ..EvalRunConfig::default() };
    let report = run_text_eval(&manifest, &cfg).unwrap();
    for system in [IMPAIRED_ROW, "rule"] {
        let cell = report.cell(system, ImpairmentClass::Stutter).unwrap();
        let bleu = cell.bleu.unwrap();
        assert_eq!((bleu.mean, bleu.std), (1.0, 0.0), "{system}");
        assert!((cell.cosine.unwrap().mean - 1.0).abs() < 1e-12);
        assert_eq!(cell.n, 2);
    }
}

#[test]
fn fixed_impaired_text_is_seed_independent() {
    let manifest = Manifest::new(
        vec![entry("a", ImpairmentClass::Aphasia, "please play relaxing music", Some("um please play uh relaxing music"))],
        ".",
    );
    let cfg = EvalRunConfig { variants: vec![RefinerVariant::Rule], ..EvalRunConfig::default() };
    let report = run_text_eval(&manifest, &cfg).unwrap();
    assert_eq!(report.config.seeds.len(), 5);
    let bleu = report.cell("rule", ImpairmentClass::Aphasia).unwrap().bleu.unwrap();
    assert_eq!(bleu.std, 0.0);
    assert_eq!(bleu.mean, 1.0);
    assert_eq!(report.cell(IMPAIRED_ROW, ImpairmentClass::Aphasia).unwrap().bleu.unwrap().std, 0.0);
}

#[test]
fn generated_corruption_varies_across_seeds() {
    let manifest = corpus(&[ImpairmentClass::Stutter], 20);
    let cfg = EvalRunConfig { variants: vec![RefinerVariant::Rule], ..EvalRunConfig::default() };
    let report = run_text_eval(&manifest, &cfg).unwrap();
    assert!(report.cell(IMPAIRED_ROW, ImpairmentClass::Stutter).unwrap().bleu.unwrap().std > 0.0);
}

#[test]
fn mock_llm_variants_match_the_rule_refiner() {
    let manifest = corpus(&ImpairmentClass::IMPAIRED, 10);
    let report = run_text_eval(&manifest, &EvalRunConfig { variants: RefinerVariant::ALL.to_vec(), ..EvalRunConfig::default() }).unwrap();
    for class in ImpairmentClass::IMPAIRED {
        let rule = report.cell("rule", class).unwrap();
        assert_eq!(report.cell("with_class", class).unwrap(), rule);
        assert_eq!(report.cell("without_class", class).unwrap(), rule);
    }
    assert!(report.to_text().contains("stutter BLEU"));
}

#[test]
fn llm_failures_are_counted_not_fatal() {
    let manifest = corpus(&[ImpairmentClass::Dysarthria], 4);
    let backends = Backends { llm: Arc::new(BrokenLlm), ..Backends::mock() };
    let cfg = EvalRunConfig { seeds: vec![0, 1], variants: vec![RefinerVariant::WithClass, RefinerVariant::Rule], ..EvalRunConfig::default() };
    let report =
        run_text_eval_with(&manifest, &cfg, &backends, &PromptTemplates::default(), &CompletionParams::default()).unwrap();
    assert_eq!(report.n_failed, 8);
    assert!(report.failures.iter().all(|f| f.system == "with_class"));
    let cell = report.cell("with_class", ImpairmentClass::Dysarthria).unwrap();
    assert_eq!((cell.n, cell.bleu), (0, None));
    assert!(report.cell("rule", ImpairmentClass::Dysarthria).unwrap().bleu.is_some());
}

#[test]
fn worker_count_does_not_change_the_report() {
    let manifest = corpus(&ImpairmentClass::ALL, 12);
    let base = EvalRunConfig { variants: RefinerVariant::ALL.to_vec(), ..EvalRunConfig::default() };
    let one = run_text_eval(&manifest, &EvalRunConfig { workers: 1, ..base.clone() }).unwrap();
    let four = run_text_eval(&manifest, &EvalRunConfig { workers: 4, ..base }).unwrap();
    assert_eq!(one.rows, four.rows);
    assert_eq!(one.failures, four.failures);
}

#[test]
fn entries_without_intent_are_rejected() {
    let mut e = entry("x", ImpairmentClass::Aphasia, "", None);
    e.intent_text = None;
    e.impaired_text = Some("uh".into());
    let err = run_text_eval(&Manifest::new(vec![e], "."), &EvalRunConfig::default()).unwrap_err();
    assert!(matches!(err, BenchError::ManifestInvalid { line: 1, .. }), "{err}");
}
