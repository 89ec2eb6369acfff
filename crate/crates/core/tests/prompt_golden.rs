use speech_refine::backends::{CompletionParams, Llm, MockLlm};
use speech_refine::refine::{build_prompt, default_templates, refine_text, rule_refine, PromptTemplates};
use speech_refine::sir::ImpairmentClass;

const INPUT: &str = "I w-w-want um the the book";

fn golden(name: &str) -> String {
    std::fs::read_to_string(format!("{}/tests/golden/{name}.txt", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn rendered_prompts_match_golden_files() {
    assert_eq!(build_prompt(INPUT, None).unwrap(), golden("without_class"));
    assert_eq!(build_prompt(INPUT, Some(ImpairmentClass::Healthy)).unwrap(), golden("without_class"));
    for class in ImpairmentClass::IMPAIRED {
        let got = build_prompt(INPUT, Some(class)).unwrap();
        assert_eq!(got, golden(&format!("with_class_{}", class.name())), "{class}");
    }
}

#[test]
fn templates_loaded_from_a_directory_render_identically() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/prompts");
    let loaded = PromptTemplates::from_dir(&dir).unwrap();
    for class in [None, Some(ImpairmentClass::Stutter), Some(ImpairmentClass::Aphasia)] {
        assert_eq!(loaded.build(INPUT, class).unwrap(), default_templates().build(INPUT, class).unwrap());
    }
}

#[test]
fn slot_text_is_inserted_verbatim() {
    let odd = "Input: [impaired text] {braces} $1 \\n";
    let prompt = build_prompt(odd, Some(ImpairmentClass::Dysarthria)).unwrap();
    assert!(prompt.ends_with(&format!("Input: {odd}\nOutput:")));
}

#[test]
fn mock_refinement_equals_rule_refiner() {
    let llm = MockLlm::new();
    for class in [None, Some(ImpairmentClass::Stutter)] {
        let out = refine_text(INPUT, class, &llm, default_templates(), &CompletionParams::default()).unwrap();
        assert_eq!(out.refined_text, rule_refine(INPUT, class).unwrap());
        assert_eq!(out.backend_id, llm.id());
    }
}
