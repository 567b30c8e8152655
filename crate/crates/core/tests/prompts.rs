use selfner::prompting::{build_icl_prompt, build_zero_shot_prompt, parse_answer, serialize_answer};
use selfner::LabelSet;

const QUERY: &str = "right now we 're also waiting to hear from the president at the white house .";

fn golden(name: &str) -> String {
    std::fs::read_to_string(format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
    v.iter().map(|(s, t)| (s.to_string(), t.to_string())).collect()
}

fn demos() -> Vec<(String, Vec<(String, String)>)> {
    vec![
        (QUERY.to_string(), pairs(&[("white house", "Location"), ("president", "Person")])),
        (
            "At the Pentagon , Barbara Starr reports officials say today begins a new strategy in the skies over Baghdad ."
                .to_string(),
            pairs(&[
                ("Barbara Starr", "Person"),
                ("Pentagon", "Facility"),
                ("officials", "Person"),
                ("skies", "Location"),
                ("Baghdad", "Geo-Political Entity"),
            ]),
        ),
        (
            "John Irvine , ITV News , Baghdad .".to_string(),
            pairs(&[
                ("John Irvine", "Person"),
                ("ITV News", "Organization"),
                ("Baghdad", "Geo-Political Entity"),
            ]),
        ),
    ]
}

#[test]
fn zero_shot_prompt_matches_golden_file() {
    assert_eq!(build_zero_shot_prompt(&LabelSet::ace05(), QUERY), golden("ace05_zero_shot.txt"));
}

#[test]
fn icl_prompt_matches_golden_file() {
    assert_eq!(build_icl_prompt(&LabelSet::ace05(), &demos(), QUERY), golden("ace05_icl.txt"));
}

#[test]
fn golden_demo_answers_parse_back() {
    let text = golden("ace05_icl.txt");
    let answers: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("Answer: "))
        .filter(|a| !a.is_empty())
        .collect();
    assert_eq!(answers.len(), 3);
    for (answer, (_, expected)) in answers.iter().zip(demos()) {
        assert_eq!(parse_answer(answer).predictions, expected);
        assert_eq!(serialize_answer(&expected), *answer);
    }
}
