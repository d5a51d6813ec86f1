//! Template corpora for demos and smoke tests.
//!
//! Counterfactuals follow "If <antecedent>, <consequent>." with an
//! "if/would" pattern; declaratives are plain past-tense sentences. Span
//! annotations are exact character offsets into the generated text.

use crate::corpus::{BinaryLabel, CharSpan, SpanQuad, Statement};

const SUBJECTS: [&str; 8] =
    ["the pump", "my sister", "the council", "our team", "the driver", "the bank", "he", "they"];
const EVENTS: [&str; 8] = [
    "had failed",
    "had called earlier",
    "had approved the plan",
    "had trained harder",
    "had stopped in time",
    "had lowered the rates",
    "had read the letter",
    "had left at noon",
];
const OUTCOMES: [&str; 8] = [
    "the lab would have flooded",
    "we would have met her",
    "the park would be finished",
    "we would have won the cup",
    "nobody would have been hurt",
    "more people would buy homes",
    "he would have known the truth",
    "they would have caught the train",
];
const FACTS: [&str; 16] = [
    "The pump failed on Monday.",
    "My sister called at six.",
    "The council approved the budget.",
    "Our team trained every morning.",
    "The driver stopped at the light.",
    "The bank raised its rates.",
    "He read the letter twice.",
    "They left the office at noon.",
    "The river rose after the storm.",
    "She bought 12 apples today.",
    "The museum opened a new wing.",
    "Prices fell in the spring.",
    "The children planted two trees.",
    "Our neighbor painted the fence.",
    "The train arrived on time.",
    "We cooked dinner together.",
];

fn counterfactual(i: usize) -> (String, SpanQuad) {
    let subject = SUBJECTS[i % 8];
    let event = EVENTS[(i * 3 + i / 8) % 8];
    let outcome = OUTCOMES[(i * 5 + i / 8) % 8];
    let antecedent = format!("If {subject} {event}");
    let with_consequent = i % 4 != 3;
    let text = if with_consequent { format!("{antecedent}, {outcome}.") } else { format!("{antecedent} last year.") };
    let a_end = antecedent.chars().count() - 1;
    let consequent = with_consequent.then(|| {
        let start = a_end + 3;
        CharSpan::new(start, start + outcome.chars().count() - 1)
    });
    (text, SpanQuad::new(CharSpan::new(0, a_end), consequent))
}

/// `n` labelled statements, alternating counterfactual and declarative.
pub fn detection_corpus(n: usize) -> Vec<(Statement, BinaryLabel)> {
    (0..n)
        .map(|i| {
            let id = format!("d{:03}", i + 1);
            if i % 2 == 0 {
                (Statement::new(id, counterfactual(i / 2).0), BinaryLabel::Counterfactual)
            } else {
                (Statement::new(id, FACTS[(i / 2) % FACTS.len()]), BinaryLabel::NonCounterfactual)
            }
        })
        .collect()
}

/// `n` span-annotated counterfactuals; every fourth has no consequent.
pub fn span_corpus(n: usize) -> Vec<(Statement, SpanQuad)> {
    (0..n)
        .map(|i| {
            let (text, quad) = counterfactual(i);
            (Statement::new(format!("s{:03}", i + 1), text), quad)
        })
        .collect()
}
