//! Analytic gradients against centered finite differences, and softmax
//! normalization on extreme logits.

mod common;

#[test]
fn gradients_match_finite_differences() {
    let summary = common::checks::gradients(&[1, 2, 3]).unwrap_or_else(|e| panic!("{e}"));
    println!("{summary}");
}

#[test]
fn softmax_rows_normalize_on_extreme_logits() {
    let summary = common::checks::softmax_rows(5).unwrap_or_else(|e| panic!("{e}"));
    println!("{summary}");
}
