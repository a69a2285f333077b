//! Scores predictions against references with the three corpus metrics.

use convmath::metrics::{bleu, edit_score, exact_match, levenshtein, EvalReport};

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() -> convmath::Result<()> {
    let references = [r"\frac { a } { b } + 1", "x ^ { 2 } - y _ { i }", r"\alpha + \beta = 3"].map(toks).to_vec();
    let predictions = [r"\frac { a } { b } + 1", "x ^ { 2 } - y _ { j }", r"\alpha + = 3"].map(toks).to_vec();

    for (p, r) in predictions.iter().zip(&references) {
        println!("{:>2} edits  {}", levenshtein(p, r), p.join(" "));
    }
    println!("bleu        {:.2}", bleu(&predictions, &references)?);
    println!("edit score  {:.2}", edit_score(&predictions, &references)?);
    println!("exact match {:.2}", exact_match(&predictions, &references)?);
    println!("{}\n{}", EvalReport::HEADER, EvalReport::compute(&predictions, &references)?);
    Ok(())
}
