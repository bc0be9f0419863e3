//! Token error rate: Levenshtein distance over label sequences.

/// Edit distance with unit insert/delete/substitute costs.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let cost = usize::from(x != y);
            curr[j + 1] = (prev[j + 1] + 1).min(curr[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Per-utterance token error rate: edits divided by reference length. An
/// empty reference against a nonempty hypothesis counts the full hypothesis
/// length (denominator 1).
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    let edits = levenshtein(hyp, reference);
    if reference.is_empty() {
        edits as f64
    } else {
        edits as f64 / reference.len() as f64
    }
}

/// Corpus-level rate: total edits over total reference length.
pub fn corpus_token_error_rate<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
{
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in pairs {
        edits += levenshtein(hyp, reference);
        ref_len += reference.len();
    }
    if ref_len == 0 {
        edits as f64
    } else {
        edits as f64 / ref_len as f64
    }
}
