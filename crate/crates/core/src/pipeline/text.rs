//! Text normalization shared by training, evaluation and the metrics.

/// Lowercases, turns every non-alphanumeric character into a space and
/// splits on whitespace.
pub fn normalize(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(String::from).collect()
}

/// [`normalize`] followed by truncation to `max_len` tokens.
pub fn normalize_caption(raw: &str, max_len: usize) -> Vec<String> {
    let mut t = normalize(raw);
    t.truncate(max_len);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(
            normalize("Diabetic Retinopathy."),
            ["diabetic", "retinopathy"]
        );
        assert_eq!(normalize("  a,b;C-d  "), ["a", "b", "c", "d"]);
        assert!(normalize("...").is_empty());
        let long: String = (0..60).map(|i| format!("w{i} ")).collect();
        let t = normalize_caption(&long, 50);
        assert_eq!(t.len(), 50);
        assert_eq!(t[49], "w49");
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once.join(" ")), once);
        }
    }
}
