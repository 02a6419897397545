/// Lowercases `text` and splits it into maximal runs of alphanumeric
/// characters. Whitespace and punctuation both act as separators, so
/// `"Low-Fat, HIGH carb!"` becomes `low fat high carb`.
pub fn tokenize(text: &str) -> Vec<String> {
    // Lowercase first: case mapping can emit combining marks, which must
    // then act as separators for the result to be stable.
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strips_punctuation_and_case() {
        assert_eq!(tokenize("Ariana on the TV.."), ["ariana", "on", "the", "tv"]);
        assert_eq!(tokenize("Low-Fat, HIGH carb!"), ["low", "fat", "high", "carb"]);
        assert!(tokenize("").is_empty());
        assert!(tokenize(" .,;  ").is_empty());
    }

    #[test]
    fn keeps_unicode_letters() {
        assert_eq!(tokenize("Café  Über\tnaïve"), ["café", "über", "naïve"]);
    }

    proptest! {
        #[test]
        fn idempotent_on_joined_output(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
