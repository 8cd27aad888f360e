use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use super::{URL_TOKEN, USER_TOKEN};

static EMOJI_DATA: &str = include_str!("../../data/emoji_aliases.tsv");

/// Code point to colon-free alias, e.g. U+1F602 -> `face_with_tears_of_joy`.
pub fn emoji_aliases() -> &'static HashMap<char, &'static str> {
    static TABLE: OnceLock<HashMap<char, &'static str>> = OnceLock::new();
    TABLE.get_or_init(|| {
        EMOJI_DATA
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| {
                let (hex, alias) = l.split_once('\t')?;
                let cp = u32::from_str_radix(hex, 16).ok()?;
                Some((char::from_u32(cp)?, alias))
            })
            .collect()
    })
}

/// `:alias:` token for an emoji code point.
pub fn emoji_token(c: char) -> Option<String> {
    emoji_aliases().get(&c).map(|alias| format!(":{alias}:"))
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"<@user>|<url>",
            // hashtags stay whole
            r"|#\w+",
            // decimals and grouped numbers
            r"|\d+(?:[.,]\d+)+",
            // words with internal apostrophes or hyphens
            r"|\w+(?:['’\-]\w+)*",
            r"|\.\.+",
            r"|\S",
        ))
        .expect("token pattern compiles")
    })
}

fn is_joiner(c: char) -> bool {
    matches!(c, '\u{200D}' | '\u{FE0E}' | '\u{FE0F}' | '\u{20E3}')
}

/// Tweet-aware word tokenization of normalized text. Hashtags and the
/// `<@user>` / `<url>` tokens stay atomic, every emoji code point becomes a
/// `:alias:` token, and punctuation is split from words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for m in token_regex().find_iter(text) {
        let tok = m.as_str();
        let mut chars = tok.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                if is_joiner(c) {
                    continue;
                }
                match emoji_token(c) {
                    Some(alias) => tokens.push(alias),
                    None => tokens.push(tok.to_owned()),
                }
            }
            _ => tokens.push(tok.to_owned()),
        }
    }
    tokens
}

/// True for the two atomic placeholder tokens produced by normalization.
pub fn is_placeholder(token: &str) -> bool {
    token == USER_TOKEN || token == URL_TOKEN
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn hashtag_and_emoji() {
        assert_eq!(toks("#Covid19 is fake 😂"), ["#Covid19", "is", "fake", ":face_with_tears_of_joy:"]);
    }

    #[test]
    fn placeholders_are_atomic() {
        assert_eq!(toks("<@user>"), ["<@user>"]);
        assert_eq!(toks("hi <@user>, see <url>!"), ["hi", "<@user>", ",", "see", "<url>", "!"]);
    }

    #[test]
    fn apostrophes_and_punctuation() {
        // hand-tokenized fixtures
        let fixtures: &[(&str, &[&str])] = &[
            ("don't stop.", &["don't", "stop", "."]),
            ("well-known facts...", &["well-known", "facts", "..."]),
            ("it costs 3.50, ok?", &["it", "costs", "3.50", ",", "ok", "?"]),
            ("wait!!", &["wait", "!", "!"]),
            ("(yes)", &["(", "yes", ")"]),
            ("rock'n'roll", &["rock'n'roll"]),
            ("end'", &["end", "'"]),
        ];
        for (input, expected) in fixtures {
            assert_eq!(toks(input), *expected, "{input}");
        }
    }

    #[test]
    fn emoji_sequences_split_per_code_point() {
        assert_eq!(toks("❤️"), [":red_heart:"]);
        assert_eq!(toks("👍🏽"), [":thumbs_up:", ":medium_skin_tone:"]);
        assert_eq!(toks("wow😂😂"), ["wow", ":face_with_tears_of_joy:", ":face_with_tears_of_joy:"]);
    }

    #[test]
    fn empty() {
        assert!(toks("").is_empty());
        assert!(toks("   ").is_empty());
    }
}
