use std::sync::OnceLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

use super::{URL_TOKEN, USER_TOKEN};

/// Default mention rule: `@` followed by word characters, not preceded by one.
pub const DEFAULT_MENTION_PATTERN: &str = r"(^|[^\w])@\w+";

/// Default url rule: scheme-prefixed links, `www.` hosts and common shorteners.
pub const DEFAULT_URL_PATTERN: &str = r"(?i)(?:https?://\S+|www\.\S+|\b(?:t\.co|bit\.ly|goo\.gl|tinyurl\.com|ow\.ly|buff\.ly|dlvr\.it|fb\.me|youtu\.be)/\S*)";

/// Mention and url rules applied after compatibility folding.
#[derive(Debug, Clone)]
pub struct NormalizeRules {
    mention: Regex,
    url: Regex,
}

impl NormalizeRules {
    /// The mention pattern must put whatever precedes the `@` in capture group 1.
    pub fn new(mention_pattern: &str, url_pattern: &str) -> Result<Self, regex::Error> {
        Ok(Self { mention: Regex::new(mention_pattern)?, url: Regex::new(url_pattern)? })
    }

    pub fn standard() -> &'static NormalizeRules {
        static RULES: OnceLock<NormalizeRules> = OnceLock::new();
        RULES.get_or_init(|| {
            NormalizeRules::new(DEFAULT_MENTION_PATTERN, DEFAULT_URL_PATTERN)
                .expect("default patterns compile")
        })
    }

    /// Rewrites until nothing changes: a replacement can expose a new match
    /// (`x@a@b` leaves `@b` after `>`), and a second call must be a no-op.
    pub fn apply(&self, raw: &str) -> String {
        let mut text: String = raw.nfkc().collect();
        loop {
            let next = self.rewrite(&text);
            if next == text {
                return next;
            }
            text = next;
        }
    }

    fn rewrite(&self, folded: &str) -> String {
        let mut out = String::with_capacity(folded.len());
        // already-rewritten tokens are left untouched so the rules never nest
        for segment in split_protected(folded) {
            match segment {
                Segment::Protected(tok) => out.push_str(tok),
                Segment::Text(text) => {
                    let text = self.url.replace_all(text, URL_TOKEN);
                    let text = self.mention.replace_all(&text, |caps: &regex::Captures<'_>| {
                        format!("{}{USER_TOKEN}", caps.get(1).map_or("", |m| m.as_str()))
                    });
                    out.push_str(&text);
                }
            }
        }
        out.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

enum Segment<'a> {
    Protected(&'a str),
    Text(&'a str),
}

fn split_protected(text: &str) -> Vec<Segment<'_>> {
    let mut segments = Vec::new();
    let mut rest = text;
    loop {
        let next = [USER_TOKEN, URL_TOKEN]
            .iter()
            .filter_map(|tok| rest.find(tok).map(|pos| (pos, *tok)))
            .min_by_key(|(pos, _)| *pos);
        match next {
            Some((pos, tok)) => {
                if pos > 0 {
                    segments.push(Segment::Text(&rest[..pos]));
                }
                segments.push(Segment::Protected(tok));
                rest = &rest[pos + tok.len()..];
            }
            None => {
                if !rest.is_empty() {
                    segments.push(Segment::Text(rest));
                }
                return segments;
            }
        }
    }
}

/// Folds stylized letterforms to plain text (NFKC), rewrites mentions to
/// `<@user>` and links to `<url>`, and collapses whitespace. Idempotent.
pub fn normalize(raw: &str) -> String {
    NormalizeRules::standard().apply(raw)
}
