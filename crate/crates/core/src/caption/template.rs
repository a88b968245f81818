use std::sync::LazyLock;

use regex::Regex;

pub const TEMPLATE_VERSION: u32 = 1;

pub const UNIFY_TEMPLATE: &str = "Merge the following two descriptions of the same video into one fluent caption that keeps all person attributes and the action. Attributes: {attribute} Action: {action}";

static PARSE: LazyLock<Regex> = LazyLock::new(|| {
    let head = regex::escape(
        UNIFY_TEMPLATE
            .split("{attribute}")
            .next()
            .expect("template head"),
    );
    Regex::new(&format!(r"(?s)^{head}(.*?) Action: (.*)$")).expect("valid template regex")
});

fn escape(v: &str) -> String {
    v.replace('{', "{{").replace('}', "}}")
}

fn unescape(v: &str) -> Option<String> {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars().peekable();
    while let Some(c) = chars.next() {
        if (c == '{' || c == '}') && chars.next() != Some(c) {
            return None;
        }
        out.push(c);
    }
    Some(out)
}

/// Fill the unifier template. Braces inside the captions are doubled.
pub fn render_unify_prompt(attribute: &str, action: &str) -> String {
    let (head, rest) = UNIFY_TEMPLATE
        .split_once("{attribute}")
        .expect("attribute slot");
    let (mid, tail) = rest.split_once("{action}").expect("action slot");
    format!("{head}{}{mid}{}{tail}", escape(attribute), escape(action))
}

/// Inverse of [`render_unify_prompt`]. The split happens at the first
/// ` Action: `, so an attribute caption containing that marker (or ending
/// in ` Action:`) does not round-trip.
pub fn parse_unify_prompt(prompt: &str) -> Option<(String, String)> {
    let caps = PARSE.captures(prompt)?;
    Some((unescape(&caps[1])?, unescape(&caps[2])?))
}
