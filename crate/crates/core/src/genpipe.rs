//! Prompt construction and output cleanup for machine-text generation.
//!
//! A prompt is always three chat messages: a system message describing the
//! task, a user message carrying fields from a human sample, and a partial
//! assistant message whose text is prefilled so the reply can be cut out of
//! the completion. The HTTP side lives in the `tokdetect` crate.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TextSample;
use crate::seed::rng_for;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GenpipeError {
    #[error("template `{template}` needs field `{field}`")]
    MissingPlaceholder { template: String, field: String },
    #[error("template `{0}` has an empty assistant prefix")]
    EmptyAssistantPrefix(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("unknown sampling preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// The three rendered messages of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub messages: [Message; 3],
}

impl ChatPrompt {
    pub fn assistant_prefix(&self) -> &str {
        &self.messages[2].content
    }

    /// Token count of all three message bodies.
    pub fn token_count(&self, vocab: &Vocabulary) -> usize {
        self.messages.iter().map(|m| vocab.count_tokens(&m.content)).sum()
    }
}

/// Three-message template. Placeholders are written `{name}`; `{{` and `}}`
/// are literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub system: String,
    pub user: String,
    pub assistant_prefix: String,
    /// Placeholder that receives the source sample's text.
    pub text_field: String,
}

impl PromptTemplate {
    pub fn placeholders(&self) -> Vec<String> {
        let mut names = Vec::new();
        for part in [&self.system, &self.user, &self.assistant_prefix] {
            for piece in parse_template(part) {
                if let Piece::Field(name) = piece {
                    if !names.iter().any(|n: &String| n == name) {
                        names.push(name.to_string());
                    }
                }
            }
        }
        names
    }

    /// Fills every placeholder from `fields`.
    pub fn render(&self, fields: &BTreeMap<String, String>) -> Result<ChatPrompt, GenpipeError> {
        if self.assistant_prefix.is_empty() {
            return Err(GenpipeError::EmptyAssistantPrefix(self.name.clone()));
        }
        let fill = |text: &str| -> Result<String, GenpipeError> {
            let mut out = String::with_capacity(text.len());
            for piece in parse_template(text) {
                match piece {
                    Piece::Literal(s) => out.push_str(s),
                    Piece::Field(name) => match fields.get(name) {
                        Some(value) => out.push_str(value),
                        None => {
                            return Err(GenpipeError::MissingPlaceholder {
                                template: self.name.clone(),
                                field: name.to_string(),
                            })
                        }
                    },
                }
            }
            Ok(out)
        };
        let prompt = ChatPrompt {
            messages: [
                Message { role: Role::System, content: fill(&self.system)? },
                Message { role: Role::User, content: fill(&self.user)? },
                Message { role: Role::Assistant, content: fill(&self.assistant_prefix)? },
            ],
        };
        if prompt.assistant_prefix().is_empty() {
            return Err(GenpipeError::EmptyAssistantPrefix(self.name.clone()));
        }
        Ok(prompt)
    }

    /// Renders a prompt for a corpus sample: its extra fields plus its text
    /// under `text_field`.
    pub fn render_sample(&self, sample: &TextSample) -> Result<ChatPrompt, GenpipeError> {
        let mut fields = sample.fields.clone();
        fields.insert(self.text_field.clone(), sample.text.clone());
        self.render(&fields)
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Field(&'a str),
}

fn parse_template(text: &str) -> Vec<Piece<'_>> {
    let bytes = text.as_bytes();
    let mut pieces = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                pieces.push(Piece::Literal(&text[literal_start..i + 1]));
                i += 2;
                literal_start = i;
            }
            b'{' => {
                let name_len = bytes[i + 1..].iter().take_while(|b| b.is_ascii_alphanumeric() || **b == b'_').count();
                if name_len > 0 && bytes.get(i + 1 + name_len) == Some(&b'}') {
                    pieces.push(Piece::Literal(&text[literal_start..i]));
                    pieces.push(Piece::Field(&text[i + 1..i + 1 + name_len]));
                    i += name_len + 2;
                    literal_start = i;
                } else {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    pieces.push(Piece::Literal(&text[literal_start..]));
    pieces
}

fn template(name: &str, system: &str, user: &str, assistant_prefix: &str, text_field: &str) -> PromptTemplate {
    PromptTemplate {
        name: name.to_string(),
        system: system.to_string(),
        user: user.to_string(),
        assistant_prefix: assistant_prefix.to_string(),
        text_field: text_field.to_string(),
    }
}

/// Templates for the ten human source datasets.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    alloc::vec![
        template(
            "blogs",
            "You are a helpful assistant for rewriting blogs. Based on the provided blog, generate a similar one. MAKE SURE TO REPLY ONLY WITH THE SIMILAR BLOG.",
            "Blog:\n{blog}",
            "Similar blog:\n",
            "blog",
        ),
        template(
            "essays",
            "You are a helpful assistant for rewriting students' essays. Based on the provided essay, generate a similar one in a natural and authentic tone, maintaining the same meaning but rephrased. Ensure the rewritten essay matches the length of the original, and avoids overly formal or advanced phrasing. MAKE SURE TO REPLY ONLY WITH THE SIMILAR ESSAY.",
            "Essay:\n{essay}",
            "Similar essay:\n",
            "essay",
        ),
        template(
            "natural_questions",
            "You are a helpful assistant for answering questions based on the provided context. The context will be a copy of a Wikipedia article. Answer the question based only on the given context. MAKE SURE TO REPLY ONLY WITH THE ANSWER.",
            "Context:\n{context}\nQuestion: {question}",
            "Answer:\n",
            "context",
        ),
        template(
            "nyt_articles",
            "You are a helpful assistant for writing article abstracts. Based on the provided headline and list of keywords, generate an abstract for the article. Ensure the abstract maintains a similar length to typical article abstracts. MAKE SURE TO REPLY ONLY WITH THE ABSTRACT.",
            "Headline:\n{headline}\nKeywords:\n{keywords}",
            "Abstract:\n",
            "headline",
        ),
        template(
            "nyt_comments",
            "You are a helpful assistant for writing comments based on article abstracts and sample comments. Based on the provided article abstract and sample comment, generate a similar comment related to the article. Ensure the comment matches the tone and length of the sample comment. MAKE SURE TO REPLY ONLY WITH THE COMMENT.",
            "Abstract:\n{abstract}\nComment:\n{comment}",
            "Similar comment:\n",
            "comment",
        ),
        template(
            "raid",
            "You are a helpful assistant specializing in writing texts across various domains, including abstracts and news articles, based on provided titles. Based on the given domain and title, generate a text of appropriate length and style that aligns with the specified domain. MAKE SURE TO REPLY ONLY WITH THE GENERATED TEXT.",
            "Domain:\n{domain}\nTitle:\n{title}",
            "Generated text:\n",
            "title",
        ),
        template(
            "reddit",
            "You are a helpful assistant for rewriting Reddit comments. Based on the provided comment and the subreddit where it was posted, generate a similar comment that fits the context of the subreddit. MAKE SURE TO REPLY ONLY WITH THE SIMILAR COMMENT.",
            "Comment:\n{comment}\nSubreddit:\n{subreddit}",
            "Similar comment:\n",
            "comment",
        ),
        template(
            "tweets",
            "You are a helpful assistant for rewriting tweets. Based on the provided tweet, generate a similar one while maintaining the original meaning and tone. MAKE SURE TO REPLY ONLY WITH THE SIMILAR TWEET.",
            "Tweet:\n{tweet}",
            "Similar tweet:\n",
            "tweet",
        ),
        template(
            "writingprompts",
            "You are a helpful assistant for writing stories based on the provided prompt. Based on the given prompt, generate a story that aligns with it. MAKE SURE TO REPLY ONLY WITH THE STORY.",
            "Prompt:\n{prompt}",
            "Story:\n",
            "prompt",
        ),
        template(
            "xsum",
            "You are a helpful assistant for writing news articles based on the provided one-sentence summaries. Based on the given summary, generate a full news article. MAKE SURE TO REPLY ONLY WITH THE NEWS ARTICLE.",
            "Summary:\n{summary}",
            "News article:\n",
            "summary",
        ),
    ]
}

pub fn builtin_template(name: &str) -> Result<PromptTemplate, GenpipeError> {
    builtin_templates()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| GenpipeError::UnknownTemplate(name.to_string()))
}

/// Named sampling configuration. `top_k = -1` disables top-k filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPreset {
    pub name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: i32,
}

impl SamplingPreset {
    fn new(name: &str, temperature: f64, top_p: f64, top_k: i32) -> Self {
        Self { name: name.to_string(), temperature, top_p, top_k }
    }

    pub fn builtin() -> [SamplingPreset; 4] {
        [
            Self::new("deterministic", 0.0, 1.0, -1),
            Self::new("balanced", 0.5, 0.95, 100),
            Self::new("creative", 0.7, 0.9, 50),
            Self::new("highly_creative", 1.0, 0.95, 30),
        ]
    }

    pub fn by_name(name: &str) -> Result<SamplingPreset, GenpipeError> {
        let wanted = name.to_ascii_lowercase().replace([' ', '-'], "_");
        Self::builtin()
            .into_iter()
            .find(|p| p.name == wanted)
            .ok_or_else(|| GenpipeError::UnknownPreset(name.to_string()))
    }
}

/// One preset per batch, drawn uniformly from the built-in four with a
/// seeded generator.
pub fn assign_presets(n_batches: usize, seed: u64) -> Vec<SamplingPreset> {
    let presets = SamplingPreset::builtin();
    let mut rng = rng_for(seed, "genpipe.presets");
    (0..n_batches).map(|_| presets[rng.gen_range(0..presets.len())].clone()).collect()
}

/// Cleans a generated text:
/// 1. runs of more than two newlines become two, runs of spaces/tabs become one;
/// 2. a word n-gram (n <= 16) repeated four or more times in a row keeps only
///    its first two occurrences;
/// 3. surrounding whitespace is trimmed.
///
/// The result is a fixed point: `postprocess(postprocess(x)) == postprocess(x)`.
pub fn postprocess(text: &str) -> String {
    let squeezed = squeeze_whitespace(text);
    let deduped = drop_repeated_ngrams(&squeezed);
    deduped.trim().to_string()
}

fn squeeze_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut newlines = 0;
    let mut in_blank_run = false;
    for c in text.chars() {
        match c {
            '\n' => {
                in_blank_run = false;
                newlines += 1;
                if newlines <= 2 {
                    out.push(c);
                }
            }
            ' ' | '\t' => {
                newlines = 0;
                if !in_blank_run {
                    out.push(c);
                }
                in_blank_run = true;
            }
            _ => {
                newlines = 0;
                in_blank_run = false;
                out.push(c);
            }
        }
    }
    out
}

const MAX_NGRAM: usize = 16;
const MIN_REPEATS: usize = 4;
const KEPT_REPEATS: usize = 2;

/// Splits into `(separator, word)` pairs; the trailing separator is returned apart.
fn split_words(text: &str) -> (Vec<(&str, &str)>, &str) {
    let mut words = Vec::new();
    let mut rest = text;
    loop {
        let word_start = rest.find(|c: char| !c.is_whitespace()).unwrap_or(rest.len());
        if word_start == rest.len() {
            return (words, rest);
        }
        let after = &rest[word_start..];
        let word_len = after.find(char::is_whitespace).unwrap_or(after.len());
        words.push((&rest[..word_start], &after[..word_len]));
        rest = &after[word_len..];
    }
}

fn drop_repeated_ngrams(text: &str) -> String {
    let (mut words, tail) = split_words(text);
    loop {
        let mut changed = false;
        let mut i = 0;
        while i < words.len() {
            let mut removed = false;
            for n in 1..=MAX_NGRAM {
                if i + n * MIN_REPEATS > words.len() {
                    break;
                }
                let gram = |k: usize| words[i + k * n..i + (k + 1) * n].iter().map(|(_, w)| *w);
                let mut repeats = 1;
                while i + (repeats + 1) * n <= words.len() && gram(0).eq(gram(repeats)) {
                    repeats += 1;
                }
                if repeats >= MIN_REPEATS {
                    words.drain(i + KEPT_REPEATS * n..i + repeats * n);
                    removed = true;
                    break;
                }
            }
            if removed {
                changed = true;
            } else {
                i += 1;
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = String::with_capacity(text.len());
    for (sep, word) in &words {
        out.push_str(sep);
        out.push_str(word);
    }
    out.push_str(tail);
    out
}

/// Cuts the prefilled assistant prefix off a completion and cleans the rest.
pub fn extract_response(completion: &str, assistant_prefix: &str) -> String {
    let trimmed_prefix = assistant_prefix.trim_end();
    let mut text = postprocess(completion);
    loop {
        let stripped = if !assistant_prefix.is_empty() && text.starts_with(assistant_prefix) {
            &text[assistant_prefix.len()..]
        } else if !trimmed_prefix.is_empty() && text.starts_with(trimmed_prefix) {
            &text[trimmed_prefix.len()..]
        } else {
            return text;
        };
        text = postprocess(stripped);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use proptest::prelude::*;

    fn fields(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn blogs_template_renders_three_messages() {
        let t = builtin_template("blogs").unwrap();
        let p = t.render(&fields(&[("blog", "X")])).unwrap();
        assert_eq!(p.messages[0].role, Role::System);
        assert!(p.messages[0].content.starts_with("You are a helpful assistant for rewriting blogs"));
        assert_eq!(p.messages[1].content, "Blog:\nX");
        assert_eq!(p.messages[2].role, Role::Assistant);
        assert_eq!(p.messages[2].content, "Similar blog:\n");
    }

    #[test]
    fn xsum_prefix() {
        let t = builtin_template("xsum").unwrap();
        let p = t.render(&fields(&[("summary", "S")])).unwrap();
        assert_eq!(p.assistant_prefix(), "News article:\n");
        assert_eq!(p.messages[1].content, "Summary:\nS");
    }

    #[test]
    fn all_builtin_templates_are_complete() {
        let templates = builtin_templates();
        assert_eq!(templates.len(), 10);
        for t in &templates {
            assert!(!t.assistant_prefix.is_empty());
            assert!(t.placeholders().contains(&t.text_field), "{}", t.name);
            assert!(t.system.ends_with('.'), "{}", t.name);
        }
        let nq = builtin_template("natural_questions").unwrap();
        assert_eq!(nq.placeholders(), ["context", "question"]);
    }

    #[test]
    fn missing_placeholder_is_an_error() {
        let t = template("q", "sys", "Q: {q}", "A:\n", "q");
        assert_eq!(
            t.render(&BTreeMap::new()),
            Err(GenpipeError::MissingPlaceholder { template: "q".into(), field: "q".into() })
        );
    }

    #[test]
    fn empty_prefix_is_rejected() {
        let t = template("q", "sys", "{q}", "", "q");
        assert!(matches!(t.render(&fields(&[("q", "x")])), Err(GenpipeError::EmptyAssistantPrefix(_))));
    }

    #[test]
    fn braces_escape_and_values_are_not_rescanned() {
        let t = template("t", "{{literal}} {x}", "{not a field} {x}", "P:", "x");
        let p = t.render(&fields(&[("x", "{x}")])).unwrap();
        assert_eq!(p.messages[0].content, "{literal} {x}");
        assert_eq!(p.messages[1].content, "{not a field} {x}");
    }

    #[test]
    fn render_sample_uses_text_and_extra_fields() {
        let vocab = Vocabulary::byte_level();
        let mut s = TextSample::new("r1", "nice post", crate::corpus::Source::Human, "reddit", &vocab);
        s.fields.insert("subreddit".into(), "rust".into());
        let p = builtin_template("reddit").unwrap().render_sample(&s).unwrap();
        assert_eq!(p.messages[1].content, "Comment:\nnice post\nSubreddit:\nrust");
        assert_eq!(p.token_count(&vocab), p.messages.iter().map(|m| m.content.len()).sum::<usize>());
    }

    #[test]
    fn builtin_presets() {
        let [det, bal, cre, high] = SamplingPreset::builtin();
        assert_eq!((det.temperature, det.top_p, det.top_k), (0.0, 1.0, -1));
        assert_eq!((bal.temperature, bal.top_p, bal.top_k), (0.5, 0.95, 100));
        assert_eq!((cre.temperature, cre.top_p, cre.top_k), (0.7, 0.9, 50));
        assert_eq!((high.temperature, high.top_p, high.top_k), (1.0, 0.95, 30));
        assert_eq!(SamplingPreset::by_name("Highly Creative").unwrap(), high);
        assert!(SamplingPreset::by_name("wild").is_err());
    }

    #[test]
    fn preset_assignment_is_seeded_and_roughly_uniform() {
        let a = assign_presets(4000, 11);
        assert_eq!(a, assign_presets(4000, 11));
        assert_ne!(a, assign_presets(4000, 12));
        // 4000 draws, p = 1/4: mean 1000, sd ~27.4, so 3 sd is about +-82.
        for preset in SamplingPreset::builtin() {
            let count = a.iter().filter(|p| p.name == preset.name).count();
            assert!((900..=1100).contains(&count), "{}: {count}", preset.name);
        }
    }

    #[test]
    fn whitespace_rules() {
        assert_eq!(postprocess("a    b\n\n\n\n\nc"), "a b\n\nc");
        assert_eq!(postprocess("  a\t\t b  "), "a\tb");
        assert_eq!(postprocess("a\n\nb"), "a\n\nb");
    }

    #[test]
    fn repeated_ngrams_keep_two_copies() {
        assert_eq!(postprocess("go go go go go stop"), "go go stop");
        assert_eq!(postprocess("go go go stop"), "go go go stop");
        assert_eq!(postprocess("I am. I am. I am. I am. done"), "I am. I am. done");
        let long: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
        let gram = long.join(" ");
        let text = format!("{gram} {gram} {gram} {gram} end");
        assert_eq!(postprocess(&text), format!("{gram} {gram} end"));
        let too_long: Vec<String> = (0..17).map(|i| format!("w{i}")).collect();
        let gram = too_long.join(" ");
        let text = format!("{gram} {gram} {gram} {gram}");
        assert_eq!(postprocess(&text), text);
    }

    #[test]
    fn prefix_is_stripped_from_completion() {
        assert_eq!(extract_response("Similar blog:\nHello", "Similar blog:\n"), "Hello");
        assert_eq!(extract_response("Hello", "Similar blog:\n"), "Hello");
        assert_eq!(extract_response("Similar blog: Hi", "Similar blog:\n"), "Hi");
        assert_eq!(extract_response("Similar blog:\n Similar blog:\nHi", "Similar blog:\n"), "Hi");
        assert_eq!(extract_response("Similar blog:\n", "Similar blog:\n"), "");
    }

    fn noisy() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just(" ".to_string()),
                Just("\t".to_string()),
                Just("\n".to_string()),
                Just("go".to_string()),
                Just("stop".to_string()),
                Just("a".to_string()),
                "[a-c]{1,2}",
                "\\PC{1,3}",
            ],
            0..80,
        )
        .prop_map(|parts| parts.concat())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn postprocess_is_idempotent_and_never_grows(s in noisy()) {
            let once = postprocess(&s);
            prop_assert!(once.len() <= s.len());
            prop_assert_eq!(postprocess(&once), once);
        }

        #[test]
        fn extraction_never_leaves_prefix(s in noisy()) {
            let raw = format!("Story:\n{s}");
            let out = extract_response(&raw, "Story:\n");
            prop_assert!(!out.starts_with("Story:"));
        }
    }
}
