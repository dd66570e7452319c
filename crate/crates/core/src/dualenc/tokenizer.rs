use std::collections::HashMap;

/// Prompt template wrapped around every class name.
pub const TEMPLATE_PREFIX: &str = "a photo of the";
pub const TEMPLATE_SUFFIX: &str = "camouflaged in the background.";

const WORDS: [&str; 19] = [
    "a",
    "photo",
    "of",
    "the",
    "camouflaged",
    "in",
    "background",
    ".",
    "blob",
    "square",
    "triangle",
    "cross",
    "stripes",
    "dots",
    "checker",
    "stripe",
    "dot",
    "check",
    "object",
];

pub const UNK: usize = 0;

/// Fixed lowercase word-piece table with single-character fallback.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    max_piece: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut pieces = vec!["<unk>".to_string()];
        pieces.extend(WORDS.iter().map(|w| w.to_string()));
        for c in ('a'..='z').chain('0'..='9') {
            let s = c.to_string();
            if !pieces.contains(&s) {
                pieces.push(s);
            }
        }
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let max_piece = pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Self {
            pieces,
            index,
            max_piece,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    /// Greedy longest-prefix segmentation of one lowercase word.
    fn word(&self, w: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = w.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let mut hit = None;
            for len in (1..=self.max_piece.min(chars.len() - i)).rev() {
                let s: String = chars[i..i + len].iter().collect();
                if let Some(&id) = self.index.get(&s) {
                    hit = Some((id, len));
                    break;
                }
            }
            match hit {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
    }

    /// Tokenizes free text. Never fails: unknown characters map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let lower = text.to_lowercase();
        for raw in lower.split(|c: char| c.is_whitespace() || c == '-' || c == '_') {
            if raw.is_empty() {
                continue;
            }
            let (body, dot) = match raw.strip_suffix('.') {
                Some(b) => (b, true),
                None => (raw, false),
            };
            self.word(body, &mut out);
            if dot {
                out.push(self.index["."]);
            }
        }
        out
    }

    /// Tokens of the prompt sentence for a class name such as `blob-stripes`.
    pub fn encode_class(&self, class: &str) -> Vec<usize> {
        self.encode(&prompt_sentence(class))
    }
}

pub fn prompt_sentence(class: &str) -> String {
    let name = class.replace(['-', '_'], " ");
    format!("{TEMPLATE_PREFIX} {name} {TEMPLATE_SUFFIX}")
}
