use super::{Sentence, Token};

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn is_terminator(s: &str) -> bool {
    matches!(s, "." | "!" | "?")
}

/// Rule tokenizer: maximal alphanumeric runs are tokens, every other
/// non-whitespace character is a token of its own, whitespace separates.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run: Option<(usize, usize)> = None; // (char start, byte start)
    let mut offset = 0;
    let flush = |run: &mut Option<(usize, usize)>, end_char: usize, end_byte: usize, tokens: &mut Vec<Token>| {
        if let Some((s, b)) = run.take() {
            tokens.push(Token {
                text: text[b..end_byte].to_string(),
                start: s,
                end: end_char,
                label: None,
            });
        }
    };
    for (byte, c) in text.char_indices() {
        if is_word_char(c) {
            if run.is_none() {
                run = Some((offset, byte));
            }
        } else {
            flush(&mut run, offset, byte, &mut tokens);
            if !c.is_whitespace() {
                tokens.push(Token {
                    text: c.to_string(),
                    start: offset,
                    end: offset + 1,
                    label: None,
                });
            }
        }
        offset += 1;
    }
    flush(&mut run, offset, text.len(), &mut tokens);
    tokens
}

/// Groups tokens into sentences.
///
/// A sentence ends after a `.`, `!` or `?` token that is followed by
/// whitespace or the end of the text, and wherever the gap between two tokens
/// contains a blank line. A terminator glued to the next token (as inside
/// `www.example.es` or `a.b@c.es`) does not end a sentence.
pub fn split_sentences(tokens: Vec<Token>, text: &str) -> Vec<Sentence> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut iter = tokens.into_iter().peekable();
    while let Some(tok) = iter.next() {
        let end = tok.end;
        let terminator = is_terminator(&tok.text);
        current.push(tok);
        let boundary = match iter.peek() {
            None => true,
            Some(next) => {
                let gap = &chars[end.min(chars.len())..next.start.min(chars.len())];
                let blank_line = gap.iter().filter(|&&c| c == '\n').count() >= 2;
                blank_line || (terminator && !gap.is_empty())
            }
        };
        if boundary {
            sentences.push(Sentence {
                tokens: std::mem::take(&mut current),
            });
        }
    }
    sentences
}
