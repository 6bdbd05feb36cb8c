//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const SEP: u32 = 258;
pub const EOS: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes byte tokens, skipping specials. Invalid UTF-8 is replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// `BOS question SEP`: what the model sees before answering.
pub fn prompt(question: &str) -> Vec<u32> {
    let mut t = Vec::with_capacity(question.len() + 2);
    t.push(BOS);
    t.extend(encode(question));
    t.push(SEP);
    t
}

/// `BOS question SEP answer EOS` plus the index of the `SEP` token.
pub fn dialogue(question: &str, answer: &str) -> (Vec<u32>, usize) {
    let mut t = prompt(question);
    let sep = t.len() - 1;
    t.extend(encode(answer));
    t.push(EOS);
    (t, sep)
}
