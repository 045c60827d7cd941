//! Byte-level tokenizer: 256 byte tokens plus four specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const IMAGE: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub const IMAGE_LITERAL: &str = "<image>";
pub const EOS_LITERAL: &str = "</s>";
pub const BOS_LITERAL: &str = "<s>";
pub const PAD_LITERAL: &str = "<pad>";

const SPECIALS: [(&str, u32); 4] = [
    (IMAGE_LITERAL, IMAGE),
    (EOS_LITERAL, EOS),
    (BOS_LITERAL, BOS),
    (PAD_LITERAL, PAD),
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Special-token literals map to their ids; everything else to UTF-8 bytes.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            if rest.starts_with('<') {
                for (literal, id) in SPECIALS {
                    if let Some(tail) = rest.strip_prefix(literal) {
                        ids.push(id);
                        rest = tail;
                        continue 'outer;
                    }
                }
            }
            let first = rest.chars().next().map_or(1, char::len_utf8);
            let next = rest[first..].find('<').map_or(rest.len(), |i| i + first);
            ids.extend(rest[..next].bytes().map(u32::from));
            rest = &rest[next..];
        }
        ids
    }

    /// Inverse of [`Tokenizer::encode`]; invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
                continue;
            }
            out.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            out.push_str(self.special_literal(id).unwrap_or("\u{FFFD}"));
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        out
    }

    pub fn special_literal(&self, id: u32) -> Option<&'static str> {
        SPECIALS.iter().find(|(_, s)| *s == id).map(|(l, _)| *l)
    }

    /// True for ids that start a UTF-8 character or are special tokens, i.e.
    /// positions where a token sequence may be cut.
    pub fn is_boundary(&self, id: u32) -> bool {
        id >= 256 || (id as u8) & 0xC0 != 0x80
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn image_placeholder_is_one_token() {
        let tok = Tokenizer;
        assert_eq!(tok.encode("<image>"), vec![IMAGE]);
        assert_eq!(tok.encode("<image>\nhi</s>"), vec![IMAGE, b'\n' as u32, b'h' as u32, b'i' as u32, EOS]);
        assert_eq!(tok.encode("a<b"), vec![97, 60, 98]);
    }

    #[test]
    fn multibyte_boundaries() {
        let tok = Tokenizer;
        let ids = tok.encode("é");
        assert_eq!(ids.len(), 2);
        assert!(tok.is_boundary(ids[0]));
        assert!(!tok.is_boundary(ids[1]));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "\\PC*") {
            let tok = Tokenizer;
            prop_assert_eq!(tok.decode(&tok.encode(&s)), s);
        }
    }
}
