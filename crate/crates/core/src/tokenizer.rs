//! Byte-level tokenizer: ids 0..=255 are raw bytes, plus BOS/EOS/PAD
//! specials. No trained vocabulary, so encoding is total and lossless.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Text to ids. BOS/EOS are attached here so sequence assembly can treat the
/// id lists as final.
pub fn encode(text: &str, add_bos: bool, add_eos: bool) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    if add_bos {
        out.push(BOS);
    }
    out.extend(text.bytes().map(|b| b as u32));
    if add_eos {
        out.push(EOS);
    }
    out
}

/// Ids to text. Specials are dropped; byte sequences that are not valid
/// UTF-8 are replaced (generation can emit arbitrary bytes).
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
