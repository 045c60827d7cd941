use super::sample::TokenizedSample;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, IGNORE_INDEX};

/// Right-padded batch of tokenized samples.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    /// `[batch_size, seq_len]`, row-major.
    pub ids: Vec<u32>,
    /// `[batch_size, seq_len]`, row-major.
    pub labels: Vec<i64>,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
    pub image_token_index: Vec<Option<usize>>,
    pub images: Vec<Option<Tensor<S>>>,
    pub seq_len: usize,
    /// Number of samples that were truncated to fit.
    pub truncated: usize,
}

impl<S: Scalar> Batch<S> {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row_ids(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq_len..i * self.seq_len + self.lengths[i]]
    }

    pub fn row_labels(&self, i: usize) -> &[i64] {
        &self.labels[i * self.seq_len..i * self.seq_len + self.lengths[i]]
    }

    /// The unpadded sample in row `i`.
    pub fn sample(&self, i: usize) -> TokenizedSample {
        TokenizedSample {
            input_ids: self.row_ids(i).to_vec(),
            labels: self.row_labels(i).to_vec(),
            image_token_index: self.image_token_index[i],
        }
    }
}

/// Cuts `sample` to at most `max_len` tokens from the right without splitting
/// a multi-byte character; the image placeholder must survive.
pub fn truncate(sample: &TokenizedSample, max_len: usize) -> Result<TokenizedSample> {
    if sample.len() <= max_len {
        return Ok(sample.clone());
    }
    let tok = Tokenizer;
    let mut cut = max_len;
    while cut > 0 && !tok.is_boundary(sample.input_ids[cut]) {
        cut -= 1;
    }
    if let Some(i) = sample.image_token_index {
        if i >= cut {
            return Err(Error::Validation(format!(
                "truncating to {max_len} tokens would drop the image placeholder at {i}"
            )));
        }
    }
    if cut == 0 {
        return Err(Error::Validation(format!("cannot truncate sample to {max_len} tokens")));
    }
    Ok(TokenizedSample {
        input_ids: sample.input_ids[..cut].to_vec(),
        labels: sample.labels[..cut].to_vec(),
        image_token_index: sample.image_token_index,
    })
}

/// Right-pads `samples` to `pad_to` with `pad_id` / ignored labels,
/// truncating longer ones.
pub fn collate<S: Scalar>(
    samples: &[TokenizedSample],
    images: &[Option<Tensor<S>>],
    pad_to: usize,
    pad_id: u32,
) -> Result<Batch<S>> {
    if samples.len() != images.len() {
        return Err(Error::Validation(format!(
            "{} samples but {} image slots",
            samples.len(),
            images.len()
        )));
    }
    let mut batch = Batch {
        ids: Vec::with_capacity(samples.len() * pad_to),
        labels: Vec::with_capacity(samples.len() * pad_to),
        lengths: Vec::with_capacity(samples.len()),
        image_token_index: Vec::with_capacity(samples.len()),
        images: images.to_vec(),
        seq_len: pad_to,
        truncated: 0,
    };
    for s in samples {
        let s = if s.len() > pad_to {
            batch.truncated += 1;
            truncate(s, pad_to)?
        } else {
            s.clone()
        };
        let pad = pad_to - s.len();
        batch.ids.extend(&s.input_ids);
        batch.ids.extend(std::iter::repeat_n(pad_id, pad));
        batch.labels.extend(&s.labels);
        batch.labels.extend(std::iter::repeat_n(IGNORE_INDEX, pad));
        batch.lengths.push(s.len());
        batch.image_token_index.push(s.image_token_index);
    }
    if batch.truncated > 0 {
        log::warn!("truncated {} of {} samples to {pad_to} tokens", batch.truncated, samples.len());
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenizer::{IMAGE, PAD};

    fn sample(n: usize) -> TokenizedSample {
        TokenizedSample {
            input_ids: (0..n as u32).map(|i| 97 + i).collect(),
            labels: (0..n as i64).map(|i| 97 + i).collect(),
            image_token_index: None,
        }
    }

    #[test]
    fn full_length_sample_unchanged() {
        let b = collate::<f32>(&[sample(4)], &[None], 4, PAD).unwrap();
        assert_eq!(b.sample(0), sample(4));
        assert_eq!(b.truncated, 0);
    }

    #[test]
    fn pads_right() {
        let b = collate::<f32>(&[sample(3), sample(5)], &[None, None], 5, PAD).unwrap();
        assert_eq!(&b.ids[3..5], &[PAD, PAD]);
        assert_eq!(&b.labels[3..5], &[IGNORE_INDEX, IGNORE_INDEX]);
        assert_eq!(b.lengths, vec![3, 5]);
        assert_eq!(b.row_ids(1), sample(5).input_ids.as_slice());
    }

    #[test]
    fn truncation_respects_utf8_and_placeholder() {
        let tok = Tokenizer;
        let mut ids = vec![IMAGE];
        ids.extend(tok.encode("aé"));
        let s = TokenizedSample {
            labels: vec![IGNORE_INDEX; ids.len()],
            input_ids: ids,
            image_token_index: Some(0),
        };
        // Cutting at 3 would split "é" (2 bytes at positions 2..4).
        let t = truncate(&s, 3).unwrap();
        assert_eq!(t.input_ids, vec![IMAGE, b'a' as u32]);
        let b = collate::<f32>(&[s.clone()], &[None], 3, PAD).unwrap();
        assert_eq!(b.truncated, 1);
        assert_eq!(b.lengths, vec![2]);

        let late = TokenizedSample {
            input_ids: vec![97, 98, IMAGE],
            labels: vec![IGNORE_INDEX; 3],
            image_token_index: Some(2),
        };
        assert!(truncate(&late, 2).is_err());
    }
}
