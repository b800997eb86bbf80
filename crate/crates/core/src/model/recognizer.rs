use crate::checkpoint::Checkpoint;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::eval::{Recognition, Recognize};
use crate::image::Image;
use crate::preprocess::Preprocess;

use super::decode::{decode_beam, decode_greedy};
use super::Captioner;

/// A captioner with its vocabulary and (deterministic) input transform.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub model: Captioner,
    pub vocab: Vocab,
    pub preprocess: Preprocess,
    /// 1 selects greedy decoding.
    pub beam: usize,
}

impl Recognizer {
    pub fn new(model: Captioner, vocab: Vocab, preprocess: Preprocess) -> Result<Self> {
        if vocab.len() != model.config().vocab_size {
            return Err(Error::Contract(format!(
                "vocabulary has {} ids, model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        if preprocess.resolution() != model.config().input_resolution {
            return Err(Error::Contract(format!(
                "preprocessing targets {}px, model expects {}px",
                preprocess.resolution(),
                model.config().input_resolution
            )));
        }
        Ok(Recognizer {
            model,
            vocab,
            preprocess: preprocess.deterministic(),
            beam: 1,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Recognizer::new(ck.model()?, ck.vocab.clone(), ck.preprocess)
    }

    /// Decodes an image that is already at model resolution.
    pub fn recognize_prepared(&self, input: &Image) -> Result<Recognition> {
        let encoded = self.model.prepare(input)?;
        let d = if self.beam <= 1 {
            decode_greedy(&encoded)?
        } else {
            decode_beam(&encoded, self.beam)?
        };
        Ok(Recognition {
            text: self.vocab.decode(&d.tokens),
            terminated: d.terminated,
        })
    }
}

impl Recognize for Recognizer {
    fn recognize(&self, img: &Image) -> Result<Recognition> {
        self.recognize_prepared(&self.preprocess.apply_deterministic(img)?)
    }
}
