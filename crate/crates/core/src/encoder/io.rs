//! Model file: little-endian, magic `PFND`, version, dimensions and vocab
//! checksum, then f32 tensors in declaration order, then CRC32.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Attention, EncoderConfig, EncoderModel, StreamAttention, Tower};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Dense;
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"PFND";
pub const MODEL_VERSION: u32 = 1;

fn read_matrix<T: Scalar>(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Array2<T>> {
    let data = r.tensor(rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked by reader"))
}

pub(crate) fn write_dense<T: Scalar>(w: &mut Writer, layer: &Dense<T>) {
    w.tensor(layer.weight.iter().copied());
    w.tensor(layer.bias.iter().copied());
}

pub(crate) fn read_dense<T: Scalar>(r: &mut Reader<'_>, inputs: usize, outputs: usize) -> Result<Dense<T>> {
    Ok(Dense {
        weight: read_matrix(r, inputs, outputs)?,
        bias: Array1::from(r.tensor(outputs)?),
    })
}

impl<T: Scalar> EncoderModel<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        for v in [cfg.embed_dim, cfg.hidden_dim, cfg.hidden_layers, cfg.out_dim] {
            w.u32(v as u32);
        }
        w.u32(self.vocab_checksum());
        w.u32(self.unigram_emb.nrows() as u32);
        w.u32(self.bigram_emb.nrows() as u32);
        let heads = self.attention.as_ref().map_or(0, |a| a.unigram.heads);
        w.u32(heads as u32);

        w.tensor([self.scale]);
        w.tensor(self.unigram_emb.iter().copied());
        w.tensor(self.bigram_emb.iter().copied());
        if let Some(att) = &self.attention {
            for block in [&att.unigram, &att.bigram] {
                for t in block.tensors() {
                    w.tensor(t.iter().copied());
                }
            }
        }
        for tower in [&self.context_tower, &self.reply_tower] {
            for layer in tower.layers() {
                write_dense(&mut w, layer);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MODEL_MAGIC, MODEL_VERSION)?;
        let embed_dim = r.usize()?;
        let hidden_dim = r.usize()?;
        let hidden_layers = r.usize()?;
        let out_dim = r.usize()?;
        let vocab_checksum = r.u32()?;
        let unigram_rows = r.usize()?;
        let bigram_rows = r.usize()?;
        let heads = r.usize()?;
        let config = EncoderConfig {
            embed_dim,
            hidden_dim,
            hidden_layers,
            out_dim,
            attention_enabled: heads > 0,
            attention_heads: heads.max(1),
            ..EncoderConfig::default()
        };
        config
            .validate()
            .map_err(|e| Error::CorruptFile(format!("invalid header: {e}")))?;

        let scale = r.tensor::<T>(1)?[0];
        let unigram_emb = read_matrix(&mut r, unigram_rows, embed_dim)?;
        let bigram_emb = read_matrix(&mut r, bigram_rows, embed_dim)?;
        let attention = if heads > 0 {
            let mut block = || -> Result<Attention<T>> {
                let mut a = Attention::zeros(embed_dim, heads);
                for (_, t) in a.tensors_mut() {
                    *t = read_matrix(&mut r, embed_dim, embed_dim)?;
                }
                Ok(a)
            };
            let unigram = block()?;
            let bigram = block()?;
            Some(StreamAttention { unigram, bigram })
        } else {
            None
        };
        let mut tower = || -> Result<Tower<T>> {
            let mut hidden = Vec::with_capacity(hidden_layers);
            let mut width = embed_dim;
            for _ in 0..hidden_layers {
                hidden.push(read_dense(&mut r, width, hidden_dim)?);
                width = hidden_dim;
            }
            let output = read_dense(&mut r, width, out_dim)?;
            Ok(Tower { hidden, output })
        };
        let context_tower = tower()?;
        let reply_tower = tower()?;
        r.expect_end()?;
        Ok(EncoderModel {
            config,
            unigram_emb,
            bigram_emb,
            attention,
            context_tower,
            reply_tower,
            scale,
            vocab_checksum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::Vocab;

    fn model(attention: bool) -> (Vocab, EncoderModel<f32>) {
        let vocab = Vocab::build(["the soup is hot", "cold soup", "hot tea"], 1, 10).unwrap();
        let cfg = EncoderConfig {
            embed_dim: 8,
            hidden_dim: 8,
            hidden_layers: 2,
            out_dim: 4,
            attention_enabled: attention,
            attention_heads: 2,
            ..EncoderConfig::default()
        };
        (vocab.clone(), EncoderModel::new(cfg, &vocab).unwrap())
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for attention in [false, true] {
            let (vocab, m) = model(attention);
            let back = EncoderModel::<f32>::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back.scale(), m.scale());
            for probe in [
                "the soup", "hot", "", "x y z", "cold tea is hot", "soup!", "tea. soup.", "12345",
                "the", "is cold",
            ] {
                let fs = vocab.featurize(probe);
                assert_eq!(
                    back.encode_context(&fs).unwrap().as_slice(),
                    m.encode_context(&fs).unwrap().as_slice()
                );
                assert_eq!(
                    back.encode_reply(&fs).unwrap().as_slice(),
                    m.encode_reply(&fs).unwrap().as_slice()
                );
            }
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (_, m) = model(true);
        let bytes = m.to_bytes();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(EncoderModel::<f32>::from_bytes(cut), Err(Error::CorruptFile(_))));
        assert!(matches!(EncoderModel::<f32>::from_bytes(&bytes[..6]), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn wrong_magic() {
        let (_, m) = model(false);
        let mut bytes = m.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            EncoderModel::<f32>::from_bytes(&bytes),
            Err(Error::FormatVersionMismatch(_))
        ));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (_, m) = model(false);
        let mut bytes = m.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(EncoderModel::<f32>::from_bytes(&bytes), Err(Error::CorruptFile(_))));
    }
}
