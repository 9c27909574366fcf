//! Index file: magic `PFIX`, version, stats block, scale and dimension,
//! entity table, candidate table (id, entity, kind, string refs, f32 vector),
//! string pool, CRC32. Strings are `(offset u32, len u32)` into the pool;
//! `NONE` marks an absent optional string. The approximate-search graph is
//! not stored; rebuild it after loading.

use std::path::Path;

use ndarray::Array2;

use super::{Candidate, EntityInfo, Kind, ResponseIndex};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INDEX_MAGIC: &[u8; 4] = b"PFIX";
pub const INDEX_VERSION: u32 = 1;
const NONE: u32 = u32::MAX;

#[derive(Default)]
struct StringPool {
    bytes: Vec<u8>,
}

impl StringPool {
    fn add(&mut self, s: &str) -> (u32, u32) {
        let off = self.bytes.len() as u32;
        self.bytes.extend_from_slice(s.as_bytes());
        (off, s.len() as u32)
    }

    fn add_opt(&mut self, s: Option<&str>) -> (u32, u32) {
        s.map_or((NONE, 0), |s| self.add(s))
    }
}

fn get_str(pool: &[u8], off: u32, len: u32) -> Result<String> {
    let start = off as usize;
    let end = start
        .checked_add(len as usize)
        .filter(|&e| e <= pool.len())
        .ok_or_else(|| Error::CorruptFile("string reference out of range".into()))?;
    String::from_utf8(pool[start..end].to_vec()).map_err(|_| Error::CorruptFile("invalid UTF-8 in string pool".into()))
}

fn get_opt(pool: &[u8], off: u32, len: u32) -> Result<Option<String>> {
    if off == NONE {
        Ok(None)
    } else {
        get_str(pool, off, len).map(Some)
    }
}

impl<T: Scalar> ResponseIndex<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut pool = StringPool::default();
        let mut w = Writer::new(INDEX_MAGIC, INDEX_VERSION);
        let s = self.stats;
        for v in [s.n_entities, s.n_photos, s.n_fact_sentences, s.n_review_sentences, s.n_menu_items] {
            w.u64(v);
        }
        w.f32(self.scale.to_f32_lossy());
        w.u32(self.dim() as u32);
        let (off, len) = pool.add(&self.language);
        w.u32(off);
        w.u32(len);

        w.u32(self.entities.len() as u32);
        for e in &self.entities {
            for s in [&e.entity_id, &e.name, &e.city] {
                let (off, len) = pool.add(s);
                w.u32(off);
                w.u32(len);
            }
        }

        w.u32(self.candidates.len() as u32);
        for c in &self.candidates {
            w.u32(c.candidate_id);
            w.u32(c.entity);
            w.u8(c.kind as u8);
            let refs = [
                pool.add(&c.text),
                pool.add_opt(c.english.as_deref()),
                pool.add_opt(c.photo_ref.as_deref()),
            ];
            for (off, len) in refs {
                w.u32(off);
                w.u32(len);
            }
            w.tensor(self.vectors.row(c.candidate_id as usize).iter().copied());
        }
        w.u64(pool.bytes.len() as u64);
        w.bytes(&pool.bytes);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, INDEX_MAGIC, INDEX_VERSION)?;
        let mut stored = [0u64; 5];
        for v in &mut stored {
            *v = r.u64()?;
        }
        let scale = T::of(r.f32()? as f64);
        let dim = r.usize()?;
        let lang_ref = (r.u32()?, r.u32()?);

        let n_entities = r.usize()?;
        let mut entity_refs = Vec::with_capacity(n_entities);
        for _ in 0..n_entities {
            let mut refs = [(0u32, 0u32); 3];
            for slot in &mut refs {
                *slot = (r.u32()?, r.u32()?);
            }
            entity_refs.push(refs);
        }

        let n = r.usize()?;
        let mut rows = Vec::with_capacity(n);
        let mut flat = Vec::with_capacity(n.saturating_mul(dim));
        for i in 0..n {
            let id = r.u32()?;
            if id as usize != i {
                return Err(Error::CorruptFile(format!("candidate {i} has id {id}")));
            }
            let entity = r.u32()?;
            let kind = Kind::from_u8(r.u8()?).ok_or_else(|| Error::CorruptFile("unknown candidate kind".into()))?;
            let mut refs = [(0u32, 0u32); 3];
            for slot in &mut refs {
                *slot = (r.u32()?, r.u32()?);
            }
            flat.extend(r.tensor::<T>(dim)?);
            rows.push((id, entity, kind, refs));
        }
        let pool_len = r.u64()? as usize;
        let pool = r.bytes(pool_len)?;
        r.expect_end()?;

        let language = get_str(pool, lang_ref.0, lang_ref.1)?;
        let entities = entity_refs
            .into_iter()
            .map(|[id, name, city]| {
                Ok(EntityInfo {
                    entity_id: get_str(pool, id.0, id.1)?,
                    name: get_str(pool, name.0, name.1)?,
                    city: get_str(pool, city.0, city.1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let candidates = rows
            .into_iter()
            .map(|(candidate_id, entity, kind, [text, english, photo])| {
                Ok(Candidate {
                    candidate_id,
                    entity,
                    kind,
                    text: get_str(pool, text.0, text.1)?,
                    english: get_opt(pool, english.0, english.1)?,
                    photo_ref: get_opt(pool, photo.0, photo.1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let vectors = Array2::from_shape_vec((n, dim), flat).expect("length checked by reader");
        let index = Self::assemble(language, scale, entities, candidates, vectors)
            .map_err(|e| Error::CorruptFile(e.to_string()))?;
        let s = index.stats;
        if stored != [s.n_entities, s.n_photos, s.n_fact_sentences, s.n_review_sentences, s.n_menu_items] {
            return Err(Error::CorruptFile("stats block disagrees with candidate table".into()));
        }
        Ok(index)
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
    use crate::encoding::Encoding;
    use crate::index::{Entity, KindSet, ResponsePool};

    fn index() -> ResponseIndex<f32> {
        let mut pool = ResponsePool::new("de");
        let mut e = Entity::new("a", "Zum Löwen");
        e.city = "Berlin".into();
        let a = pool.add_entity(e.info());
        pool.push_text(a, Kind::Review, "Sehr gut.");
        pool.entries[0].english = Some("Very good.".into());
        pool.push_text(a, Kind::Menu, "Schnitzel");
        let v = vec![
            Encoding::normalize(vec![1.0f32, 2.0, 3.0]).into_vec(),
            Encoding::normalize(vec![0.0f32, 1.0, 0.0]).into_vec(),
        ];
        ResponseIndex::from_encoded(&pool, v, 3.5).unwrap()
    }

    #[test]
    fn round_trip() {
        let idx = index();
        let back = ResponseIndex::<f32>::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back.candidates(), idx.candidates());
        assert_eq!(back.entities(), idx.entities());
        assert_eq!(back.vectors(), idx.vectors());
        assert_eq!(back.stats(), idx.stats());
        assert_eq!(back.language(), "de");
        let q = Encoding::normalize(vec![0.2f32, 0.9, 0.1]);
        let f = idx.filter_all(KindSet::ALL);
        assert_eq!(back.search(&q, &f, 2).unwrap(), idx.search(&q, &f, 2).unwrap());
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = index().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(ResponseIndex::<f32>::from_bytes(&bytes), Err(Error::CorruptFile(_))));
        let bytes = index().to_bytes();
        assert!(matches!(
            ResponseIndex::<f32>::from_bytes(&bytes[..bytes.len() - 7]),
            Err(Error::CorruptFile(_))
        ));
        assert!(matches!(
            ResponseIndex::<f32>::from_bytes(b"PFNDxxxxxxxxxxxx"),
            Err(Error::FormatVersionMismatch(_))
        ));
    }
}
