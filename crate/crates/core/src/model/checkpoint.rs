// Binary checkpoint, all integers u32 and all floats f32, little-endian:
//
//   magic "TSCL" | version | D | n_blocks | r | n_seen | seen ids...
//   channels | patch_len | hidden | adapter scale | logit scale | margin
//   n_heads | per head: task, n_classes, class ids...
//   has_feature_map | has_dcn
//   n_sections | per section: n_floats, floats...
//
// Sections follow declaration order: embed, embed_bias, (w1, b1, w2) per
// block, (down, up) per adapter, one weight matrix per head, then the drift
// fixed feature map and the drift compensator when present.

use std::fs;
use std::path::Path;

use super::{Adapter, Block, CosineHead, FrozenBackbone, HeadBank, ModelState};
use crate::error::{contract, io_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSCL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub dcn: Option<Tensor>,
}

#[derive(Default)]
pub(crate) struct Writer(Vec<u8>);

impl Writer {
    pub fn u32(&mut self, v: usize) -> &mut Self {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(b);
        self
    }

    /// `n_sections` then each section as `n_floats, floats...`.
    pub fn sections(&mut self, sections: &[&[f32]]) -> &mut Self {
        self.u32(sections.len());
        for s in sections {
            self.u32(s.len());
            for &v in *s {
                self.f32(v);
            }
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                file: "checkpoint".into(),
                row: self.pos,
                msg: "unexpected end of data".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn sections(&mut self) -> Result<Vec<Vec<f32>>> {
        let n = self.u32()?;
        (0..n)
            .map(|_| {
                let len = self.u32()?;
                (0..len).map(|_| self.f32()).collect()
            })
            .collect()
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_checkpoint(model: &ModelState, dcn: Option<&Tensor>) -> Vec<u8> {
    let bb = &model.backbone;
    let r = model.adapters.first().map(|a| a.down.shape()[1]).unwrap_or(0);
    let mut w = Writer::default();
    w.bytes(MAGIC)
        .u32(VERSION as usize)
        .u32(bb.embed_dim)
        .u32(bb.blocks.len())
        .u32(r);
    let seen = model.heads.seen_classes();
    w.u32(seen.len());
    for c in seen {
        w.u32(c);
    }
    w.u32(bb.channels).u32(bb.patch_len).u32(bb.hidden_dim());
    w.f32(model.adapters.first().map(|a| a.scale).unwrap_or(0.0))
        .f32(model.heads.logit_scale)
        .f32(model.heads.margin);
    w.u32(model.heads.heads.len());
    for h in &model.heads.heads {
        w.u32(h.task).u32(h.classes.len());
        for &c in &h.classes {
            w.u32(c);
        }
    }
    w.u32(model.feature_map.is_some() as usize);
    w.u32(dcn.is_some() as usize);

    let mut sections: Vec<&[f32]> = bb.tensors().into_iter().map(Tensor::data).collect();
    for a in &model.adapters {
        sections.push(a.down.data());
        sections.push(a.up.data());
    }
    for h in &model.heads.heads {
        sections.push(h.weights.data());
    }
    if let Some(m) = &model.feature_map {
        sections.push(m.data());
    }
    if let Some(d) = dcn {
        sections.push(d.data());
    }
    w.sections(&sections);
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != MAGIC {
        return contract("not a checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return contract(format!("unsupported checkpoint version {version}"));
    }
    let d = r.u32()?;
    let n_blocks = r.u32()?;
    let rank = r.u32()?;
    let n_seen = r.u32()?;
    let seen: Vec<usize> = (0..n_seen).map(|_| r.u32()).collect::<Result<_>>()?;
    let channels = r.u32()?;
    let patch_len = r.u32()?;
    let hidden = r.u32()?;
    let scale = r.f32()?;
    let logit_scale = r.f32()?;
    let margin = r.f32()?;
    let n_heads = r.u32()?;
    let mut layout = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let task = r.u32()?;
        let n = r.u32()?;
        let classes: Vec<usize> = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        layout.push((task, classes));
    }
    let has_map = r.u32()? != 0;
    let has_dcn = r.u32()? != 0;
    let mut sections = r.sections()?.into_iter();
    if !r.at_end() {
        return contract("trailing bytes after checkpoint sections");
    }
    let mut next = |shape: &[usize]| -> Result<Tensor> {
        let data = sections
            .next()
            .ok_or_else(|| Error::Contract("checkpoint is missing a section".into()))?;
        Tensor::new(shape.to_vec(), data)
    };

    let embed = next(&[channels * patch_len, d])?;
    let embed_bias = next(&[1, d])?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        blocks.push(Block {
            w1: next(&[d, hidden])?,
            b1: next(&[1, hidden])?,
            w2: next(&[hidden, d])?,
        });
    }
    let backbone = FrozenBackbone::from_parts(channels, patch_len, embed, embed_bias, blocks);
    let mut adapters = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        adapters.push(Adapter {
            down: next(&[d, rank])?.with_grad(true),
            up: next(&[rank, d])?.with_grad(true),
            scale,
        });
    }
    let mut heads = HeadBank::new(logit_scale, margin);
    for (task, classes) in layout {
        let weights = next(&[classes.len(), d])?.with_grad(true);
        heads.heads.push(CosineHead {
            task,
            classes,
            weights,
        });
    }
    let feature_map = if has_map { Some(next(&[d, d])?) } else { None };
    let dcn = if has_dcn { Some(next(&[d, d])?) } else { None };
    let model = ModelState {
        backbone,
        adapters,
        heads,
        feature_map,
    };
    if model.heads.seen_classes() != seen {
        return contract("checkpoint seen-class list disagrees with head layout");
    }
    Ok(Checkpoint { model, dcn })
}

pub fn save_checkpoint(path: &Path, model: &ModelState, dcn: Option<&Tensor>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, dcn)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_with_heads_and_dcn() {
        let mut m = ModelState::new(&ModelConfig::default(), 3, 32, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.heads.add_head(1, &[4, 1], 32, &mut rng).unwrap();
        m.heads.add_head(2, &[0, 2], 32, &mut rng).unwrap();
        m.compose_feature_map(&Tensor::from_fn(&[32, 32], |i| (i % 7) as f32)).unwrap();
        let dcn = Tensor::from_fn(&[32, 32], |i| i as f32 * 1e-3);
        let bytes = encode_checkpoint(&m, Some(&dcn));
        assert_eq!(&bytes[..4], MAGIC);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.model, m);
        assert!(back.dcn.unwrap().bit_eq(&dcn));
    }

    #[test]
    fn truncated_rejected() {
        let m = ModelState::new(&ModelConfig::default(), 1, 16, 0).unwrap();
        let bytes = encode_checkpoint(&m, None);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"NOPE").is_err());
    }
}
