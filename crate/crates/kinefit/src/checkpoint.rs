//! Binary checkpoints of a fitted session: network weights and the body
//! scale. Layout, all little-endian:
//!
//! ```text
//! "KFCK" u32:version u32:trials
//! per trial: u32:hidden_layers u32:width u32:bands f64:translation_scale
//!            f64:start f64:duration u32:layers
//!            per layer: u32:inputs u32:outputs f64[inputs*outputs] f64[outputs]
//! f64[8]:scales u32:sites f64[sites*3]:offsets
//! ```

use std::path::Path;

use kinefit_core::implicit::{Layer, NetConfig, PositionalEncoding, TrajectoryNet};
use kinefit_core::skeleton::{BodyScale, SkeletonDefinition, NUM_SCALE_GROUPS};

use crate::error::{Error, Result};
use crate::formats::write_atomic;

const MAGIC: &[u8; 4] = b"KFCK";
const CHECKPOINT_VERSION: u32 = 1;
/// Guards allocations against corrupt length fields.
const MAX_LEN: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub nets: Vec<TrajectoryNet>,
    pub scale: BodyScale,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        let v = u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize;
        (v <= MAX_LEN).then_some(v)
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        put_u32(&mut out, self.nets.len());
        for net in &self.nets {
            let c = &net.config;
            put_u32(&mut out, c.hidden_layers);
            put_u32(&mut out, c.width);
            put_u32(&mut out, c.bands);
            put_f64s(&mut out, &[c.translation_scale, net.encoding.start, net.encoding.duration]);
            put_u32(&mut out, net.layers.len());
            for l in &net.layers {
                put_u32(&mut out, l.inputs);
                put_u32(&mut out, l.outputs);
                put_f64s(&mut out, &l.weight);
                put_f64s(&mut out, &l.bias);
            }
        }
        put_f64s(&mut out, &self.scale.scales);
        put_u32(&mut out, self.scale.offsets.len());
        for o in &self.scale.offsets {
            put_f64s(&mut out, o);
        }
        out
    }

    pub fn from_bytes(def: &SkeletonDefinition, bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        let truncated = || "truncated or corrupt checkpoint".to_string();
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err("not a kinefit checkpoint".into());
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let trials = r.u32().ok_or_else(truncated)?;
        let mut nets = Vec::with_capacity(trials.min(1024));
        for _ in 0..trials {
            let (hidden_layers, width, bands) = (r.u32().ok_or_else(truncated)?, r.u32().ok_or_else(truncated)?, r.u32().ok_or_else(truncated)?);
            let (translation_scale, start, duration) = (r.f64().ok_or_else(truncated)?, r.f64().ok_or_else(truncated)?, r.f64().ok_or_else(truncated)?);
            let config = NetConfig { hidden_layers, width, bands, translation_scale };
            let n = r.u32().ok_or_else(truncated)?;
            let mut layers = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let (inputs, outputs) = (r.u32().ok_or_else(truncated)?, r.u32().ok_or_else(truncated)?);
                let weight = r.f64s(inputs.checked_mul(outputs).ok_or_else(truncated)?).ok_or_else(truncated)?;
                let bias = r.f64s(outputs).ok_or_else(truncated)?;
                layers.push(Layer { inputs, outputs, weight, bias });
            }
            let encoding = PositionalEncoding { bands, start, duration };
            nets.push(TrajectoryNet::from_parts(def, config, encoding, layers).map_err(|e| e.to_string())?);
        }
        let mut scale = BodyScale::default();
        let s = r.f64s(NUM_SCALE_GROUPS).ok_or_else(truncated)?;
        scale.scales.copy_from_slice(&s);
        let sites = r.u32().ok_or_else(truncated)?;
        let flat = r.f64s(sites.checked_mul(3).ok_or_else(truncated)?).ok_or_else(truncated)?;
        scale.offsets = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        if r.pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        scale.validate().map_err(|e| e.to_string())?;
        Ok(Self { nets, scale })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(def: &SkeletonDefinition, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(def, &bytes).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (SkeletonDefinition, Checkpoint) {
        let def = SkeletonDefinition::default_model();
        let cfg = NetConfig { hidden_layers: 2, width: 8, bands: 3, ..NetConfig::default() };
        let mut a = TrajectoryNet::new(&def, cfg, 0.0, 2.0, 1).unwrap();
        a.output_bias_mut()[5] = 0.25;
        let b = TrajectoryNet::new(&def, cfg, 1.0, 3.5, 2).unwrap();
        let mut scale = BodyScale::default();
        scale.scales[2] = 1.1;
        scale.offsets[4] = [0.01, -0.02, 0.003];
        (def, Checkpoint { nets: vec![a, b], scale })
    }

    #[test]
    fn round_trip_is_exact() {
        let (def, ck) = sample();
        let back = Checkpoint::from_bytes(&def, &ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.nets[1].evaluate(2.0).unwrap().0, ck.nets[1].evaluate(2.0).unwrap().0);
    }

    #[test]
    fn truncation_is_detected() {
        let (def, ck) = sample();
        let bytes = ck.to_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&def, &bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&def, &extra).is_err());
    }
}
