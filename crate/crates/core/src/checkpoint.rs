//! The "ESNN1" checkpoint format. All integers are little-endian.
//!
//! ```text
//! magic      "ESNN1"
//! version    u16            (1)
//! precision  u8             0 = f32, 1 = int8
//! fused      u8
//! channels   u32
//! depth      u32
//! layers     u32            despeckle layers followed by deblur layers
//! records    layers x { branch u8, kind u8, out_c u32, in_c u32, kh u32, kw u32 }
//! int8 only:
//!   has_acts u8
//!   per layer: f32 weight scale          (parameter layers)
//!              f32 scale, i32 zero point (activation slots, if has_acts)
//! payloads   per parameter layer: weights (f32 or i8), then f32 bias
//! crc32      u32            over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ActQuant, LayerKind, LayerParams, Model};
use crate::nn::Tensor4;
use crate::quant::{slot_layers, QuantLayer, QuantParams, QuantWeight, QuantizedModel};

pub const MAGIC: &[u8; 5] = b"ESNN1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Precision {
    Float32 = 0,
    Int8Quantized = 1,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Float32 => "f32",
            Precision::Int8Quantized => "int8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Float(Model),
    Int8(QuantizedModel),
}

impl Checkpoint {
    pub fn precision(&self) -> Precision {
        match self {
            Checkpoint::Float(_) => Precision::Float32,
            Checkpoint::Int8(_) => Precision::Int8Quantized,
        }
    }

    /// Bytes taken by weight tensors (biases and scale records excluded).
    pub fn weight_payload_bytes(&self) -> usize {
        match self {
            Checkpoint::Float(m) => {
                m.despeckle.iter().chain(&m.deblur).map(|l| l.weight.as_ref().map_or(0, |w| 4 * w.len())).sum()
            }
            Checkpoint::Int8(q) => {
                q.despeckle.iter().chain(&q.deblur).map(|l| l.weight.as_ref().map_or(0, |w| w.q.len())).sum()
            }
        }
    }

    /// The float model, dequantizing int8 weights if needed.
    pub fn float_model(&self) -> Model {
        match self {
            Checkpoint::Float(m) => m.clone(),
            Checkpoint::Int8(q) => q.dequantized(),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::TruncatedFile)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or(Error::TruncatedFile)?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

struct Record {
    branch: u8,
    kind: LayerKind,
    ext: [u32; 4],
}

fn header(w: &mut Writer, p: Precision, fused: bool, channels: usize, depth: usize, recs: &[Record]) {
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(p as u8);
    w.u8(fused as u8);
    w.u32(channels as u32);
    w.u32(depth as u32);
    w.u32(recs.len() as u32);
    for r in recs {
        w.u8(r.branch);
        w.u8(r.kind as u8);
        for e in r.ext {
            w.u32(e);
        }
    }
}

fn records<L>(d: &[L], b: &[L], f: impl Fn(&L) -> (LayerKind, [u32; 4])) -> Vec<Record> {
    let one = |branch: u8, l: &L| {
        let (kind, ext) = f(l);
        Record { branch, kind, ext }
    };
    d.iter().map(|l| one(0, l)).chain(b.iter().map(|l| one(1, l))).collect()
}

fn finish(mut w: Writer) -> Vec<u8> {
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match ckpt {
        Checkpoint::Float(m) => {
            let recs = records(&m.despeckle, &m.deblur, |l| (l.kind, l.extents()));
            header(&mut w, Precision::Float32, m.fused, m.channels, m.depth, &recs);
            for l in m.despeckle.iter().chain(&m.deblur) {
                if let Some(wt) = &l.weight {
                    w.f32s(&wt.data);
                    w.f32s(&l.bias);
                }
            }
        }
        Checkpoint::Int8(q) => {
            let ext = |l: &QuantLayer| {
                let k = l.kind.kernel() as u32;
                (l.kind, [l.out_c as u32, l.in_c as u32, k, k])
            };
            let recs = records(&q.despeckle, &q.deblur, ext);
            header(&mut w, Precision::Int8Quantized, q.fused, q.channels, q.depth, &recs);
            w.u8(q.acts.is_some() as u8);
            let acts = q.acts.as_ref();
            for (layers, a) in [(&q.despeckle, acts.map(|a| &a.despeckle)), (&q.deblur, acts.map(|a| &a.deblur))] {
                for (i, l) in layers.iter().enumerate() {
                    if let Some(wt) = &l.weight {
                        w.0.extend_from_slice(&wt.scale.to_le_bytes());
                    }
                    if let Some(Some(act)) = a.map(|a| a[i]) {
                        w.0.extend_from_slice(&act.scale.to_le_bytes());
                        w.i32(act.zero);
                    }
                }
            }
            for l in q.despeckle.iter().chain(&q.deblur) {
                if let Some(wt) = &l.weight {
                    w.0.extend(wt.q.iter().map(|&v| v as u8));
                    w.f32s(&l.bias);
                }
            }
        }
    }
    finish(w)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(if MAGIC.starts_with(bytes) { Error::TruncatedFile } else { Error::BadMagic });
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    if bytes.len() < r.pos + 4 {
        return Err(Error::TruncatedFile);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::ChecksumError);
    }
    let mut r = Reader { buf: body, pos: r.pos };
    let precision = match r.u8()? {
        0 => Precision::Float32,
        1 => Precision::Int8Quantized,
        t => return Err(Error::Malformed(format!("unknown precision tag {t}"))),
    };
    let fused = r.u8()? != 0;
    let channels = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut recs = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let branch = r.u8()?;
        if branch > 1 {
            return Err(Error::Malformed(format!("unknown branch tag {branch}")));
        }
        let kind = LayerKind::from_tag(r.u8()?)?;
        let ext = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        if ext[2] != kind.kernel() as u32 || ext[3] != ext[2] {
            return Err(Error::Malformed(format!("kernel extents {ext:?} for {kind:?}")));
        }
        recs.push(Record { branch, kind, ext });
    }
    if recs.windows(2).any(|w| w[0].branch > w[1].branch) {
        return Err(Error::Malformed("layer records are not grouped by branch".into()));
    }
    let split = recs.iter().position(|r| r.branch == 1).unwrap_or(recs.len());
    let ckpt = match precision {
        Precision::Float32 => {
            let mut layers = Vec::with_capacity(recs.len());
            for rec in &recs {
                let [o, i, k, _] = rec.ext.map(|e| e as usize);
                let mut l = LayerParams::<f32>::plain(rec.kind, i, o);
                if rec.kind.has_params() {
                    let data = r.f32s(o * i * k * k)?;
                    l.weight = Some(Tensor4 { n: o, c: i, h: k, w: k, data });
                    l.bias = r.f32s(o)?;
                }
                layers.push(l);
            }
            let deblur = layers.split_off(split);
            let m = Model { channels, depth, despeckle: layers, deblur, fused };
            m.validate()?;
            Checkpoint::Float(m)
        }
        Precision::Int8Quantized => {
            let has_acts = r.u8()? != 0;
            let (d, b) = recs.split_at(split);
            let mut scales = Vec::new();
            let mut acts: [Vec<Option<ActQuant>>; 2] = [Vec::new(), Vec::new()];
            for (bi, part) in [d, b].into_iter().enumerate() {
                let plain: Vec<LayerParams<f32>> = part
                    .iter()
                    .map(|rec| LayerParams::plain(rec.kind, rec.ext[1] as usize, rec.ext[0] as usize))
                    .collect();
                let slots = slot_layers(&plain);
                for (i, rec) in part.iter().enumerate() {
                    if rec.kind.has_params() {
                        scales.push(r.f32()?);
                    }
                    let a =
                        if has_acts && slots[i] { Some(ActQuant { scale: r.f32()?, zero: r.i32()? }) } else { None };
                    acts[bi].push(a);
                }
            }
            let mut scales = scales.into_iter();
            let mut layers = Vec::with_capacity(recs.len());
            for rec in &recs {
                let [o, i, k, _] = rec.ext.map(|e| e as usize);
                let mut l = QuantLayer { kind: rec.kind, in_c: i, out_c: o, weight: None, bias: Vec::new() };
                if rec.kind.has_params() {
                    let q = r.take(o * i * k * k)?.iter().map(|&v| v as i8).collect();
                    let scale = scales.next().ok_or(Error::TruncatedFile)?;
                    if !(scale > 0.0 && scale.is_finite()) {
                        return Err(Error::Malformed(format!("weight scale {scale}")));
                    }
                    l.weight = Some(QuantWeight { shape: [o, i, k, k], q, scale });
                    l.bias = r.f32s(o)?;
                }
                layers.push(l);
            }
            let deblur = layers.split_off(split);
            let [ad, ab] = acts;
            let q = QuantizedModel {
                channels,
                depth,
                fused,
                despeckle: layers,
                deblur,
                acts: has_acts.then_some(QuantParams { despeckle: ad, deblur: ab }),
            };
            let fm = q.dequantized();
            fm.validate()?;
            if let Some(a) = &q.acts {
                a.validate(&fm)?;
            }
            Checkpoint::Int8(q)
        }
    };
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(ckpt)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Domain, Image};
    use crate::net::build_seeded;
    use crate::quant::{calibrate, quantize};
    use crate::rng::Stream;

    fn int8_model(seed: u64) -> QuantizedModel {
        let m = build_seeded(seed);
        let mut s = Stream::new(seed);
        let img = Image::new(32, 32, (0..1024).map(|_| s.below(256) as f32).collect(), Domain::Display8).unwrap();
        let qp = calibrate(&m, &[img]).unwrap().params(&m).unwrap();
        quantize(&m, Some(&qp)).unwrap()
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let mut m = build_seeded(11);
        m.despeckle[1].bias[3] = -0.0;
        m.fused = true;
        let bytes = encode(&Checkpoint::Float(m.clone()));
        assert_eq!(&bytes[..5], b"ESNN1");
        let Checkpoint::Float(back) = decode(&bytes).unwrap() else { panic!("precision changed") };
        assert_eq!(back, m);
        assert!(back.despeckle[1].bias[3].is_sign_negative());
        assert_eq!(encode(&Checkpoint::Float(back)), bytes);
    }

    #[test]
    fn int8_round_trip_with_and_without_acts() {
        let q = int8_model(12);
        let c = Checkpoint::Int8(q.clone());
        assert_eq!(decode(&encode(&c)).unwrap(), c);
        let w = Checkpoint::Int8(QuantizedModel { acts: None, ..q });
        assert_eq!(decode(&encode(&w)).unwrap(), w);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&Checkpoint::Float(build_seeded(1)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(decode(&bad), Err(Error::VersionMismatch { found: 9, expected: 1 })));
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode(&bad), Err(Error::ChecksumError)));
        for cut in [0, 3, 6, 20, bytes.len() - 1] {
            let r = decode(&bytes[..cut]);
            assert!(matches!(r, Err(Error::TruncatedFile) | Err(Error::ChecksumError)), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn int8_weight_payload_is_a_quarter() {
        let q = int8_model(13);
        let f = Checkpoint::Float(build_seeded(13));
        let i = Checkpoint::Int8(q);
        assert_eq!(f.weight_payload_bytes(), 4 * i.weight_payload_bytes());
        // the files differ by the weight bytes saved, less the scale records
        let (fb, ib) = (encode(&f).len(), encode(&i).len());
        let saved = f.weight_payload_bytes() - i.weight_payload_bytes();
        assert!(fb - ib <= saved && fb - ib + 1024 >= saved, "{fb} {ib}");
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join(format!("esnn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.esnn");
        let c = Checkpoint::Float(build_seeded(3));
        save(&c, &p).unwrap();
        assert_eq!(load(&p).unwrap(), c);
        assert!(matches!(load(&dir.join("missing")), Err(Error::Io { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
