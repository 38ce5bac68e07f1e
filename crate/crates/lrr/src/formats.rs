//! Binary files: `EMB1` embedding banks and `LRR1` model checkpoints.
//!
//! `EMB1`: magic, `u32` dimension `M`, `u32` entry count, then per entry a
//! `u16` label length, the UTF-8 label and `M` `f32` values. All integers and
//! reals are little-endian.
//!
//! `LRR1`: magic, `u32` version, `u8` module tag, `u32`-length spec block,
//! training metadata (`u64` seed, `u32` epoch, `f32` validation loss), `u64`
//! value count and the `f32` parameter blob, then a CRC32 of everything
//! before it.

use std::fs;
use std::path::Path;

use lrr_core::guidance::{EmbeddingBank, TextEmbedding};
use lrr_core::nets::{EncoderSpec, Params};
use lrr_core::resampler::{LResampleParams, LResampleSpec};
use lrr_core::stir::{StirParams, StirSpec};
use lrr_core::tracker::{TrackerParams, TrackerSpec};

pub const BANK_MAGIC: &[u8; 4] = b"EMB1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LRR1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated file: needed {needed} bytes at offset {at}")]
    Truncated { at: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content: {0}")]
    Malformed(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { found: &'static str, expected: &'static str },
    #[error(transparent)]
    Model(#[from] lrr_core::Error),
}

type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(FormatError::Truncated { at: self.at, needed: n });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Malformed("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(FormatError::Malformed(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

/// Serializes a bank.
pub fn encode_bank(bank: &EmbeddingBank) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    for e in bank.entries() {
        let label = e.label.as_bytes();
        let len = u16::try_from(label.len()).map_err(|_| FormatError::Malformed(format!("label of {} bytes", label.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(label);
        for v in &e.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a bank. An empty bank parses; selection on it fails later.
pub fn decode_bank(buf: &[u8]) -> Result<EmbeddingBank> {
    let mut r = Reader::new(buf);
    let magic = r.array::<4>()?;
    if &magic != BANK_MAGIC {
        return Err(FormatError::Magic(magic));
    }
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let label = std::str::from_utf8(r.take(len)?).map_err(|e| FormatError::Malformed(format!("label: {}", e)))?;
        entries.push(TextEmbedding { label: label.to_string(), vector: r.f32s(dim)? });
    }
    r.finish()?;
    Ok(EmbeddingBank::from_entries(dim, entries)?)
}

pub fn save_bank(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    fs::write(path, encode_bank(bank)?).map_err(io_err(path))
}

pub fn load_bank(path: &Path) -> Result<EmbeddingBank> {
    decode_bank(&fs::read(path).map_err(io_err(path))?)
}

/// Model stored in a checkpoint, with its sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModuleSpec {
    Stir(StirSpec),
    LResample(LResampleSpec),
    Tracker(TrackerSpec),
}

impl ModuleSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleSpec::Stir(_) => "stir",
            ModuleSpec::LResample(_) => "lresample",
            ModuleSpec::Tracker(_) => "tracker",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ModuleSpec::Stir(_) => 1,
            ModuleSpec::LResample(_) => 2,
            ModuleSpec::Tracker(_) => 3,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let mut u = |v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
        match self {
            ModuleSpec::Stir(s) => {
                for v in [s.frames, s.encoder.channels, s.encoder.blocks, s.hidden, s.layers] {
                    u(v);
                }
            }
            ModuleSpec::LResample(s) => {
                for v in [s.features, s.text_dim, s.hidden] {
                    u(v);
                }
                b.extend_from_slice(&s.s_xy.to_le_bytes());
                b.extend_from_slice(&s.s_tau.to_le_bytes());
            }
            ModuleSpec::Tracker(s) => {
                for v in [s.features, s.template, s.search] {
                    u(v);
                }
                b.extend_from_slice(&s.context.to_le_bytes());
                b.extend_from_slice(&s.kappa.to_le_bytes());
            }
        }
        b
    }

    fn decode(tag: u8, block: &[u8]) -> Result<Self> {
        let mut r = Reader::new(block);
        let spec = match tag {
            1 => {
                let mut u = || r.u32().map(|v| v as usize);
                let (frames, channels, blocks, hidden, layers) = (u()?, u()?, u()?, u()?, u()?);
                ModuleSpec::Stir(StirSpec { frames, encoder: EncoderSpec { channels, blocks }, hidden, layers })
            }
            2 => {
                let (features, text_dim, hidden) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
                let (s_xy, s_tau) = (r.f32()?, r.f32()?);
                ModuleSpec::LResample(LResampleSpec { features, text_dim, hidden, s_xy, s_tau })
            }
            3 => {
                let (features, template, search) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
                let (context, kappa) = (r.f32()?, r.f32()?);
                ModuleSpec::Tracker(TrackerSpec { features, template, search, context, kappa })
            }
            t => return Err(FormatError::Malformed(format!("unknown module tag {}", t))),
        };
        r.finish()?;
        Ok(spec)
    }
}

/// Training metadata kept with a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub epoch: u32,
    pub val_loss: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModuleSpec,
    pub meta: TrainMeta,
    pub blob: Vec<f32>,
}

fn flatten<P: Params>(p: &P) -> Vec<f32> {
    p.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn fill<P: Params>(p: &mut P, blob: &[f32]) -> Result<()> {
    let need = p.num_values();
    if blob.len() != need {
        return Err(FormatError::Malformed(format!("blob of {} values, model needs {}", blob.len(), need)));
    }
    let mut at = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&blob[at..at + n]);
        at += n;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_stir(p: &StirParams, meta: TrainMeta) -> Self {
        Self { spec: ModuleSpec::Stir(p.spec()), meta, blob: flatten(p) }
    }

    pub fn from_lresample(p: &LResampleParams, meta: TrainMeta) -> Self {
        Self { spec: ModuleSpec::LResample(p.spec), meta, blob: flatten(p) }
    }

    pub fn from_tracker(p: &TrackerParams, meta: TrainMeta) -> Self {
        Self { spec: ModuleSpec::Tracker(p.spec), meta, blob: flatten(p) }
    }

    fn wrong(&self, expected: &'static str) -> FormatError {
        FormatError::WrongKind { found: self.spec.name(), expected }
    }

    pub fn to_stir(&self) -> Result<StirParams> {
        let ModuleSpec::Stir(s) = self.spec else { return Err(self.wrong("stir")) };
        let mut p = StirParams::init(s, 0)?;
        fill(&mut p, &self.blob)?;
        Ok(p)
    }

    pub fn to_lresample(&self) -> Result<LResampleParams> {
        let ModuleSpec::LResample(s) = self.spec else { return Err(self.wrong("lresample")) };
        let mut p = LResampleParams::init(s, 0)?;
        fill(&mut p, &self.blob)?;
        Ok(p)
    }

    pub fn to_tracker(&self) -> Result<TrackerParams> {
        let ModuleSpec::Tracker(s) = self.spec else { return Err(self.wrong("tracker")) };
        let mut p = TrackerParams::init(s, 0)?;
        fill(&mut p, &self.blob)?;
        Ok(p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.blob.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.spec.tag());
        let block = self.spec.encode();
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(&block);
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.val_loss.to_le_bytes());
        out.extend_from_slice(&(self.blob.len() as u64).to_le_bytes());
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 {
            return Err(FormatError::Truncated { at: 0, needed: 8 });
        }
        let magic: [u8; 4] = buf[..4].try_into().expect("length checked");
        if &magic != CHECKPOINT_MAGIC {
            return Err(FormatError::Magic(magic));
        }
        let (body, footer) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        let mut r = Reader::new(body);
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version(version));
        }
        let tag = r.u8()?;
        let len = r.u32()? as usize;
        let spec = ModuleSpec::decode(tag, r.take(len)?)?;
        let meta = TrainMeta { seed: r.u64()?, epoch: r.u32()?, val_loss: r.f32()? };
        let n = usize::try_from(r.u64()?).map_err(|_| FormatError::Malformed("value count".into()))?;
        let blob = r.f32s(n)?;
        r.finish()?;
        Ok(Self { spec, meta, blob })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path).map_err(io_err(path))?)
}
