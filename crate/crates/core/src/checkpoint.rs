//! Binary checkpoint format.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic "FGCK" | version u32 | fused u8 | config text (str) | meta | mode u8 | body (seq)
//! str    = len u64, UTF-8 bytes
//! tensor = n, c, h, w as u64, then n·c·h·w f32 values
//! seq    = count u64, then per item: name (str), tag u8, payload
//! ```
//!
//! Payloads store exactly the fields needed to rebuild each node; gradients
//! and tapes are not stored. Every float is written bit-exactly, so loading and
//! saving again reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::convnet::{
    BatchNorm, Conv2d, ConvParams, Dropout, FbnConvLayer, FusionOrigin, GlobalAvgPool, Linear, MaxPool, Relu,
    SqueezeExcite,
};
use crate::error::{Error, Result};
use crate::graph::{Branches, ChannelShuffle, Item, NetMeta, Network, Node, Seq};
use crate::norm::{GroupSpec, Mode, NormState};
use crate::param::{Param, ParamKind};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Serialized run configuration (opaque to this module).
    pub config: String,
    pub fused: bool,
    pub net: Network<f32>,
}

mod tag {
    pub const CONV: u8 = 1;
    pub const BATCH_NORM: u8 = 2;
    pub const FBN_CONV: u8 = 3;
    pub const RELU: u8 = 4;
    pub const MAX_POOL: u8 = 5;
    pub const GLOBAL_POOL: u8 = 6;
    pub const LINEAR: u8 = 7;
    pub const DROPOUT: u8 = 8;
    pub const SQUEEZE_EXCITE: u8 = 9;
    pub const SEQ: u8 = 10;
    pub const RESIDUAL: u8 = 11;
    pub const BRANCHES: u8 = 12;
    pub const CHANNEL_SHUFFLE: u8 = 13;
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        for d in t.shape().dims() {
            self.usize(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fn norm(&mut self, st: &NormState<f32>) {
        self.tensor(&st.gamma.value);
        self.tensor(&st.beta.value);
        self.tensor(&st.running_mean);
        self.tensor(&st.running_var);
        self.f64(st.epsilon);
        self.f64(st.momentum);
        self.bool(st.affine);
    }
    fn group_spec(&mut self, g: GroupSpec) {
        match g {
            GroupSpec::FixedGroups(n) => {
                self.u8(0);
                self.usize(n);
            }
            GroupSpec::ChannelsPerGroup(n) => {
                self.u8(1);
                self.usize(n);
            }
        }
    }
    fn linear(&mut self, l: &Linear<f32>) {
        self.tensor(&l.weight.value);
        self.tensor(&l.bias.value);
    }
    fn seq(&mut self, s: &Seq<f32>) {
        self.usize(s.items.len());
        for it in &s.items {
            self.str(&it.name);
            self.node(&it.node);
        }
    }
    fn node(&mut self, n: &Node<f32>) {
        match n {
            Node::Conv(c) => {
                self.u8(tag::CONV);
                let p = &c.params;
                self.tensor(&p.weight.value);
                self.bool(p.bias.is_some());
                if let Some(b) = &p.bias {
                    self.tensor(&b.value);
                }
                self.usize(p.stride);
                self.usize(p.padding);
                self.usize(p.groups);
                self.bool(c.origin.is_some());
                if let Some(o) = &c.origin {
                    self.usize(o.sources.len());
                    o.sources.iter().for_each(|s| self.str(s));
                    self.usize(o.groups);
                }
            }
            Node::BatchNorm(b) => {
                self.u8(tag::BATCH_NORM);
                self.norm(&b.state);
            }
            Node::FbnConv(l) => {
                self.u8(tag::FBN_CONV);
                self.usize(l.weights.len());
                l.weights.iter().for_each(|w| self.tensor(&w.value));
                self.usize(l.stride);
                self.usize(l.padding);
                self.norm(&l.norm);
                self.group_spec(l.group_spec);
            }
            Node::Relu(_) => self.u8(tag::RELU),
            Node::MaxPool(p) => {
                self.u8(tag::MAX_POOL);
                self.usize(p.kernel);
                self.usize(p.stride);
                self.usize(p.padding);
            }
            Node::GlobalAvgPool(_) => self.u8(tag::GLOBAL_POOL),
            Node::Linear(l) => {
                self.u8(tag::LINEAR);
                self.linear(l);
            }
            Node::Dropout(d) => {
                self.u8(tag::DROPOUT);
                self.f64(d.rate);
                self.u64(d.rng.seed());
                self.u64(d.rng.position());
            }
            Node::SqueezeExcite(se) => {
                self.u8(tag::SQUEEZE_EXCITE);
                self.linear(&se.reduce);
                self.linear(&se.expand);
            }
            Node::Seq(s) => {
                self.u8(tag::SEQ);
                self.seq(s);
            }
            Node::Residual(s) => {
                self.u8(tag::RESIDUAL);
                self.seq(s);
            }
            Node::Branches(b) => {
                self.u8(tag::BRANCHES);
                self.bool(b.split);
                self.seq(&b.left);
                self.seq(&b.right);
            }
            Node::ChannelShuffle(s) => {
                self.u8(tag::CHANNEL_SHUFFLE);
                self.usize(s.groups);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg: format!("at byte {}: {}", self.pos, msg.into()) }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file (need {n} more bytes)")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("invalid boolean byte {v}"))),
        }
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("value {v} too large")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("string is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let dims = [self.usize()?, self.usize()?, self.usize()?, self.usize()?];
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| self.err("tensor size overflows"))?;
        let raw = self.take(bytes)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)
    }
    fn norm(&mut self) -> Result<NormState<f32>> {
        let gamma = self.tensor()?;
        let beta = self.tensor()?;
        let running_mean = self.tensor()?;
        let running_var = self.tensor()?;
        let st = NormState {
            gamma: Param::new(gamma, ParamKind::Gamma),
            beta: Param::new(beta, ParamKind::Beta),
            running_mean,
            running_var,
            epsilon: self.f64()?,
            momentum: self.f64()?,
            affine: self.bool()?,
        };
        st.validate()?;
        Ok(st)
    }
    fn group_spec(&mut self) -> Result<GroupSpec> {
        match self.u8()? {
            0 => Ok(GroupSpec::FixedGroups(self.usize()?)),
            1 => Ok(GroupSpec::ChannelsPerGroup(self.usize()?)),
            v => Err(self.err(format!("invalid group spec tag {v}"))),
        }
    }
    fn linear(&mut self) -> Result<Linear<f32>> {
        let w = self.tensor()?;
        let b = self.tensor()?;
        Linear::new(w, b)
    }
    fn seq(&mut self, depth: usize) -> Result<Seq<f32>> {
        if depth > 64 {
            return Err(self.err("graph nesting too deep"));
        }
        let n = self.usize()?;
        let mut items = Vec::new();
        for _ in 0..n {
            let name = self.str()?;
            let node = self.node(depth)?;
            items.push(Item::new(name, node));
        }
        Ok(Seq::new(items))
    }
    fn node(&mut self, depth: usize) -> Result<Node<f32>> {
        let t = self.u8()?;
        Ok(match t {
            tag::CONV => {
                let w = self.tensor()?;
                let bias = if self.bool()? { Some(self.tensor()?) } else { None };
                let (stride, padding, groups) = (self.usize()?, self.usize()?, self.usize()?);
                let params = ConvParams::new(w, bias, stride, padding, groups)?;
                if self.bool()? {
                    let n = self.usize()?;
                    let sources = (0..n).map(|_| self.str()).collect::<Result<_>>()?;
                    Node::Conv(Conv2d::fused(params, FusionOrigin { sources, groups: self.usize()? }))
                } else {
                    Node::Conv(Conv2d::new(params))
                }
            }
            tag::BATCH_NORM => Node::BatchNorm(BatchNorm::new(self.norm()?)),
            tag::FBN_CONV => {
                let g = self.usize()?;
                let weights = (0..g).map(|_| self.tensor()).collect::<Result<_>>()?;
                let (stride, padding) = (self.usize()?, self.usize()?);
                let norm = self.norm()?;
                let spec = self.group_spec()?;
                Node::FbnConv(FbnConvLayer::from_parts(weights, stride, padding, norm, spec)?)
            }
            tag::RELU => Node::Relu(Relu::new()),
            tag::MAX_POOL => Node::MaxPool(MaxPool::new(self.usize()?, self.usize()?, self.usize()?)),
            tag::GLOBAL_POOL => Node::GlobalAvgPool(GlobalAvgPool::new()),
            tag::LINEAR => Node::Linear(self.linear()?),
            tag::DROPOUT => {
                let rate = self.f64()?;
                Node::Dropout(Dropout::new(rate, Rng::resume(self.u64()?, self.u64()?))?)
            }
            tag::SQUEEZE_EXCITE => {
                let reduce = self.linear()?;
                Node::SqueezeExcite(SqueezeExcite::from_parts(reduce, self.linear()?)?)
            }
            tag::SEQ => Node::Seq(self.seq(depth + 1)?),
            tag::RESIDUAL => Node::Residual(self.seq(depth + 1)?),
            tag::BRANCHES => {
                let split = self.bool()?;
                let left = self.seq(depth + 1)?;
                Node::Branches(Branches::new(split, left, self.seq(depth + 1)?))
            }
            tag::CHANNEL_SHUFFLE => Node::ChannelShuffle(ChannelShuffle { groups: self.usize()? }),
            other => return Err(self.err(format!("unknown node tag {other}"))),
        })
    }
}

impl Checkpoint {
    pub fn new(net: Network<f32>, config: impl Into<String>, fused: bool) -> Self {
        Checkpoint { config: config.into(), fused, net }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bool(self.fused);
        w.str(&self.config);
        let m = &self.net.meta;
        w.str(&m.name);
        w.group_spec(m.group_spec);
        w.bool(m.use_se);
        w.usize(m.input.0);
        w.usize(m.input.1);
        w.usize(m.input.2);
        w.usize(m.classes);
        w.bool(self.net.mode == Mode::Infer);
        w.seq(&self.net.body);
        w.0
    }

    /// Parses a checkpoint; `path` is used only in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format { path: path.to_path_buf(), msg: "not a checkpoint (bad magic)".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let fused = r.bool()?;
        let config = r.str()?;
        let meta = NetMeta {
            name: r.str()?,
            group_spec: r.group_spec()?,
            use_se: r.bool()?,
            input: (r.usize()?, r.usize()?, r.usize()?),
            classes: r.usize()?,
        };
        let infer = r.bool()?;
        let body = r.seq(0)?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut net = Network::new(body, meta);
        net.set_mode(if infer { Mode::Infer } else { Mode::Train });
        Ok(Checkpoint { config, fused, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
