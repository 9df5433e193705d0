//! Binary checkpoint container and the model states stored in it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "LCMKIT01"
//! u32    schema version
//! u32    metadata length, then that many bytes of `key=value` lines (UTF-8)
//! u32    tensor count
//! per tensor:
//!   u32 name length, name bytes
//!   u32 rank, rank x u64 dims
//!   u64 payload length in bytes, payload as f64 LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::consistency::{BoundarySpec, ConsistencyModel};
use crate::distill::Trainer;
use crate::error::{Error, Result};
use crate::latent::{CodecKind, LatentCodec};
use crate::net::{Denoiser, EmaPair, NetConfig, Optimizer, PredictionKind};
use crate::schedule::NoiseSchedule;

pub const MAGIC: &[u8; 8] = b"LCMKIT01";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema: u32,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self { schema: SCHEMA_VERSION, metadata: BTreeMap::new(), tensors: Vec::new() }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.buf.len() {
            return Err(Error::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::ShapeMismatch("non-UTF-8 text in checkpoint".into()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| Error::ShapeMismatch(format!("checkpoint metadata `{key}` = `{v}` is malformed")))
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("tensor `{name}` shape {shape:?} vs {} values", data.len())));
        }
        self.tensors.push(Tensor { name: name.into(), shape: shape.to_vec(), data: data.to_vec() });
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::MissingTensor(name.into()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.schema.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::ShapeMismatch(format!("metadata entry `{k}` cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.data.len() * 8) as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if buf.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(buf) { Error::Truncated } else { Error::BadMagic });
        }
        if r.take(8)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let schema = r.u32()?;
        if schema > SCHEMA_VERSION {
            return Err(Error::SchemaTooNew { found: schema, supported: SCHEMA_VERSION });
        }
        let meta_len = r.u32()? as usize;
        let text = r.string(meta_len)?;
        let mut metadata = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ShapeMismatch(format!("bad metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let bytes = r.u64()? as usize;
            let expect = shape.iter().try_fold(8usize, |acc, &d| acc.checked_mul(d));
            if expect != Some(bytes) {
                return Err(Error::ShapeMismatch(format!("tensor `{name}` declares {shape:?} but holds {bytes} bytes")));
            }
            let payload = r.take(bytes)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::ShapeMismatch("trailing bytes after last tensor".into()));
        }
        Ok(Self { schema, metadata, tensors })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = path.with_file_name(format!(".{file_name}.tmp"));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        fs::rename(&tmp, path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_schedule(ck: &mut Checkpoint, s: &NoiseSchedule) {
    ck.set_meta("schedule.num_steps", s.num_steps());
    ck.set_meta("schedule.beta_min", s.beta_min());
    ck.set_meta("schedule.beta_max", s.beta_max());
}

pub fn get_schedule(ck: &Checkpoint) -> Result<NoiseSchedule> {
    NoiseSchedule::new(
        ck.meta_parse("schedule.num_steps")?,
        ck.meta_parse("schedule.beta_min")?,
        ck.meta_parse("schedule.beta_max")?,
    )
}

fn put_net(ck: &mut Checkpoint, prefix: &str, net: &Denoiser) -> Result<()> {
    let c = net.config();
    ck.set_meta(&format!("{prefix}.data_dim"), c.data_dim);
    ck.set_meta(&format!("{prefix}.hidden_width"), c.hidden_width);
    ck.set_meta(&format!("{prefix}.hidden_layers"), c.hidden_layers);
    ck.set_meta(&format!("{prefix}.embed_dim"), c.embed_dim);
    ck.set_meta(&format!("{prefix}.num_classes"), c.num_classes);
    ck.set_meta(&format!("{prefix}.t_freq_lo"), c.t_freq_range.0);
    ck.set_meta(&format!("{prefix}.t_freq_hi"), c.t_freq_range.1);
    ck.set_meta(&format!("{prefix}.omega_freq_lo"), c.omega_freq_range.0);
    ck.set_meta(&format!("{prefix}.omega_freq_hi"), c.omega_freq_range.1);
    ck.set_meta(&format!("{prefix}.omega_conditioned"), c.omega_conditioned);
    ck.set_meta(&format!("{prefix}.prediction_kind"), c.prediction_kind.as_str());
    ck.push(&format!("{prefix}.theta"), &[net.num_params()], net.theta())
}

fn get_net_config(ck: &Checkpoint, prefix: &str) -> Result<NetConfig> {
    let p = |k: &str| format!("{prefix}.{k}");
    let kind = ck.meta(&p("prediction_kind"))?;
    Ok(NetConfig {
        data_dim: ck.meta_parse(&p("data_dim"))?,
        hidden_width: ck.meta_parse(&p("hidden_width"))?,
        hidden_layers: ck.meta_parse(&p("hidden_layers"))?,
        embed_dim: ck.meta_parse(&p("embed_dim"))?,
        num_classes: ck.meta_parse(&p("num_classes"))?,
        t_freq_range: (ck.meta_parse(&p("t_freq_lo"))?, ck.meta_parse(&p("t_freq_hi"))?),
        omega_freq_range: (ck.meta_parse(&p("omega_freq_lo"))?, ck.meta_parse(&p("omega_freq_hi"))?),
        omega_conditioned: ck.meta_parse(&p("omega_conditioned"))?,
        prediction_kind: PredictionKind::parse(kind)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown prediction kind `{kind}`")))?,
    })
}

fn get_net(ck: &Checkpoint, prefix: &str, tensor: &str) -> Result<Denoiser> {
    let mut net = Denoiser::zeros(get_net_config(ck, prefix)?)?;
    let t = ck.tensor(tensor)?;
    if t.data.len() != net.num_params() {
        return Err(Error::ShapeMismatch(format!(
            "`{tensor}` holds {} values, network needs {}",
            t.data.len(),
            net.num_params()
        )));
    }
    net.set_theta(&t.data)?;
    Ok(net)
}

fn put_codec(ck: &mut Checkpoint, codec: &LatentCodec) -> Result<()> {
    ck.set_meta("codec.kind", codec.kind().as_str());
    ck.set_meta("codec.d_data", codec.d_data());
    ck.set_meta("codec.d_latent", codec.d_latent());
    if codec.kind() == CodecKind::Linear {
        ck.push("codec.encode", &[codec.d_latent(), codec.d_data()], codec.encode_matrix())?;
        ck.push("codec.decode", &[codec.d_data(), codec.d_latent()], codec.decode_matrix())?;
    }
    Ok(())
}

pub fn get_codec(ck: &Checkpoint) -> Result<LatentCodec> {
    let kind = ck.meta("codec.kind")?;
    let d_data: usize = ck.meta_parse("codec.d_data")?;
    let d_latent: usize = ck.meta_parse("codec.d_latent")?;
    match CodecKind::parse(kind) {
        Some(CodecKind::Identity) => Ok(LatentCodec::identity(d_data)),
        Some(CodecKind::Linear) => LatentCodec::from_matrices(
            d_data,
            d_latent,
            ck.tensor("codec.encode")?.data.clone(),
            ck.tensor("codec.decode")?.data.clone(),
        ),
        None => Err(Error::ShapeMismatch(format!("unknown codec kind `{kind}`"))),
    }
}

pub fn codec_checkpoint(codec: &LatentCodec) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set_meta("content", "codec");
    put_codec(&mut ck, codec)?;
    Ok(ck)
}

pub fn teacher_checkpoint(net: &Denoiser, schedule: &NoiseSchedule) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set_meta("content", "teacher");
    put_schedule(&mut ck, schedule);
    put_net(&mut ck, "net", net)?;
    Ok(ck)
}

pub fn load_teacher(ck: &Checkpoint) -> Result<(Denoiser, NoiseSchedule)> {
    Ok((get_net(ck, "net", "net.theta")?, get_schedule(ck)?))
}

fn put_optimizer(ck: &mut Checkpoint, opt: &Optimizer) -> Result<()> {
    ck.set_meta("optimizer.kind", opt.kind().as_str());
    match opt {
        Optimizer::Sgd { lr } => ck.set_meta("optimizer.lr", lr),
        Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
            ck.set_meta("optimizer.lr", lr);
            ck.set_meta("optimizer.beta1", beta1);
            ck.set_meta("optimizer.beta2", beta2);
            ck.set_meta("optimizer.eps", eps);
            ck.set_meta("optimizer.step", step);
            ck.push("optimizer.m", &[m.len()], m)?;
            ck.push("optimizer.v", &[v.len()], v)?;
        }
    }
    Ok(())
}

fn get_optimizer(ck: &Checkpoint) -> Result<Optimizer> {
    let lr = ck.meta_parse("optimizer.lr")?;
    match ck.meta("optimizer.kind")? {
        "sgd" => Ok(Optimizer::Sgd { lr }),
        "adam" => Ok(Optimizer::Adam {
            lr,
            beta1: ck.meta_parse("optimizer.beta1")?,
            beta2: ck.meta_parse("optimizer.beta2")?,
            eps: ck.meta_parse("optimizer.eps")?,
            step: ck.meta_parse("optimizer.step")?,
            m: ck.tensor("optimizer.m")?.data.clone(),
            v: ck.tensor("optimizer.v")?.data.clone(),
        }),
        other => Err(Error::ShapeMismatch(format!("unknown optimizer `{other}`"))),
    }
}

/// Everything needed to resume training or to sample.
pub fn model_checkpoint(trainer: &Trainer, codec: &LatentCodec, config_echo: &str) -> Result<Checkpoint> {
    let m = &trainer.model;
    let mut ck = Checkpoint::new();
    ck.set_meta("content", "consistency_model");
    ck.set_meta("iteration", trainer.iter);
    ck.set_meta("prediction_kind", m.prediction_kind().as_str());
    ck.set_meta("boundary.sigma_data", m.boundary.sigma_data);
    ck.set_meta("boundary.t_scale", m.boundary.t_scale);
    ck.set_meta("config", config_echo.replace('\n', ";"));
    put_schedule(&mut ck, &m.schedule);
    put_net(&mut ck, "online", m.online())?;
    ck.push("target.theta", &[m.target().num_params()], m.target().theta())?;
    put_optimizer(&mut ck, &trainer.optimizer)?;
    put_codec(&mut ck, codec)?;
    Ok(ck)
}

pub fn load_model(ck: &Checkpoint) -> Result<(Trainer, LatentCodec)> {
    let online = get_net(ck, "online", "online.theta")?;
    let mut target = online.clone();
    let t = ck.tensor("target.theta")?;
    if t.data.len() != target.num_params() {
        return Err(Error::ShapeMismatch("target parameters do not match the online network".into()));
    }
    target.set_theta(&t.data)?;
    let boundary = BoundarySpec::new(ck.meta_parse("boundary.sigma_data")?, ck.meta_parse("boundary.t_scale")?)?;
    let model = ConsistencyModel { ema: EmaPair::from_parts(online, target)?, boundary, schedule: get_schedule(ck)? };
    let optimizer = get_optimizer(ck)?;
    if let Optimizer::Adam { m, .. } = &optimizer {
        if m.len() != model.online().num_params() {
            return Err(Error::ShapeMismatch("optimizer state does not match the network".into()));
        }
    }
    let trainer = Trainer { model, optimizer, iter: ck.meta_parse("iteration")? };
    Ok((trainer, get_codec(ck)?))
}
