//! Little-endian binary checkpoints.
//!
//! ```text
//! "G4DS" | version u32 | point count u32 | SH degree u32
//! per point: position f32x3, log-scale f32x3, quaternion f32x4,
//!            opacity logit f32, SH f32x12, lineage u64
//! block count u32
//! per block: name length u32, name bytes, payload length u64, payload
//! ```
//!
//! Blocks: `deform.v1` and `rectifier.v1` (layer manifests then f64
//! parameters), `membership.v1` (per-frame lineage lists and genealogy) and
//! `meta.v1` (JSON). Canonical attributes are stored in f32, so saving a
//! loaded checkpoint reproduces its bytes exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::{DeformConfig, DeformationNet};
use crate::density::{DensityLedger, DensityRow};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud, Lineage, SH_COEFFS, SH_DEGREE};
use crate::model::Model;
use crate::nn::ParamLayout;
use crate::rectifier::{RectifierConfig, TemporalRectifier};
use crate::render::RenderSettings;
use crate::ssm::SelectiveSsm;

pub const MAGIC: &[u8; 4] = b"G4DS";
pub const VERSION: u32 = 1;

/// Settings a checkpoint needs to be rendered the way it was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub frames: usize,
    pub temporal: bool,
    pub next_lineage: Lineage,
    pub deform: DeformConfig,
    pub rectifier: RectifierConfig,
    pub render: RenderSettings,
    pub step: usize,
    pub seed: u64,
    /// Density cycles run during training, oldest first.
    #[serde(default)]
    pub density_log: Vec<DensityRow>,
}

impl Meta {
    pub fn provenance(&self) -> Provenance {
        Provenance { render: self.render, step: self.step, seed: self.seed, density_log: self.density_log.clone() }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len32(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("count {n} exceeds u32")))?;
        self.u32(n);
        Ok(())
    }
    fn block(&mut self, name: &str, payload: &[u8]) -> Result<()> {
        self.len32(name.len())?;
        self.0.extend_from_slice(name.as_bytes());
        self.u64(payload.len() as u64);
        self.0.extend_from_slice(payload);
        Ok(())
    }
    fn params(&mut self, layout: &ParamLayout, params: &[f64]) -> Result<()> {
        let manifest = layout.manifest();
        self.len32(manifest.len())?;
        for (outputs, inputs, bias) in manifest {
            self.u32(outputs);
            self.u32(inputs);
            self.u8(bias as u8);
        }
        self.u64(params.len() as u64);
        params.iter().for_each(|&p| self.f64(p));
        Ok(())
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
    fn params(&mut self, layout: &ParamLayout, what: &str) -> Result<Vec<f64>> {
        let layers = self.u32()? as usize;
        let mut manifest = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            manifest.push((self.u32()?, self.u32()?, self.u8()? != 0));
        }
        if manifest != layout.manifest() {
            return Err(Error::Format(format!("{what}: layer manifest does not match the configured layout")));
        }
        let n = self.u64()? as usize;
        if n != layout.total {
            return Err(Error::Format(format!("{what}: {n} parameters, layout expects {}", layout.total)));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

fn encode_membership(ledger: &DensityLedger) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.len32(ledger.num_frames())?;
    for t in 0..ledger.num_frames() {
        let m = ledger.membership(t);
        w.len32(m.len())?;
        m.iter().for_each(|&l| w.u64(l));
    }
    w.len32(ledger.parents().len())?;
    for (&child, &parent) in ledger.parents() {
        w.u64(child);
        w.u64(parent);
    }
    Ok(w.0)
}

fn decode_membership(data: &[u8]) -> Result<DensityLedger> {
    let mut r = Reader { data, pos: 0 };
    let frames = r.u32()? as usize;
    let mut lists = Vec::with_capacity(frames.min(1 << 16));
    for _ in 0..frames {
        let n = r.u32()? as usize;
        lists.push((0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
    }
    let n = r.u32()? as usize;
    let mut parents = BTreeMap::new();
    for _ in 0..n {
        parents.insert(r.u64()?, r.u64()?);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes in membership block".into()));
    }
    DensityLedger::from_parts(lists, parents)
}

/// Training provenance stored next to the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub render: RenderSettings,
    pub step: usize,
    pub seed: u64,
    pub density_log: Vec<DensityRow>,
}

/// Serializes `model` with its rendering settings and training provenance.
pub fn to_bytes(model: &Model, prov: &Provenance) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.len32(model.cloud.len())?;
    w.u32(SH_DEGREE);
    for p in &model.cloud.points {
        p.position.iter().chain(&p.log_scale).chain(&p.rotation).for_each(|&v| w.f32(v));
        w.f32(p.opacity_logit);
        p.sh.iter().for_each(|&v| w.f32(v));
        w.u64(p.lineage);
    }

    let mut deform = Writer(Vec::new());
    deform.params(&model.deform.layout, &model.deform.params)?;
    let mut rect = Writer(Vec::new());
    let r = &model.rectifier;
    rect.params(&r.ssm.layout, &r.ssm.params)?;
    rect.params(&r.scale_head.layout, &r.scale_head.params)?;
    rect.params(&r.rotation_head.layout, &r.rotation_head.params)?;
    let meta = Meta {
        frames: model.num_frames(),
        temporal: model.temporal,
        next_lineage: model.cloud.next_lineage(),
        deform: model.deform.config.clone(),
        rectifier: model.rectifier.config.clone(),
        render: prov.render,
        step: prov.step,
        seed: prov.seed,
        density_log: prov.density_log.clone(),
    };

    w.u32(4);
    w.block("deform.v1", &deform.0)?;
    w.block("rectifier.v1", &rect.0)?;
    w.block("membership.v1", &encode_membership(&model.ledger)?)?;
    w.block("meta.v1", serde_json::to_string(&meta)?.as_bytes())?;
    Ok(w.0)
}

pub fn from_bytes(data: &[u8]) -> Result<(Model, Meta)> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let degree = r.u32()?;
    if degree != SH_DEGREE {
        return Err(Error::Format(format!("unsupported SH degree {degree}")));
    }
    let mut points = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let mut f = [0.0; 11];
        for v in &mut f {
            *v = r.f32()?;
        }
        let mut sh = [0.0; SH_COEFFS];
        for v in &mut sh {
            *v = r.f32()?;
        }
        points.push(Gaussian {
            position: [f[0], f[1], f[2]],
            log_scale: [f[3], f[4], f[5]],
            rotation: [f[6], f[7], f[8], f[9]],
            opacity_logit: f[10],
            sh,
            lineage: r.u64()?,
        });
    }
    let mut blocks = BTreeMap::new();
    for _ in 0..r.u32()? {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("block too large".into()))?;
        blocks.insert(name, r.take(len)?);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after blocks".into()));
    }
    let block = |name: &str| blocks.get(name).copied().ok_or_else(|| Error::Format(format!("missing block {name}")));

    let meta: Meta = serde_json::from_slice(block("meta.v1")?)?;
    let cloud = GaussianCloud::with_lineages(points)?.with_next_lineage(meta.next_lineage)?;

    let mut dr = Reader { data: block("deform.v1")?, pos: 0 };
    let template = DeformationNet::new(meta.deform.clone(), 0);
    let deform = DeformationNet::from_params(meta.deform.clone(), dr.params(&template.layout, "deform.v1")?)?;

    let mut rr = Reader { data: block("rectifier.v1")?, pos: 0 };
    let mut rectifier = TemporalRectifier::new(meta.rectifier.clone(), 0);
    let ssm_params = rr.params(&rectifier.ssm.layout, "rectifier.v1 ssm")?;
    rectifier.ssm = SelectiveSsm::with_params(meta.rectifier.ssm.clone(), ssm_params)?;
    rectifier.scale_head.params = rr.params(&rectifier.scale_head.layout, "rectifier.v1 scale head")?;
    rectifier.rotation_head.params = rr.params(&rectifier.rotation_head.layout, "rectifier.v1 rotation head")?;
    if !dr.done() || !rr.done() {
        return Err(Error::Format("trailing bytes in parameter block".into()));
    }

    let ledger = decode_membership(block("membership.v1")?)?;
    if ledger.num_frames() != meta.frames {
        return Err(Error::Format(format!("membership has {} frames, meta says {}", ledger.num_frames(), meta.frames)));
    }
    ledger.check(&cloud)?;
    let model = Model { cloud, deform, rectifier, ledger, temporal: meta.temporal };
    Ok((model, meta))
}

pub fn save(path: &Path, model: &Model, prov: &Provenance) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(model, prov)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Meta)> {
    from_bytes(&std::fs::read(path)?)
}
