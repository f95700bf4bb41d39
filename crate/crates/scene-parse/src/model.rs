//! Model persistence. Little-endian binary: magic `SCVR`, a u32 format
//! version, a length-prefixed text config block (key=value lines,
//! including the connection tables), shape-prefixed 32-bit-real tensors in
//! a fixed order, and a trailing CRC32 over everything before it.

use crate::cover::PurityClassifier;
use crate::error::{Error, Result};
use crate::msnet::{LinearClassifier, MsNetParams, NetConfig, StageSpec};
use crate::nn::FilterBank;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SCVR";
const VERSION: u32 = 1;

/// Everything needed to run inference: architecture, connection tables,
/// trained tensors and labeling metadata.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub net_config: NetConfig,
    pub params: MsNetParams,
    /// Stage-1 pixel head, kept for the baseline labeler.
    pub linear: Option<LinearClassifier>,
    pub classifier: Option<PurityClassifier>,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub grid: usize,
    pub hidden: usize,
    pub min_component: u32,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, dims: &[u32], data: impl Iterator<Item = f64>) {
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d);
        }
        let mut count = 0usize;
        for v in data {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
            count += 1;
        }
        debug_assert_eq!(count as u32, dims.iter().product::<u32>());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedModel("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expect_dims: &[u32]) -> Result<Vec<f64>> {
        let ndim = self.u32()? as usize;
        if ndim != expect_dims.len() {
            return Err(Error::MalformedModel(format!(
                "tensor rank {ndim}, expected {}",
                expect_dims.len()
            )));
        }
        let mut total = 1usize;
        for &want in expect_dims {
            let got = self.u32()?;
            if got != want {
                return Err(Error::MalformedModel(format!(
                    "tensor dim {got}, expected {want}"
                )));
            }
            total *= got as usize;
        }
        let raw = self.bytes(total * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn format_config(bundle: &ModelBundle) -> String {
    let mut out = String::new();
    let cfg = &bundle.net_config;
    out.push_str(&format!("n_classes={}\n", bundle.n_classes));
    out.push_str(&format!("class_names={}\n", bundle.class_names.join(",")));
    out.push_str(&format!("n_scales={}\n", cfg.n_scales));
    out.push_str(&format!("norm_window={}\n", cfg.norm_window));
    out.push_str(&format!("table_seed={}\n", cfg.table_seed));
    for s in &cfg.stages {
        out.push_str(&format!(
            "stage={},{},{},{}\n",
            s.out_channels,
            s.kernel_size,
            s.fan_in,
            if s.pool { 1 } else { 0 }
        ));
    }
    for (i, bank) in bundle.params.banks.iter().enumerate() {
        let pairs: Vec<String> = bank
            .connections()
            .iter()
            .map(|(p, q)| format!("{p}:{q}"))
            .collect();
        out.push_str(&format!("bank{i}_conn={}\n", pairs.join(";")));
    }
    out.push_str(&format!("grid={}\n", bundle.grid));
    out.push_str(&format!("hidden={}\n", bundle.hidden));
    out.push_str(&format!("min_component={}\n", bundle.min_component));
    out.push_str(&format!(
        "has_linear={}\n",
        if bundle.linear.is_some() { 1 } else { 0 }
    ));
    out.push_str(&format!(
        "has_classifier={}\n",
        if bundle.classifier.is_some() { 1 } else { 0 }
    ));
    out
}

struct ParsedConfig {
    n_classes: usize,
    class_names: Vec<String>,
    net_config: NetConfig,
    bank_conns: Vec<Vec<(usize, usize)>>,
    grid: usize,
    hidden: usize,
    min_component: u32,
    has_linear: bool,
    has_classifier: bool,
}

fn parse_config(text: &str) -> Result<ParsedConfig> {
    let mut map: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedModel(format!("bad config line: {line}")))?;
        map.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        map.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::MalformedModel(format!("missing config key {key}")))
    };
    let parse_num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::MalformedModel(format!("bad number for {key}")))
    };

    let mut stages = Vec::new();
    for (k, v) in &map {
        if k == "stage" {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::MalformedModel(format!("bad stage spec: {v}")));
            }
            let nums: Vec<usize> = parts
                .iter()
                .map(|p| p.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::MalformedModel(format!("bad stage spec: {v}")))?;
            stages.push(StageSpec {
                out_channels: nums[0],
                kernel_size: nums[1],
                fan_in: nums[2],
                pool: nums[3] != 0,
            });
        }
    }
    if stages.is_empty() {
        return Err(Error::MalformedModel("no stages in config".into()));
    }
    let mut bank_conns = Vec::with_capacity(stages.len());
    for i in 0..stages.len() {
        let raw = get(&format!("bank{i}_conn"))?;
        let mut conns = Vec::new();
        for pair in raw.split(';').filter(|p| !p.is_empty()) {
            let (p, q) = pair
                .split_once(':')
                .ok_or_else(|| Error::MalformedModel(format!("bad connection {pair}")))?;
            conns.push((
                p.parse()
                    .map_err(|_| Error::MalformedModel(format!("bad connection {pair}")))?,
                q.parse()
                    .map_err(|_| Error::MalformedModel(format!("bad connection {pair}")))?,
            ));
        }
        bank_conns.push(conns);
    }

    Ok(ParsedConfig {
        n_classes: parse_num("n_classes")?,
        class_names: get("class_names")?.split(',').map(String::from).collect(),
        net_config: NetConfig {
            stages,
            n_scales: parse_num("n_scales")?,
            table_seed: get("table_seed")?
                .parse()
                .map_err(|_| Error::MalformedModel("bad table_seed".into()))?,
            norm_window: parse_num("norm_window")?,
        },
        bank_conns,
        grid: parse_num("grid")?,
        hidden: parse_num("hidden")?,
        min_component: parse_num("min_component")? as u32,
        has_linear: parse_num("has_linear")? != 0,
        has_classifier: parse_num("has_classifier")? != 0,
    })
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let config = format_config(self);
        w.u32(config.len() as u32);
        w.buf.extend_from_slice(config.as_bytes());

        let mut tensors = 0u32;
        let mut body = Writer { buf: Vec::new() };
        for bank in &self.params.banks {
            let k = bank.kernel_size() as u32;
            body.tensor(
                &[bank.connections().len() as u32, k, k],
                bank.weights().iter().flatten().copied(),
            );
            body.tensor(
                &[bank.out_channels() as u32],
                bank.biases().iter().copied(),
            );
            tensors += 2;
        }
        if let Some(linear) = &self.linear {
            body.tensor(
                &[linear.classes as u32, linear.dim as u32],
                linear.w.iter().copied(),
            );
            tensors += 1;
        }
        if let Some(clf) = &self.classifier {
            body.tensor(
                &[clf.hidden as u32, clf.input_dim as u32],
                clf.w1.iter().copied(),
            );
            body.tensor(&[clf.hidden as u32], clf.b1.iter().copied());
            body.tensor(
                &[clf.classes as u32, clf.hidden as u32],
                clf.w2.iter().copied(),
            );
            tensors += 3;
        }
        w.u32(tensors);
        w.buf.extend_from_slice(&body.buf);

        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::MalformedModel("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader {
            buf: payload,
            pos: 4,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.bytes(config_len)?)
            .map_err(|_| Error::MalformedModel("config block is not UTF-8".into()))?;
        let parsed = parse_config(config_text)?;
        let _tensor_count = r.u32()?;

        let mut banks = Vec::with_capacity(parsed.net_config.stages.len());
        for (stage, conns) in parsed.net_config.stages.iter().zip(parsed.bank_conns) {
            let k = stage.kernel_size;
            let mut bank = FilterBank::new(stage.out_channels, k, conns)?;
            let weights = r.tensor(&[
                bank.connections().len() as u32,
                k as u32,
                k as u32,
            ])?;
            for (i, chunk) in weights.chunks_exact(k * k).enumerate() {
                bank.weights_mut()[i].copy_from_slice(chunk);
            }
            let biases = r.tensor(&[bank.out_channels() as u32])?;
            bank.biases_mut().copy_from_slice(&biases);
            banks.push(bank);
        }
        let params = MsNetParams { banks };

        let feature_dim = parsed.net_config.feature_dim();
        let linear = if parsed.has_linear {
            let w = r.tensor(&[parsed.n_classes as u32, feature_dim as u32])?;
            Some(LinearClassifier {
                classes: parsed.n_classes,
                dim: feature_dim,
                w,
            })
        } else {
            None
        };
        let classifier = if parsed.has_classifier {
            let input_dim = parsed.grid * parsed.grid * feature_dim;
            let w1 = r.tensor(&[parsed.hidden as u32, input_dim as u32])?;
            let b1 = r.tensor(&[parsed.hidden as u32])?;
            let w2 = r.tensor(&[parsed.n_classes as u32, parsed.hidden as u32])?;
            Some(PurityClassifier {
                input_dim,
                hidden: parsed.hidden,
                classes: parsed.n_classes,
                w1,
                b1,
                w2,
            })
        } else {
            None
        };
        if r.pos != payload.len() {
            return Err(Error::MalformedModel("trailing bytes after tensors".into()));
        }
        Ok(ModelBundle {
            net_config: parsed.net_config,
            params,
            linear,
            classifier,
            n_classes: parsed.n_classes,
            class_names: parsed.class_names,
            grid: parsed.grid,
            hidden: parsed.hidden,
            min_component: parsed.min_component,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
