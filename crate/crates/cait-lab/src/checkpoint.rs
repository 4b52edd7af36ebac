//! Checkpoint file format.
//!
//! Layout (header is plain text, payload is raw bytes):
//!
//! ```text
//! CAITCKPT
//! version 1
//! config <n>
//! <key> <value>            (n lines)
//! rng <seed-hex> <stream> <word-pos>
//! tensors <m>
//! <name> <d1>x<d2>... <offset> <bytes>   (m lines; offsets into payload)
//! payload <bytes>
//! <raw little-endian f64 data>
//! ```
//!
//! Tensor payloads are little-endian f64, so a load/save round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cait_core::blocks::{LayerScaleInit, ResidualStrategy};
use cait_core::cait::{CaitConfig, CaitModel, ClsPolicy};
use cait_core::rng::{streams, RngState, SeedRng};
use cait_core::Tensor;

use crate::{LabError, Result};

pub const MAGIC: &str = "CAITCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: Vec<(String, String)>,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub payload: Vec<u8>,
}

// ── config <-> key/value ────────────────────────────────────────────

fn strategy_kv(strategy: &ResidualStrategy) -> (String, Option<f64>) {
    let value = match strategy {
        ResidualStrategy::PreNormBaseline => None,
        ResidualStrategy::AdaptedReZero { alpha0 }
        | ResidualStrategy::AdaptedFixup { alpha0 }
        | ResidualStrategy::AdaptedTFixup { alpha0 } => Some(*alpha0),
        ResidualStrategy::LayerScale { init } => match init {
            LayerScaleInit::Constant(e) | LayerScaleInit::Uniform(e) => Some(*e),
            LayerScaleInit::Zero | LayerScaleInit::Fixed => None,
        },
    };
    (strategy.name().to_string(), value)
}

pub fn strategy_from_kv(name: &str, value: Option<f64>) -> Result<ResidualStrategy> {
    let need = |what: &str| -> Result<f64> {
        value.ok_or_else(|| LabError::Checkpoint(format!("strategy `{name}` needs a {what}")))
    };
    Ok(match name {
        "baseline" => ResidualStrategy::PreNormBaseline,
        "rezero-adapted" => ResidualStrategy::AdaptedReZero { alpha0: need("scalar init")? },
        "fixup-adapted" => ResidualStrategy::AdaptedFixup { alpha0: need("scalar init")? },
        "tfixup-adapted" => ResidualStrategy::AdaptedTFixup { alpha0: need("scalar init")? },
        "layerscale" => ResidualStrategy::LayerScale {
            init: LayerScaleInit::Constant(need("channel init")?),
        },
        "layerscale-uniform" => ResidualStrategy::LayerScale {
            init: LayerScaleInit::Uniform(need("channel init")?),
        },
        "layerscale-zero" => ResidualStrategy::LayerScale {
            init: LayerScaleInit::Zero,
        },
        "layerscale-fixed" => ResidualStrategy::LayerScale {
            init: LayerScaleInit::Fixed,
        },
        other => {
            return Err(LabError::Checkpoint(format!(
                "unknown strategy `{other}`"
            )))
        }
    })
}

pub fn config_to_kv(cfg: &CaitConfig) -> Vec<(String, String)> {
    let mut kv: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
    push("sa_depth", cfg.sa_depth.to_string());
    push("ca_depth", cfg.ca_depth.to_string());
    push("width", cfg.d.to_string());
    push("heads", cfg.heads.to_string());
    push("patch_count", cfg.patch_count.to_string());
    push("patch_size", cfg.patch_size.to_string());
    push("in_channels", cfg.in_channels.to_string());
    push("num_classes", cfg.num_classes.to_string());
    push("epsilon", format!("{}", cfg.epsilon));
    push("drop_rate", format!("{}", cfg.drop_rate));
    push("cls_policy", cfg.cls_policy.tag());
    push("keys_include_class", cfg.keys_include_class.to_string());
    push("layerscale_in_ca", cfg.layerscale_in_ca.to_string());
    push("talking_heads_in_ca", cfg.talking_heads_in_ca.to_string());
    let (name, value) = strategy_kv(&cfg.strategy);
    push("strategy", name);
    if let Some(v) = value {
        push("strategy_init", format!("{v}"));
    }
    push("pre_norm", cfg.pre_norm.to_string());
    push("ln_eps", format!("{}", cfg.ln_eps));
    kv
}

pub fn config_from_kv(kv: &[(String, String)]) -> Result<CaitConfig> {
    let map: BTreeMap<&str, &str> = kv.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let get = |k: &str| -> Result<&str> {
        map.get(k)
            .copied()
            .ok_or_else(|| LabError::Checkpoint(format!("missing config key `{k}`")))
    };
    fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| LabError::Checkpoint(format!("bad value `{v}` for `{k}`")))
    }

    let policy_tag = get("cls_policy")?;
    let cls_policy = if policy_tag == "class-attention" {
        ClsPolicy::ClassAttentionStage
    } else if policy_tag == "average-pooling" {
        ClsPolicy::AveragePooling
    } else if let Some(k) = policy_tag.strip_prefix("insert-at-") {
        ClsPolicy::InsertAtLayer(parse("cls_policy", k)?)
    } else {
        return Err(LabError::Checkpoint(format!(
            "unknown cls policy `{policy_tag}`"
        )));
    };

    let strategy_init = match map.get("strategy_init") {
        Some(v) => Some(parse::<f64>("strategy_init", v)?),
        None => None,
    };
    let strategy = strategy_from_kv(get("strategy")?, strategy_init)?;

    Ok(CaitConfig {
        sa_depth: parse("sa_depth", get("sa_depth")?)?,
        ca_depth: parse("ca_depth", get("ca_depth")?)?,
        d: parse("width", get("width")?)?,
        heads: parse("heads", get("heads")?)?,
        patch_count: parse("patch_count", get("patch_count")?)?,
        patch_size: parse("patch_size", get("patch_size")?)?,
        in_channels: parse("in_channels", get("in_channels")?)?,
        num_classes: parse("num_classes", get("num_classes")?)?,
        epsilon: parse("epsilon", get("epsilon")?)?,
        drop_rate: parse("drop_rate", get("drop_rate")?)?,
        cls_policy,
        keys_include_class: parse("keys_include_class", get("keys_include_class")?)?,
        layerscale_in_ca: parse("layerscale_in_ca", get("layerscale_in_ca")?)?,
        talking_heads_in_ca: parse("talking_heads_in_ca", get("talking_heads_in_ca")?)?,
        strategy,
        pre_norm: parse("pre_norm", get("pre_norm")?)?,
        ln_eps: parse("ln_eps", get("ln_eps")?)?,
    })
}

// ── build / restore ─────────────────────────────────────────────────

impl Checkpoint {
    pub fn from_model(model: &CaitModel, rng: RngState) -> Self {
        let mut tensors = Vec::with_capacity(model.store.len());
        let mut payload = Vec::new();
        for (_, p) in model.store.iter() {
            let offset = payload.len();
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len: payload.len() - offset,
            });
        }
        Checkpoint {
            version: VERSION,
            config: config_to_kv(&model.config),
            rng,
            tensors,
            payload,
        }
    }

    pub fn config(&self) -> Result<CaitConfig> {
        config_from_kv(&self.config)
    }

    fn tensor_data(&self, entry: &TensorEntry) -> Result<Vec<f64>> {
        let end = entry.offset + entry.len;
        if end > self.payload.len() || entry.len % 8 != 0 {
            return Err(LabError::Checkpoint(format!(
                "tensor `{}` range {}..{end} outside payload of {}",
                entry.name,
                entry.offset,
                self.payload.len()
            )));
        }
        Ok(self.payload[entry.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    }

    /// Channel-scaling diagonals stored in this checkpoint, keyed by
    /// parameter name. Empty when the run used a scalar or baseline
    /// strategy.
    pub fn scale_diagonals(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut map = BTreeMap::new();
        for entry in &self.tensors {
            let is_scale = entry.name.ends_with(".scale1") || entry.name.ends_with(".scale2");
            if is_scale && entry.shape.len() == 1 && entry.shape[0] > 1 {
                map.insert(entry.name.clone(), self.tensor_data(entry)?);
            }
        }
        Ok(map)
    }

    /// Rebuild the model with bit-exact parameters.
    pub fn to_model(&self) -> Result<CaitModel> {
        let config = self.config()?;
        let fixed = if matches!(
            config.strategy,
            ResidualStrategy::LayerScale {
                init: LayerScaleInit::Fixed
            }
        ) {
            Some(self.scale_diagonals()?)
        } else {
            None
        };
        let mut init_rng = SeedRng::new(0, streams::MODEL_INIT);
        let mut model =
            CaitModel::init_with_fixed_scales(config, fixed.as_ref(), &mut init_rng)?;

        let by_name: BTreeMap<&str, &TensorEntry> = self
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        if by_name.len() != model.store.len() {
            return Err(LabError::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                by_name.len(),
                model.store.len()
            )));
        }
        for (_, p) in model.store.iter_mut() {
            let entry = by_name.get(p.name.as_str()).ok_or_else(|| {
                LabError::Checkpoint(format!("missing tensor `{}`", p.name))
            })?;
            if entry.shape != p.value.shape() {
                return Err(LabError::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            let end = entry.offset + entry.len;
            if end > self.payload.len() || entry.len != p.value.numel() * 8 {
                return Err(LabError::Checkpoint(format!(
                    "tensor `{}` payload range is inconsistent",
                    p.name
                )));
            }
            for (v, b) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(self.payload[entry.offset..end].chunks_exact(8))
            {
                *v = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
            }
        }
        Ok(model)
    }

    // ── wire format ─────────────────────────────────────────────────

    pub fn encode(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&format!("version {}\n", self.version));
        out.push_str(&format!("config {}\n", self.config.len()));
        for (k, v) in &self.config {
            out.push_str(&format!("{k} {v}\n"));
        }
        let seed_hex: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        out.push_str(&format!(
            "rng {seed_hex} {} {}\n",
            self.rng.stream, self.rng.word_pos
        ));
        out.push_str(&format!("tensors {}\n", self.tensors.len()));
        for t in &self.tensors {
            let shape = t
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            out.push_str(&format!("{} {} {} {}\n", t.name, shape, t.offset, t.len));
        }
        out.push_str(&format!("payload {}\n", self.payload.len()));
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&self.payload);
        bytes
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| LabError::Checkpoint(msg.to_string());
        let mut pos = 0usize;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            if pos >= bytes.len() {
                return Err(bad("truncated header"));
            }
            let line = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("header is not utf-8"))?
                .to_string();
            pos += 1;
            Ok(line)
        };

        if next_line(bytes)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version: u32 = next_line(bytes)?
            .strip_prefix("version ")
            .ok_or_else(|| bad("missing version"))?
            .parse()
            .map_err(|_| bad("bad version"))?;
        if version != VERSION {
            return Err(LabError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }

        let n: usize = next_line(bytes)?
            .strip_prefix("config ")
            .ok_or_else(|| bad("missing config count"))?
            .parse()
            .map_err(|_| bad("bad config count"))?;
        let mut config = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next_line(bytes)?;
            let (k, v) = line.split_once(' ').ok_or_else(|| bad("bad config line"))?;
            config.push((k.to_string(), v.to_string()));
        }

        let rng_line = next_line(bytes)?;
        let mut parts = rng_line
            .strip_prefix("rng ")
            .ok_or_else(|| bad("missing rng state"))?
            .split_whitespace();
        let seed_hex = parts.next().ok_or_else(|| bad("missing rng seed"))?;
        if seed_hex.len() != 64 {
            return Err(bad("rng seed must be 32 bytes of hex"));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed_hex.as_bytes().chunks_exact(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| bad("bad rng seed"))?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| bad("bad rng seed"))?;
        }
        let stream: u64 = parts
            .next()
            .ok_or_else(|| bad("missing rng stream"))?
            .parse()
            .map_err(|_| bad("bad rng stream"))?;
        let word_pos: u128 = parts
            .next()
            .ok_or_else(|| bad("missing rng position"))?
            .parse()
            .map_err(|_| bad("bad rng position"))?;

        let m: usize = next_line(bytes)?
            .strip_prefix("tensors ")
            .ok_or_else(|| bad("missing tensor count"))?
            .parse()
            .map_err(|_| bad("bad tensor count"))?;
        let mut tensors = Vec::with_capacity(m);
        for _ in 0..m {
            let line = next_line(bytes)?;
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("bad tensor line"))?;
            let shape_s = parts.next().ok_or_else(|| bad("bad tensor line"))?;
            let offset: usize = parts
                .next()
                .ok_or_else(|| bad("bad tensor line"))?
                .parse()
                .map_err(|_| bad("bad tensor offset"))?;
            let len: usize = parts
                .next()
                .ok_or_else(|| bad("bad tensor line"))?
                .parse()
                .map_err(|_| bad("bad tensor length"))?;
            let shape = shape_s
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad("bad tensor shape")))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset,
                len,
            });
        }

        let nbytes: usize = next_line(bytes)?
            .strip_prefix("payload ")
            .ok_or_else(|| bad("missing payload size"))?
            .parse()
            .map_err(|_| bad("bad payload size"))?;
        if bytes.len() - pos != nbytes {
            return Err(LabError::Checkpoint(format!(
                "payload holds {} bytes, header says {nbytes}",
                bytes.len() - pos
            )));
        }
        Ok(Checkpoint {
            version,
            config,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            tensors,
            payload: bytes[pos..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Value equality plus bit equality of all parameters.
pub fn models_bit_equal(a: &CaitModel, b: &CaitModel) -> bool {
    a.store.len() == b.store.len()
        && a.store.iter().zip(b.store.iter()).all(|((_, pa), (_, pb))| {
            pa.name == pb.name
                && pa.trainable == pb.trainable
                && pa.value.shape() == pb.value.shape()
                && pa
                    .value
                    .data()
                    .iter()
                    .zip(pb.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Convenience: deterministic patches for smoke checks.
pub fn example_patches(cfg: &CaitConfig, seed: u64) -> Tensor {
    let mut rng = SeedRng::new(seed, streams::DATA);
    Tensor::from_vec(
        vec![cfg.patch_count, cfg.patch_dim()],
        rng.uniform_vec(cfg.patch_count * cfg.patch_dim(), 0.0, 1.0),
    )
    .expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use cait_core::cait::CaitConfig;

    fn toy_model(seed: u64) -> CaitModel {
        let cfg = CaitConfig::toy(2).unwrap();
        CaitModel::init(cfg, &mut SeedRng::new(seed, streams::MODEL_INIT)).unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let model = toy_model(5);
        let rng = SeedRng::new(5, streams::TRAIN).state();
        let ck = Checkpoint::from_model(&model, rng);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn restored_model_is_bit_identical() {
        let model = toy_model(6);
        let ck = Checkpoint::from_model(&model, SeedRng::new(6, 3).state());
        let restored = ck.to_model().unwrap();
        assert!(models_bit_equal(&model, &restored));

        let patches = example_patches(&model.config, 9);
        let (a, _) = model.infer(&patches, false).unwrap();
        let (b, _) = restored.infer(&patches, false).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = CaitConfig::toy(3).unwrap();
        let kv = config_to_kv(&cfg);
        let back = config_from_kv(&kv).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let model = toy_model(7);
        let mut bytes = Checkpoint::from_model(&model, SeedRng::new(7, 3).state()).encode();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(LabError::Checkpoint(_))
        ));
    }

    #[test]
    fn scale_diagonals_present_for_layerscale_runs() {
        let model = toy_model(8);
        let ck = Checkpoint::from_model(&model, SeedRng::new(8, 3).state());
        let diags = ck.scale_diagonals().unwrap();
        assert_eq!(diags.len(), 2 * model.config.total_depth());
        assert!(diags.values().all(|v| v.len() == model.config.d));
    }
}
