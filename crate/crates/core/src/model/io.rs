//! On-disk formats: `key = value` config files and the little-endian weight
//! blob (`SWIFTDEC-WGT\0\0\0\0` followed by shape-prefixed f32 arrays).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tensor::Matrix;
use super::tiny::{LayerWeights, TinyWeights};
use super::ModelConfig;
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 16] = b"SWIFTDEC-WGT\0\0\0\0";

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn parse_field<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Parse(format!("`{key}` has invalid value `{v}`"))),
    }
}

impl ModelConfig {
    /// Reads the known keys from a parsed config, defaulting the rest.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            vocab_size: parse_field(map, "vocab_size", d.vocab_size)?,
            num_layers: parse_field(map, "num_layers", d.num_layers)?,
            hidden_dim: parse_field(map, "hidden_dim", d.hidden_dim)?,
            num_heads: parse_field(map, "num_heads", d.num_heads)?,
            num_kv_heads: parse_field(map, "num_kv_heads", d.num_kv_heads)?,
            gamma: parse_field(map, "gamma", d.gamma)?,
            max_positions: parse_field(map, "max_positions", d.max_positions)?,
            init_seed: parse_field(map, "init_seed", d.init_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size = {}\nnum_layers = {}\nhidden_dim = {}\nnum_heads = {}\nnum_kv_heads = {}\ngamma = {}\nmax_positions = {}\ninit_seed = {}\n",
            self.vocab_size,
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.num_kv_heads,
            self.gamma,
            self.max_positions,
            self.init_seed
        )
    }
}

fn write_array<W: Write>(out: &mut W, dims: &[usize], data: &[f32]) -> Result<()> {
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Weights(format!("truncated blob: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_array<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    let ndim = read_u32(r)? as usize;
    if ndim == 0 || ndim > 2 {
        return Err(Error::Weights(format!("unsupported rank {ndim}")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Weights(format!("truncated blob: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let (dims, data) = read_array(r)?;
    if dims.len() != 2 {
        return Err(Error::Weights(format!(
            "expected a matrix, got shape {dims:?}"
        )));
    }
    Matrix::from_vec(dims[0], dims[1], data)
}

fn read_vector<R: Read>(r: &mut R) -> Result<Vec<f32>> {
    let (dims, data) = read_array(r)?;
    if dims.len() != 1 {
        return Err(Error::Weights(format!(
            "expected a vector, got shape {dims:?}"
        )));
    }
    Ok(data)
}

impl TinyWeights {
    /// Tensor order: embedding; per layer attn_norm, wq, wk, wv, wo,
    /// mlp_norm, w_up, w_down; final_norm; draft heads.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let m = |out: &mut W, m: &Matrix| write_array(out, &[m.rows(), m.cols()], m.data());
        let v = |out: &mut W, v: &[f32]| write_array(out, &[v.len()], v);
        out.write_all(WEIGHTS_MAGIC)?;
        m(&mut out, &self.embedding)?;
        for l in &self.layers {
            v(&mut out, &l.attn_norm)?;
            m(&mut out, &l.wq)?;
            m(&mut out, &l.wk)?;
            m(&mut out, &l.wv)?;
            m(&mut out, &l.wo)?;
            v(&mut out, &l.mlp_norm)?;
            m(&mut out, &l.w_up)?;
            m(&mut out, &l.w_down)?;
        }
        v(&mut out, &self.final_norm)?;
        for f in &self.draft_heads {
            m(&mut out, f)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, config: &ModelConfig) -> Result<Self> {
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Weights(format!("missing header: {e}")))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Weights("bad magic header".into()));
        }
        let embedding = read_matrix(&mut r)?;
        let layers = (0..config.num_layers)
            .map(|_| {
                Ok(LayerWeights {
                    attn_norm: read_vector(&mut r)?,
                    wq: read_matrix(&mut r)?,
                    wk: read_matrix(&mut r)?,
                    wv: read_matrix(&mut r)?,
                    wo: read_matrix(&mut r)?,
                    mlp_norm: read_vector(&mut r)?,
                    w_up: read_matrix(&mut r)?,
                    w_down: read_matrix(&mut r)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = read_vector(&mut r)?;
        let draft_heads = (0..config.gamma)
            .map(|_| read_matrix(&mut r))
            .collect::<Result<_>>()?;
        let weights = Self {
            embedding,
            layers,
            final_norm,
            draft_heads,
        };
        weights.check(config)?;
        Ok(weights)
    }
}
