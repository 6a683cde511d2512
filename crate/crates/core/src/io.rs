//! Weight and feature file formats.
//!
//! Weights: self-describing binary — magic, format version, the canonical
//! config text, then per-tensor records (name, rank, extents, little-endian
//! f64 data). Written in canonical tensor order so save -> load -> save is
//! byte-identical.
//!
//! Features: either a binary matrix (magic, element width, rows, cols,
//! little-endian data) or whitespace-delimited text, one row per line.

use crate::attention::{MhaWeights, TalkingHeadsWeights};
use crate::config::ModelConfig;
use crate::conv::ConvWeights;
use crate::error::{Error, Result};
use crate::layer::{FfnWeights, LayerWeights, LnWeights};
use crate::model::ModelWeights;
use crate::tensor::Tensor;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const WEIGHT_MAGIC: &[u8; 8] = b"BSENCW01";
const WEIGHT_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 8] = b"BSENCF01";

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_weights(path: &Path, cfg: &ModelConfig, weights: &ModelWeights<f64>) -> Result<()> {
    weights.validate(cfg)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(WEIGHT_MAGIC)?;
    write_u32(&mut w, WEIGHT_VERSION)?;
    let cfg_text = cfg.to_text();
    write_u64(&mut w, cfg_text.len() as u64)?;
    w.write_all(cfg_text.as_bytes())?;
    let tensors = weights.tensors();
    write_u64(&mut w, tensors.len() as u64)?;
    for (name, t) in tensors {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len() as u32)?;
        for &e in t.shape() {
            write_u64(&mut w, e as u64)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, ModelWeights<f64>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHT_MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHT_VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported format version {version}"
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg = ModelConfig::from_text(
        std::str::from_utf8(&cfg_bytes)
            .map_err(|_| Error::WeightFormat("config text is not UTF-8".into()))?,
    )?;

    let count = read_u64(&mut r)? as usize;
    let mut reader = TensorReader {
        inner: r,
        remaining: count,
    };
    let weights = read_model(&mut reader, &cfg)?;
    if reader.remaining != 0 {
        return Err(Error::WeightFormat(format!(
            "{} unexpected trailing tensors",
            reader.remaining
        )));
    }
    weights.validate(&cfg)?;
    Ok((cfg, weights))
}

struct TensorReader<R: Read> {
    inner: R,
    remaining: usize,
}

impl<R: Read> TensorReader<R> {
    fn next(&mut self, expect_name: &str) -> Result<Tensor<f64>> {
        if self.remaining == 0 {
            return Err(Error::WeightFormat(format!(
                "file ended before tensor '{expect_name}'"
            )));
        }
        self.remaining -= 1;
        let name_len = read_u32(&mut self.inner)? as usize;
        let mut name = vec![0u8; name_len];
        self.inner.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?;
        if name != expect_name {
            return Err(Error::WeightFormat(format!(
                "expected tensor '{expect_name}', found '{name}'"
            )));
        }
        let rank = read_u32(&mut self.inner)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut self.inner)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            self.inner.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(shape, data)
    }
}

fn read_ln<R: Read>(r: &mut TensorReader<R>, gain: &str, bias: &str) -> Result<LnWeights<f64>> {
    Ok(LnWeights {
        gain: r.next(gain)?,
        bias: r.next(bias)?,
    })
}

fn read_model<R: Read>(r: &mut TensorReader<R>, cfg: &ModelConfig) -> Result<ModelWeights<f64>> {
    let input_proj = r.next("input_proj")?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let p = format!("layer.{i}");
        let ffn1 = if cfg.use_macaron {
            Some(FfnWeights {
                ln: read_ln(r, &format!("{p}.ffn1.ln_gain"), &format!("{p}.ffn1.ln_bias"))?,
                lin_in: r.next(&format!("{p}.ffn1.lin_in"))?,
                lin_out: r.next(&format!("{p}.ffn1.lin_out"))?,
            })
        } else {
            None
        };
        let ln_attn_in = read_ln(
            r,
            &format!("{p}.ln_attn_in.gain"),
            &format!("{p}.ln_attn_in.bias"),
        )?;
        let attn = MhaWeights {
            w_q: r.next(&format!("{p}.attn.w_q"))?,
            w_k: r.next(&format!("{p}.attn.w_k"))?,
            w_v: r.next(&format!("{p}.attn.w_v"))?,
            w_o: r.next(&format!("{p}.attn.w_o"))?,
            num_heads: cfg.num_heads,
        };
        let talking_heads = if cfg.use_talking_heads {
            Some(TalkingHeadsWeights {
                w_l: r.next(&format!("{p}.th.w_l"))?,
                w_r: r.next(&format!("{p}.th.w_r"))?,
            })
        } else {
            None
        };
        let (ln_conv_in, conv) = if cfg.use_conv {
            let ln = read_ln(
                r,
                &format!("{p}.ln_conv_in.gain"),
                &format!("{p}.ln_conv_in.bias"),
            )?;
            let conv = ConvWeights {
                pw1: r.next(&format!("{p}.conv.pw1"))?,
                dw: r.next(&format!("{p}.conv.dw"))?,
                ln_gain: r.next(&format!("{p}.conv.ln_gain"))?,
                ln_bias: r.next(&format!("{p}.conv.ln_bias"))?,
                pw2: r.next(&format!("{p}.conv.pw2"))?,
            };
            (Some(ln), Some(conv))
        } else {
            (None, None)
        };
        let ffn2 = FfnWeights {
            ln: read_ln(r, &format!("{p}.ffn2.ln_gain"), &format!("{p}.ffn2.ln_bias"))?,
            lin_in: r.next(&format!("{p}.ffn2.lin_in"))?,
            lin_out: r.next(&format!("{p}.ffn2.lin_out"))?,
        };
        let ln_final = read_ln(r, &format!("{p}.ln_final.gain"), &format!("{p}.ln_final.bias"))?;
        let compress_weights = if cfg.memory_slots > 0 {
            Some(r.next(&format!("{p}.compress_weights"))?)
        } else {
            None
        };
        layers.push(LayerWeights {
            ffn1,
            attn,
            talking_heads,
            conv,
            ffn2,
            ln_attn_in,
            ln_conv_in,
            ln_final,
            compress_weights,
        });
    }
    Ok(ModelWeights { input_proj, layers })
}

/// Element width of a binary feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureDtype {
    F32,
    F64,
}

pub fn save_features_binary(path: &Path, features: &Tensor<f64>, dtype: FeatureDtype) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&[match dtype {
        FeatureDtype::F32 => 4u8,
        FeatureDtype::F64 => 8u8,
    }])?;
    write_u64(&mut w, features.rows() as u64)?;
    write_u64(&mut w, features.cols() as u64)?;
    for &v in features.data() {
        match dtype {
            FeatureDtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
            FeatureDtype::F64 => w.write_all(&v.to_le_bytes())?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_features_text(path: &Path, features: &Tensor<f64>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for i in 0..features.rows() {
        let line: Vec<String> = features.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a feature matrix, auto-detecting binary (by magic) vs text.
pub fn load_features(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 8 && &bytes[..8] == FEATURE_MAGIC {
        let mut r = &bytes[8..];
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        match dtype[0] {
            4 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            8 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            other => {
                return Err(Error::FeatureFormat(format!(
                    "unknown element width {other}"
                )))
            }
        }
        return Tensor::new(vec![rows, cols], data);
    }

    // delimited text
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::FeatureFormat("file is neither binary features nor UTF-8".into()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::FeatureFormat(format!("line {}: bad number '{tok}'", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::FeatureFormat(format!(
                    "line {}: ragged row ({} vs {} columns)",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::FeatureFormat("no rows".into()));
    }
    Ok(Tensor::from_rows(&rows))
}
