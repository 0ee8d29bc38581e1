//! Plain-text network checkpoints.
//!
//! ```text
//! SPCHK1
//! config <n>            followed by n lines of configuration text
//! ranking <magnitude|signed>
//! layers <L>
//! layer <in> <out> <prunable 0|1> <retained> <has_bias 0|1>
//! w <in*out values>
//! b <out values>        only when has_bias = 1
//! s <in*out values>
//! m <in*out values>
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so save/load is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Network, PrunableLayer, Ranking};

pub const MAGIC: &str = "SPCHK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Configuration text echoed alongside the parameters.
    pub config: String,
}

fn join(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
    }
    out
}

impl Checkpoint {
    pub fn new(network: Network, config: impl Into<String>) -> Self {
        Self {
            network,
            config: config.into(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let config_lines: Vec<&str> = if self.config.is_empty() {
            Vec::new()
        } else {
            self.config.lines().collect()
        };
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "config {}", config_lines.len());
        for line in &config_lines {
            let _ = writeln!(out, "{line}");
        }
        let ranking = match self.network.ranking {
            Ranking::Magnitude => "magnitude",
            Ranking::Signed => "signed",
        };
        let _ = writeln!(out, "ranking {ranking}");
        let _ = writeln!(out, "layers {}", self.network.layers.len());
        for l in &self.network.layers {
            let _ = writeln!(
                out,
                "layer {} {} {} {} {}",
                l.in_dim(),
                l.out_dim(),
                u8::from(l.prunable),
                l.retained,
                u8::from(l.bias.is_some())
            );
            let _ = writeln!(out, "w {}", join(l.weights.data()));
            if let Some(b) = &l.bias {
                let _ = writeln!(out, "b {}", join(b.data()));
            }
            let _ = writeln!(out, "s {}", join(l.scores.data()));
            let _ = writeln!(out, "m {}", join(l.mask.data()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected {what}")))
        };
        let magic = next("magic")?;
        if magic.trim() != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let n_config: usize = field(next("config header")?, "config")?;
        let mut config = Vec::with_capacity(n_config);
        for _ in 0..n_config {
            config.push(next("config line")?);
        }
        let ranking = match rest(next("ranking")?, "ranking")? {
            "magnitude" => Ranking::Magnitude,
            "signed" => Ranking::Signed,
            other => return Err(Error::Checkpoint(format!("unknown ranking {other:?}"))),
        };
        let n_layers: usize = field(next("layer count")?, "layers")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let header: Vec<usize> = rest(next("layer header")?, "layer")?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Checkpoint(format!("layer {i}: bad header token {t:?}"))))
                .collect::<Result<_>>()?;
            let [inp, out, prunable, retained, has_bias] = header[..] else {
                return Err(Error::Checkpoint(format!("layer {i}: header needs 5 fields")));
            };
            let n = inp * out;
            let weights = values(next("weights")?, "w", n, i)?;
            let bias = if has_bias == 1 {
                Some(Tensor::vector(values(next("bias")?, "b", out, i)?))
            } else {
                None
            };
            let scores = values(next("scores")?, "s", n, i)?;
            let mask = values(next("mask")?, "m", n, i)?;
            if prunable == 1 && mask.iter().filter(|&&m| m != 0.0).count() != retained {
                return Err(Error::Checkpoint(format!("layer {i}: mask does not retain {retained} weights")));
            }
            let mut layer = PrunableLayer::new(Tensor::matrix(inp, out, weights)?, bias);
            layer.scores = Tensor::matrix(inp, out, scores)?;
            layer.mask = Tensor::matrix(inp, out, mask)?;
            layer.prunable = prunable == 1;
            layer.retained = retained;
            layers.push(layer);
        }
        let mut network = Network::from_layers(layers)?;
        network.ranking = ranking;
        Ok(Self {
            network,
            config: config.join("\n"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn rest<'a>(line: &'a str, tag: &str) -> Result<&'a str> {
    line.strip_prefix(tag)
        .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
        .ok_or_else(|| Error::Checkpoint(format!("expected `{tag}` line, found {line:?}")))
}

fn field<T: std::str::FromStr>(line: &str, tag: &str) -> Result<T> {
    let r = rest(line, tag)?;
    r.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad `{tag}` value {r:?}")))
}

fn values(line: &str, tag: &str, expected: usize, layer: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = rest(line, tag)?
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Checkpoint(format!("layer {layer}: bad number {t:?} in `{tag}`")))
        })
        .collect::<Result<_>>()?;
    if v.len() != expected {
        return Err(Error::Checkpoint(format!(
            "layer {layer}: `{tag}` has {} values, expected {expected}",
            v.len()
        )));
    }
    Ok(v)
}
