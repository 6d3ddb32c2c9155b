//! Feature extractors behind a common port. The pretrained encoder used for
//! real corpora runs as an external command; the built-in encoders are
//! deterministic pixel statistics for offline runs and tests.

use std::io::Write;
use std::process::{Command, Stdio};

use protoguide_core::ImageTensor;
use serde::{Deserialize, Serialize};

pub trait EncoderPort {
    /// Name and version together identify cached embeddings.
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, image: &ImageTensor) -> std::result::Result<Vec<f64>, String>;
}

/// Per-channel mean; `D` equals the channel count.
#[derive(Debug, Clone)]
pub struct MeanPixelEncoder {
    pub channels: usize,
}

impl EncoderPort for MeanPixelEncoder {
    fn name(&self) -> &str {
        "mean_pixel"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn dim(&self) -> usize {
        self.channels
    }

    fn encode(&self, image: &ImageTensor) -> std::result::Result<Vec<f64>, String> {
        let [c, h, w] = image.shape();
        if c != self.channels {
            return Err(format!("expected {} channels, got {c}", self.channels));
        }
        let plane = h * w;
        Ok(image.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect())
    }
}

/// Average pooling onto a `grid x grid` layout per channel; `D = C * grid^2`.
#[derive(Debug, Clone)]
pub struct PooledGridEncoder {
    pub channels: usize,
    pub grid: usize,
    version: String,
}

impl PooledGridEncoder {
    pub fn new(channels: usize, grid: usize) -> Self {
        Self { channels, grid, version: format!("1-g{grid}") }
    }
}

impl EncoderPort for PooledGridEncoder {
    fn name(&self) -> &str {
        "pooled_grid"
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn dim(&self) -> usize {
        self.channels * self.grid * self.grid
    }

    fn encode(&self, image: &ImageTensor) -> std::result::Result<Vec<f64>, String> {
        let [c, h, w] = image.shape();
        let g = self.grid;
        if c != self.channels || g == 0 || h % g != 0 || w % g != 0 {
            return Err(format!("cannot pool a {c}x{h}x{w} image onto a {g}x{g} grid"));
        }
        let (bh, bw) = (h / g, w / g);
        let d = image.data();
        let mut out = Vec::with_capacity(self.dim());
        for ch in 0..c {
            for gy in 0..g {
                for gx in 0..g {
                    let mut s = 0.0;
                    for y in gy * bh..(gy + 1) * bh {
                        for x in gx * bw..(gx + 1) * bw {
                            s += d[ch * h * w + y * w + x];
                        }
                    }
                    out.push(s / (bh * bw) as f64);
                }
            }
        }
        Ok(out)
    }
}

/// Runs `program args..` once per image. The image is written to stdin as
/// `{"shape": [C, H, W], "data": [...]}` (channel-major, values in `[-1, 1]`)
/// and the command must print a JSON array of `dim` numbers.
#[derive(Debug, Clone)]
pub struct CommandEncoder {
    pub program: String,
    pub args: Vec<String>,
    pub dim: usize,
    pub name: String,
    pub version: String,
}

impl EncoderPort for CommandEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &ImageTensor) -> std::result::Result<Vec<f64>, String> {
        let payload = serde_json::json!({ "shape": image.shape(), "data": image.data() });
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("cannot start {}: {e}", self.program))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(payload.to_string().as_bytes())
            .map_err(|e| format!("writing to {}: {e}", self.program))?;
        let out = child.wait_with_output().map_err(|e| format!("waiting for {}: {e}", self.program))?;
        if !out.status.success() {
            let err = String::from_utf8_lossy(&out.stderr);
            return Err(format!("{} exited with {}: {}", self.program, out.status, err.trim()));
        }
        let v: Vec<f64> =
            serde_json::from_slice(&out.stdout).map_err(|e| format!("{} printed invalid output: {e}", self.program))?;
        if v.len() != self.dim {
            return Err(format!("{} returned {} values, expected {}", self.program, v.len(), self.dim));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    MeanPixel {},
    PooledGrid { grid: usize },
    Command { program: String, #[serde(default)] args: Vec<String>, dim: usize, name: String, version: String },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::PooledGrid { grid: 2 }
    }
}

impl EncoderSpec {
    pub fn build(&self, channels: usize) -> Box<dyn EncoderPort> {
        match self {
            EncoderSpec::MeanPixel {} => Box::new(MeanPixelEncoder { channels }),
            EncoderSpec::PooledGrid { grid } => Box::new(PooledGridEncoder::new(channels, *grid)),
            EncoderSpec::Command { program, args, dim, name, version } => Box::new(CommandEncoder {
                program: program.clone(),
                args: args.clone(),
                dim: *dim,
                name: name.clone(),
                version: version.clone(),
            }),
        }
    }

    pub fn dim(&self, channels: usize) -> usize {
        match self {
            EncoderSpec::MeanPixel {} => channels,
            EncoderSpec::PooledGrid { grid } => channels * grid * grid,
            EncoderSpec::Command { dim, .. } => *dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> ImageTensor {
        ImageTensor::new([2, 4, 4], (0..32).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn mean_pixel_means() {
        let e = MeanPixelEncoder { channels: 2 };
        assert_eq!(e.encode(&ramp()).unwrap(), vec![7.5, 23.5]);
        assert!(MeanPixelEncoder { channels: 3 }.encode(&ramp()).is_err());
    }

    #[test]
    fn pooled_grid_blocks() {
        let e = PooledGridEncoder::new(2, 2);
        assert_eq!(e.dim(), 8);
        let v = e.encode(&ramp()).unwrap();
        // Top-left 2x2 block of channel 0 holds 0, 1, 4, 5.
        assert_eq!(v[0], 2.5);
        assert_eq!(v[3], 12.5);
        assert_eq!(v[4], 18.5);
        assert!(PooledGridEncoder::new(2, 3).encode(&ramp()).is_err());
    }

    #[test]
    fn spec_parses_and_reports_dims() {
        let s: EncoderSpec = serde_json::from_str(r#"{"kind":"pooled_grid","grid":4}"#).unwrap();
        assert_eq!(s.dim(3), 48);
        assert_eq!(s.build(3).dim(), 48);
        assert!(serde_json::from_str::<EncoderSpec>(r#"{"kind":"mean_pixel","extra":1}"#).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn command_encoder_protocol() {
        let ok = CommandEncoder {
            program: "sh".into(),
            args: vec!["-c".into(), "cat >/dev/null; echo '[1.5, -2]'".into()],
            dim: 2,
            name: "sh".into(),
            version: "0".into(),
        };
        assert_eq!(ok.encode(&ramp()).unwrap(), vec![1.5, -2.0]);
        let wrong_dim = CommandEncoder { dim: 3, ..ok.clone() };
        assert!(wrong_dim.encode(&ramp()).unwrap_err().contains("expected 3"));
        let failing = CommandEncoder { args: vec!["-c".into(), "echo boom >&2; exit 4".into()], ..ok };
        assert!(failing.encode(&ramp()).unwrap_err().contains("boom"));
    }
}
