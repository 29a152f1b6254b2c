//! Line-delimited JSON frame traces for record and replay.
//!
//! The first line is a header carrying the model layout, seed and the full
//! engine config with its hash. Each following line is one frame: key,
//! value and residual blocks as base64 little-endian `f32`, the pose as 12
//! reals (`[R | t]` row-major), per-patch points and confidences, and the
//! step metrics recorded when the frame was first run.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{EngineConfig, ModelDims};
use crate::engine::{FrameInput, StepMetrics};
use crate::geometry::{PointMap, Pose};
use crate::rating::FfnResidual;

pub const TRACE_FORMAT: &str = "ovkv-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub seed: u64,
    pub config_hash: String,
    pub config: EngineConfig,
}

impl TraceHeader {
    pub fn new(config: &EngineConfig, seed: u64) -> Self {
        Self {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            dims: config.dims,
            seed,
            config_hash: config_hash(config),
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    frame_index: u64,
    keys: Vec<String>,
    values: Vec<String>,
    residuals: Vec<String>,
    pose: [f64; 12],
    points: Vec<[f64; 3]>,
    confidence: Vec<f64>,
    metrics: StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header(Box<TraceHeader>),
    Frame(Box<FrameRecord>),
}

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_hash(config: &EngineConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_f32(xs: &[f32]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f32(s: &str) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32s", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// One replayable frame: the engine input and what the engine reported.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFrame {
    pub input: FrameInput,
    pub metrics: StepMetrics,
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> std::io::Result<Self> {
        serde_json::to_writer(&mut out, &Record::Header(Box::new(header.clone())))?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write_frame(&mut self, frame: &FrameInput, metrics: &StepMetrics) -> std::io::Result<()> {
        let rec = FrameRecord {
            frame_index: frame.frame_index,
            keys: frame.keys.iter().map(|k| encode_f32(k)).collect(),
            values: frame.values.iter().map(|v| encode_f32(v)).collect(),
            residuals: frame.residuals.iter().map(|r| encode_f32(r.as_slice())).collect(),
            pose: frame.pose.to_row_major(),
            points: frame.points.points.clone(),
            confidence: frame.points.confidence.clone(),
            metrics: metrics.clone(),
        };
        serde_json::to_writer(&mut self.out, &Record::Frame(Box::new(rec)))?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// A fully parsed trace. An empty input has no header and no frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: Option<TraceHeader>,
    pub frames: Vec<TraceFrame>,
}

fn decode_frame(rec: FrameRecord, dims: &ModelDims, line: usize) -> Result<TraceFrame, TraceError> {
    let err = |msg: String| TraceError::Parse { line, msg };
    let width = dims.token_width();
    let block = dims.tokens_per_frame() * width;
    let decode_blocks = |blocks: &[String], what: &str| -> Result<Vec<Vec<f32>>, TraceError> {
        if blocks.len() != dims.num_layers {
            return Err(err(format!("{what}: {} layers, expected {}", blocks.len(), dims.num_layers)));
        }
        blocks
            .iter()
            .map(|b| {
                let v = decode_f32(b).map_err(|m| err(format!("{what}: {m}")))?;
                if v.len() != block {
                    return Err(err(format!("{what}: block of {} values, expected {block}", v.len())));
                }
                Ok(v)
            })
            .collect()
    };
    let keys = decode_blocks(&rec.keys, "keys")?;
    let values = decode_blocks(&rec.values, "values")?;
    let residuals = decode_blocks(&rec.residuals, "residuals")?
        .into_iter()
        .map(|r| FfnResidual::new(width, r).map_err(|e| err(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let pose = Pose::from_row_major(rec.pose).map_err(|e| err(e.to_string()))?;
    let points = PointMap {
        points: rec.points,
        confidence: rec.confidence,
    };
    points.validate(dims.num_patches()).map_err(|e| err(e.to_string()))?;
    Ok(TraceFrame {
        input: FrameInput {
            frame_index: rec.frame_index,
            keys,
            values,
            residuals,
            pose,
            points,
        },
        metrics: rec.metrics,
    })
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Trace, TraceError> {
    let mut header: Option<TraceHeader> = None;
    let mut frames = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        match (rec, &header) {
            (Record::Header(h), None) => {
                if h.format != TRACE_FORMAT || h.version != TRACE_VERSION {
                    return Err(TraceError::Parse {
                        line: line_no,
                        msg: format!("unsupported trace {} v{}", h.format, h.version),
                    });
                }
                if h.config_hash != config_hash(&h.config) || h.dims != h.config.dims {
                    return Err(TraceError::Parse {
                        line: line_no,
                        msg: "header config does not match its hash".into(),
                    });
                }
                header = Some(*h);
            }
            (Record::Header(_), Some(_)) => {
                return Err(TraceError::Parse {
                    line: line_no,
                    msg: "second header".into(),
                })
            }
            (Record::Frame(_), None) => {
                return Err(TraceError::Parse {
                    line: line_no,
                    msg: "frame before header".into(),
                })
            }
            (Record::Frame(rec), Some(h)) => frames.push(decode_frame(*rec, &h.dims, line_no)?),
        }
    }
    Ok(Trace { header, frames })
}
