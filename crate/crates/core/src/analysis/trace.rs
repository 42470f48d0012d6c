use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::{ForwardOutput, Model};
use crate::error::{Error, Result};
use crate::tensor::Graph;
use crate::train::container::{self, Blob};
use crate::train::Dataset;

pub const TRACE_MAGIC: &[u8; 8] = b"DIATRCE1";
pub const TRACE_HEADER: &str = "stage,block,sample,channel,value";

/// Recorded vectors of one stage, `[block position][sample][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub width: usize,
    /// Block index within the stage of each traced position.
    pub blocks: Vec<usize>,
    pub h: Vec<Vec<Vec<f64>>>,
    /// Pooled descriptors `y_t`, when recorded.
    pub y: Option<Vec<Vec<Vec<f64>>>>,
}

impl StageTrace {
    pub fn new(width: usize, blocks: Vec<usize>, with_y: bool) -> Self {
        let n = blocks.len();
        StageTrace {
            width,
            blocks,
            h: vec![Vec::new(); n],
            y: with_y.then(|| vec![Vec::new(); n]),
        }
    }

    pub fn samples(&self) -> usize {
        self.h.first().map_or(0, |b| b.len())
    }
}

/// Attention maps keyed by stage, block and sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub stages: Vec<StageTrace>,
}

impl AttentionTrace {
    pub fn num_samples(&self) -> usize {
        self.stages.iter().map(|s| s.samples()).max().unwrap_or(0)
    }

    /// Append every sample of one forward pass.
    pub fn record(&mut self, graph: &Graph, out: &ForwardOutput) -> Result<()> {
        if self.stages.is_empty() {
            for steps in &out.attention {
                let blocks: Vec<usize> = steps.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(j, _)| j).collect();
                let width = steps.iter().flatten().next().map_or(0, |s| graph.shape(s.h)[1]);
                self.stages.push(StageTrace::new(width, blocks, true));
            }
        }
        if self.stages.len() != out.attention.len() {
            return Err(Error::Data("trace and forward pass disagree on stage count".into()));
        }
        for (st, steps) in self.stages.iter_mut().zip(&out.attention) {
            let present: Vec<_> = steps.iter().enumerate().filter_map(|(j, s)| s.map(|s| (j, s))).collect();
            if present.iter().map(|(j, _)| *j).ne(st.blocks.iter().copied()) {
                return Err(Error::Data("trace and forward pass disagree on traced blocks".into()));
            }
            for (pos, (_, step)) in present.iter().enumerate() {
                let h = graph.value(step.h);
                let w = h.shape()[1];
                st.h[pos].extend(h.data().chunks(w).map(|c| c.to_vec()));
                if let Some(y) = st.y.as_mut() {
                    let yv = graph.value(step.y);
                    y[pos].extend(yv.data().chunks(w).map(|c| c.to_vec()));
                }
            }
        }
        Ok(())
    }

    /// Trace the first `cap` samples of `data` through `model` in eval mode.
    pub fn collect(model: &Model, data: &Dataset, cap: usize, batch_size: usize) -> Result<Self> {
        let n = data.len().min(cap);
        let idx: Vec<usize> = (0..n).collect();
        let mut trace = AttentionTrace::default();
        for chunk in idx.chunks(batch_size.max(1)) {
            let (images, _) = data.batch(chunk, None);
            let mut s = model.session(false, false);
            let x = s.graph.constant(images);
            let out = model.forward(&mut s, x)?;
            trace.record(&s.graph, &out)?;
        }
        Ok(trace)
    }

    fn check(&self) -> Result<()> {
        for (i, st) in self.stages.iter().enumerate() {
            let s = st.samples();
            let ok_h = st.h.len() == st.blocks.len()
                && st.h.iter().all(|b| b.len() == s && b.iter().all(|v| v.len() == st.width));
            let ok_y = st.y.as_ref().map_or(true, |y| {
                y.len() == st.blocks.len() && y.iter().all(|b| b.len() == s && b.iter().all(|v| v.len() == st.width))
            });
            if !ok_h || !ok_y {
                return Err(Error::Data(format!("trace stage {i} is ragged")));
            }
        }
        Ok(())
    }

    fn meta_lines(&self) -> Vec<(String, String)> {
        let join = |v: Vec<String>, sep: &str| v.join(sep);
        vec![
            ("stages".into(), self.stages.len().to_string()),
            ("samples".into(), self.num_samples().to_string()),
            (
                "widths".into(),
                join(self.stages.iter().map(|s| s.width.to_string()).collect(), ","),
            ),
            (
                "blocks".into(),
                join(
                    self.stages
                        .iter()
                        .map(|s| join(s.blocks.iter().map(|b| b.to_string()).collect(), ","))
                        .collect(),
                    ";",
                ),
            ),
            (
                "has_y".into(),
                self.stages.iter().all(|s| s.y.is_some()).to_string(),
            ),
        ]
    }

    fn skeleton(meta: &[(String, String)]) -> Result<(Self, usize, bool)> {
        let get = |k: &str| {
            meta.iter()
                .find(|(m, _)| m == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("trace metadata lacks '{k}'")))
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad trace metadata value '{s}'")));
        let stages = num(get("stages")?)?;
        let samples = num(get("samples")?)?;
        let has_y = get("has_y")? == "true";
        let widths: Vec<usize> = if stages == 0 {
            vec![]
        } else {
            get("widths")?.split(',').map(num).collect::<Result<_>>()?
        };
        let blocks: Vec<Vec<usize>> = if stages == 0 {
            vec![]
        } else {
            get("blocks")?
                .split(';')
                .map(|row| {
                    if row.is_empty() {
                        Ok(vec![])
                    } else {
                        row.split(',').map(num).collect()
                    }
                })
                .collect::<Result<_>>()?
        };
        if widths.len() != stages || blocks.len() != stages {
            return Err(Error::Data("trace metadata stage lists disagree".into()));
        }
        let stages = widths
            .into_iter()
            .zip(blocks)
            .map(|(w, b)| StageTrace::new(w, b, has_y))
            .collect();
        Ok((AttentionTrace { stages }, samples, has_y))
    }

    /// `stage,block,sample,channel,value` rows for `h` (or `y`).
    pub fn to_csv(&self, which_y: bool) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for (i, st) in self.stages.iter().enumerate() {
            let data = if which_y {
                match &st.y {
                    Some(y) => y,
                    None => continue,
                }
            } else {
                &st.h
            };
            for (pos, &b) in st.blocks.iter().enumerate() {
                for (sample, v) in data[pos].iter().enumerate() {
                    for (c, x) in v.iter().enumerate() {
                        let _ = writeln!(out, "{i},{b},{sample},{c},{x}");
                    }
                }
            }
        }
        out
    }

    pub fn meta_text(&self) -> String {
        self.meta_lines().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Sidecar paths used by [`AttentionTrace::write_csv`]: `x.csv` gets
    /// `x.meta` and, for descriptors, `x.y.csv`.
    pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
        (path.with_extension("meta"), path.with_extension("y.csv"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.check()?;
        let (meta, ypath) = Self::sidecar_paths(path);
        std::fs::write(path, self.to_csv(false))?;
        std::fs::write(meta, self.meta_text())?;
        if self.stages.iter().all(|s| s.y.is_some()) && !self.stages.is_empty() {
            std::fs::write(ypath, self.to_csv(true))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (meta_path, ypath) = Self::sidecar_paths(path);
        let meta: Vec<(String, String)> = std::fs::read_to_string(meta_path)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Data(format!("bad trace metadata line '{l}'")))
            })
            .collect::<Result<_>>()?;
        let (mut trace, samples, has_y) = Self::skeleton(&meta)?;
        trace.fill_from_csv(&std::fs::read_to_string(path)?, samples, false)?;
        if has_y && !trace.stages.is_empty() {
            trace.fill_from_csv(&std::fs::read_to_string(ypath)?, samples, true)?;
        }
        trace.check()?;
        Ok(trace)
    }

    fn fill_from_csv(&mut self, text: &str, samples: usize, which_y: bool) -> Result<()> {
        for st in &mut self.stages {
            let w = st.width;
            let dst = if which_y { st.y.as_mut().expect("y") } else { &mut st.h };
            for b in dst.iter_mut() {
                *b = vec![vec![f64::NAN; w]; samples];
            }
        }
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Error::Data(format!("trace file must start with '{TRACE_HEADER}'")));
        }
        let mut filled = 0usize;
        for (n, line) in lines.enumerate() {
            let bad = || Error::Data(format!("trace line {}: malformed", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let (stage, block, sample, ch) = (idx(f[0])?, idx(f[1])?, idx(f[2])?, idx(f[3])?);
            let value: f64 = f[4].parse().map_err(|_| bad())?;
            let st = self.stages.get_mut(stage).ok_or_else(bad)?;
            let pos = st.blocks.iter().position(|&b| b == block).ok_or_else(bad)?;
            let dst = if which_y { st.y.as_mut().expect("y") } else { &mut st.h };
            let slot = dst[pos].get_mut(sample).and_then(|v| v.get_mut(ch)).ok_or_else(bad)?;
            *slot = value;
            filled += 1;
        }
        let expected: usize = self.stages.iter().map(|s| s.blocks.len() * samples * s.width).sum();
        if filled != expected {
            return Err(Error::Data(format!("trace holds {filled} values, metadata implies {expected}")));
        }
        Ok(())
    }

    /// Binary form: trace metadata, then one blob per stage, block and
    /// kind, named `h/<stage>/<block>` or `y/<stage>/<block>`, each
    /// `[samples × width]` `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut blobs = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            let kinds = [("h", Some(&st.h)), ("y", st.y.as_ref())];
            for (kind, data) in kinds {
                let Some(data) = data else { continue };
                for (pos, &b) in st.blocks.iter().enumerate() {
                    blobs.push(Blob {
                        name: format!("{kind}/{i}/{b}"),
                        values: data[pos].iter().flatten().map(|&v| v as f32).collect(),
                    });
                }
            }
        }
        container::encode(TRACE_MAGIC, &self.meta_lines(), &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, blobs) = container::decode(TRACE_MAGIC, bytes)?;
        let (mut trace, samples, _) = Self::skeleton(&meta)?;
        for blob in blobs {
            let parts: Vec<&str> = blob.name.split('/').collect();
            let bad = || Error::Data(format!("unexpected trace entry '{}'", blob.name));
            if parts.len() != 3 {
                return Err(bad());
            }
            let stage: usize = parts[1].parse().map_err(|_| bad())?;
            let block: usize = parts[2].parse().map_err(|_| bad())?;
            let st = trace.stages.get_mut(stage).ok_or_else(bad)?;
            let pos = st.blocks.iter().position(|&b| b == block).ok_or_else(bad)?;
            let w = st.width;
            if blob.values.len() != samples * w {
                return Err(bad());
            }
            let rows: Vec<Vec<f64>> = if w == 0 {
                vec![vec![]; samples]
            } else {
                blob.values.chunks(w).map(|c| c.iter().map(|&v| v as f64).collect()).collect()
            };
            match parts[0] {
                "h" => st.h[pos] = rows,
                "y" => st.y.as_mut().ok_or_else(bad)?[pos] = rows,
                _ => return Err(bad()),
            }
        }
        trace.check()?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
