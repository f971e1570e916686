//! On-disk formats: dataset directories, checkpoints, metrics CSV and
//! round-record JSON lines.
//!
//! A dataset directory holds `manifest.tsv` (`<index>\t<label>` per line),
//! `img/<index>.pgm` (binary PGM, maxval 255) and an optional `config.json`
//! echo of the generator settings.
//!
//! A checkpoint is `CAFCKPT\n`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, the parameter tensors then the momentum buffers as
//! little-endian `f64` in declaration order, and a trailing FNV-1a 64 digest
//! of everything between the version and the digest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::RoundRecord;
use crate::codec::{Alphabet, LabelSeq};
use crate::error::{Error, Result};
use crate::forge::{ForgeConfig, GrayImage, LabeledSample};
use crate::net::{LayerParams, ModelParams, NetConfig, Network};
use crate::rng::{fnv1a_extend, RandomSource, FNV_OFFSET};
use crate::tensor::Tensor;
use crate::trainer::{OptimConfig, TrainState};

pub const MANIFEST: &str = "manifest.tsv";
pub const IMAGE_DIR: &str = "img";
pub const CONFIG_ECHO: &str = "config.json";

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAFCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes any serializable value as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, "json", e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, "json", e.to_string()))
}

// ---- PGM ----

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "PGM header", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(path, "PGM magic", format!("expected P5, found {}", fields[0])));
    }
    let num = |i: usize, name: &str| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| format_err(path, format!("PGM {name}"), format!("not a number: {}", fields[i])))
    };
    let (w, h, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval != 255 {
        return Err(format_err(path, "PGM maxval", format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(format_err(
            path,
            "PGM raster",
            format!("expected {} bytes for {w}x{h}, found {}", w * h, raster.len()),
        ));
    }
    GrayImage::new(w, h, raster.to_vec()).map_err(|e| format_err(path, "PGM dimensions", e.to_string()))
}

// ---- datasets ----

fn index_width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len().max(5)
}

/// Writes `samples` into `dir` (created if missing). `config` is echoed to
/// `config.json` when given.
pub fn save_dataset(samples: &[LabeledSample], dir: &Path, config: Option<&ForgeConfig>) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let width = index_width(samples.len());
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let idx = format!("{i:0width$}");
        manifest.push_str(&format!("{idx}\t{}\n", s.label.as_str()));
        write_file(&img_dir.join(format!("{idx}.pgm")), &encode_pgm(&s.image))?;
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())?;
    if let Some(cfg) = config {
        write_json(cfg, &dir.join(CONFIG_ECHO))?;
    }
    Ok(())
}

/// The generator settings echoed next to a dataset, if present.
pub fn read_dataset_config(dir: &Path) -> Result<Option<ForgeConfig>> {
    let path = dir.join(CONFIG_ECHO);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

/// Reads a dataset directory, validating every label against `alphabet`.
/// All images must share one size and all labels one length.
pub fn load_dataset(dir: &Path, alphabet: &Alphabet) -> Result<Vec<LabeledSample>> {
    let manifest_path = dir.join(MANIFEST);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.is_empty() {
            continue;
        }
        let (idx, label) = line.split_once('\t').ok_or_else(|| {
            format_err(&manifest_path, format!("line {}", n + 1), "expected <index>\\t<label>")
        })?;
        if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format_err(&manifest_path, format!("line {} index", n + 1), format!("{idx:?} is not an index")));
        }
        let label = LabelSeq::new(label, alphabet)
            .map_err(|e| format_err(&manifest_path, format!("line {} label", n + 1), e.to_string()))?;
        entries.push((idx.to_string(), label));
    }

    let img_dir = dir.join(IMAGE_DIR);
    let found = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .count();
    if found != entries.len() {
        return Err(Error::CountMismatch {
            path: dir.to_path_buf(),
            manifest: entries.len(),
            found,
        });
    }

    let mut samples: Vec<LabeledSample> = Vec::with_capacity(entries.len());
    for (idx, label) in entries {
        let path = img_dir.join(format!("{idx}.pgm"));
        let image = decode_pgm(&read_file(&path)?, &path)?;
        if let Some(first) = samples.first() {
            if (image.width(), image.height()) != (first.image.width(), first.image.height()) {
                return Err(format_err(
                    &path,
                    "PGM dimensions",
                    format!(
                        "{}x{} differs from the dataset's {}x{}",
                        image.width(),
                        image.height(),
                        first.image.width(),
                        first.image.height()
                    ),
                ));
            }
            if label.len() != first.label.len() {
                return Err(format_err(
                    &manifest_path,
                    format!("label of {idx}"),
                    format!("length {} differs from the dataset's {}", label.len(), first.label.len()),
                ));
            }
        }
        samples.push(LabeledSample { image, label });
    }
    Ok(samples)
}

// ---- checkpoints ----

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    optim: OptimConfig,
    t: u64,
    seed: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    word_pos: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

struct HashingWriter<W> {
    inner: W,
    hash: u64,
}

impl<W: Write> HashingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hash = fnv1a_extend(self.hash, bytes);
        self.inner.write_all(bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let state = &ckpt.state;
    let header = CheckpointHeader {
        net: ckpt.net.clone(),
        optim: ckpt.optim.clone(),
        t: state.t,
        seed: state.rs.seed(),
        word_pos: state.rs.word_pos().to_string(),
        tensors: state
            .params
            .tensors()
            .map(|(name, t, _)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| format_err(path, "header", e.to_string()))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let mut hw = HashingWriter {
            inner: w,
            hash: FNV_OFFSET,
        };
        hw.put(&(header.len() as u64).to_le_bytes())?;
        hw.put(&header)?;
        for params in [&state.params, &state.velocity] {
            for (_, t, _) in params.tensors() {
                for v in t.data() {
                    hw.put(&v.to_le_bytes())?;
                }
            }
        }
        let digest = hw.hash;
        let mut w = hw.inner;
        w.write_all(&digest.to_le_bytes())?;
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + 8 + 8 {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let (body, digest) = bytes[12..].split_at(bytes.len() - 12 - 8);
    let stored = u64::from_le_bytes(digest.try_into().expect("8 bytes"));
    let actual = fnv1a_extend(FNV_OFFSET, body);
    if stored != actual {
        return Err(corrupt(format!("digest {actual:016x} does not match stored {stored:016x}")));
    }
    let header_len = u64::from_le_bytes(body[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[8..header_end]).map_err(|e| format_err(path, "header", e.to_string()))?;
    let word_pos: u128 = header
        .word_pos
        .parse()
        .map_err(|_| format_err(path, "word_pos", format!("not an integer: {}", header.word_pos)))?;

    let net = Network::new(header.net.clone()).map_err(|e| format_err(path, "net config", e.to_string()))?;
    let template = net.zero_params();
    let expected: Vec<(String, Vec<usize>)> = template
        .tensors()
        .map(|(n, t, _)| (n, t.shape().to_vec()))
        .collect();
    let listed: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != listed {
        return Err(format_err(path, "tensors", "tensor list does not match the network configuration"));
    }
    let payload = &body[header_end..];
    let count = template.param_count();
    if payload.len() != 2 * count * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            2 * count * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut fill = |template: &ModelParams| -> Result<ModelParams> {
        let layers = template
            .layers
            .iter()
            .map(|l| {
                let mut take = |t: &Tensor| Tensor::from_vec(t.shape(), values.by_ref().take(t.len()).collect());
                Ok(LayerParams {
                    name: l.name.clone(),
                    weight: take(&l.weight)?,
                    bias: take(&l.bias)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { layers })
    };
    let params = fill(&template)?;
    let velocity = fill(&template)?;
    let mut rs = RandomSource::new(header.seed);
    rs.set_word_pos(word_pos);
    Ok(Checkpoint {
        net: header.net,
        optim: header.optim,
        state: TrainState {
            params,
            velocity,
            t: header.t,
            rs,
        },
    })
}

// ---- metrics ----

pub const METRICS_HEADER: &str = "run,round,iter,lr,loss,seq_acc,char_acc,train_size,mean_eta";

/// One evaluation point. Missing values are written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub round: usize,
    pub iter: u64,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub seq_acc: Option<f64>,
    pub char_acc: Option<f64>,
    pub train_size: Option<usize>,
    pub mean_eta: Option<f64>,
}

/// Six significant digits, `%g` style: fixed notation for exponents in
/// `[-4, 6)`, otherwise scientific; trailing zeros trimmed.
pub fn format_sig6(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Renders rows sorted by `(run, round, iter)`.
pub fn render_metrics(rows: &[MetricsRow]) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.run, a.round, a.iter).cmp(&(&b.run, b.round, b.iter)));
    let f = |v: Option<f64>| v.map(format_sig6).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let write = || -> csv::Result<()> {
        w.write_record(METRICS_HEADER.split(','))?;
        for r in sorted {
            w.write_record([
                r.run.clone(),
                r.round.to_string(),
                r.iter.to_string(),
                f(r.lr),
                f(r.loss),
                f(r.seq_acc),
                f(r.char_acc),
                r.train_size.map(|n| n.to_string()).unwrap_or_default(),
                f(r.mean_eta),
            ])?;
        }
        Ok(())
    };
    write().expect("writing to memory cannot fail");
    let bytes = w.into_inner().expect("writing to memory cannot fail");
    String::from_utf8(bytes).expect("fields are UTF-8")
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_file(path, render_metrics(rows).as_bytes())
}

// ---- round records ----

pub fn write_round_records<'a>(records: impl IntoIterator<Item = &'a RoundRecord>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| format_err(path, "record", e.to_string()))?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_round_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| format_err(path, "encoding", e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| format_err(path, format!("line {}", n + 1), e.to_string())))
        .collect()
}

/// `dir/name`, creating `dir` first.
pub fn prepare_output(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}
