//! On-disk formats: binary time-tag records, CSV/JSON exports, and the
//! run manifest.
//!
//! # Binary tag record
//!
//! A tag file is a flat sequence of 17-byte little-endian records:
//!
//! ```text
//! offset  size  field
//! 0       8     time_ps   (u64; negative times cannot be encoded and
//!                          are dropped with a warning at write time)
//! 8       1     channel
//! 9       8     aux       (origin label, see below)
//! ```
//!
//! `aux` keeps the simulation's ground-truth origin label when the writer
//! is asked to (`keep_origin`): the top byte is an origin code (0 photon,
//! 1 dark, 2 afterpulse, 255 unlabeled) and the low 56 bits carry the
//! payload — the photon's pair id, or the afterpulse's parent avalanche
//! time in two's complement. By default the label is stripped so recorded
//! data carries no information an experiment would not have; estimators
//! never read it either way.
//!
//! # Manifest
//!
//! A run directory gets a `manifest.json` naming every artifact with its
//! byte size, SHA-256, and record count, plus the digest of the resolved
//! configuration. The manifest contains no timestamps, so identical
//! inputs produce byte-identical manifests regardless of wall clock or
//! thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correlation::CorrelationHistogram;
use crate::error::{Error, Result};
use crate::types::{TagOrigin, TimeTag};

pub const TAG_RECORD_BYTES: usize = 17;

const ORIGIN_PHOTON: u8 = 0;
const ORIGIN_DARK: u8 = 1;
const ORIGIN_AFTERPULSE: u8 = 2;
const ORIGIN_UNLABELED: u8 = 0xFF;
const PAYLOAD_MASK: u64 = (1 << 56) - 1;

fn encode_aux(origin: &TagOrigin) -> u64 {
    match origin {
        TagOrigin::Photon { pair_id } => {
            ((ORIGIN_PHOTON as u64) << 56) | (pair_id & PAYLOAD_MASK)
        }
        TagOrigin::Dark => (ORIGIN_DARK as u64) << 56,
        TagOrigin::Afterpulse { parent_time_ps } => {
            ((ORIGIN_AFTERPULSE as u64) << 56) | ((*parent_time_ps as u64) & PAYLOAD_MASK)
        }
        TagOrigin::Unlabeled => (ORIGIN_UNLABELED as u64) << 56,
    }
}

fn decode_aux(aux: u64) -> TagOrigin {
    let payload = aux & PAYLOAD_MASK;
    match (aux >> 56) as u8 {
        ORIGIN_PHOTON => TagOrigin::Photon { pair_id: payload },
        ORIGIN_DARK => TagOrigin::Dark,
        ORIGIN_AFTERPULSE => TagOrigin::Afterpulse {
            // Sign-extend the 56-bit two's-complement payload.
            parent_time_ps: ((payload << 8) as i64) >> 8,
        },
        _ => TagOrigin::Unlabeled,
    }
}

/// Writer that tees everything through a SHA-256 hasher, so artifact
/// digests come for free while streaming.
pub struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> HashingWriter<W> {
    pub fn new(inner: W) -> Self {
        HashingWriter { inner, hasher: Sha256::new(), bytes: 0 }
    }

    /// Flush and return (inner writer, hex digest, bytes written).
    pub fn finalize(mut self) -> Result<(W, String, u64)> {
        self.inner.flush()?;
        Ok((self.inner, hex::encode(self.hasher.finalize()), self.bytes))
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Streaming binary tag writer. `keep_origin = false` strips the
/// ground-truth label from every record.
pub struct TagWriter<W: Write> {
    inner: W,
    keep_origin: bool,
    written: u64,
    dropped_negative: u64,
}

impl<W: Write> TagWriter<W> {
    pub fn new(inner: W, keep_origin: bool) -> Self {
        TagWriter { inner, keep_origin, written: 0, dropped_negative: 0 }
    }

    pub fn write_tag(&mut self, tag: &TimeTag) -> Result<()> {
        if tag.time_ps < 0 {
            self.dropped_negative += 1;
            return Ok(());
        }
        self.inner.write_u64::<LittleEndian>(tag.time_ps as u64)?;
        self.inner.write_u8(tag.channel)?;
        let aux = if self.keep_origin {
            encode_aux(&tag.origin)
        } else {
            encode_aux(&TagOrigin::Unlabeled)
        };
        self.inner.write_u64::<LittleEndian>(aux)?;
        self.written += 1;
        Ok(())
    }

    pub fn write_all(&mut self, tags: &[TimeTag]) -> Result<()> {
        for tag in tags {
            self.write_tag(tag)?;
        }
        Ok(())
    }

    /// Flush and return (inner writer, records written, negatives
    /// dropped).
    pub fn finish(mut self) -> Result<(W, u64, u64)> {
        self.inner.flush()?;
        if self.dropped_negative > 0 {
            log::warn!(
                "dropped {} tag(s) with negative times; the binary record \
                 encodes non-negative times only",
                self.dropped_negative
            );
        }
        Ok((self.inner, self.written, self.dropped_negative))
    }
}

/// Iterator over the records of a binary tag stream.
pub struct TagReader<R: Read> {
    inner: R,
    record: u64,
}

impl<R: Read> TagReader<R> {
    pub fn new(inner: R) -> Self {
        TagReader { inner, record: 0 }
    }
}

impl TagReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(TagReader::new(BufReader::new(File::open(path)?)))
    }
}

impl<R: Read> Iterator for TagReader<R> {
    type Item = Result<TimeTag>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut buf = [0u8; TAG_RECORD_BYTES];
        let mut filled = 0usize;
        while filled < TAG_RECORD_BYTES {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return None,
                Ok(0) => {
                    return Some(Err(Error::Serde(format!(
                        "tag stream truncated mid-record at record {}",
                        self.record
                    ))))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Some(Err(e.into())),
            }
        }
        self.record += 1;
        let time = u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes"));
        let channel = buf[8];
        let aux = u64::from_le_bytes(buf[9..17].try_into().expect("8 bytes"));
        Some(Ok(TimeTag { time_ps: time as i64, channel, origin: decode_aux(aux) }))
    }
}

/// Read a whole binary tag file into memory.
pub fn read_tags(path: &Path) -> Result<Vec<TimeTag>> {
    TagReader::open(path)?.collect()
}

/// Incremental binary tag file writer: accepts tag batches as a run
/// streams, hashing as it goes, so a whole run never has to sit in
/// memory.
pub struct TagFileWriter {
    writer: TagWriter<HashingWriter<BufWriter<File>>>,
}

impl TagFileWriter {
    pub fn create(path: &Path, keep_origin: bool) -> Result<Self> {
        let file = File::create(path)?;
        let hashing = HashingWriter::new(BufWriter::new(file));
        Ok(TagFileWriter { writer: TagWriter::new(hashing, keep_origin) })
    }

    pub fn write_all(&mut self, tags: &[TimeTag]) -> Result<()> {
        self.writer.write_all(tags)
    }

    /// Flush and return (records written, sha256, bytes).
    pub fn finish(self) -> Result<(u64, String, u64)> {
        let (hashing, written, _) = self.writer.finish()?;
        let (_, sha, bytes) = hashing.finalize()?;
        Ok((written, sha, bytes))
    }
}

/// Write tags to a file, returning (records written, sha256, bytes).
pub fn write_tags(path: &Path, tags: &[TimeTag], keep_origin: bool) -> Result<(u64, String, u64)> {
    let mut writer = TagFileWriter::create(path, keep_origin)?;
    writer.write_all(tags)?;
    writer.finish()
}

/// Human-readable CSV companion of a tag stream.
pub fn write_tags_csv<W: Write>(mut w: W, tags: &[TimeTag]) -> Result<()> {
    writeln!(w, "time_ps,channel,origin,payload")?;
    for t in tags {
        let (origin, payload) = match t.origin {
            TagOrigin::Photon { pair_id } => ("photon", pair_id as i64),
            TagOrigin::Dark => ("dark", 0),
            TagOrigin::Afterpulse { parent_time_ps } => ("afterpulse", parent_time_ps),
            TagOrigin::Unlabeled => ("unlabeled", 0),
        };
        writeln!(w, "{},{},{},{}", t.time_ps, t.channel, origin, payload)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of a period-folded histogram: bin start within the period and
/// counts.
pub fn write_period_histogram_csv<W: Write>(
    mut w: W,
    hist: &crate::characterization::PeriodHistogram,
) -> Result<()> {
    writeln!(w, "bin_start_ps,counts")?;
    for (i, &c) in hist.counts.iter().enumerate() {
        writeln!(w, "{},{}", i as i64 * hist.bin_width_ps, c)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of a correlation histogram with its normalization, one row per
/// delay bin.
pub fn write_correlation_csv<W: Write>(mut w: W, hist: &CorrelationHistogram) -> Result<()> {
    writeln!(w, "tau_ps,counts,effective_width_ps,g2,g2_err")?;
    let g2 = hist.g2().ok();
    for i in 0..hist.n_bins() {
        let (value, err) = match &g2 {
            Some(v) => (v[i].value, v[i].std_err),
            None => (f64::NAN, f64::NAN),
        };
        writeln!(
            w,
            "{},{},{},{value},{err}",
            hist.tau_at(i),
            hist.counts[i],
            hist.effective_width_ps(i),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Serialize any serde value to pretty JSON at `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Read a serde value from JSON at `path`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file)).map_err(Error::from)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Streaming SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// One artifact named by a run manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
    /// Records for tag files, rows/entries for tables; 0 when not
    /// meaningful.
    pub records: u64,
}

/// Inventory of a run directory. Contains no timestamps: identical inputs
/// must produce byte-identical manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// Digest of the resolved configuration the run actually used.
    pub config_sha256: String,
    pub files: Vec<ManifestFile>,
}

impl RunManifest {
    pub fn new(seed: u64, config_sha256: String) -> Self {
        RunManifest {
            tool: "hspsim".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256,
            files: Vec::new(),
        }
    }

    pub fn push_file(&mut self, name: impl Into<String>, bytes: u64, sha256: String, records: u64) {
        self.files.push(ManifestFile { name: name.into(), bytes, sha256, records });
    }

    /// Digest of the manifest itself (canonical JSON), handy for
    /// whole-run identity checks.
    pub fn digest(&self) -> Result<String> {
        let json = serde_json::to_vec(self).map_err(Error::from)?;
        Ok(sha256_hex(&json))
    }
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(path, manifest)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    read_json(path)
}

/// Create `dir` (and parents). Errors if it exists as a non-directory.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Resolve an output file path inside a run directory.
pub fn artifact_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
