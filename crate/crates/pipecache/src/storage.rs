//! Persistent key-value log and canonical binary encodings.
//!
//! All persistent caches share one portable store: an append-only log of
//! `[32-byte SHA-256 digest][u32 LE length][value bytes]` records behind an
//! in-memory digest index. Keys are canonical encodings of the key columns
//! of a row; values are encoded frames.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frame::{Frame, Kind, Value};

pub const LOG_MAGIC: &[u8; 8] = b"PTCACHE1";
pub const FRAME_MAGIC: &[u8; 5] = b"PTFR1";
const LOG_FILE: &str = "log";
const LOCK_FILE: &str = "LOCK";

/// Codec tag prepended to every stored value. Only raw (0) is defined.
const CODEC_RAW: u8 = 0;

pub type KeyDigest = [u8; 32];

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("key column `{0}` missing from row")]
    MissingKeyColumn(String),
    #[error("key column `{0}` is a real-list; keys must be scalar")]
    ListKeyColumn(String),
    #[error("frame decode error: {0}")]
    Decode(String),
    #[error("log header mismatch in {0}")]
    BadHeader(PathBuf),
    #[error("unknown value codec tag {0}")]
    BadCodec(u8),
    #[error("log {0} is locked by another writer (LOCK file present)")]
    Locked(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Canonical, injective encoding of the key columns of one row. Columns are
/// sorted by name byte-wise, so the caller's key-column ordering does not
/// matter.
pub fn canonical_encode_row(
    frame: &Frame,
    row: usize,
    key_columns: &[String],
) -> Result<Vec<u8>, StorageError> {
    let mut names: Vec<&str> = key_columns.iter().map(String::as_str).collect();
    names.sort_unstable();
    names.dedup();
    let mut out = Vec::new();
    out.extend_from_slice(&(names.len() as u16).to_le_bytes());
    for name in names {
        let value = frame
            .value(row, name)
            .ok_or_else(|| StorageError::MissingKeyColumn(name.to_string()))?;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match value {
            Value::Text(s) => {
                out.push(0);
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Value::Real(x) => {
                out.push(1);
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            Value::Int(x) => {
                out.push(2);
                out.extend_from_slice(&x.to_le_bytes());
            }
            Value::RealList(_) => return Err(StorageError::ListKeyColumn(name.to_string())),
        }
    }
    Ok(out)
}

pub fn key_digest(encoded: &[u8]) -> KeyDigest {
    let mut hasher = Sha256::new();
    hasher.update(encoded);
    hasher.finalize().into()
}

pub fn digest_hex(digest: &KeyDigest) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encode a whole frame. Layout: magic, u16 column count, per column
/// (u16 name length + name, 1-byte kind tag), u32 row count, then row-major
/// values. Deterministic and bit-exact on round trip.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(frame.columns().len() as u16).to_le_bytes());
    for (name, kind) in frame.columns() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind.tag());
    }
    out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
    for row in frame.rows() {
        for value in row {
            match value {
                Value::Text(s) => {
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Value::Real(x) => out.extend_from_slice(&x.to_bits().to_le_bytes()),
                Value::Int(x) => out.extend_from_slice(&x.to_le_bytes()),
                Value::RealList(xs) => {
                    out.extend_from_slice(&(xs.len() as u32).to_le_bytes());
                    for x in xs {
                        out.extend_from_slice(&x.to_bits().to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StorageError> {
        if self.pos + n > self.data.len() {
            return Err(StorageError::Decode("truncated input".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, StorageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, StorageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, StorageError> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.take(8)?.try_into().unwrap(),
        )))
    }

    fn i64(&mut self) -> Result<i64, StorageError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String, StorageError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| StorageError::Decode("invalid UTF-8".into()))
    }
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, StorageError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(FRAME_MAGIC.len())? != FRAME_MAGIC {
        return Err(StorageError::Decode("bad frame magic".into()));
    }
    let ncols = r.u16()? as usize;
    let mut columns = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        let len = r.u16()? as usize;
        let name = r.utf8(len)?;
        let tag = r.take(1)?[0];
        let kind =
            Kind::from_tag(tag).ok_or_else(|| StorageError::Decode(format!("bad kind tag {tag}")))?;
        columns.push((name, kind));
    }
    let nrows = r.u32()? as usize;
    let mut frame =
        Frame::new(columns.clone()).map_err(|e| StorageError::Decode(e.to_string()))?;
    for _ in 0..nrows {
        let mut row = Vec::with_capacity(ncols);
        for (_, kind) in &columns {
            let value = match kind {
                Kind::Text => {
                    let len = r.u32()? as usize;
                    Value::Text(r.utf8(len)?)
                }
                Kind::Real => Value::Real(r.f64()?),
                Kind::Int => Value::Int(r.i64()?),
                Kind::RealList => {
                    let n = r.u32()? as usize;
                    let mut xs = Vec::with_capacity(n);
                    for _ in 0..n {
                        xs.push(r.f64()?);
                    }
                    Value::RealList(xs)
                }
            };
            row.push(value);
        }
        frame
            .push_row(row)
            .map_err(|e| StorageError::Decode(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(StorageError::Decode("trailing bytes after frame".into()));
    }
    Ok(frame)
}

/// Append-only on-disk key-value log with an in-memory digest index built
/// on open. Last write wins for duplicate digests; a truncated trailing
/// record (from a crash mid-append) is detected and ignored.
pub struct KvLog {
    dir: PathBuf,
    file: File,
    index: HashMap<KeyDigest, (u64, u32)>,
    writable: bool,
}

impl KvLog {
    /// Open for read-write, taking the advisory `LOCK` file. Creates the
    /// directory and an empty log if needed.
    pub fn open(dir: &Path) -> Result<KvLog, StorageError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let lock_path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    StorageError::Locked(dir.to_path_buf())
                } else {
                    io_err(&lock_path)(e)
                }
            })?;
        Self::open_inner(dir, true)
    }

    /// Open a read-only snapshot. Does not take the lock.
    pub fn open_read_only(dir: &Path) -> Result<KvLog, StorageError> {
        Self::open_inner(dir, false)
    }

    fn open_inner(dir: &Path, writable: bool) -> Result<KvLog, StorageError> {
        let log_path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .write(writable)
            .create(writable)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        let len = file.metadata().map_err(io_err(&log_path))?.len();
        if len == 0 && writable {
            file.write_all(LOG_MAGIC).map_err(io_err(&log_path))?;
        } else {
            let mut magic = [0u8; 8];
            if len < 8 {
                return Err(StorageError::BadHeader(log_path));
            }
            file.read_exact(&mut magic).map_err(io_err(&log_path))?;
            if &magic != LOG_MAGIC {
                return Err(StorageError::BadHeader(log_path));
            }
        }
        let mut index = HashMap::new();
        let len = file.metadata().map_err(io_err(&log_path))?.len();
        let mut pos = 8u64;
        let mut good_end = pos;
        while pos + 36 <= len {
            file.seek(SeekFrom::Start(pos)).map_err(io_err(&log_path))?;
            let mut head = [0u8; 36];
            file.read_exact(&mut head).map_err(io_err(&log_path))?;
            let digest: KeyDigest = head[..32].try_into().unwrap();
            let vlen = u32::from_le_bytes(head[32..36].try_into().unwrap());
            if pos + 36 + vlen as u64 > len {
                break; // truncated tail record: ignore
            }
            index.insert(digest, (pos + 36, vlen));
            pos += 36 + vlen as u64;
            good_end = pos;
        }
        if writable && good_end < len {
            // drop the truncated tail so future appends start on a record boundary
            file.set_len(good_end).map_err(io_err(&log_path))?;
        }
        Ok(KvLog {
            dir: dir.to_path_buf(),
            file,
            index,
            writable,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, digest: &KeyDigest) -> bool {
        self.index.contains_key(digest)
    }

    pub fn get(&mut self, digest: &KeyDigest) -> Result<Option<Vec<u8>>, StorageError> {
        let Some(&(offset, len)) = self.index.get(digest) else {
            return Ok(None);
        };
        let path = self.dir.join(LOG_FILE);
        self.file
            .seek(SeekFrom::Start(offset))
            .map_err(io_err(&path))?;
        let mut buf = vec![0u8; len as usize];
        self.file.read_exact(&mut buf).map_err(io_err(&path))?;
        if buf.is_empty() {
            return Err(StorageError::Decode("empty value record".into()));
        }
        if buf[0] != CODEC_RAW {
            return Err(StorageError::BadCodec(buf[0]));
        }
        Ok(Some(buf[1..].to_vec()))
    }

    pub fn put(&mut self, digest: KeyDigest, value: &[u8]) -> Result<(), StorageError> {
        assert!(self.writable, "put on a read-only KvLog");
        let path = self.dir.join(LOG_FILE);
        let offset = self.file.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        let vlen = (value.len() + 1) as u32;
        let mut record = Vec::with_capacity(36 + value.len() + 1);
        record.extend_from_slice(&digest);
        record.extend_from_slice(&vlen.to_le_bytes());
        record.push(CODEC_RAW);
        record.extend_from_slice(value);
        self.file.write_all(&record).map_err(io_err(&path))?;
        self.file.flush().map_err(io_err(&path))?;
        self.index.insert(digest, (offset + 36, vlen));
        Ok(())
    }
}

impl Drop for KvLog {
    fn drop(&mut self) {
        if self.writable {
            let _ = fs::remove_file(self.dir.join(LOCK_FILE));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Kind;
    use tempfile::tempdir;

    fn one_row_frame() -> Frame {
        let mut f = Frame::new(vec![
            ("qid".into(), Kind::Text),
            ("query".into(), Kind::Text),
            ("score".into(), Kind::Real),
        ])
        .unwrap();
        f.push_row(vec![
            Value::Text("1".into()),
            Value::Text("a b".into()),
            Value::Real(2.5),
        ])
        .unwrap();
        f
    }

    #[test]
    fn canonical_layout() {
        let f = one_row_frame();
        let enc = canonical_encode_row(&f, 0, &["qid".into()]).unwrap();
        let expected: Vec<u8> = vec![
            1, 0, // column count
            3, 0, b'q', b'i', b'd', // name
            0, // kind tag text
            1, 0, 0, 0, b'1', // value
        ];
        assert_eq!(enc, expected);
    }

    #[test]
    fn canonical_sorts_key_columns() {
        let f = one_row_frame();
        let a = canonical_encode_row(&f, 0, &["query".into(), "qid".into()]).unwrap();
        let b = canonical_encode_row(&f, 0, &["qid".into(), "query".into()]).unwrap();
        assert_eq!(a, b);
        // qid comes before query byte-wise
        assert_eq!(&a[2..7], &[3, 0, b'q', b'i', b'd']);
    }

    #[test]
    fn canonical_projects_to_key_columns() {
        let a = one_row_frame();
        let mut b = a.clone();
        b = b
            .with_column("score", Kind::Real, vec![Value::Real(99.0)])
            .unwrap();
        let ka = canonical_encode_row(&a, 0, &["qid".into()]).unwrap();
        let kb = canonical_encode_row(&b, 0, &["qid".into()]).unwrap();
        assert_eq!(ka, kb);
    }

    #[test]
    fn canonical_rejects_list_keys() {
        let mut f = Frame::new(vec![("features".into(), Kind::RealList)]).unwrap();
        f.push_row(vec![Value::RealList(vec![1.0])]).unwrap();
        assert!(matches!(
            canonical_encode_row(&f, 0, &["features".into()]),
            Err(StorageError::ListKeyColumn(_))
        ));
    }

    #[test]
    fn sha256_empty_input() {
        // published SHA-256 digest of the empty string
        assert_eq!(
            digest_hex(&key_digest(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn frame_codec_round_trip() {
        let f = one_row_frame();
        let bytes = encode_frame(&f);
        assert_eq!(decode_frame(&bytes).unwrap(), f);
        // deterministic
        assert_eq!(bytes, encode_frame(&f));
        // empty frame
        let e = f.empty_like();
        assert_eq!(decode_frame(&encode_frame(&e)).unwrap(), e);
    }

    #[test]
    fn frame_codec_rejects_bad_magic_and_truncation() {
        let bytes = encode_frame(&one_row_frame());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_frame(&bad).is_err());
        assert!(decode_frame(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn kv_put_get_and_persistence() {
        let dir = tempdir().unwrap();
        let k1 = key_digest(b"k1");
        {
            let mut log = KvLog::open(dir.path()).unwrap();
            assert_eq!(log.get(&k1).unwrap(), None);
            log.put(k1, b"v1").unwrap();
            assert_eq!(log.get(&k1).unwrap().as_deref(), Some(&b"v1"[..]));
            log.put(k1, b"v2").unwrap();
        }
        let mut log = KvLog::open(dir.path()).unwrap();
        assert_eq!(log.get(&k1).unwrap().as_deref(), Some(&b"v2"[..]));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn kv_truncated_tail_ignored() {
        let dir = tempdir().unwrap();
        let k = key_digest(b"k");
        {
            let mut log = KvLog::open(dir.path()).unwrap();
            log.put(k, b"value").unwrap();
        }
        let log_path = dir.path().join("log");
        let mut bytes = fs::read(&log_path).unwrap();
        // simulate crash mid-append: digest plus oversized length, short value
        bytes.extend_from_slice(&[0u8; 32]);
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(b"short");
        fs::write(&log_path, &bytes).unwrap();
        let mut log = KvLog::open(dir.path()).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.get(&k).unwrap().as_deref(), Some(&b"value"[..]));
    }

    #[test]
    fn kv_lock_excludes_second_writer() {
        let dir = tempdir().unwrap();
        let _log = KvLog::open(dir.path()).unwrap();
        assert!(matches!(
            KvLog::open(dir.path()),
            Err(StorageError::Locked(_))
        ));
        // readers are fine
        assert!(KvLog::open_read_only(dir.path()).is_ok());
    }

    #[test]
    fn kv_bad_header_rejected() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("log"), b"NOTMAGIC").unwrap();
        assert!(matches!(
            KvLog::open(dir.path()),
            Err(StorageError::BadHeader(_))
        ));
    }
}
