//! LTRJ v1, the trajectory interchange format.
//!
//! Layout (all multi-byte values little-endian):
//!
//! | bytes            | content                                             |
//! |------------------|-----------------------------------------------------|
//! | `0..8`           | magic `LTRJv001`                                    |
//! | `8..12`          | `u32` header length `N`                             |
//! | `12..12+N`       | UTF-8 JSON header                                   |
//! | payload          | `hidden` `T*d` f32 (step-major), `token_ids` `T` u32, `p_realized` `T` f32 |
//! | iff `has_head=1` | `weights` `V*d` f32 (row-major), `bias` `V` f32     |
//!
//! Header fields, in emitted order: `model_id`, `d`, `vocab`, `T`,
//! `context_len`, `has_head` (0/1), `dtype` (always `"f32"`), and an optional
//! `notes` object. `vocab` is 0 when no head is attached and the vocabulary
//! is unknown.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::UnembeddingHead;
use crate::trajectory::{Notes, Trajectory};

pub const MAGIC: &[u8; 8] = b"LTRJv001";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_id: String,
    d: u32,
    vocab: u32,
    #[serde(rename = "T")]
    steps: u32,
    context_len: u32,
    has_head: u8,
    dtype: String,
    #[serde(default, skip_serializing_if = "Notes::is_empty")]
    notes: Notes,
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidTrajectory(format!("{what} = {n} exceeds u32")))
}

/// Serializes `traj` to its LTRJ v1 bytes.
pub fn to_bytes(traj: &Trajectory) -> Result<Vec<u8>> {
    traj.validate()?;
    let t = traj.len();
    let d = traj.hidden_dim();
    let header = Header {
        model_id: traj.model_id().to_owned(),
        d: to_u32(d, "d")?,
        vocab: traj.head().map_or(Ok(0), |h| to_u32(h.vocab_size(), "vocab"))?,
        steps: to_u32(t, "T")?,
        context_len: traj.context_len(),
        has_head: u8::from(traj.head().is_some()),
        dtype: "f32".into(),
        notes: traj.notes().clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;

    let payload = t * d + 2 * t + traj.head().map_or(0, |h| h.vocab_size() * (d + 1));
    let mut out = Vec::with_capacity(12 + header.len() + 4 * payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&to_u32(header.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(&header);
    for x in traj.hidden().iter().flatten() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for id in traj.token_ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for p in traj.p_realized() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(head) = traj.head() {
        for w in head.weights().iter().chain(head.bias()) {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `traj` to `sink`. Nothing is written if the trajectory is invalid.
pub fn write_trajectory<W: Write>(traj: &Trajectory, mut sink: W) -> Result<()> {
    let bytes = to_bytes(traj)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(())
}

pub fn write_file(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(traj)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

/// Reads `count` 4-byte words without trusting `count` for the allocation.
fn read_words<R: Read>(src: &mut R, count: usize, what: &'static str) -> Result<Vec<[u8; 4]>> {
    let n_bytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::Header(format!("{what} size overflows")))?;
    let mut buf = Vec::new();
    src.take(n_bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != n_bytes {
        return Err(Error::Truncated(what));
    }
    Ok(buf.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

fn read_f32s<R: Read>(src: &mut R, count: usize, what: &'static str) -> Result<Vec<f32>> {
    Ok(read_words(src, count, what)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect())
}

/// Parses one LTRJ v1 trajectory; the stream must end right after it.
pub fn read_trajectory<R: Read>(mut src: R) -> Result<Trajectory> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut src, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut len = [0u8; 4];
    read_exact_or(&mut src, &mut len, "header length")?;
    let header_len = u32::from_le_bytes(len) as usize;
    let mut header = Vec::new();
    (&mut src).take(header_len as u64).read_to_end(&mut header)?;
    if header.len() != header_len {
        return Err(Error::Truncated("header"));
    }
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(Error::Header(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.has_head > 1 {
        return Err(Error::Header(format!(
            "has_head must be 0 or 1, got {}",
            header.has_head
        )));
    }
    let t = header.steps as usize;
    let d = header.d as usize;
    let vocab = header.vocab as usize;
    if t == 0 || d == 0 {
        return Err(Error::Header(format!("T ({t}) and d ({d}) must be positive")));
    }
    if header.has_head == 1 && vocab == 0 {
        return Err(Error::Header("has_head = 1 requires vocab > 0".into()));
    }

    let flat = read_f32s(&mut src, t * d, "hidden states")?;
    let token_ids: Vec<u32> = read_words(&mut src, t, "token ids")?
        .into_iter()
        .map(u32::from_le_bytes)
        .collect();
    let p_realized = read_f32s(&mut src, t, "realized probabilities")?;
    let head = if header.has_head == 1 {
        let weights = read_f32s(&mut src, vocab * d, "head weights")?;
        let bias = read_f32s(&mut src, vocab, "head bias")?;
        Some(UnembeddingHead::new(weights, bias, vocab, d)?)
    } else {
        None
    };
    let mut extra = [0u8; 1];
    if src.read(&mut extra)? != 0 {
        return Err(Error::LengthMismatch(
            "trailing bytes after the payload declared by the header".into(),
        ));
    }

    if vocab > 0 {
        if let Some(&id) = token_ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
    }
    let hidden = flat.chunks_exact(d).map(<[f32]>::to_vec).collect();
    let traj =
        Trajectory::new(header.model_id, header.context_len, hidden, token_ids, p_realized)?.with_notes(header.notes);
    match head {
        Some(h) => traj.with_head(h),
        None => Ok(traj),
    }
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Trajectory> {
    read_trajectory(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Trajectory {
        Trajectory::new("tiny", 0, vec![vec![1.0, -2.0]], vec![7], vec![0.25]).unwrap()
    }

    #[test]
    fn size_of_single_step_no_head() {
        let bytes = to_bytes(&tiny()).unwrap();
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // header + 2 hidden floats + 1 token id + 1 probability
        assert_eq!(bytes.len(), 12 + n + 8 + 4 + 4);
        assert_eq!(
            std::str::from_utf8(&bytes[12..12 + n]).unwrap(),
            r#"{"model_id":"tiny","d":2,"vocab":0,"T":1,"context_len":0,"has_head":0,"dtype":"f32"}"#
        );
        assert_eq!(&bytes[12 + n..12 + n + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_with_head_and_notes() {
        let head = UnembeddingHead::new(vec![0.5; 16], vec![0.0; 8], 8, 2).unwrap();
        let mut notes = Notes::new();
        notes.insert("prompt_ids".into(), serde_json::json!([256, 72]));
        let traj = tiny().with_head(head).unwrap().with_notes(notes);
        let bytes = to_bytes(&traj).unwrap();
        assert_eq!(read_trajectory(bytes.as_slice()).unwrap(), traj);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(read_trajectory(bytes.as_slice()), Err(Error::BadMagic(m)) if &m == b"XXXXXXXX"));
    }

    #[test]
    fn truncated_payload() {
        let traj = Trajectory::new(
            "t10",
            0,
            (0..10).map(|i| vec![i as f32]).collect(),
            vec![0; 10],
            vec![0.5; 10],
        )
        .unwrap();
        let bytes = to_bytes(&traj).unwrap();
        // drop the last step's probability: the header still claims T = 10
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(read_trajectory(cut), Err(Error::Truncated(_))));
        assert!(matches!(read_trajectory(&bytes[..5]), Err(Error::Truncated("magic"))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes.push(0);
        assert!(matches!(
            read_trajectory(bytes.as_slice()),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn zero_probability_rejected_at_parse() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(
            read_trajectory(bytes.as_slice()),
            Err(Error::ProbabilityOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let r = Trajectory::new("x", 0, vec![vec![f32::NAN, 0.0]], vec![0], vec![0.5]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        let mut bytes = to_bytes(&tiny()).unwrap();
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        bytes[12 + n..12 + n + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_trajectory(bytes.as_slice()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn write_to_failing_sink_reports_io() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
                Err(std::io::Error::other("sink closed"))
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        assert!(matches!(write_trajectory(&tiny(), Broken), Err(Error::Io(_))));
    }

    #[test]
    fn huge_header_claims_do_not_allocate() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + n].to_vec()).unwrap();
        let forged = header.replace("\"T\":1", "\"T\":4000000000");
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(forged.len() as u32).to_le_bytes());
        out.extend_from_slice(forged.as_bytes());
        out.extend_from_slice(&bytes.split_off(12 + n));
        assert!(matches!(read_trajectory(out.as_slice()), Err(Error::Truncated(_))));
    }
}
