//! Line framing shared by the write-ahead log and topic segments:
//! `<seq> <crc32 hex> <json>\n`, where the checksum covers the JSON text.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::Result;

pub fn encode_line(seq: u64, json: &str) -> String {
    format!("{seq} {:08x} {json}\n", crc32fast::hash(json.as_bytes()))
}

fn decode_line(line: &str) -> Option<(u64, &str)> {
    let mut parts = line.splitn(3, ' ');
    let seq = parts.next()?.parse().ok()?;
    let crc = u32::from_str_radix(parts.next()?, 16).ok()?;
    let json = parts.next()?;
    (crc32fast::hash(json.as_bytes()) == crc).then_some((seq, json))
}

/// Valid records of a framed file in order, and the byte length of the
/// valid prefix. Reading stops at the first torn or corrupt line and at any
/// non-increasing sequence number.
pub fn read_lines(path: &Path) -> Result<(Vec<(u64, String)>, u64)> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    read_from(BufReader::new(file))
}

pub fn read_from(mut reader: impl BufRead) -> Result<(Vec<(u64, String)>, u64)> {
    let mut out = Vec::new();
    let mut valid_len = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 || buf.last() != Some(&b'\n') {
            break;
        }
        let Ok(text) = std::str::from_utf8(&buf[..n - 1]) else {
            break;
        };
        let Some((seq, json)) = decode_line(text) else {
            break;
        };
        if out.last().is_some_and(|(prev, _)| *prev >= seq) {
            break;
        }
        out.push((seq, json.to_string()));
        valid_len += n as u64;
    }
    Ok((out, valid_len))
}
