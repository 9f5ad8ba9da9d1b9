//! Event stream files.
//!
//! Text: CSV with header `t_us,x,y,p`, `p` in {1,-1}.
//! Binary (`.evb`): packed little-endian records of u64 t_us, u16 x, u16 y,
//! i8 p, 13 bytes each, no header.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Event, EventError, Polarity};

pub const CSV_HEADER: &str = "t_us,x,y,p";
const EVB_RECORD: usize = 13;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("binary event file length {0} is not a multiple of 13")]
    Truncated(usize),
    #[error(transparent)]
    Event(#[from] EventError),
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "evb")
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, FormatError> {
    let file = File::open(path)?;
    if is_binary(path) {
        read_evb(BufReader::new(file))
    } else {
        read_csv(BufReader::new(file))
    }
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    if is_binary(path) {
        write_evb(&mut w, events)?;
    } else {
        write_csv(&mut w, events)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(w: &mut W, events: &[Event]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.sign())?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<Event>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim();
        if i == 0 {
            if line != CSV_HEADER {
                return Err(FormatError::Parse {
                    line: lineno,
                    msg: format!("expected header `{CSV_HEADER}`, found `{line}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        out.push(parse_row(line).map_err(|msg| FormatError::Parse { line: lineno, msg })?);
    }
    Ok(out)
}

fn parse_row(line: &str) -> Result<Event, String> {
    let mut it = line.split(',');
    let mut field = |name: &str| {
        it.next()
            .map(str::trim)
            .ok_or_else(|| format!("missing field `{name}`"))
    };
    let t = field("t_us")?.parse::<u64>().map_err(|e| format!("t_us: {e}"))?;
    let x = field("x")?.parse::<u16>().map_err(|e| format!("x: {e}"))?;
    let y = field("y")?.parse::<u16>().map_err(|e| format!("y: {e}"))?;
    let p = field("p")?.parse::<i64>().map_err(|e| format!("p: {e}"))?;
    let p = Polarity::from_sign(p).map_err(|e| e.to_string())?;
    Ok(Event::new(t, x, y, p))
}

pub fn write_evb<W: Write>(w: &mut W, events: &[Event]) -> io::Result<()> {
    let mut rec = [0u8; EVB_RECORD];
    for e in events {
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p.sign() as u8;
        w.write_all(&rec)?;
    }
    Ok(())
}

pub fn read_evb<R: Read>(mut r: R) -> Result<Vec<Event>, FormatError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % EVB_RECORD != 0 {
        return Err(FormatError::Truncated(buf.len()));
    }
    buf.chunks_exact(EVB_RECORD)
        .map(|rec| {
            let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
            let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
            let p = Polarity::from_sign(rec[12] as i8 as i64)?;
            Ok(Event::new(t, x, y, p))
        })
        .collect()
}
