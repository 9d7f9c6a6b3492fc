//! Binary checkpoint format.
//!
//! ```text
//! SSGRNCKPT 1\n
//! key=value\n ...           model config plus `iteration`
//! \n
//! <parameter count>\n
//! per parameter: u16 name length, name, u8 rank, u32 extents, f32 payload (all LE)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &str = "SSGRNCKPT 1";

pub fn write_checkpoint<T: Scalar, W: Write>(state: &ModelState<T>, mut out: W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    for (k, v) in state.config.to_pairs() {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "iteration={}", state.iteration)?;
    writeln!(out)?;
    writeln!(out, "{}", state.params.len())?;
    for (name, t) in &state.params {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n);
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Truncated {
            what,
            expected: n,
            found: buf.len(),
        });
    }
    Ok(buf)
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Format("unexpected end of checkpoint header".into()));
    }
    if !line.ends_with('\n') {
        return Err(Error::Format("unterminated checkpoint header line".into()));
    }
    line.pop();
    Ok(line)
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: R) -> Result<ModelState<T>> {
    let mut r = BufReader::new(input);
    if read_line(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic line)".into()));
    }
    let mut pairs = Vec::new();
    let mut iteration = None;
    loop {
        let line = read_line(&mut r)?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad checkpoint config line `{line}`")))?;
        if k == "iteration" {
            iteration = Some(v.parse::<u64>().map_err(|e| Error::Format(format!("iteration: {e}")))?);
        } else {
            pairs.push((k.to_string(), v.to_string()));
        }
    }
    let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let iteration = iteration.ok_or_else(|| Error::Missing("checkpoint iteration".into()))?;
    let count: usize = read_line(&mut r)?
        .parse()
        .map_err(|e| Error::Format(format!("parameter count: {e}")))?;

    let mut params = IndexMap::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, 2, "parameter name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(&mut r, len, "parameter name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1, "parameter rank")?[0] as usize;
        let dims = read_exact(&mut r, 4 * rank, "parameter extents")?;
        let shape: Vec<usize> = dims
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let payload = read_exact(&mut r, 4 * n, "parameter payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(&shape, data)?;
        if !t.is_finite() {
            return Err(Error::Format(format!("parameter `{name}` holds non-finite values")));
        }
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let state = ModelState {
        config,
        params,
        iteration,
    };
    state.validate()?;
    Ok(state)
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(state, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<T>> {
    read_checkpoint(fs::File::open(path)?)
}
