//! Model checkpoints.
//!
//! ```text
//! HYPERCONV-CKPT 1
//! [config]
//! variant = eq3
//! ...
//! [tensors]
//! stem.conv1 16,3,7,7
//! ...
//! ---
//! <one TNSR record per manifest line, in manifest order>
//! ```
//!
//! The manifest lists trainable tensors then batchnorm running statistics.
//! Records are written as f64, so a round trip is bit-exact; f32 records are
//! accepted and promoted.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::{network_from_kv, network_to_kv, KvFile, NETWORK_KEYS};
use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, Dtype, Tensor};

const HEADER: &str = "HYPERCONV-CKPT 1";
const MAX_MANIFEST_BYTES: usize = 1 << 22;

fn named_tensors(model: &Model) -> Vec<(String, &Tensor)> {
    let mut all = model.params();
    all.extend(model.buffers());
    all
}

fn shape_text(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes `model` to `w`. Refuses models holding a non-finite value.
pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    let tensors = named_tensors(model);
    if let Some((name, _)) = tensors.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::invalid("save_checkpoint", format!("refusing to write non-finite tensor {name}")));
    }
    writeln!(w, "{HEADER}")?;
    writeln!(w, "[config]")?;
    w.write_all(network_to_kv(&model.config).as_bytes())?;
    writeln!(w, "[tensors]")?;
    for (name, t) in &tensors {
        writeln!(w, "{name} {}", shape_text(t.shape()))?;
    }
    writeln!(w, "---")?;
    for (_, t) in &tensors {
        write_tensor_to(&mut w, t, Dtype::F64)?;
    }
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place, so a crash
/// never leaves a half-written checkpoint under `path`.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        if let Err(e) = write_checkpoint(model, &mut w).and_then(|_| Ok(w.flush()?)) {
            drop(w);
            let _ = std::fs::remove_file(&tmp);
            return Err(e);
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_line(r: &mut impl BufRead, budget: &mut usize) -> Result<String> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 || buf.last() != Some(&b'\n') {
        return Err(Error::Format("truncated checkpoint manifest".into()));
    }
    *budget = budget
        .checked_sub(n)
        .ok_or_else(|| Error::Format("checkpoint manifest is implausibly large".into()))?;
    buf.pop();
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))
}

/// Reads a checkpoint; any mismatch between manifest, configuration and
/// records is an error, and no model is returned.
pub fn read_checkpoint(r: impl Read) -> Result<Model> {
    let mut r = BufReader::new(r);
    let mut budget = MAX_MANIFEST_BYTES;
    let first = read_line(&mut r, &mut budget)?;
    if first != HEADER {
        let shown: String = first.chars().take(32).collect();
        return Err(Error::Format(format!("bad checkpoint header '{shown}', expected '{HEADER}'")));
    }
    if read_line(&mut r, &mut budget)? != "[config]" {
        return Err(Error::Format("checkpoint manifest lacks [config]".into()));
    }
    let mut config_text = String::new();
    loop {
        let line = read_line(&mut r, &mut budget)?;
        if line == "[tensors]" {
            break;
        }
        config_text.push_str(&line);
        config_text.push('\n');
    }
    let mut manifest = Vec::new();
    loop {
        let line = read_line(&mut r, &mut budget)?;
        if line == "---" {
            break;
        }
        let (name, shape) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::Format(format!("bad manifest line '{line}'")))?;
        let shape = shape
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad extent in '{line}'"))))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name.to_string(), shape));
    }
    let kv = KvFile::parse(&config_text)?;
    kv.check_known(NETWORK_KEYS)?;
    let mut model = Model::zeroed(network_from_kv(&kv)?)?;

    let expected: Vec<(String, Vec<usize>)> =
        named_tensors(&model).iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    if expected != manifest {
        let diff = expected
            .iter()
            .zip(&manifest)
            .find(|(a, b)| a != b)
            .map(|((n, s), (m, t))| format!("expected {n} {s:?}, found {m} {t:?}"))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), manifest.len()));
        return Err(Error::Format(format!("checkpoint manifest does not match its configuration: {diff}")));
    }
    let mut records = Vec::with_capacity(manifest.len());
    for (name, shape) in &manifest {
        let t = read_tensor_from(&mut r)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("record {name} has shape {:?}, manifest says {shape:?}", t.shape())));
        }
        records.push(t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint records".into()));
    }
    let mut records = records.into_iter();
    let mut params = model.params_mut();
    for (_, slot) in params.iter_mut() {
        **slot = records.next().expect("count checked");
    }
    drop(params);
    for (_, slot) in model.buffers_mut() {
        *slot = records.next().expect("count checked");
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(File::open(path)?)
}
