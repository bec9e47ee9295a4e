//! Model checkpoints: one file, text header + little-endian f64 payload.
//!
//! ```text
//! nucleus3d-checkpoint v1
//! kind=detect
//! meta widths=8,16,32
//! param enc0.conv.weight dims=8,1,3,3,3 trainable=1
//! ...
//! end
//! <raw f64 little-endian values, declaration order>
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::layers::ParamSet;

const MAGIC: &str = "nucleus3d-checkpoint v1";

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub params: ParamSet,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    meta: &[(String, String)],
    params: &ParamSet,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut header = format!("{MAGIC}\nkind={kind}\n");
    for (k, v) in meta {
        header.push_str(&format!("meta {k}={v}\n"));
    }
    for p in params.params() {
        let dims: Vec<String> = p.dims.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "param {} dims={} trainable={}\n",
            p.name,
            dims.join(","),
            u8::from(p.trainable)
        ));
    }
    header.push_str("end\n");

    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(header.as_bytes())?;
    for p in params.params() {
        for v in &p.value {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;

    // Split the text header from the payload at the `end` line.
    let mut offset = 0;
    let mut lines: Vec<String> = Vec::new();
    let mut found_end = false;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("checkpoint header not terminated"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::format("checkpoint header is not UTF-8"))?
            .to_string();
        offset += nl + 1;
        if line == "end" {
            found_end = true;
            break;
        }
        lines.push(line);
    }
    if !found_end {
        return Err(Error::format("checkpoint missing `end` marker"));
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::format(format!(
            "checkpoint version tag mismatch: expected `{MAGIC}`, got `{}`",
            lines.first().cloned().unwrap_or_default()
        )));
    }

    let mut kind = None;
    let mut meta = Vec::new();
    let mut declared: Vec<(String, Vec<usize>, bool)> = Vec::new();
    for line in &lines[1..] {
        if let Some(v) = line.strip_prefix("kind=") {
            kind = Some(v.to_string());
        } else if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad meta line `{line}`")))?;
            meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("param ") {
            let mut fields = rest.split(' ');
            let name = fields
                .next()
                .ok_or_else(|| Error::format("param line missing name"))?
                .to_string();
            let dims_field = fields
                .next()
                .and_then(|f| f.strip_prefix("dims="))
                .ok_or_else(|| Error::format(format!("param line missing dims: `{line}`")))?;
            let dims: Vec<usize> = dims_field
                .split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::format(format!("bad dims `{dims_field}`")))
                })
                .collect::<Result<_>>()?;
            let trainable = fields
                .next()
                .and_then(|f| f.strip_prefix("trainable="))
                .ok_or_else(|| Error::format(format!("param line missing trainable: `{line}`")))?;
            declared.push((name, dims, trainable == "1"));
        } else {
            return Err(Error::format(format!("unknown checkpoint line `{line}`")));
        }
    }
    let kind = kind.ok_or_else(|| Error::format("checkpoint missing kind"))?;

    let total: usize = declared
        .iter()
        .map(|(_, dims, _)| dims.iter().product::<usize>())
        .sum();
    let payload = &bytes[offset..];
    if payload.len() != total * 8 {
        return Err(Error::format(format!(
            "checkpoint payload is {} bytes, header declares {} values ({} bytes)",
            payload.len(),
            total,
            total * 8
        )));
    }

    let mut params = ParamSet::new();
    let mut cursor = 0;
    for (name, dims, trainable) in declared {
        let len: usize = dims.iter().product();
        let value: Vec<f64> = payload[cursor..cursor + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += len * 8;
        params.add(name, dims, value, trainable);
    }

    Ok(Checkpoint { kind, meta, params })
}

/// Looks up a meta value by key.
pub fn meta_value<'a>(meta: &'a [(String, String)], key: &str) -> Result<&'a str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(format!("checkpoint missing meta key `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params = ParamSet::new();
        params.add("a.weight", vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, 9.9], true);
        params.add("a.running_mean", vec![2], vec![0.25, 0.5], false);
        let meta = vec![("widths".to_string(), "8,16".to_string())];
        save_checkpoint(&path, "detect", &meta, &params).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.kind, "detect");
        assert_eq!(meta_value(&ckpt.meta, "widths").unwrap(), "8,16");
        assert_eq!(ckpt.params.len(), 2);
        for (orig, loaded) in params.params().iter().zip(ckpt.params.params()) {
            assert_eq!(orig.name, loaded.name);
            assert_eq!(orig.dims, loaded.dims);
            assert_eq!(orig.trainable, loaded.trainable);
            assert_eq!(orig.value, loaded.value);
        }
    }

    #[test]
    fn version_tag_is_mandatory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, "something else\nkind=detect\nend\n").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("version tag")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ckpt");
        fs::write(
            &path,
            b"nucleus3d-checkpoint v1\nkind=detect\nparam w dims=4 trainable=1\nend\nxxxx".to_vec(),
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
