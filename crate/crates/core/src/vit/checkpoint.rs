//! Binary checkpoint format: a text header listing the configuration and
//! tensor shapes, terminated by `end`, followed by little-endian f32 data in
//! header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ViTConfig;
use super::model::ViTModel;
use crate::error::{Error, Result};

const MAGIC: &str = "fracvit-checkpoint v1";

fn config_lines(config: &ViTConfig) -> Result<Vec<String>> {
    let value = serde_json::to_value(config)?;
    let map = value.as_object().expect("config serialises to an object");
    Ok(map.iter().map(|(k, v)| format!("config {k} {v}")).collect())
}

fn entries(model: &ViTModel) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<(String, Vec<usize>, &[f32])> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
        .collect();
    let stats = &model.head.bn_stats;
    out.push(("head.bn.running_mean".into(), vec![stats.mean.len()], &stats.mean));
    out.push(("head.bn.running_var".into(), vec![stats.var.len()], &stats.var));
    out
}

pub fn save(model: &ViTModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    for line in config_lines(model.config())? {
        writeln!(w, "{line}")?;
    }
    let entries = entries(model);
    for (name, shape, _) in &entries {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        writeln!(w, "tensor {name} {}", dims.join("x"))?;
    }
    writeln!(w, "end")?;
    for (_, _, data) in &entries {
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn load(path: &Path) -> Result<ViTModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(format!("{} is not a checkpoint file", path.display())));
    }
    let mut config = serde_json::Map::new();
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("header is not terminated"));
        }
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        let mut parts = l.splitn(3, ' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("config"), Some(key), Some(value)) => {
                config.insert(key.to_string(), serde_json::from_str(value)?);
            }
            (Some("tensor"), Some(name), Some(dims)) => {
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension in {l:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                tensors.push((name.to_string(), shape));
            }
            _ => return Err(bad(format!("unrecognised header line {l:?}"))),
        }
    }
    let config: ViTConfig = serde_json::from_value(serde_json::Value::Object(config))
        .map_err(|e| bad(format!("invalid configuration: {e}")))?;
    let mut model = ViTModel::zeroed(config)?;
    let expected: Vec<(String, Vec<usize>)> =
        entries(&model).into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != tensors.len() {
        return Err(bad(format!(
            "expected {} tensors for this configuration, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for ((en, es), (gn, gs)) in expected.iter().zip(&tensors) {
        if en != gn || es != gs {
            return Err(bad(format!("tensor {gn} {gs:?} does not match expected {en} {es:?}")));
        }
    }
    let mut read = |len: usize| -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|_| bad("tensor data is truncated"))?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    };
    for p in model.parameters_mut() {
        let data = read(p.numel())?;
        p.data_mut().copy_from_slice(&data);
    }
    let n = model.head.bn_stats.mean.len();
    model.head.bn_stats.mean = read(n)?;
    model.head.bn_stats.var = read(n)?;
    Ok(model)
}

/// Loads a checkpoint and checks it was saved with `config`.
pub fn load_expecting(path: &Path, config: &ViTConfig) -> Result<ViTModel> {
    let model = load(path)?;
    if model.config() != config {
        return Err(bad(format!(
            "checkpoint configuration {:?} does not match expected {:?}",
            model.config(),
            config
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = ViTModel::new(ViTConfig::tiny(), 5).unwrap();
        m.head.bn_stats.mean[3] = 0.25;
        m.head.bn_stats.var[1] = 2.5;
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, m);
        assert!(load_expecting(&path, &ViTConfig::tiny()).is_ok());
        assert!(matches!(
            load_expecting(&path, &ViTConfig::tiny().with_classes(2)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&ViTModel::new(ViTConfig::tiny(), 5).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"hello\n").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&ViTModel::new(ViTConfig::tiny(), 5).unwrap(), &path).unwrap();
        let text = std::fs::read(&path).unwrap();
        let patched = String::from_utf8_lossy(&text).replacen("tensor class_token 1x64", "tensor class_token 1x63", 1);
        std::fs::write(&path, patched.as_bytes()).unwrap();
        assert!(matches!(load(&path), Err(_)));
    }
}
