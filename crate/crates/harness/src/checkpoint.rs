//! Flat parameter files.
//!
//! ```text
//! rtnag-checkpoint 1
//! {"config":{...},"scale":{"mean":..,"std":..}}
//! <parameter count>
//! <name> <d0>x<d1>x...        one line per parameter
//! data
//! <all values as little-endian f64, parameters in listed order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rtnag::model::{Model, ModelConfig};
use rtnag::tnode::TimeScale;
use rtnag::Tensor;
use serde::{Deserialize, Serialize};

const MAGIC: &str = "rtnag-checkpoint 1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    scale: TimeScale,
}

pub fn write_checkpoint<W: Write>(model: &Model<f64>, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    let header = Header {
        config: model.config.clone(),
        scale: model.scale,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    let store = &model.store;
    writeln!(out, "{}", store.len())?;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "{name} {}", dims.join("x"))?;
    }
    writeln!(out, "data")?;
    for t in store.tensors() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    ensure!(r.read_line(&mut s)? > 0, "checkpoint ends early");
    Ok(s.trim_end_matches('\n').to_string())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Model<f64>> {
    let mut r = BufReader::new(input);
    ensure!(line(&mut r)? == MAGIC, "not a checkpoint file");
    let header: Header = serde_json::from_str(&line(&mut r)?).context("checkpoint header")?;
    let mut model = Model::new(header.config, header.scale, 0)?;
    let count: usize = line(&mut r)?.parse().context("parameter count")?;
    ensure!(
        count == model.store.len(),
        "checkpoint has {count} parameters, model expects {}",
        model.store.len()
    );
    for i in 0..count {
        let l = line(&mut r)?;
        let (name, dims) = l.rsplit_once(' ').context("parameter line")?;
        let shape: Vec<usize> = dims.split('x').map(str::parse).collect::<Result<_, _>>()?;
        let want = &model.store.tensors()[i];
        if name != model.store.names()[i] || shape != want.shape() {
            bail!(
                "parameter {i} is {name} {shape:?}, expected {} {:?}",
                model.store.names()[i],
                want.shape()
            );
        }
    }
    ensure!(line(&mut r)? == "data", "missing data marker");
    for t in model.store.tensors_mut() {
        let mut values = Vec::with_capacity(t.len());
        let mut buf = [0u8; 8];
        for _ in 0..t.len() {
            r.read_exact(&mut buf).context("truncated parameter data")?;
            values.push(f64::from_le_bytes(buf));
        }
        *t = Tensor::new(t.shape().to_vec(), values)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    ensure!(rest.is_empty(), "{} trailing bytes after parameter data", rest.len());
    Ok(model)
}

pub fn save(model: &Model<f64>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<Model<f64>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_checkpoint(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rtnag::model::InputKind;

    #[test]
    fn roundtrip() {
        let mut cfg = ModelConfig::new(InputKind::Vector { dim: 4 });
        cfg.q = 3;
        let model = Model::<f64>::new(cfg, TimeScale { mean: 70.0, std: 5.0 }, 17).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.store.tensors(), model.store.tensors());
        assert_eq!(back.scale, model.scale);
        assert_eq!(back.config, model.config);
        bytes.pop();
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }
}
