//! Binary checkpoints: a text header terminated by `end\n`, then the
//! parameter vector as little-endian `f64`.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{Activation, NeuralSurface, StateEncoding};
use crate::error::{Error, Result};

const MAGIC: &str = "mfg-master-network";
const FORMAT_VERSION: u32 = 1;

fn optional(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:?}"))
}

fn parse_optional(v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|_| bad(format!("bad number {v:?}")))
    }
}

fn bad(msg: String) -> Error {
    Error::Checkpoint(msg)
}

pub fn write_checkpoint<W: Write>(net: &NeuralSurface, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(out, "states {}", net.num_states)?;
    writeln!(out, "time_input {}", net.time_input)?;
    let sizes: Vec<String> = net.layer_sizes.iter().map(|s| s.to_string()).collect();
    writeln!(out, "layers {}", sizes.join(","))?;
    writeln!(out, "activation {}", net.activation.tag())?;
    writeln!(out, "output_activation {}", net.output_activation.tag())?;
    writeln!(out, "encoding {}", net.encoding.tag())?;
    writeln!(out, "truncation_cap {}", optional(net.truncation_cap))?;
    writeln!(out, "lipschitz_bound {}", optional(net.lipschitz_bound))?;
    writeln!(out, "params {}", net.params.len())?;
    writeln!(out, "end")?;
    for p in &net.params {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<NeuralSurface> {
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        let n = input.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Err(bad("truncated header".into()));
        }
        let line = line.trim_end().to_string();
        if line == "end" {
            break;
        }
        header.push(line);
    }
    let mut fields = std::collections::BTreeMap::new();
    let mut lines = header.iter();
    match lines.next().map(|l| l.split_once(' ')) {
        Some(Some((MAGIC, v))) if v == FORMAT_VERSION.to_string() => {}
        _ => return Err(bad("not a network checkpoint of a supported version".into())),
    }
    for l in lines {
        let (k, v) = l.split_once(' ').ok_or_else(|| bad(format!("bad header line {l:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("missing header field {k}")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
    let num_states = num("states")?;
    let time_input = match get("time_input")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(bad(format!("bad time_input {other:?}"))),
    };
    let layer_sizes = get("layers")?
        .split(',')
        .map(|s| s.parse().map_err(|_| bad(format!("bad layer size {s:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let activation = Activation::from_tag(&get("activation")?)?;
    let output_activation = Activation::from_tag(&get("output_activation")?)?;
    let encoding = StateEncoding::from_tag(&get("encoding")?)?;
    let cap = parse_optional(&get("truncation_cap")?)?;
    let bound = parse_optional(&get("lipschitz_bound")?)?;
    let count = num("params")?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
    if bytes.len() != 8 * count {
        return Err(bad(format!("expected {} parameter bytes, found {}", 8 * count, bytes.len())));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    NeuralSurface::from_parts(
        num_states,
        time_input,
        layer_sizes,
        activation,
        output_activation,
        encoding,
        cap,
        bound,
        params,
    )
    .map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(net: &NeuralSurface, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(net, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NeuralSurface> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NetworkSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = NetworkSpec {
            encoding: StateEncoding::OneHot,
            ..NetworkSpec::default()
        };
        let mut net = NeuralSurface::new(3, true, &spec, &mut rng).unwrap();
        net.set_truncation_cap(Some(2.5));
        net.set_lipschitz_bound(Some(0.1 + 0.2));
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
        assert!(back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_corruption() {
        let net = NeuralSurface::zeros(2, false, &NetworkSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(read_checkpoint(&b"garbage\nend\n"[..]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = NeuralSurface::zeros(2, false, &NetworkSpec::default()).unwrap();
        save_checkpoint(&net, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), net);
        assert!(matches!(load_checkpoint(&dir.path().join("absent")), Err(Error::Io { .. })));
    }
}
