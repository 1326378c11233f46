//! File formats: raw tensors, Netpbm images, saved models and flat
//! `key=value` configs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, LayerSpec, Model, ModelConfig};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 5] = b"RSAT1";
pub const MODEL_MAGIC: &[u8; 5] = b"RSAM1";

/// Byte cursor that reports what it expected when input runs out.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(Error::Format(format!(
                "{what}: expected {n} bytes, found {rest}"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// `RSAT1`, rank and extents as little-endian `u32`, then the row-major
/// payload as little-endian `f64`.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = read_tensor(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            r.remaining()
        )));
    }
    Ok(t)
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    if r.take(5, "tensor magic")? != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let rank = r.u32("tensor rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor extent")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} too large")))?;
    let payload = r.take(n, "tensor payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_tensor(t))?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Encodes `(H, W)` or `(H, W, 1)` as P5 and `(H, W, 3)` as P6. Values are
/// clamped to `[0, 1]` and rounded half-up to 8 bits.
pub fn encode_netpbm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match image.shape() {
        &[h, w] => (h, w, 1),
        &[h, w, c] if c == 1 || c == 3 => (h, w, c),
        s => {
            return Err(Error::InvalidArgument(format!(
                "image must be (H, W), (H, W, 1) or (H, W, 3), got {s:?}"
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Decodes binary P5/P6 with maxval 255 into `(H, W, 1)` or `(H, W, 3)`
/// values in `[0, 1]`.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos, "magic")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported netpbm magic `{m}`"))),
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "pixel payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    Tensor::new(
        vec![height, width, channels],
        payload.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

fn header_token(bytes: &[u8], pos: &mut usize, what: &str) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes
        .get(*pos)
        .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
    {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("netpbm header ends before {what}")));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos, what)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("netpbm {what} `{tok}` is not a number")))
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_netpbm(image)?)?)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_netpbm(&fs::read(path)?)
}

/// Reads an image-shaped tensor from either a tensor file or a Netpbm image,
/// chosen by magic bytes.
pub fn load_input(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        decode_tensor(&bytes)
    } else {
        decode_netpbm(&bytes)
    }
}

/// Parses flat `key=value` lines. Blank lines and `#` comments are skipped;
/// keys must be unique.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: line.into(),
                msg: format!("line {} is not key=value", n + 1),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config {
                key: String::new(),
                msg: format!("line {} has an empty key", n + 1),
            });
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config {
                key: k.into(),
                msg: "duplicate key".into(),
            });
        }
        out.push((k.into(), v.into()));
    }
    Ok(out)
}

/// Parses a config value, naming the key on failure.
pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn config_text(c: &ModelConfig) -> String {
    let dims: Vec<String> = c.input_shape.iter().map(|d| d.to_string()).collect();
    let layers: Vec<String> = c.layers.iter().map(|l| l.to_string()).collect();
    format!(
        "input_shape={}\nlayers={}\nclasses={}\nseed={}\n",
        dims.join("x"),
        layers.join(","),
        c.classes,
        c.seed
    )
}

fn parse_config_text(text: &str) -> Result<ModelConfig> {
    let mut shape = None;
    let mut layers = None;
    let mut classes = None;
    let mut seed = None;
    for (k, v) in parse_kv(text)? {
        match k.as_str() {
            "input_shape" => {
                shape = Some(
                    v.split('x')
                        .map(|d| parse_value::<usize>(&k, d))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "layers" => {
                layers = Some(
                    v.split(',')
                        .map(|l| l.parse::<LayerSpec>())
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "classes" => classes = Some(parse_value(&k, &v)?),
            "seed" => seed = Some(parse_value(&k, &v)?),
            _ => {
                return Err(Error::Config {
                    key: k,
                    msg: "unknown key".into(),
                })
            }
        }
    }
    let missing = |key: &str| Error::Config {
        key: key.into(),
        msg: "missing".into(),
    };
    Ok(ModelConfig {
        input_shape: shape.ok_or_else(|| missing("input_shape"))?,
        layers: layers.ok_or_else(|| missing("layers"))?,
        classes: classes.ok_or_else(|| missing("classes"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
    })
}

/// `RSAM1`, the config as `key=value` text prefixed by its byte length,
/// the parameter count, then each parameter as a tensor record.
pub fn encode_model(model: &Model) -> Vec<u8> {
    let text = config_text(model.config());
    let params = model.graph().params();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend(encode_tensor(p));
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    if r.take(5, "model magic")? != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "model config")?)
        .map_err(|_| Error::Format("model config is not UTF-8".into()))?;
    let mut model = build_model(parse_config_text(text)?)?;
    let count = r.u32("parameter count")? as usize;
    let expected = model.graph().params().len();
    if count != expected {
        return Err(Error::Format(format!(
            "model config has {expected} parameters, file has {count}"
        )));
    }
    for id in 0..count {
        let p = read_tensor(&mut r)?;
        model.graph_mut().set_param(id, p)?;
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after model parameters",
            r.remaining()
        )));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    Ok(fs::write(path, encode_model(model))?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extreme_pixels() {
        let t = decode_netpbm(b"P5\n2 1\n255\n\xff\x00").unwrap();
        assert_eq!(t.shape(), &[1, 2, 1]);
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let t = decode_netpbm(b"P6 # rgb\n1\t1 # size\n255\n\x00\x80\xff").unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data()[1], 128.0 / 255.0);
    }

    #[test]
    fn rejects_bad_headers() {
        for bad in [
            &b"P2\n1 1\n255\n\x00"[..],
            b"P5\n1 1\n65535\n\x00\x00",
            b"P5\n1\n",
            b"P5\nx 1\n255\n\x00",
            b"P5\n1 1\n255",
        ] {
            assert!(decode_netpbm(bad).is_err());
        }
    }

    #[test]
    fn truncated_payload_names_counts() {
        let err = decode_netpbm(b"P5\n3 2\n255\n\x01\x02\x03").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 6"), "{msg}");
        assert!(msg.contains("found 3"), "{msg}");
    }

    #[test]
    fn write_clamps_and_rounds_half_up() {
        let t = Tensor::new(vec![1, 4], vec![-0.5, 1.5, 0.5 / 255.0, 2.49 / 255.0]).unwrap();
        let bytes = encode_netpbm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 1, 2]);
    }

    #[test]
    fn truncated_tensor_file() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[2, 3]));
        bytes.truncate(bytes.len() - 1);
        let msg = decode_tensor(&bytes).unwrap_err().to_string();
        assert!(msg.contains("expected 48 bytes, found 47"), "{msg}");
    }

    #[test]
    fn kv_errors_name_the_key() {
        let kv = parse_kv("# c\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(
            kv,
            vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]
        );
        match parse_kv("a=1\na=2") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "a"),
            other => panic!("{other:?}"),
        }
        match parse_value::<usize>("epochs", "ten") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "epochs"),
            other => panic!("{other:?}"),
        }
        assert!(parse_kv("novalue").is_err());
    }

    #[test]
    fn model_round_trip() {
        let m = build_model(ModelConfig::vanishing()).unwrap();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        let m = build_model(ModelConfig::shapes3(5)).unwrap();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert!(back.same_params(&m));
        assert_eq!(encode_model(&back), bytes);
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn pgm_bytes_round_trip(
            w in 1usize..6,
            h in 1usize..6,
            pool in prop::collection::vec(any::<u8>(), 25),
        ) {
            let mut file = format!("P5\n{w} {h}\n255\n").into_bytes();
            file.extend(&pool[..w * h]);
            let t = decode_netpbm(&file).unwrap();
            prop_assert_eq!(encode_netpbm(&t).unwrap(), file);
        }

        #[test]
        fn tensor_round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            bits in prop::collection::vec(any::<u64>(), 27),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = bits[..n].iter().map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
