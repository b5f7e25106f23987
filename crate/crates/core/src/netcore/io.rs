//! Binary parameter files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "CGFMNET\0"
//! version   u32
//! act tag   u8       1 = SiLU
//! channels  u32
//! history   u32
//! horizon   u32
//! embed K   u32
//! depth     u32      number of hidden layers
//! widths    u32 x depth
//! count     u64      number of parameters
//! params    f64 x count, layer by layer: weight (row-major fan_in x fan_out), bias
//! ```

use ndarray::{Array1, Array2};

use super::{Layer, NetConfig, VelocityNet};
use crate::error::{CgfmError, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"CGFMNET\0";
pub const PARAMS_VERSION: u32 = 1;
const ACT_SILU: u8 = 1;

pub fn save_params(net: &VelocityNet) -> Vec<u8> {
    let c = net.config();
    let mut out = Vec::with_capacity(64 + 8 * net.num_params());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.push(ACT_SILU);
    for v in [c.channels, c.history, c.horizon, c.time_embed_k, c.hidden.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &w in &c.hidden {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for p in net.params_flat() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(CgfmError::Format(format!(
                "truncated parameter file while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_params(bytes: &[u8]) -> Result<VelocityNet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != PARAMS_MAGIC {
        return Err(CgfmError::Format("not a parameter file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != PARAMS_VERSION {
        return Err(CgfmError::Version {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let act = r.take(1, "activation tag")?[0];
    if act != ACT_SILU {
        return Err(CgfmError::Format(format!("unknown activation tag {act}")));
    }
    let channels = r.u32("channels")? as usize;
    let history = r.u32("history")? as usize;
    let horizon = r.u32("horizon")? as usize;
    let time_embed_k = r.u32("embedding size")? as usize;
    let depth = r.u32("depth")? as usize;
    if depth > 64 {
        return Err(CgfmError::Format(format!("implausible depth {depth}")));
    }
    let hidden = (0..depth)
        .map(|_| r.u32("hidden width").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = NetConfig {
        channels,
        history,
        horizon,
        hidden,
        time_embed_k,
    };
    config
        .validate()
        .map_err(|e| CgfmError::Format(format!("invalid header: {e}")))?;
    let count = r.u64("parameter count")?;
    let widths = config.widths();
    let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if count != expected as u64 {
        return Err(CgfmError::Format(format!(
            "parameter count {count} does not match header dimensions ({expected})"
        )));
    }
    if bytes.len() - r.pos != 8 * expected {
        return Err(CgfmError::Format(format!(
            "expected {} parameter bytes, found {}",
            8 * expected,
            bytes.len() - r.pos
        )));
    }
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let weight = (0..w[0] * w[1])
            .map(|_| r.f64("weights"))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..w[1]).map(|_| r.f64("biases")).collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weight: Array2::from_shape_vec((w[0], w[1]), weight).unwrap(),
            bias: Array1::from(bias),
        });
    }
    Ok(VelocityNet::from_parts(config, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathkit::standard_normal;
    use crate::rng::Rng;
    use rand::SeedableRng;

    fn net() -> VelocityNet {
        let mut rng = Rng::seed_from_u64(9);
        VelocityNet::new(NetConfig::new(2, 3, 2).with_hidden(vec![7, 5]), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs_bitwise() {
        let a = net();
        let b = load_params(&save_params(&a)).unwrap();
        assert_eq!(a.config(), b.config());
        let mut rng = Rng::seed_from_u64(1);
        let xt = standard_normal((2, 2), &mut rng);
        let h = standard_normal((2, 3), &mut rng);
        let ya = a.forward(0.3, &xt, &h).unwrap();
        let yb = b.forward(0.3, &xt, &h).unwrap();
        assert!(ya.iter().zip(yb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let bytes = save_params(&net());
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(
                matches!(load_params(&bytes[..cut]), Err(CgfmError::Format(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = save_params(&net());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            load_params(&bytes),
            Err(CgfmError::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = save_params(&net());
        bytes[0] = b'X';
        assert!(matches!(load_params(&bytes), Err(CgfmError::Format(_))));
    }
}
