//! `SIM2P-CKPT` model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SIM2P-CKPT"                      10 bytes
//! version                           u32
//! volumeSide patchSide embedDim
//! nBlocks nHeads auxDim mlpRatio    7 x u32
//! yChannel fusion                   2 x u8
//! scheduleKind                      u8 (0 = VP, 1 = VE)
//! beta0 sigmaMaxVE tMin T           4 x f64
//! var0 varT cov0T                   3 x f64
//! parameters                        count x f32
//! count                             u64
//! crc32 of all preceding bytes      u32
//! ```

use std::fs;
use std::path::Path;

use crate::bridge::{BridgeSchedule, DataStats, ScheduleKind};
use crate::error::{Error, Result};
use crate::network::model::{Fusion, NetConfig, Network};
use crate::network::DenoiserModel;

pub const CHECKPOINT_TAG: &[u8; 10] = b"SIM2P-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &DenoiserModel) -> Vec<u8> {
    let cfg = model.config();
    let params = model.net.params();
    let mut out = Vec::with_capacity(128 + 4 * params.len());
    out.extend_from_slice(CHECKPOINT_TAG);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.volume_side,
        cfg.patch_side,
        cfg.embed_dim,
        cfg.n_blocks,
        cfg.n_heads,
        cfg.aux_dim,
        cfg.mlp_ratio,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.y_channel as u8);
    out.push(cfg.fusion.code());
    out.push(match model.sched.kind {
        ScheduleKind::Vp => 0,
        ScheduleKind::Ve => 1,
    });
    let s = &model.sched;
    let st = &model.stats;
    for v in [
        s.beta0,
        s.sigma_max_ve,
        s.t_min,
        s.t_max,
        st.var0,
        st.var_t,
        st.cov0t,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<DenoiserModel> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < CHECKPOINT_TAG.len() + 16 || &bytes[..CHECKPOINT_TAG.len()] != CHECKPOINT_TAG {
        return Err(bad("missing SIM2P-CKPT tag"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: CHECKPOINT_TAG.len(),
    };
    let truncated = || bad("truncated header");
    let version = r.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32().ok_or_else(truncated)? as usize;
    }
    let y_channel = r.u8().ok_or_else(truncated)? != 0;
    let fusion = Fusion::from_code(r.u8().ok_or_else(truncated)?)
        .ok_or_else(|| bad("unknown fusion code"))?;
    let kind = match r.u8().ok_or_else(truncated)? {
        0 => ScheduleKind::Vp,
        1 => ScheduleKind::Ve,
        _ => return Err(bad("unknown schedule kind")),
    };
    let mut f = [0f64; 7];
    for v in &mut f {
        *v = r.f64().ok_or_else(truncated)?;
    }
    let cfg = NetConfig {
        volume_side: dims[0],
        patch_side: dims[1],
        embed_dim: dims[2],
        n_blocks: dims[3],
        n_heads: dims[4],
        aux_dim: dims[5],
        mlp_ratio: dims[6],
        y_channel,
        fusion,
    };
    let sched = BridgeSchedule {
        kind,
        beta0: f[0],
        sigma_max_ve: f[1],
        t_min: f[2],
        t_max: f[3],
    };
    let stats = DataStats {
        var0: f[4],
        var_t: f[5],
        cov0t: f[6],
    };
    let rest = body.len() - r.pos;
    if rest < 8 || (rest - 8) % 4 != 0 {
        return Err(bad("malformed parameter payload"));
    }
    let count = u64::from_le_bytes(body[body.len() - 8..].try_into().unwrap()) as usize;
    if count * 4 != rest - 8 {
        return Err(bad("parameter count does not match payload length"));
    }
    let params: Vec<f32> = body[r.pos..body.len() - 8]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    sched.validate()?;
    stats.validate()?;
    Ok(DenoiserModel {
        net: Network::from_params(cfg, params)?,
        stats,
        sched,
    })
}

pub fn save(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DenoiserModel {
        let mut m = DenoiserModel::init(
            NetConfig {
                fusion: Fusion::Multiply,
                ..NetConfig::micro()
            },
            BridgeSchedule::ve(1.5),
            DataStats {
                var0: 0.04,
                var_t: 0.06,
                cov0t: 0.01,
            },
            4,
        )
        .unwrap();
        m.net.params_mut()[7] = 0.125;
        m
    }

    #[test]
    fn roundtrip() {
        let m = model();
        let bytes = encode(&m);
        assert_eq!(&bytes[..10], b"SIM2P-CKPT");
        let back = decode(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.net.params(), m.net.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.sched, m.sched);
        assert_eq!(back.stats, m.stats);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = encode(&model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode(&bytes, Path::new("m")),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn length_field_precedes_crc() {
        let m = model();
        let bytes = encode(&m);
        let n = bytes.len();
        let count = u64::from_le_bytes(bytes[n - 12..n - 4].try_into().unwrap());
        assert_eq!(count as usize, m.net.params().len());
    }
}
