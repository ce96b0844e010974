//! Tokenization and fixed (non-learned) embeddings.

use crate::error::{Error, Result};
use crate::network::linalg::Real;
use crate::volume::Volume;

/// Scale applied to `c_noise` before the sinusoidal timestep embedding, so the
/// log-time input spans a range comparable to discrete diffusion step indices.
pub const TIME_EMBED_SCALE: f64 = 1000.0;

const MAX_PERIOD: f64 = 10_000.0;

fn check_patch(side: usize, patch: usize) -> Result<usize> {
    if patch == 0 || side == 0 || side % patch != 0 {
        return Err(Error::Shape(format!(
            "volume side {side} not divisible by patch side {patch}"
        )));
    }
    Ok(side / patch)
}

/// Writes the patches of a cubic volume (flat, z-fastest) into rows of a
/// row-major token matrix with row length `ld`, starting at column `col0`.
/// Patches are ordered lexicographically with z fastest; voxels inside a
/// patch likewise.
pub(crate) fn patchify_into<S: Copy, T: Real>(
    src: &[S],
    side: usize,
    patch: usize,
    out: &mut [T],
    ld: usize,
    col0: usize,
    conv: impl Fn(S) -> T,
) {
    let g = side / patch;
    let mut tok = 0;
    for px in 0..g {
        for py in 0..g {
            for pz in 0..g {
                let row = &mut out[tok * ld + col0..];
                let mut k = 0;
                for dx in 0..patch {
                    for dy in 0..patch {
                        let base = ((px * patch + dx) * side + py * patch + dy) * side + pz * patch;
                        for dz in 0..patch {
                            row[k] = conv(src[base + dz]);
                            k += 1;
                        }
                    }
                }
                tok += 1;
            }
        }
    }
}

/// Inverse of [`patchify_into`] for a single-channel token matrix.
pub(crate) fn unpatchify_into<T: Copy, S>(
    tokens: &[T],
    side: usize,
    patch: usize,
    dst: &mut [S],
    conv: impl Fn(T) -> S,
) {
    let g = side / patch;
    let p3 = patch * patch * patch;
    let mut tok = 0;
    for px in 0..g {
        for py in 0..g {
            for pz in 0..g {
                let row = &tokens[tok * p3..(tok + 1) * p3];
                let mut k = 0;
                for dx in 0..patch {
                    for dy in 0..patch {
                        let base = ((px * patch + dx) * side + py * patch + dy) * side + pz * patch;
                        for dz in 0..patch {
                            dst[base + dz] = conv(row[k]);
                            k += 1;
                        }
                    }
                }
                tok += 1;
            }
        }
    }
}

/// Splits a cubic volume into `(side / patch)^3` tokens of `patch^3` values.
pub fn patchify(x: &Volume, patch: usize) -> Result<Vec<Vec<f32>>> {
    let side = x
        .side()
        .ok_or_else(|| Error::Shape(format!("non-cubic volume {:?}", x.dims())))?;
    let g = check_patch(side, patch)?;
    let p3 = patch * patch * patch;
    let mut flat = vec![0f32; g * g * g * p3];
    patchify_into(x.as_slice(), side, patch, &mut flat, p3, 0, |v| v);
    Ok(flat.chunks(p3).map(<[f32]>::to_vec).collect())
}

pub fn unpatchify(tokens: &[Vec<f32>], side: usize, patch: usize) -> Result<Volume> {
    let g = check_patch(side, patch)?;
    let p3 = patch * patch * patch;
    if tokens.len() != g * g * g || tokens.iter().any(|t| t.len() != p3) {
        return Err(Error::Shape(format!(
            "{} tokens do not tile a {side}^3 volume with patch {patch}",
            tokens.len()
        )));
    }
    let flat: Vec<f32> = tokens.concat();
    let mut out = Volume::cube(side);
    unpatchify_into(&flat, side, patch, out.as_mut_slice(), |v| v);
    Ok(out)
}

/// Number of frequencies per (axis, function) pair in the 3D position table.
pub fn pos_freqs(embed_dim: usize) -> usize {
    embed_dim / 6
}

/// Fixed 3D sine-cosine position table, row-major `n x embed_dim`.
///
/// Each axis owns a band of `2 * embed_dim / 6` channels (sines then
/// cosines); leftover channels are zero.
pub fn pos_embed(n: usize, grid_side: usize, embed_dim: usize) -> Result<Vec<f64>> {
    if grid_side.pow(3) != n {
        return Err(Error::Shape(format!(
            "{n} tokens is not a {grid_side}^3 grid"
        )));
    }
    let f = pos_freqs(embed_dim);
    if f == 0 {
        return Err(Error::Config(format!(
            "embedding dimension {embed_dim} too small for 3D positions"
        )));
    }
    let omegas: Vec<f64> = (0..f)
        .map(|i| 1.0 / MAX_PERIOD.powf(i as f64 / f as f64))
        .collect();
    let mut table = vec![0.0; n * embed_dim];
    for tok in 0..n {
        let coords = [
            tok / (grid_side * grid_side),
            (tok / grid_side) % grid_side,
            tok % grid_side,
        ];
        let row = &mut table[tok * embed_dim..(tok + 1) * embed_dim];
        for (axis, &c) in coords.iter().enumerate() {
            let band = &mut row[axis * 2 * f..(axis + 1) * 2 * f];
            for (i, &w) in omegas.iter().enumerate() {
                band[i] = (c as f64 * w).sin();
                band[f + i] = (c as f64 * w).cos();
            }
        }
    }
    Ok(table)
}

/// Sinusoidal embedding `[cos(s w_i), sin(s w_i)]` of a scalar, zero padded to `dim`.
pub fn timestep_embedding(s: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        out[i] = (s * w).cos();
        out[half + i] = (s * w).sin();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_shapes() {
        let v = Volume::from_fn([16; 3], |x, y, z| (x * 256 + y * 16 + z) as f32);
        let toks = patchify(&v, 2).unwrap();
        assert_eq!(toks.len(), 512);
        assert!(toks.iter().all(|t| t.len() == 8));
        // First token covers voxels (0..2)^3.
        assert_eq!(
            toks[0],
            vec![0.0, 1.0, 16.0, 17.0, 256.0, 257.0, 272.0, 273.0]
        );
        // Second token is the next patch along z.
        assert_eq!(toks[1][0], 2.0);
    }

    #[test]
    fn patch_roundtrip_bit_exact() {
        let v = Volume::from_fn([8; 3], |x, y, z| ((x * 31 + y * 7 + z) as f32).sin());
        let toks = patchify(&v, 4).unwrap();
        assert_eq!(unpatchify(&toks, 8, 4).unwrap(), v);
    }

    #[test]
    fn constant_volume_tokens() {
        let v = Volume::filled([4; 3], 0.25);
        for t in patchify(&v, 2).unwrap() {
            assert_eq!(t, vec![0.25; 8]);
        }
    }

    #[test]
    fn indivisible_patch() {
        assert!(patchify(&Volume::cube(5), 2).is_err());
        assert!(patchify(&Volume::zeros([4, 4, 2]), 2).is_err());
    }

    #[test]
    fn pos_embed_origin_and_padding() {
        let table = pos_embed(27, 3, 64).unwrap();
        let f = pos_freqs(64);
        assert_eq!(f, 10);
        let row = &table[..64];
        for axis in 0..3 {
            let band = &row[axis * 2 * f..(axis + 1) * 2 * f];
            assert!(band[..f].iter().all(|&v| v == 0.0));
            assert!(band[f..].iter().all(|&v| v == 1.0));
        }
        assert!(row[60..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pos_embed_axis_separable() {
        let g = 4;
        let e = 24;
        let table = pos_embed(g * g * g, g, e).unwrap();
        let f = pos_freqs(e);
        // Tokens differing only in the x coordinate (index stride g*g).
        let a = 1 * g * g + 2 * g + 3;
        let b = 3 * g * g + 2 * g + 3;
        for c in 0..e {
            let differs = table[a * e + c] != table[b * e + c];
            if differs {
                assert!(c < 2 * f, "channel {c} outside x band");
            }
        }
        assert!((0..2 * f).any(|c| table[a * e + c] != table[b * e + c]));
    }

    #[test]
    fn pos_embed_deterministic() {
        assert_eq!(pos_embed(64, 4, 30).unwrap(), pos_embed(64, 4, 30).unwrap());
        assert!(pos_embed(63, 4, 30).is_err());
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(0.0, 8);
        assert_eq!(e, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
