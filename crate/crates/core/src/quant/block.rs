use crate::error::{ForgeError, Result};

pub const BLOCK: usize = 32;
pub const Q8_BLOCK_BYTES: usize = 4 + BLOCK;
pub const Q4_BLOCK_BYTES: usize = 4 + BLOCK / 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockQ8 {
    pub scale: f32,
    pub codes: [i8; BLOCK],
}

/// Codes are offset by 8; byte `k` holds code `2k` in its low nibble and
/// `2k + 1` in its high nibble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockQ4 {
    pub scale: f32,
    pub packed: [u8; BLOCK / 2],
}

fn check(values: &[f32]) -> Result<f32> {
    if values.len() != BLOCK {
        return Err(ForgeError::Shape(format!("quantization block needs {BLOCK} values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ForgeError::NonFinite("quantization block".into()));
    }
    Ok(values.iter().fold(0.0f32, |m, v| m.max(v.abs())))
}

impl BlockQ8 {
    pub fn quantize(values: &[f32]) -> Result<Self> {
        let max = check(values)?;
        let scale = max / 127.0;
        let mut codes = [0i8; BLOCK];
        if scale > 0.0 {
            for (c, &v) in codes.iter_mut().zip(values) {
                *c = (v / scale).round().clamp(-127.0, 127.0) as i8;
            }
        }
        Ok(BlockQ8 { scale, codes })
    }

    pub fn value(&self, i: usize) -> f32 {
        self.scale * self.codes[i] as f32
    }

    pub fn dequantize(&self) -> [f32; BLOCK] {
        std::array::from_fn(|i| self.value(i))
    }

    pub fn write(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.scale.to_le_bytes());
        buf.extend(self.codes.iter().map(|&c| c as u8));
    }

    pub fn read(bytes: &[u8]) -> Self {
        let scale = f32::from_le_bytes(bytes[..4].try_into().unwrap());
        BlockQ8 { scale, codes: std::array::from_fn(|i| bytes[4 + i] as i8) }
    }
}

impl BlockQ4 {
    pub fn quantize(values: &[f32]) -> Result<Self> {
        let max = check(values)?;
        let scale = max / 7.5;
        let code = |v: f32| -> u8 {
            if scale > 0.0 {
                ((v / scale).round() + 8.0).clamp(0.0, 15.0) as u8
            } else {
                8
            }
        };
        let packed = std::array::from_fn(|k| code(values[2 * k]) | (code(values[2 * k + 1]) << 4));
        Ok(BlockQ4 { scale, packed })
    }

    pub fn code(&self, i: usize) -> u8 {
        (self.packed[i / 2] >> (4 * (i % 2))) & 0x0f
    }

    pub fn value(&self, i: usize) -> f32 {
        self.scale * (self.code(i) as f32 - 8.0)
    }

    pub fn dequantize(&self) -> [f32; BLOCK] {
        std::array::from_fn(|i| self.value(i))
    }

    pub fn write(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.scale.to_le_bytes());
        buf.extend_from_slice(&self.packed);
    }

    pub fn read(bytes: &[u8]) -> Self {
        let scale = f32::from_le_bytes(bytes[..4].try_into().unwrap());
        BlockQ4 { scale, packed: bytes[4..4 + BLOCK / 2].try_into().unwrap() }
    }
}
