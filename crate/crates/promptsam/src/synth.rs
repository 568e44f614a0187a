//! Synthetic corpus construction: minimal DEX files, ZIP/APK writers, and
//! periodic-pattern byte streams. Used by the test suites and the toy
//! separability experiment; written independently of the readers in
//! [`crate::binfmt`] so the two sides can check each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builder for a structurally valid DEX file: a 112-byte header with correct
/// size/offset fields, followed by an ids region and a data region.
pub struct SyntheticDex {
    ids_len: usize,
    data_len: usize,
    fill: Option<Box<dyn FnMut(usize) -> u8>>,
}

impl SyntheticDex {
    pub fn new(ids_len: usize, data_len: usize) -> Self {
        Self {
            ids_len,
            data_len,
            fill: None,
        }
    }

    /// Byte generator for the ids/data payload (receives the file offset).
    pub fn fill(mut self, f: impl FnMut(usize) -> u8 + 'static) -> Self {
        self.fill = Some(Box::new(f));
        self
    }

    pub fn build(mut self) -> Vec<u8> {
        let header_len = 112usize;
        let total = header_len + self.ids_len + self.data_len;
        let mut raw = vec![0u8; total];
        raw[..8].copy_from_slice(b"dex\n035\0");
        let put = |raw: &mut [u8], off: usize, v: u32| {
            raw[off..off + 4].copy_from_slice(&v.to_le_bytes());
        };
        put(&mut raw, 32, total as u32); // file_size
        put(&mut raw, 36, header_len as u32); // header_size
        put(&mut raw, 40, 0x12345678); // endian_tag
        put(&mut raw, 104, self.data_len as u32); // data_size
        put(&mut raw, 108, (header_len + self.ids_len) as u32); // data_off
        if let Some(f) = self.fill.as_mut() {
            for (i, b) in raw.iter_mut().enumerate().skip(header_len) {
                *b = f(i);
            }
        }
        raw
    }
}

/// Store-only ZIP writer: local headers, central directory, end record.
pub fn store_zip(entries: &[(&str, &[u8])]) -> Vec<u8> {
    zip_with(entries, false)
}

/// ZIP writer with DEFLATE-compressed entries.
pub fn deflate_zip(entries: &[(&str, &[u8])]) -> Vec<u8> {
    zip_with(entries, true)
}

fn zip_with(entries: &[(&str, &[u8])], compress: bool) -> Vec<u8> {
    use flate2::{write::DeflateEncoder, Compression};
    use std::io::Write;

    let mut out = Vec::new();
    let mut central = Vec::new();
    let mut count = 0u16;
    for (name, data) in entries {
        let offset = out.len() as u32;
        let crc = crc32(data);
        let (method, payload): (u16, Vec<u8>) = if compress {
            let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
            enc.write_all(data).unwrap();
            (8, enc.finish().unwrap())
        } else {
            (0, data.to_vec())
        };
        // local file header
        out.extend_from_slice(b"PK\x03\x04");
        out.extend_from_slice(&20u16.to_le_bytes()); // version needed
        out.extend_from_slice(&0u16.to_le_bytes()); // flags
        out.extend_from_slice(&method.to_le_bytes());
        out.extend_from_slice(&[0u8; 4]); // mod time/date
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes()); // extra len
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&payload);
        // central directory record
        central.extend_from_slice(b"PK\x01\x02");
        central.extend_from_slice(&20u16.to_le_bytes()); // version made by
        central.extend_from_slice(&20u16.to_le_bytes()); // version needed
        central.extend_from_slice(&0u16.to_le_bytes()); // flags
        central.extend_from_slice(&method.to_le_bytes());
        central.extend_from_slice(&[0u8; 4]); // mod time/date
        central.extend_from_slice(&crc.to_le_bytes());
        central.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        central.extend_from_slice(&(data.len() as u32).to_le_bytes());
        central.extend_from_slice(&(name.len() as u16).to_le_bytes());
        central.extend_from_slice(&[0u8; 12]); // extra/comment len, disk, attrs
        central.extend_from_slice(&offset.to_le_bytes());
        central.extend_from_slice(name.as_bytes());
        count += 1;
    }
    let cd_off = out.len() as u32;
    let cd_size = central.len() as u32;
    out.extend_from_slice(&central);
    out.extend_from_slice(b"PK\x05\x06");
    out.extend_from_slice(&[0u8; 4]); // disk numbers
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&cd_size.to_le_bytes());
    out.extend_from_slice(&cd_off.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes()); // comment len
    out
}

fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xedb8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

/// A synthetic APK containing a single DEX whose data section carries a
/// family-specific periodic pattern plus seeded noise.
pub fn family_apk(family: usize, sample: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (family as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ sample as u64,
    );
    let period = match family {
        0 => 7,
        _ => 13,
    };
    let phase: usize = rng.gen_range(0..period);
    let amp = 80 + (family as i32) * 120;
    let noise_span = 24i32;
    let data_len = 4096 + rng.gen_range(0..512) * 2;
    let dex = SyntheticDex::new(64, data_len)
        .fill(move |i| {
            let base = if (i + phase) % period < period / 2 {
                amp
            } else {
                255 - amp
            };
            (base + rng.gen_range(-noise_span..=noise_span)).clamp(0, 255) as u8
        })
        .build();
    store_zip(&[("classes.dex", &dex)])
}
