//! Baseline LoRa payload path: whitening, CRC-16, Hamming FEC, diagonal
//! interleaving, Gray mapping, and argmax demodulation.
//!
//! The layout follows the common open-source LoRa PHY description with the
//! explicit header left out:
//! * payload bytes are whitened with the LFSR sequence `FF FE FC F8 F0 E1 ...`
//!   (`next = (s << 1) | (b7 ^ b5 ^ b4 ^ b3)`), the CRC is appended unwhitened,
//!   low byte first;
//! * bytes split into nibbles, low nibble first;
//! * the first interleaver block carries `sf - 2` nibbles at CR 4/8 (8 symbols,
//!   symbol values shifted left by 2), later blocks carry `sf` nibbles at the
//!   frame coding rate; the last block is zero padded;
//! * interleaving maps codeword bit `i` of row `(i - j - 1) mod sf_app` to bit `j`
//!   (MSB first) of symbol `i`;
//! * symbols are the inverse Gray code of the interleaved value.

use serde::{Deserialize, Serialize};

use crate::css_core::{argmax, Direction, IqCapture, SpectralEngine};
use crate::error::{Error, Result};
use crate::fine_sync::SyncResult;
use crate::params::LoRaParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CodingRate {
    Cr45,
    Cr46,
    Cr47,
    Cr48,
}

impl CodingRate {
    pub const ALL: [CodingRate; 4] = [CodingRate::Cr45, CodingRate::Cr46, CodingRate::Cr47, CodingRate::Cr48];

    /// Number of parity bits per nibble.
    pub fn parity_bits(self) -> usize {
        match self {
            CodingRate::Cr45 => 1,
            CodingRate::Cr46 => 2,
            CodingRate::Cr47 => 3,
            CodingRate::Cr48 => 4,
        }
    }

    pub fn from_parity_bits(cr: usize) -> Result<Self> {
        match cr {
            1 => Ok(CodingRate::Cr45),
            2 => Ok(CodingRate::Cr46),
            3 => Ok(CodingRate::Cr47),
            4 => Ok(CodingRate::Cr48),
            _ => Err(Error::Domain(format!("coding rate 4/{} not supported", 4 + cr))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePayload {
    pub bytes: Vec<u8>,
    pub coding_rate: CodingRate,
    pub has_crc: bool,
    pub low_data_rate_opt: bool,
}

impl FramePayload {
    pub fn new(bytes: Vec<u8>, coding_rate: CodingRate) -> Self {
        Self { bytes, coding_rate, has_crc: true, low_data_rate_opt: false }
    }

    pub fn meta(&self) -> PayloadMeta {
        PayloadMeta { n_bytes: self.bytes.len(), coding_rate: self.coding_rate, has_crc: self.has_crc }
    }
}

/// Out-of-band frame description needed to decode (no explicit header).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadMeta {
    pub n_bytes: usize,
    pub coding_rate: CodingRate,
    pub has_crc: bool,
}

pub fn whitening_sequence(n: usize) -> Vec<u8> {
    let mut s: u8 = 0xFF;
    (0..n)
        .map(|_| {
            let out = s;
            let fb = ((s >> 7) ^ (s >> 5) ^ (s >> 4) ^ (s >> 3)) & 1;
            s = (s << 1) | fb;
            out
        })
        .collect()
}

pub fn whiten(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().zip(whitening_sequence(bytes.len())).map(|(b, w)| b ^ w).collect()
}

/// CRC-16/XMODEM (poly 0x1021, init 0, no reflection).
pub fn crc16_xmodem(data: &[u8]) -> u16 {
    let mut crc: u16 = 0;
    for &b in data {
        crc ^= (b as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

/// LoRa payload CRC: XMODEM over all but the last two bytes, then XOR with
/// those two bytes (last byte low). Payloads shorter than 2 bytes use plain XMODEM.
pub fn payload_crc(payload: &[u8]) -> u16 {
    let n = payload.len();
    if n < 2 {
        return crc16_xmodem(payload);
    }
    crc16_xmodem(&payload[..n - 2]) ^ payload[n - 1] as u16 ^ ((payload[n - 2] as u16) << 8)
}

fn bit(v: u32, k: usize) -> u32 {
    (v >> k) & 1
}

/// Hamming codeword (MSB first, `4 + cr` bits) of a nibble.
pub fn hamming_encode(nibble: u8, cr: usize) -> u16 {
    let v = nibble as u32 & 0xF;
    let (d0, d1, d2, d3) = (bit(v, 3), bit(v, 2), bit(v, 1), bit(v, 0));
    if cr == 1 {
        return ((v << 1) | (d0 ^ d1 ^ d2 ^ d3)) as u16;
    }
    let p0 = d3 ^ d2 ^ d1;
    let p1 = d2 ^ d1 ^ d0;
    let p2 = d3 ^ d2 ^ d0;
    let p3 = d3 ^ d1 ^ d0;
    let parity = (p0 << 3) | (p1 << 2) | (p2 << 1) | p3;
    ((v << cr) | (parity >> (4 - cr))) as u16
}

/// Nearest-codeword decoding for CR 4/7 and 4/8; data bits only for 4/5 and 4/6.
pub fn hamming_decode(cw: u16, cr: usize) -> u8 {
    if cr <= 2 {
        return ((cw >> cr) & 0xF) as u8;
    }
    (0u8..16)
        .min_by_key(|&n| (hamming_encode(n, cr) ^ cw).count_ones())
        .expect("sixteen candidates")
}

pub fn gray_encode(x: usize) -> usize {
    x ^ (x >> 1)
}

pub fn gray_decode(mut x: usize) -> usize {
    let mut shift = x >> 1;
    while shift != 0 {
        x ^= shift;
        shift >>= 1;
    }
    x
}

fn interleave(codewords: &[u16], sf_app: usize, n_cw: usize) -> Vec<usize> {
    (0..n_cw)
        .map(|i| {
            (0..sf_app).fold(0usize, |acc, j| {
                let row = (i + 2 * sf_app - j - 1) % sf_app;
                let b = (codewords[row] >> (n_cw - 1 - i)) & 1;
                (acc << 1) | b as usize
            })
        })
        .collect()
}

fn deinterleave(values: &[usize], sf_app: usize, n_cw: usize) -> Vec<u16> {
    let mut cw = vec![0u16; sf_app];
    for (i, &v) in values.iter().enumerate().take(n_cw) {
        for j in 0..sf_app {
            let row = (i + 2 * sf_app - j - 1) % sf_app;
            let b = (v >> (sf_app - 1 - j)) & 1;
            cw[row] |= (b as u16) << (n_cw - 1 - i);
        }
    }
    cw
}

fn n_nibbles(meta: &PayloadMeta) -> usize {
    2 * (meta.n_bytes + if meta.has_crc { 2 } else { 0 })
}

/// Number of payload symbols for a frame description.
pub fn symbol_count(meta: &PayloadMeta, sf: u32) -> usize {
    let sf = sf as usize;
    let rest = n_nibbles(meta).saturating_sub(sf - 2);
    8 + rest.div_ceil(sf) * (4 + meta.coding_rate.parity_bits())
}

pub fn encode(payload: &FramePayload, params: &LoRaParams) -> Result<Vec<usize>> {
    if payload.bytes.len() > 255 {
        return Err(Error::Domain(format!("payload of {} bytes exceeds 255", payload.bytes.len())));
    }
    if payload.low_data_rate_opt {
        return Err(Error::Unsupported("low data rate optimization".into()));
    }
    let sf = params.sf as usize;
    let cr = payload.coding_rate.parity_bits();
    let mut bytes = whiten(&payload.bytes);
    if payload.has_crc {
        let crc = payload_crc(&payload.bytes);
        bytes.push((crc & 0xFF) as u8);
        bytes.push((crc >> 8) as u8);
    }
    let nibbles: Vec<u8> = bytes.iter().flat_map(|b| [b & 0xF, b >> 4]).collect();
    let mut symbols = Vec::with_capacity(symbol_count(&payload.meta(), params.sf));
    let first = nibbles.len().min(sf - 2);
    let mut block: Vec<u8> = nibbles[..first].to_vec();
    block.resize(sf - 2, 0);
    let cws: Vec<u16> = block.iter().map(|&n| hamming_encode(n, 4)).collect();
    symbols.extend(interleave(&cws, sf - 2, 8).into_iter().map(|v| gray_decode(v) << 2));
    for chunk in nibbles[first..].chunks(sf) {
        let mut block = chunk.to_vec();
        block.resize(sf, 0);
        let cws: Vec<u16> = block.iter().map(|&n| hamming_encode(n, cr)).collect();
        symbols.extend(interleave(&cws, sf, 4 + cr).into_iter().map(gray_decode));
    }
    Ok(symbols)
}

/// Inverse of [`encode`]. Returns the payload bytes and whether the CRC matched
/// (always `true` for frames without CRC).
pub fn decode(symbols: &[usize], meta: &PayloadMeta, params: &LoRaParams) -> Result<(Vec<u8>, bool)> {
    let sf = params.sf as usize;
    let m = params.m();
    let cr = meta.coding_rate.parity_bits();
    let need = symbol_count(meta, params.sf);
    if symbols.len() < need {
        return Err(Error::Decode(format!("expected {need} symbols, got {}", symbols.len())));
    }
    let total = n_nibbles(meta);
    let mut nibbles = Vec::with_capacity(total + sf);
    let reduced_mask = (1usize << (sf - 2)) - 1;
    let head: Vec<usize> = symbols[..8].iter().map(|&s| gray_encode(((s % m + 2) >> 2) & reduced_mask)).collect();
    nibbles.extend(deinterleave(&head, sf - 2, 8).iter().map(|&c| hamming_decode(c, 4)));
    for block in symbols[8..need].chunks(4 + cr) {
        let vals: Vec<usize> = block.iter().map(|&s| gray_encode(s % m)).collect();
        nibbles.extend(deinterleave(&vals, sf, 4 + cr).iter().map(|&c| hamming_decode(c, cr)));
    }
    nibbles.truncate(total);
    let bytes: Vec<u8> = nibbles.chunks(2).map(|p| p[0] | (p[1] << 4)).collect();
    let payload = whiten(&bytes[..meta.n_bytes]);
    let crc_ok = if meta.has_crc {
        let crc = payload_crc(&payload);
        bytes[meta.n_bytes] == (crc & 0xFF) as u8 && bytes[meta.n_bytes + 1] == (crc >> 8) as u8
    } else {
        true
    };
    Ok((payload, crc_ok))
}

/// One piece of the transmitted waveform: a symbol, its chirp direction and its
/// length as a fraction of a full symbol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub symbol: usize,
    pub dir: Direction,
    pub fraction: f64,
}

/// Preamble upchirps, two sync-word upchirps, 2.25 downchirps, then payload.
pub fn frame_segments(params: &LoRaParams, payload_symbols: &[usize]) -> Vec<Segment> {
    let up = |symbol| Segment { symbol, dir: Direction::Up, fraction: 1.0 };
    let down = |fraction| Segment { symbol: 0, dir: Direction::Down, fraction };
    let mut segs: Vec<Segment> = (0..params.n_preamble).map(|_| up(0)).collect();
    segs.push(up(params.sync_word.0));
    segs.push(up(params.sync_word.1));
    segs.extend([down(1.0), down(1.0), down(0.25)]);
    segs.extend(payload_symbols.iter().map(|&s| up(s)));
    segs
}

/// Frame length in Nyquist samples.
pub fn frame_length(params: &LoRaParams, n_payload_symbols: usize) -> f64 {
    (params.n_preamble as f64 + 4.25 + n_payload_symbols as f64) * params.m() as f64
}

/// Argmax demodulation of the payload windows following a synchronized preamble.
pub fn demodulate(
    engine: &mut SpectralEngine,
    capture: &IqCapture,
    sync: &SyncResult,
    n_symbols: usize,
    params: &LoRaParams,
) -> Result<Vec<usize>> {
    if n_symbols == 0 {
        return Ok(Vec::new());
    }
    let w = engine.dechirp_block(capture, sync.start + params.payload_offset(), sync.cfo_bins, n_symbols, Direction::Up)?;
    Ok(w.rows().map(|r| argmax(&engine.dft_magnitudes(r))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitening_prefix() {
        assert_eq!(
            whitening_sequence(16),
            vec![0xFF, 0xFE, 0xFC, 0xF8, 0xF0, 0xE1, 0xC2, 0x85, 0x0B, 0x17, 0x2F, 0x5E, 0xBC, 0x78, 0xF1, 0xE3]
        );
    }

    #[test]
    fn xmodem_check_value() {
        assert_eq!(crc16_xmodem(b"123456789"), 0x31C3);
    }

    #[test]
    fn hamming_corrects_single_errors() {
        for cr in [3usize, 4] {
            for n in 0u8..16 {
                let cw = hamming_encode(n, cr);
                assert_eq!(hamming_decode(cw, cr), n);
                for b in 0..(4 + cr) {
                    assert_eq!(hamming_decode(cw ^ (1 << b), cr), n, "cr {cr} nibble {n} bit {b}");
                }
            }
        }
        for cr in [1usize, 2] {
            for n in 0u8..16 {
                assert_eq!(hamming_decode(hamming_encode(n, cr), cr), n);
            }
        }
    }

    #[test]
    fn gray_roundtrip_and_adjacency() {
        for x in 0..1024usize {
            assert_eq!(gray_encode(gray_decode(x)), x);
            assert_eq!((gray_encode(x) ^ gray_encode(x + 1)).count_ones(), 1);
        }
    }

    #[test]
    fn interleaver_roundtrip() {
        let cws: Vec<u16> = (0..8).map(|i| hamming_encode(i as u8 * 2 + 1, 4)).collect();
        let v = interleave(&cws, 8, 8);
        assert_eq!(deinterleave(&v, 8, 8), cws);
    }

    #[test]
    fn symbol_counts() {
        let meta = PayloadMeta { n_bytes: 12, coding_rate: CodingRate::Cr48, has_crc: true };
        assert_eq!(symbol_count(&meta, 8), 32);
        assert_eq!(symbol_count(&meta, 10), 24);
        let empty = PayloadMeta { n_bytes: 0, coding_rate: CodingRate::Cr45, has_crc: false };
        assert_eq!(symbol_count(&empty, 7), 8);
    }

    #[test]
    fn empty_and_zero_payloads_roundtrip() {
        let p = LoRaParams::new(8);
        for bytes in [vec![], vec![0u8; 12]] {
            for has_crc in [false, true] {
                let mut fp = FramePayload::new(bytes.clone(), CodingRate::Cr48);
                fp.has_crc = has_crc;
                let s = encode(&fp, &p).unwrap();
                assert!(s.iter().all(|&v| v < 256));
                assert_eq!(decode(&s, &fp.meta(), &p).unwrap(), (bytes.clone(), true));
            }
        }
    }

    #[test]
    fn rejects_oversize_ldro_and_truncation() {
        let p = LoRaParams::new(7);
        assert!(encode(&FramePayload::new(vec![0; 256], CodingRate::Cr45), &p).is_err());
        let mut fp = FramePayload::new(vec![1, 2, 3], CodingRate::Cr45);
        fp.low_data_rate_opt = true;
        assert!(matches!(encode(&fp, &p), Err(Error::Unsupported(_))));
        fp.low_data_rate_opt = false;
        let s = encode(&fp, &p).unwrap();
        assert!(decode(&s[..s.len() - 1], &fp.meta(), &p).is_err());
    }

    #[test]
    fn reduced_rate_symbols_tolerate_off_by_one() {
        let p = LoRaParams::new(9);
        let fp = FramePayload::new(b"collision".to_vec(), CodingRate::Cr48);
        let mut s = encode(&fp, &p).unwrap();
        s[3] = (s[3] + 1) % 512;
        s[5] = (s[5] + 511) % 512;
        s[12] = (s[12] + 1) % 512;
        assert_eq!(decode(&s, &fp.meta(), &p).unwrap(), (fp.bytes.clone(), true));
    }

    #[test]
    fn crc_detects_corruption() {
        let p = LoRaParams::new(8);
        let fp = FramePayload::new(b"hello world!".to_vec(), CodingRate::Cr45);
        let mut s = encode(&fp, &p).unwrap();
        s[10] ^= 0x55;
        let (_, ok) = decode(&s, &fp.meta(), &p).unwrap();
        assert!(!ok);
    }

    proptest! {
        #[test]
        fn roundtrip(bytes in proptest::collection::vec(any::<u8>(), 0..64), sf in 7u32..=12, cr in 1usize..=4, crc in any::<bool>()) {
            let p = LoRaParams::new(sf);
            let mut fp = FramePayload::new(bytes.clone(), CodingRate::from_parity_bits(cr).unwrap());
            fp.has_crc = crc;
            let s = encode(&fp, &p).unwrap();
            prop_assert_eq!(s.len(), symbol_count(&fp.meta(), sf));
            prop_assert!(s.iter().all(|&v| v < p.m()));
            prop_assert_eq!(decode(&s, &fp.meta(), &p).unwrap(), (bytes, true));
        }
    }
}
