use lorasync_core::channel_sim::from_hex;
use lorasync_core::phy_codec::{decode, encode, payload_crc, whitening_sequence};
use lorasync_core::{CodingRate, FramePayload, LoRaParams};
use serde::Deserialize;

#[derive(Deserialize)]
struct CrcCase {
    hex: String,
    crc: u16,
}

#[derive(Deserialize)]
struct Case {
    sf: u32,
    cr: usize,
    has_crc: bool,
    payload_hex: String,
    symbols: Vec<usize>,
}

#[derive(Deserialize)]
struct Vectors {
    whitening_prefix: Vec<u8>,
    crc: Vec<CrcCase>,
    cases: Vec<Case>,
}

fn vectors() -> Vectors {
    serde_json::from_str(include_str!("data/codec_vectors.json")).unwrap()
}

#[test]
fn whitening_matches_reference() {
    let v = vectors();
    assert_eq!(whitening_sequence(v.whitening_prefix.len()), v.whitening_prefix);
}

#[test]
fn crc_matches_reference() {
    for c in vectors().crc {
        assert_eq!(payload_crc(&from_hex(&c.hex).unwrap()), c.crc, "{}", c.hex);
    }
}

#[test]
fn encoder_matches_reference_symbols() {
    let cases = vectors().cases;
    assert_eq!(cases.len(), 240);
    for c in &cases {
        let p = LoRaParams::new(c.sf);
        let mut payload = FramePayload::new(from_hex(&c.payload_hex).unwrap(), CodingRate::from_parity_bits(c.cr).unwrap());
        payload.has_crc = c.has_crc;
        let symbols = encode(&payload, &p).unwrap();
        assert_eq!(symbols, c.symbols, "sf {} cr {} crc {} {}", c.sf, c.cr, c.has_crc, c.payload_hex);
        let (bytes, ok) = decode(&c.symbols, &payload.meta(), &p).unwrap();
        assert!(ok);
        assert_eq!(bytes, payload.bytes);
    }
}

#[test]
fn twelve_byte_frame_lengths() {
    let payload = FramePayload::new(vec![0x5a; 12], CodingRate::Cr48);
    assert_eq!(encode(&payload, &LoRaParams::new(8)).unwrap().len(), 32);
    assert_eq!(encode(&payload, &LoRaParams::new(10)).unwrap().len(), 24);
}

#[test]
fn corrupted_crc_is_reported() {
    let p = LoRaParams::new(8);
    let payload = FramePayload::new(b"hello world!".to_vec(), CodingRate::Cr45);
    let mut symbols = encode(&payload, &p).unwrap();
    // an off-by-M/2 error on a 4/5 symbol cannot be corrected
    symbols[10] = (symbols[10] + 128) % 256;
    let (_, ok) = decode(&symbols, &payload.meta(), &p).unwrap();
    assert!(!ok);
}

#[test]
fn too_few_symbols_is_an_error() {
    let p = LoRaParams::new(8);
    let payload = FramePayload::new(vec![1, 2, 3], CodingRate::Cr47);
    let symbols = encode(&payload, &p).unwrap();
    assert!(decode(&symbols[..symbols.len() - 1], &payload.meta(), &p).is_err());
}
