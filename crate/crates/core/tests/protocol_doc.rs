//! Every hex example in `docs/protocol.md` is one frame that decodes and
//! re-encodes to the same bytes, and every frame kind has one.

use std::collections::HashSet;

use migrant_core::wire::{encode_frame, DecodeBuffer, FrameKind};

const DOC: &str = include_str!("../../../docs/protocol.md");

fn examples() -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut current: Option<Vec<u8>> = None;
    for line in DOC.lines() {
        match (&mut current, line.trim()) {
            (None, "```hex") => current = Some(Vec::new()),
            (Some(_), "```") => out.push(current.take().unwrap()),
            (Some(bytes), l) => {
                bytes.extend(l.split_whitespace().map(|b| u8::from_str_radix(b, 16).expect("hex byte")));
            }
            _ => {}
        }
    }
    out
}

#[test]
fn documented_examples_match_the_encoder() {
    let mut kinds = HashSet::new();
    for bytes in examples() {
        let frames = DecodeBuffer::new().decode_frames(&bytes).expect("example decodes");
        assert_eq!(frames.len(), 1, "{bytes:02x?}");
        assert_eq!(encode_frame(&frames[0]).unwrap().as_ref(), &bytes[..]);
        kinds.insert(frames[0].kind());
    }
    assert_eq!(kinds.len(), FrameKind::ALL.len());
}
