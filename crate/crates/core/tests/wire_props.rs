use migrant_core::coordkv::KvMessage;
use migrant_core::wire::{samples, 
    encode_frame, ChainedMessage, CloseReason, DecodeBuffer, Frame, FrameKind, Gossip, NackReason, Publish,
    ReconcileRequest, ReconcileResponse, Role, WireError, MAX_FRAME,
};
use migrant_core::{GroupId, Message, MsgId, OrderKey, ServerId, TopicName};
use proptest::prelude::*;

#[test]
fn samples_cover_every_kind() {
    let kinds: std::collections::HashSet<FrameKind> = samples().iter().map(Frame::kind).collect();
    assert_eq!(kinds.len(), FrameKind::ALL.len());
}

#[test]
fn every_split_point_decodes_identically() {
    for f in samples() {
        let bytes = encode_frame(&f).unwrap();
        for cut in 0..=bytes.len() {
            let mut buf = DecodeBuffer::new();
            let mut got = buf.decode_frames(&bytes[..cut]).unwrap();
            got.extend(buf.decode_frames(&bytes[cut..]).unwrap());
            assert_eq!(got, vec![f.clone()], "kind {:?} cut at {cut}", f.kind());
            assert_eq!(buf.pending_len(), 0);
        }
    }
}

#[test]
fn every_pair_of_split_points_decodes_identically() {
    for f in samples() {
        let bytes = encode_frame(&f).unwrap();
        if bytes.len() > 200 {
            continue;
        }
        for i in 0..=bytes.len() {
            for j in i..=bytes.len() {
                let mut buf = DecodeBuffer::new();
                let mut got = Vec::new();
                for part in [&bytes[..i], &bytes[i..j], &bytes[j..]] {
                    got.extend(buf.decode_frames(part).unwrap());
                }
                assert_eq!(got, vec![f.clone()]);
            }
        }
    }
}

#[test]
fn stream_of_all_kinds_one_byte_at_a_time() {
    let frames = samples();
    let stream: Vec<u8> = frames.iter().flat_map(|f| encode_frame(f).unwrap().to_vec()).collect();
    let mut buf = DecodeBuffer::new();
    let mut got = Vec::new();
    for b in &stream {
        got.extend(buf.decode_frames(std::slice::from_ref(b)).unwrap());
    }
    assert_eq!(got, frames);
}

#[test]
fn length_prefix_matches_body() {
    for f in samples() {
        let bytes = encode_frame(&f).unwrap();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len + 4, bytes.len());
        assert_eq!(bytes[4], f.kind() as u8);
    }
}

#[test]
fn oversize_prefix_rejected_without_body() {
    let mut buf = DecodeBuffer::new();
    let prefix = ((MAX_FRAME as u32) + 1).to_be_bytes();
    assert!(matches!(buf.decode_frames(&prefix), Err(WireError::MalformedFrame(_) | WireError::OversizeFrame { .. })));
}

fn arb_topic() -> impl Strategy<Value = TopicName> {
    "[a-z0-9/_]{1,40}".prop_map(|s| TopicName::new(s).unwrap())
}

fn arb_key() -> impl Strategy<Value = OrderKey> {
    (any::<u64>(), any::<u64>()).prop_map(|(e, s)| OrderKey::new(e, s))
}

fn arb_message() -> impl Strategy<Value = Message> {
    (arb_topic(), arb_key(), prop::collection::vec(any::<u8>(), 0..300), any::<u128>())
        .prop_map(|(t, k, p, id)| Message::new(t, k, p, MsgId(id)))
}

fn arb_frame() -> impl Strategy<Value = Frame> {
    prop_oneof![
        any::<u16>().prop_map(|node| Frame::Connect { role: Role::Peer, node }),
        any::<u16>().prop_map(|s| Frame::ConnAck { server: ServerId(s) }),
        (arb_topic(), arb_key()).prop_map(|(topic, resume)| Frame::Subscribe { topic, resume }),
        (arb_topic(), arb_key()).prop_map(|(topic, head)| Frame::SubAck { topic, head }),
        (arb_topic(), any::<u128>(), any::<bool>(), prop::collection::vec(any::<u8>(), 0..500)).prop_map(
            |(topic, id, ack, p)| Frame::Publish(Publish { topic, msg_id: MsgId(id), ack_requested: ack, payload: p.into() })
        ),
        (any::<u128>(), arb_key()).prop_map(|(id, key)| Frame::PubAck { msg_id: MsgId(id), key }),
        (any::<u128>(), prop::option::of(any::<u16>())).prop_map(|(id, o)| Frame::PubNack {
            msg_id: MsgId(id),
            reason: NackReason::OwnershipLost,
            owner: o.map(ServerId)
        }),
        arb_message().prop_map(Frame::Notify),
        (arb_topic(), arb_key()).prop_map(|(topic, after)| Frame::Recover { topic, after }),
        (arb_topic(), any::<bool>()).prop_map(|(topic, truncated)| Frame::RecoverEnd { topic, truncated }),
        Just(Frame::Ping),
        Just(Frame::Pong),
        (arb_message(), arb_key()).prop_map(|(message, prev)| Frame::Replicate(ChainedMessage { message, prev })),
        (arb_topic(), arb_key()).prop_map(|(topic, key)| Frame::ReplAck { topic, key }),
        (0u32..100, any::<u16>(), any::<u64>()).prop_map(|(g, o, epoch)| Frame::CoordGossip(Gossip::Announce {
            group: GroupId::new(g, 100).unwrap(),
            owner: ServerId(o),
            epoch
        })),
        (any::<u64>(), any::<u64>(), any::<bool>()).prop_map(|(term, last_index, granted)| {
            if granted {
                Frame::CoordGossip(Gossip::Kv(KvMessage::Vote { term, last_index, last_term: term / 2 }))
            } else {
                Frame::CoordGossip(Gossip::Kv(KvMessage::AppendReply { term, success: false, match_index: last_index }))
            }
        }),
        (any::<u64>(), prop::collection::vec((arb_topic(), arb_key()), 0..8)).prop_map(|(request, known)| {
            Frame::ReconcileReq(ReconcileRequest { request, group: GroupId::new(0, 1).unwrap(), known })
        }),
        (any::<u64>(), any::<bool>(), prop::collection::vec((arb_message(), arb_key()), 0..5)).prop_map(
            |(request, last, es)| Frame::ReconcileRsp(ReconcileResponse {
                request,
                group: GroupId::new(0, 1).unwrap(),
                last,
                entries: es.into_iter().map(|(message, prev)| ChainedMessage { message, prev }).collect(),
            })
        ),
        Just(Frame::Close { reason: CloseReason::SlowConsumer }),
    ]
}

proptest! {
    #[test]
    fn round_trip(f in arb_frame()) {
        let bytes = encode_frame(&f).unwrap();
        let mut buf = DecodeBuffer::new();
        prop_assert_eq!(buf.decode_frames(&bytes).unwrap(), vec![f]);
    }

    #[test]
    fn chunking_invariance(fs in prop::collection::vec(arb_frame(), 1..6), cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..10)) {
        let stream: Vec<u8> = fs.iter().flat_map(|f| encode_frame(f).unwrap().to_vec()).collect();
        let mut points: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
        points.push(0);
        points.push(stream.len());
        points.sort_unstable();
        let mut buf = DecodeBuffer::new();
        let mut got = Vec::new();
        for w in points.windows(2) {
            got.extend(buf.decode_frames(&stream[w[0]..w[1]]).unwrap());
        }
        prop_assert_eq!(got, fs);
        prop_assert_eq!(buf.pending_len(), 0);
    }
}
