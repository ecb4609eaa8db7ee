use hpipe_runtime::{MsgType, WireMessage};
use proptest::prelude::*;

fn msg_type() -> impl Strategy<Value = MsgType> {
    prop_oneof![
        Just(MsgType::Frame),
        Just(MsgType::Result),
        Just(MsgType::ProfilePing),
        Just(MsgType::ProfilePong),
        Just(MsgType::Shutdown),
        Just(MsgType::Metrics),
    ]
}

fn message() -> impl Strategy<Value = WireMessage> {
    (
        msg_type(),
        any::<u64>(),
        any::<u16>(),
        any::<u64>(),
        any::<u16>(),
        prop::collection::vec(any::<u8>(), 0..2048),
    )
        .prop_map(
            |(msg_type, frame_id, stage_id, timestamp_ns, leaf, payload)| WireMessage {
                msg_type,
                frame_id,
                stage_id,
                timestamp_ns,
                leaf: (msg_type == MsgType::Frame).then_some(leaf),
                payload,
            },
        )
}

proptest! {
    #[test]
    fn stream_of_messages_round_trips(msgs in prop::collection::vec(message(), 1..12)) {
        let mut bytes = Vec::new();
        for m in &msgs {
            let enc = m.encode().unwrap();
            prop_assert_eq!(enc.len(), m.encoded_len());
            prop_assert_eq!(u32::from_be_bytes(enc[24..28].try_into().unwrap()) as usize, m.payload.len());
            bytes.extend(enc);
        }
        let mut r = &bytes[..];
        for m in &msgs {
            let got = WireMessage::read_from(&mut r).unwrap().unwrap();
            prop_assert_eq!(&got, m);
        }
        prop_assert!(WireMessage::read_from(&mut r).unwrap().is_none());
    }
}
