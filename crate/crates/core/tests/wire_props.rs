use mapshare::geometry::{CameraIntrinsics, Pose};
use mapshare::ids::{ClientId, FrameId, KeyframeId, PointId};
use mapshare::wire::*;
use proptest::prelude::*;

fn pose() -> impl Strategy<Value = Pose> {
    (-1e5..1e5f64, -1e5..1e5f64, -1e3..1e3f64, -3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64)
        .prop_map(|(x, y, z, r, p, w)| Pose::new(x, y, z, r, p, w).unwrap())
}

fn f32x3() -> impl Strategy<Value = [f32; 3]> {
    [-1e4f32..1e4, -1e4f32..1e4, -1e4f32..1e4]
}

fn point() -> impl Strategy<Value = WirePoint> {
    (any::<u64>(), f32x3(), any::<[u8; 32]>(), any::<u16>())
        .prop_map(|(id, position, descriptor, observation_count)| WirePoint { id: PointId(id), position, descriptor, observation_count })
}

fn query() -> impl Strategy<Value = OverlapQueryMsg> {
    (any::<u32>(), any::<u32>(), any::<u16>(), pose()).prop_map(|(c, k, np, p)| OverlapQueryMsg::new(ClientId(c), KeyframeId(k), np, &p))
}

fn upload() -> impl Strategy<Value = KeyframeUploadMsg> {
    (any::<u32>(), any::<u32>(), pose(), 0.1..3.0f64, prop::collection::vec(point(), 0..40)).prop_map(|(c, k, pose, fov, points)| {
        KeyframeUploadMsg { client_id: ClientId(c), keyframe_id: KeyframeId(k), pose, fov, points }
    })
}

fn message() -> impl Strategy<Value = Message> {
    let frame = (any::<u64>(), any::<u32>(), any::<u32>(), pose(), 0.1..3.0f64, prop::collection::vec(any::<u64>(), 0..20)).prop_map(
        |(f, c, k, pose, fov, ids)| WireFrame {
            frame_id: FrameId(f),
            client_id: ClientId(c),
            keyframe_id: KeyframeId(k),
            pose,
            fov,
            point_ids: ids.into_iter().map(PointId).collect(),
        },
    );
    let code = prop_oneof![
        Just(ErrorCode::Malformed),
        Just(ErrorCode::Protocol),
        Just(ErrorCode::NotRegistered),
        Just(ErrorCode::Rejected),
        Just(ErrorCode::Internal)
    ];
    prop_oneof![
        query().prop_map(Message::OverlapQuery),
        query().prop_map(Message::SharedMapRequest),
        (any::<bool>(), 0.0f32..10.0, prop::collection::vec(f32x3(), 0..300)).prop_map(|(b, r, samples)| {
            Message::OverlapResponse(OverlapResponseMsg { status: if b { SampleClass::Fresh } else { SampleClass::Redundant }, r, samples })
        }),
        upload().prop_map(Message::KeyframeUpload),
        (any::<u32>(), any::<bool>(), any::<u32>()).prop_map(|(k, b, n)| Message::UploadAck(UploadAckMsg {
            keyframe_id: KeyframeId(k),
            outcome: if b { UploadOutcome::Buffered } else { UploadOutcome::Stored },
            points_stored: n
        })),
        (any::<u32>(), any::<u32>(), pose(), 1.0..50.0f64, 0.1..3.0f64, prop::collection::vec(frame, 0..5), prop::collection::vec(point(), 0..30))
            .prop_map(|(c, k, origin_pose, h, fov, frames, points)| Message::SharedMapResponse(SharedMapResponseMsg {
                origin_client: ClientId(c),
                origin_keyframe: KeyframeId(k),
                origin_pose,
                h,
                fov,
                frames,
                points
            })),
        (any::<u32>(), prop::collection::vec(upload(), 1..5))
            .prop_map(|(c, keyframes)| Message::UpdateCheck(UpdateCheckMsg { client_id: ClientId(c), keyframes })),
        (any::<bool>(), prop::collection::vec(any::<u64>(), 0..50), any::<[u32; 4]>()).prop_map(|(b, ids, s)| {
            Message::UpdateStatus(UpdateStatusMsg {
                verdict: if b { UpdateVerdict::Updating } else { UpdateVerdict::Expansion },
                stale_point_ids: ids.into_iter().map(PointId).collect(),
                summary: UpdateSummary { candidates: s[0], unobserved: s[1], stale: s[2], largest_cluster: s[3] },
            })
        }),
        (any::<u32>(), 1.0..2000.0f64, 1.0..2000.0f64, 1.0..2000.0f64, 1.0..2000.0f64).prop_map(|(c, fx, fy, cx, cy)| Message::Register {
            client_id: ClientId(c),
            intrinsics: CameraIntrinsics::new(fx, fy, cx, cy).unwrap()
        }),
        (any::<u32>(), any::<bool>()).prop_map(|(c, aligned)| Message::RegisterAck { client_id: ClientId(c), aligned }),
        any::<u32>().prop_map(|c| Message::End { client_id: ClientId(c) }),
        (any::<u32>(), any::<[u32; 3]>(), any::<u64>()).prop_map(|(c, n, e)| Message::EndAck(OptimizationSummary {
            client_id: ClientId(c),
            frame_count: n[0],
            point_count: n[1],
            frames_adjusted: n[2],
            elapsed_us: e
        })),
        (code, ".{0,80}").prop_map(|(code, message)| Message::Error { code, message }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn decode_inverts_encode(m in message()) {
        let bytes = encode(&m);
        prop_assert_eq!(decode_header(&bytes).unwrap(), (m.message_type(), bytes.len() - HEADER_LEN));
        prop_assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn query_frames_are_64_bytes(q in query()) {
        prop_assert_eq!(encode(&Message::OverlapQuery(q)).len(), 64);
        prop_assert_eq!(encode(&Message::SharedMapRequest(q)).len(), 64);
    }

    #[test]
    fn truncation_and_garbage_never_panic(m in message(), cut in any::<prop::sample::Index>(), noise in prop::collection::vec(any::<u8>(), 0..100)) {
        let bytes = encode(&m);
        let n = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..n]).is_err());
        let _ = decode(&noise);
        let mut extra = bytes.clone();
        extra.push(0);
        prop_assert!(decode(&extra).is_err());
    }

    #[test]
    fn framing_round_trip(ms in prop::collection::vec(message(), 1..6)) {
        let mut stream = vec![];
        for m in &ms {
            write_frame(&mut stream, &encode(m)).unwrap();
        }
        let mut input = stream.as_slice();
        for m in &ms {
            prop_assert_eq!(&decode(&read_frame(&mut input).unwrap()).unwrap(), m);
        }
        prop_assert!(input.is_empty());
    }
}

#[test]
fn golden_query_frame() {
    let q = OverlapQueryMsg::new(ClientId(1), KeyframeId(1), 300, &Pose::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap());
    let b = encode(&Message::OverlapQuery(q));
    assert_eq!(b.len(), 64);
    assert_eq!(&b[..2], &[0x51, 0x4d]);
    assert_eq!(b[3], 0x01);
}

#[test]
fn metering_matches_frame_sizes() {
    let mut t = TrafficStats::default();
    let frames: Vec<Vec<u8>> = [
        Message::End { client_id: ClientId(1) },
        Message::OverlapQuery(OverlapQueryMsg::new(ClientId(1), KeyframeId(0), 0, &Pose::identity())),
    ]
    .iter()
    .map(encode)
    .collect();
    for f in &frames {
        t.meter(f, Direction::Upload);
    }
    let by_category: u64 = Category::ALL.iter().map(|c| t.bytes(Direction::Upload, *c)).sum();
    assert_eq!(by_category, frames.iter().map(|f| f.len() as u64).sum::<u64>());
    assert_eq!(t.bytes(Direction::Upload, Category::Query), 64);
    assert_eq!(t.total(Direction::Download), 0);
}
