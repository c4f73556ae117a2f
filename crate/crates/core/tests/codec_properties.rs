use dense_ntp::codec::{parse_message, parse_message_spans, rle_decode, rle_encode, Element, RleMask};
use dense_ntp::error::Error;
use dense_ntp::targets::{DenseMap, MapKind};
use proptest::prelude::*;

fn map() -> impl Strategy<Value = DenseMap> {
    (1usize..=12, 1usize..=12)
        .prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(prop_oneof![0u32..3, Just(255)], w * h)))
        .prop_map(|(w, h, v)| DenseMap::new(w, h, v, MapKind::Semantic).unwrap())
}

/// Canonical run lists: counts ≥ 1, neighbouring values distinct.
fn canonical_runs() -> impl Strategy<Value = Vec<(u32, u32)>> {
    prop::collection::vec((1u32..20, 0u32..6), 1..12).prop_map(|raw| {
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for (c, v) in raw {
            match runs.last_mut() {
                Some(last) if last.1 == v => last.0 += c,
                _ => runs.push((c, v)),
            }
        }
        runs
    })
}

proptest! {
    #[test]
    fn rle_round_trips(m in map()) {
        let (rle, payload) = rle_encode(&m);
        prop_assert!(rle.is_canonical());
        prop_assert_eq!(rle_decode(&payload, m.width, m.height).unwrap(), m);
    }

    #[test]
    fn canonical_payloads_re_encode_identically(runs in canonical_runs()) {
        let payload: Vec<String> = runs.iter().map(|(c, v)| format!("{c}x{v}")).collect();
        let payload = payload.join(",");
        let total: u32 = runs.iter().map(|r| r.0).sum();
        let m = rle_decode(&payload, total as usize, 1).unwrap();
        prop_assert_eq!(rle_encode(&m).1, payload);
        prop_assert_eq!(RleMask::parse(&rle_encode(&m).1).unwrap().to_values(), m.values);
    }

    #[test]
    fn wrong_length_is_reported(runs in canonical_runs(), extra in 1usize..5) {
        let payload: Vec<String> = runs.iter().map(|(c, v)| format!("{c}x{v}")).collect();
        let total: usize = runs.iter().map(|r| r.0 as usize).sum();
        let err = rle_decode(&payload.join(","), total + extra, 1).unwrap_err();
        prop_assert_eq!(err, Error::LengthMismatch { expected: total + extra, got: total });
    }

    #[test]
    fn spans_tile_the_input(text in "([a-z ,.]|<ref>|</ref>|<mask>|</mask>|<box>|</box>|<x_1[0-9]>|<y_[0-9]>|<depth>|<b>|é){0,24}") {
        // errors are fine; successful parses must account for every byte
        if let Ok((msg, spans)) = parse_message_spans(&text) {
            prop_assert_eq!(msg.elements.len(), spans.len());
            let mut at = 0;
            for s in &spans {
                prop_assert_eq!(s.start, at);
                at = s.end;
            }
            prop_assert_eq!(at, text.len());
        }
    }

    #[test]
    fn plain_prose_is_kept_verbatim(text in "[^<]{1,40}") {
        let msg = parse_message(&text).unwrap();
        prop_assert_eq!(msg.elements, vec![Element::Text(text.clone())]);
    }
}

#[test]
fn documented_examples() {
    let m = DenseMap::new(6, 1, vec![1, 1, 1, 2, 2, 3], MapKind::Semantic).unwrap();
    assert_eq!(rle_encode(&m).1, "3x1,2x2,1x3");
    let alt = DenseMap::new(4, 1, vec![0, 1, 0, 1], MapKind::Semantic).unwrap();
    assert_eq!(rle_encode(&alt).1, "1x0,1x1,1x0,1x1");
    assert_eq!(rle_decode("3x1,2x2", 6, 1), Err(Error::LengthMismatch { expected: 6, got: 5 }));
    assert!(matches!(rle_decode("3y1", 3, 1), Err(Error::ParseError { .. })));
}
