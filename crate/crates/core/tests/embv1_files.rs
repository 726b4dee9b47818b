use deliberank::domain::ImageId;
use deliberank::embedstore::{decode_embv1, encode_embv1, load_embv1, write_embv1, write_embv1_rows, EmbedStoreError};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<ImageId> {
    (0..n).map(|i| ImageId::new(format!("img_{i}")).unwrap()).collect()
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|x| f64::from(*x) / n).collect()
}

fn matrix() -> impl Strategy<Value = (usize, Vec<Vec<f32>>)> {
    (1usize..24, 1usize..16).prop_flat_map(|(dim, n)| {
        let row = prop::collection::vec(prop_oneof![-10.0f32..-0.01, 0.01f32..10.0], dim);
        (Just(dim), prop::collection::vec(row, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn files_round_trip((dim, rows) in matrix()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embv1");
        let ids = ids(rows.len());
        write_embv1_rows(&path, dim, ids.iter().zip(&rows).map(|(i, r)| (i, r.as_slice()))).unwrap();
        let m = load_embv1(&path).unwrap();
        prop_assert_eq!(m.ids(), ids.as_slice());
        for (i, raw) in rows.iter().enumerate() {
            for (a, b) in m.row(i).iter().zip(unit(raw)) {
                prop_assert!((f64::from(*a) - b).abs() <= 1e-6);
            }
        }
        // Normalized rows survive a second write bit-for-bit.
        let again = dir.path().join("again.embv1");
        write_embv1(&again, &m).unwrap();
        prop_assert_eq!(std::fs::read(&again).unwrap(), encode_embv1(dim, m.ids().iter().enumerate().map(|(i, id)| (id, m.row(i)))).unwrap());
        let reread = load_embv1(&again).unwrap();
        for i in 0..m.len() {
            prop_assert_eq!(reread.row(i), m.row(i));
        }
    }

    #[test]
    fn truncation_is_always_detected((dim, rows) in matrix(), cut in 1usize..64) {
        let ids = ids(rows.len());
        let bytes = encode_embv1(dim, ids.iter().zip(&rows).map(|(i, r)| (i, r.as_slice()))).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_embv1(&bytes[..keep]).is_err());
    }
}

#[test]
fn layout_is_little_endian_with_magic() {
    let id = ImageId::new("ab").unwrap();
    let bytes = encode_embv1(2, [(&id, &[1.0f32, 0.0][..])]).unwrap();
    assert_eq!(&bytes[..6], b"EMBV1\0");
    assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
    assert_eq!(&bytes[10..18], &1u64.to_le_bytes());
    assert_eq!(&bytes[18..20], &2u16.to_le_bytes());
    assert_eq!(&bytes[20..22], b"ab");
    assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
    assert_eq!(bytes.len(), 30);
}

#[test]
fn corrupt_files_are_rejected() {
    let id = ImageId::new("a").unwrap();
    let good = encode_embv1(1, [(&id, &[1.0f32][..])]).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(decode_embv1(&bad_magic).is_err());

    let mut trailing = good.clone();
    trailing.push(0);
    assert!(matches!(
        decode_embv1(&trailing),
        Err(EmbedStoreError::TrailingBytes { .. })
    ));

    let dup = encode_embv1(1, [(&id, &[1.0f32][..]), (&id, &[2.0f32][..])]);
    assert!(dup.is_err() || matches!(decode_embv1(&dup.unwrap()), Err(EmbedStoreError::DuplicateId { .. })));

    assert!(matches!(
        encode_embv1(2, [(&id, &[1.0f32][..])]),
        Err(EmbedStoreError::DimMismatch { expected: 2, got: 1 })
    ));
    assert!(matches!(
        load_embv1("/nonexistent/x.embv1"),
        Err(EmbedStoreError::Io { .. })
    ));
}
