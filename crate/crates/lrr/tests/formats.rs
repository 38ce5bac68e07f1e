use lrr::formats::*;
use lrr_core::guidance::{fixture_bank, EmbeddingBank, TextEmbedding};
use lrr_core::resampler::{LResampleParams, LResampleSpec};
use lrr_core::stir::{StirParams, StirSpec};
use lrr_core::tracker::{TrackerParams, TrackerSpec};
use proptest::prelude::*;

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn meta() -> TrainMeta {
    TrainMeta { seed: 42, epoch: 7, val_loss: 0.0123 }
}

fn all_checkpoints() -> Vec<Checkpoint> {
    let stir = StirParams::random(StirSpec::new(3), 1).unwrap();
    let lres = LResampleParams::init(LResampleSpec::new(32, 16), 2).unwrap();
    let tracker = TrackerParams::init(TrackerSpec::default(), 3).unwrap();
    vec![Checkpoint::from_stir(&stir, meta()), Checkpoint::from_lresample(&lres, meta()), Checkpoint::from_tracker(&tracker, meta())]
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = std::env::temp_dir().join(format!("lrr-fmt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for (i, c) in all_checkpoints().into_iter().enumerate() {
        let path = dir.join(format!("{}.lrr", i));
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec, c.spec);
        assert_eq!(back.meta, c.meta);
        assert_eq!(bits(&back.blob), bits(&c.blob));
        assert_eq!(back.encode(), c.encode());
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn models_survive_conversion() {
    let stir = StirParams::random(StirSpec::new(2), 9).unwrap();
    let back = Checkpoint::decode(&Checkpoint::from_stir(&stir, meta()).encode()).unwrap().to_stir().unwrap();
    assert_eq!(back, stir);
    let t = TrackerParams::init(TrackerSpec::default(), 4).unwrap();
    assert_eq!(Checkpoint::from_tracker(&t, meta()).to_tracker().unwrap(), t);
}

#[test]
fn every_single_byte_flip_is_rejected() {
    let c = &all_checkpoints()[1];
    let buf = c.encode();
    for i in 0..buf.len() {
        let mut bad = buf.clone();
        bad[i] ^= 0x10;
        assert!(Checkpoint::decode(&bad).is_err(), "flip at {} accepted", i);
    }
}

#[test]
fn truncated_and_mislabeled_checkpoints_are_rejected() {
    let c = &all_checkpoints()[0];
    let buf = c.encode();
    for n in [0, 3, 8, buf.len() / 2, buf.len() - 1] {
        assert!(Checkpoint::decode(&buf[..n]).is_err(), "prefix of {} accepted", n);
    }
    let mut bad = buf.clone();
    bad[..4].copy_from_slice(b"LRR2");
    assert!(matches!(Checkpoint::decode(&bad), Err(FormatError::Magic(_))));
    assert!(matches!(c.to_tracker(), Err(FormatError::WrongKind { .. })));
    let mut short = c.clone();
    short.blob.pop();
    assert!(matches!(short.to_stir(), Err(FormatError::Malformed(_))));
}

#[test]
fn banks_round_trip_and_reject_damage() {
    let bank = fixture_bank(&["stripes", "checker", "blobs"], 16).unwrap();
    let buf = encode_bank(&bank).unwrap();
    let back = decode_bank(&buf).unwrap();
    assert_eq!(back, bank);
    assert_eq!(encode_bank(&back).unwrap(), buf);

    for n in [0, 4, 11, buf.len() - 1] {
        assert!(decode_bank(&buf[..n]).is_err(), "prefix of {} accepted", n);
    }
    let mut extra = buf.clone();
    extra.push(0);
    assert!(decode_bank(&extra).is_err());
    let mut magic = buf.clone();
    magic[0] = b'X';
    assert!(matches!(decode_bank(&magic), Err(FormatError::Magic(_))));
    // First label byte becomes invalid UTF-8.
    let mut utf = buf.clone();
    utf[14] = 0xff;
    assert!(decode_bank(&utf).is_err());
    // First value becomes NaN.
    let mut nan = buf.clone();
    let at = 14 + "stripes".len();
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode_bank(&nan), Err(FormatError::Model(_))));
    // A count larger than the entries present.
    let mut count = buf.clone();
    count[8] = 4;
    assert!(decode_bank(&count).is_err());
}

#[test]
fn empty_bank_round_trips() {
    let bank = EmbeddingBank::new(8);
    assert_eq!(decode_bank(&encode_bank(&bank).unwrap()).unwrap(), bank);
}

proptest! {
    #[test]
    fn random_banks_round_trip(
        dim in 1usize..12,
        raw in prop::collection::vec(("[a-z ]{1,12}", prop::collection::vec(-10.0f32..10.0, 12)), 0..6),
    ) {
        let mut bank = EmbeddingBank::new(dim);
        for (label, mut v) in raw {
            v.truncate(dim);
            v[0] = v[0].abs() + 0.5;
            let _ = bank.push(TextEmbedding { label, vector: v });
        }
        let back = decode_bank(&encode_bank(&bank).unwrap()).unwrap();
        prop_assert_eq!(back.len(), bank.len());
        for (a, b) in back.entries().iter().zip(bank.entries()) {
            prop_assert_eq!(&a.label, &b.label);
            prop_assert_eq!(bits(&a.vector), bits(&b.vector));
        }
    }

    #[test]
    fn random_blobs_round_trip(blob in prop::collection::vec(any::<f32>(), 0..64), seed in any::<u64>(), epoch in any::<u32>()) {
        let spec = TrackerSpec::default();
        let c = Checkpoint { spec: ModuleSpec::Tracker(spec), meta: TrainMeta { seed, epoch, val_loss: 1.5 }, blob };
        let back = Checkpoint::decode(&c.encode()).unwrap();
        prop_assert_eq!(bits(&back.blob), bits(&c.blob));
        prop_assert_eq!(back.meta, c.meta);
    }
}
