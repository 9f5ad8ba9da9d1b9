use blinklink::modem::{encode, frame_decode, word_accuracy, FrameFormat, Transition};

const REFERENCE: &str = include_str!("data/reference.txt");
const TRACKED: &str = include_str!("data/gaukf_output.txt");

#[test]
fn clean_transcript_round_trip() {
    let text = REFERENCE.trim_end().as_bytes();
    let s = encode(text, 5000.0).unwrap();
    let tr: Vec<Transition> = s
        .edges
        .iter()
        .map(|e| Transition {
            t: e.t + 3,
            level: e.level,
        })
        .collect();
    assert_eq!(frame_decode(&tr, &FrameFormat::default(), 5000.0).bytes, text);
}

#[test]
fn tracked_transcript_scores() {
    let acc = word_accuracy(TRACKED.trim_end().as_bytes(), REFERENCE.trim_end().as_bytes());
    // 9 of 99 reference words are damaged in the recorded output
    assert_eq!((acc.words_matched, acc.words_total), (90, 99));
    assert!(acc.character > 0.95, "{}", acc.character);
}
