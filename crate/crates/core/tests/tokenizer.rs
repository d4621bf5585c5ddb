use proptest::prelude::*;
use vitp_core::tokenizer::{Vocabulary, BOS, EOS, IMG, PAD};
use vitp_core::VitpError;

const ALPHABET: &str = "abcdefghij ,.?[]0123456789\\\n";

fn vocab() -> Vocabulary {
    Vocabulary::build(ALPHABET).unwrap()
}

#[test]
fn counting_examples() {
    assert_eq!(Vocabulary::build("ab").unwrap().len(), 6);
    assert_eq!(Vocabulary::build("aaaa").unwrap().len(), 5);
    assert_eq!(Vocabulary::build("xyzzy").unwrap(), Vocabulary::build("zyx").unwrap());
    assert!(matches!(Vocabulary::build(""), Err(VitpError::EmptyCorpus)));
}

#[test]
fn specials_come_first() {
    let v = vocab();
    assert_eq!(v.decode(&[PAD, BOS, EOS, IMG]).unwrap(), "<pad><bos><eos><img>");
    assert_eq!(v.encode("").unwrap(), Vec::<usize>::new());
    assert_eq!(v.decode(&[]).unwrap(), "");
    // sorted symbols follow the specials
    assert_eq!(v.encode("\n").unwrap(), vec![4]);
}

#[test]
fn unknown_symbol_is_named() {
    match vocab().encode("abz") {
        Err(VitpError::UnknownSymbol(c)) => assert_eq!(c, 'z'),
        other => panic!("expected unknown symbol, got {other:?}"),
    }
    assert!(vocab().decode(&[999]).is_err());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = vocab();
    v.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("<pad>\n<bos>\n<eos>\n<img>\n"));
    assert_eq!(Vocabulary::load(&path).unwrap(), v);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip(s in "[a-j ,.?\\[\\]0-9\\\\\n]{0,40}") {
        let v = vocab();
        prop_assert_eq!(v.decode(&v.encode(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn prefix_stable(a in "[a-j0-9 ]{0,20}", b in "[a-j0-9 ]{0,20}") {
        let v = vocab();
        let mut joined = v.encode(&a).unwrap();
        joined.extend(v.encode(&b).unwrap());
        prop_assert_eq!(v.encode(&format!("{a}{b}")).unwrap(), joined);
    }
}
