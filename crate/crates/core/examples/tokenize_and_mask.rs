//! Learns a WordPiece vocabulary from a few comments, encodes one of them
//! and applies masked-language-model corruption.
//!
//! ```bash
//! cargo run --example tokenize_and_mask
//! ```

use comment_mtl::tokenizer::{build_vocab, mask_for_mlm, IGNORE_INDEX};

const CORPUS: [&str; 6] = [
    "Die Sendung gestern war wirklich sehenswert, danke dafür!",
    "Wer hat denn diese Zahlen geprüft? Das stimmt so einfach nicht.",
    "Laut Statistik sind es zwölf Prozent weniger als im letzten Jahr.",
    "@USER du hast die Frage gar nicht verstanden",
    "Immer dieselben Gäste in der Sendung, langweilig.",
    "Ich frage mich, warum niemand über die Kosten spricht.",
];

fn main() -> comment_mtl::Result<()> {
    let vocab = build_vocab(&CORPUS, 300, 1)?;
    println!("vocabulary: {} entries", vocab.len());

    let text = "Wer hat die Sendungen geprüft?";
    println!("pieces:  {:?}", vocab.tokenize(text));
    let encoded = vocab.encode(text, 16);
    println!("ids:     {:?}", encoded.ids);
    println!("mask:    {:?}", encoded.attention_mask);

    let (masked, labels) = mask_for_mlm(&encoded, 42, 0.3, vocab.len());
    println!("masked:  {:?}", vocab.decode(&masked.ids[..encoded.real_len()]));
    for (pos, &label) in labels.iter().enumerate().filter(|(_, &l)| l != IGNORE_INDEX) {
        println!("  predict position {pos}: {:?}", vocab.token(label as usize).unwrap_or("?"));
    }
    Ok(())
}
