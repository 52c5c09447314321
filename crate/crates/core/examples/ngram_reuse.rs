// Counting n-grams over generated text and recalling the most frequent
// ones that start with a given token.
//
// ```bash
// cargo run --example ngram_reuse
// ```

use swiftdec::ngram::NGramTable;

pub fn run_example() -> swiftdec::Result<()> {
    let mut table = NGramTable::new(4, 20);
    let text: Vec<u32> = [7, 1, 2, 3, 9, 7, 1, 2, 3, 8, 7, 4, 5, 6, 9, 7, 1, 2, 3]
        .into_iter()
        .collect();

    // Feed the text in uneven pieces, as an engine would commit it.
    let mut at = 0;
    for len in [3, 1, 4, 2, 5, 4] {
        table.update(&text[at..at + len], &text[..at]);
        at += len;
    }
    println!("{} distinct 4-grams", table.len());
    for gram in table.retrieve(7, 3) {
        println!("{gram:?} seen {} times", table.frequency(&gram));
    }
    table.dump_jsonl(std::io::stdout().lock())?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
