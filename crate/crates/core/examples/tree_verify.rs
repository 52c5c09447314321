// The candidate trie for widths `[1,3,3,3]` plus two recalled n-grams, and
// its ancestor-only attention mask.
//
// ```bash
// cargo run --example tree_verify
// ```

use swiftdec::tree::{build_tree, mask_check, TreeConfig};

pub fn run_example() -> swiftdec::Result<()> {
    let config: TreeConfig = "1,3,3,3".parse()?;
    let heads = vec![vec![5], vec![1, 2, 3], vec![4, 6, 7], vec![8, 9, 10]];
    let grams = vec![vec![5, 1, 4, 8], vec![5, 11, 12, 13]];
    let tree = build_tree(&heads, &grams, &config)?;
    println!(
        "{} nodes, {} leaf paths ({} from the heads)",
        tree.len(),
        tree.paths().len(),
        tree.head_leaf_count()
    );
    println!("mask matches ancestor walk: {}", mask_check(&tree));
    for path in tree.paths().iter().rev().take(2) {
        println!("{:?} from {:?}", path.tokens, path.origin);
    }
    let row: String = (0..tree.len())
        .map(|j| {
            if tree.mask().get(tree.len() - 1, j) {
                '1'
            } else {
                '.'
            }
        })
        .collect();
    println!("last row of the mask: {row}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
