use gracybus::metrics::*;

fn main() {
    let runs: Vec<CanonicalRun> = TABLE_SIZES.iter().map(|&n| CanonicalRun::new(n).unwrap()).collect();
    let sizes = build_size_table(&runs);
    print!("{}", render_size_table(&sizes));
    println!();
    let storage: Vec<StorageRow> = runs.iter().map(storage_row).collect();
    print!("{}", render_storage_table(&storage));
    println!();
    let cost_runs: Vec<CanonicalRun> = COST_HEIGHTS.iter().map(|&h| CanonicalRun::new(1 << h).unwrap()).collect();
    let table = build_conformance_table(&cost_runs);
    print!("{}", render_conformance_table(&table));
}
