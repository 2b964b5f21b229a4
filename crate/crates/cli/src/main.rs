fn main() { println!("{}", snl_core::probe()); }
