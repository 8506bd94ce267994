fn main() {
    println!("lookaround");
}
