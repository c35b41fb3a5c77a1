fn main() {
    println!("{}", vpeg::core::smoke());
}
