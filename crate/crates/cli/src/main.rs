fn main() {
    println!("evfi");
}
