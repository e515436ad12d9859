fn main() {
    println!("skillnet");
}
