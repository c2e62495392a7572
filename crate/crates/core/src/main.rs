fn main() {
    println!("swinifs CLI scaffold");
}
