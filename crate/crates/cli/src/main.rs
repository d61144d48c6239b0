fn main() {
    println!("sodcod");
}
