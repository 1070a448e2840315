fn main() {
    println!("spotformer CLI placeholder");
}
