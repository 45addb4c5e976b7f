fn main() {
    let t0 = std::time::Instant::now();
    let rep = bdlf::oracle::run_gradcheck_suite(7, 64);
    print!("{}", rep.render());
    let rep2 = bdlf::oracle::run_total_loss_gradcheck(7, 48);
    print!("{}", rep2.render());
    println!("elapsed: {:?}", t0.elapsed());
}
