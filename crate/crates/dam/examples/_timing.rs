use dam::tensor::Tape;

fn main() {
    let encoder: dam::EncoderVariant = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "dualvd".into())
        .parse()
        .unwrap();
    let dataset = dam::data::generate_dataset(7, 64, 3, 20).unwrap();
    let config = dam::TrainConfig {
        seed: 1,
        encoder,
        units: dam::UnitConfig::FULL,
        ..dam::TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let run = dam::train::train(&dataset, &config).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "{encoder}: 500 epochs in {train_secs:.1}s, loss {:.4} -> {:.4}",
        run.loss_log[0],
        run.loss_log.last().unwrap()
    );

    // teacher-forced token accuracy + greedy exact match
    let model = &run.model;
    let instances = dam::data::round_instances(&dataset, model.vocab()).unwrap();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut exact = 0usize;
    for inst in &instances {
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &inst.input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let mut x = dam::data::START;
        for &t in inst.target.iter().chain(std::iter::once(&dam::data::END)) {
            let (probs, _) = model.decode_step(&mut tape, x, &mut state, &kb).unwrap();
            if dam::decoder::argmax_lowest(tape.value(probs)) == t {
                correct += 1;
            }
            total += 1;
            x = t;
        }
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &inst.input).unwrap();
        let (tokens, _) = model.greedy_decode(&mut tape, &kb, 20).unwrap();
        if tokens == inst.target {
            exact += 1;
        }
    }
    println!(
        "token accuracy {:.2}% ({correct}/{total}), exact match {:.2}% ({exact}/{})",
        100.0 * correct as f64 / total as f64,
        100.0 * exact as f64 / instances.len() as f64,
        instances.len()
    );

    let t1 = std::time::Instant::now();
    let (report, _) = dam::eval::evaluate(model, &dataset, &dam::eval::EvalOptions::default()).unwrap();
    println!(
        "eval in {:.1}s: mrr {:.4} r@1 {:.4} r@5 {:.4} ndcg {:.4} mean {:.2} rep {:.3} d1 {:.3} d2 {:.3}",
        t1.elapsed().as_secs_f64(),
        report.mrr, report.r_at_1, report.r_at_5, report.ndcg, report.mean_rank,
        report.repetition_rate, report.distinct_1, report.distinct_2
    );
}
