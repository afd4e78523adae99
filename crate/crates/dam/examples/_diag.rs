fn main() {
    let dataset = dam::data::generate_dataset(7, 64, 3, 20).unwrap();
    let config = dam::TrainConfig {
        seed: 1,
        encoder: dam::EncoderVariant::Dualvd,
        units: dam::UnitConfig::FULL,
        ..dam::TrainConfig::default()
    };
    let run = dam::train::train(&dataset, &config).unwrap();
    let model = &run.model;
    let (_, results) = dam::eval::evaluate(model, &dataset, &dam::eval::EvalOptions::default()).unwrap();

    let instances = dam::data::round_instances(&dataset, model.vocab()).unwrap();
    let mut fails = 0;
    for (inst, rr) in instances.iter().zip(&results) {
        let round = &dataset.dialogues[inst.dialogue].rounds[inst.round];
        let para_idx = round.relevance.iter().position(|&r| r == 0.5).unwrap();
        let para_rank = rr.order.iter().position(|&c| c == para_idx).unwrap() + 1;
        if para_rank > 2 {
            fails += 1;
            if fails <= 12 {
                let beat = rr.order[1];
                println!(
                    "q={:?} gt={:?} para={:?} para_rank={} rank2={:?} (score gt {:.2} para {:.2} rank2 {:.2})",
                    round.question.join(" "),
                    round.answer.join(" "),
                    round.candidates[para_idx].join(" "),
                    para_rank,
                    round.candidates[beat].join(" "),
                    rr.scores[round.gt_index],
                    rr.scores[para_idx],
                    rr.scores[beat],
                );
            }
        }
    }
    println!("para below rank 2 in {fails}/{} rounds", results.len());
}
