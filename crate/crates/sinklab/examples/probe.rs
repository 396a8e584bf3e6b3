//! Scratch gate checker: runs the packing-variant and perturbation
//! measurements against a checkpoint, mirroring the acceptance gates.

use sinklab::data::{self, PackingStrategy};
use sinklab::model::Model;
use sinklab::numerics::Mask;
use sinklab::sensitivity;
use sinklab::training::{evaluate, resolve_corpus, CorpusSpec, InferenceVariant};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let window: usize = args.get(2).map(|w| w.parse().unwrap()).unwrap_or(64);
    let model: Model<f32> =
        Model::load_checkpoint(std::path::Path::new(ckpt)).expect("checkpoint");
    let docs = resolve_corpus(&CorpusSpec::Echo {
        seed: 99,
        docs: 4000,
        min_segment: 12,
        max_segment: 48,
    })
    .expect("corpus");
    let eval_set: Vec<Vec<usize>> = docs[docs.len() - 64..].to_vec();
    let strategy = PackingStrategy {
        masking: data::Masking::Causal,
        fixed_bos: true,
        use_bos: true,
        use_eos: true,
        context_length: 64,
    };

    // Gate A: BOS-anchored inference sinks hard, plain-text inference does not,
    // and plain-text loss is markedly worse.
    let (loss_bos, sink_bos) =
        evaluate(&model, &eval_set, &strategy, InferenceVariant::BosText, window, 0.3).expect("bos");
    let (loss_text, sink_text) =
        evaluate(&model, &eval_set, &strategy, InferenceVariant::Text, window, 0.3).expect("text");
    println!("bos : loss {loss_bos:.4} sink_rate {:.4}", sink_bos.sink_rate);
    for (l, heads) in sink_bos.per_head_score.iter().enumerate() {
        let row: Vec<String> = heads.iter().map(|s| format!("{s:.3}")).collect();
        println!("      L{l}: {}", row.join(" "));
    }
    println!(
        "text: loss {loss_text:.4} sink_rate {:.4}",
        sink_text.sink_rate
    );
    for (l, heads) in sink_text.per_head_score.iter().enumerate() {
        let row: Vec<String> = heads.iter().map(|s| format!("{s:.3}")).collect();
        println!("      L{l}: {}", row.join(" "));
    }
    println!(
        "gate8: sink_bos>0.5 {} | sink_text<0.05 {} | loss_text>=1.2*loss_bos {} (ratio {:.3})",
        sink_bos.sink_rate > 0.5,
        sink_text.sink_rate < 0.05,
        loss_text >= 1.2 * loss_bos,
        loss_text / loss_bos
    );

    // Gate B: a mid-prompt one-byte edit propagates farther without BOS.
    let model64 = model.cast::<f64>();
    let prompt_len = 40;
    let perturb_at = 8;
    let prompts: Vec<Vec<usize>> = docs[docs.len() - 64..]
        .iter()
        .filter(|d| d.len() >= prompt_len)
        .take(4)
        .map(|d| d[..prompt_len].to_vec())
        .collect();
    let mean_after = |map: &sensitivity::PerturbationMap| -> f64 {
        let last = map.distances.last().expect("final layer");
        let after: Vec<f64> = last
            .iter()
            .enumerate()
            .filter(|(t, _)| *t > map.perturbed_index)
            .map(|(_, &d)| d)
            .collect();
        after.iter().sum::<f64>() / after.len() as f64
    };
    let mut sum_without = 0.0;
    let mut sum_with = 0.0;
    for base in &prompts {
        let mut edited = base.clone();
        edited[perturb_at] = (edited[perturb_at] + 1) % 256;
        let plain =
            sensitivity::perturb_propagation(&model64, base, &edited, &Mask::causal(base.len()), false)
                .expect("plain");
        sum_without += mean_after(&plain);
        let with = |tokens: &[usize]| {
            let mut v = Vec::with_capacity(tokens.len() + 1);
            v.push(data::BOS);
            v.extend_from_slice(tokens);
            v
        };
        let bos_base = with(base);
        let bos_edit = with(&edited);
        let bos =
            sensitivity::perturb_propagation(&model64, &bos_base, &bos_edit, &Mask::causal(bos_base.len()), true)
                .expect("bos");
        sum_with += mean_after(&bos);
    }
    let n = prompts.len() as f64;
    println!(
        "gate9: mean_after without_bos {:.6} with_bos {:.6} | without > with: {}",
        sum_without / n,
        sum_with / n,
        sum_without > sum_with
    );
}
