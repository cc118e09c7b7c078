use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lowprec::data::{decode_dataset, encode_dataset, oriented_patterns, pattern_net, Dataset};
use lowprec::desk;
use lowprec::modelio::{build_export, encode_export, export_accelerator, load_model, save_model};
use lowprec::netdesc::{emit_descriptor, parse_descriptor};
use lowprec::profiler::{
    allocate_bits, apply_allocation, measure_ranges, one_shot_study, profile_indices, sparsity_report, BitAllocation,
    RangeStats, SparsityMode,
};
use lowprec::training::{finetune, History, Init, TrainConfig};
use lowprec::{build_giga1net, count_ops, count_params, Model, NetDescriptor, RoundingScheme};

use crate::error::CliError;
use crate::{
    AllocateArgs, Command, ExportArgs, FinetuneArgs, GenDataArgs, OutArgs, ProfileArgs, ReportArgs, Result, SchemeArg,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Giga1net(a) => giga1net(&a),
        Command::PatternNet(a) => {
            check_output(&a.out)?;
            write(&a.out, emit_descriptor(&pattern_net()))
        }
        Command::GenData(a) => gen_data(&a),
        Command::Profile(a) => profile(&a),
        Command::Allocate(a) => allocate(&a),
        Command::Finetune(a) => finetune_cmd(&a),
        Command::Report(a) => report(&a),
        Command::Export(a) => export(&a),
        Command::Desk(a) => desk_cmd(&a),
    }
}

fn check_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn check_output(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(CliError::Data(format!("{}: directory does not exist", dir.display())))
        }
        _ if path.is_dir() => Err(CliError::Data(format!("{}: is a directory", path.display()))),
        _ => Ok(()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<Dataset<f32>> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    decode_dataset(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Model<f32>> {
    load_model(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_net(path: &Path) -> Result<NetDescriptor> {
    parse_descriptor(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_alloc(path: &Path) -> Result<BitAllocation> {
    BitAllocation::from_json(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_sample_shape(net: &NetDescriptor, data: &Dataset<f32>, path: &Path) -> Result<()> {
    if data.sample_shape() == net.input_shape() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{}: samples {:?} do not match the network input {:?}",
            path.display(),
            data.sample_shape(),
            net.input_shape()
        )))
    }
}

fn giga1net(a: &OutArgs) -> Result<()> {
    check_output(&a.out)?;
    let net = build_giga1net();
    write(&a.out, emit_descriptor(&net))?;
    println!("ops {}", count_ops(&net));
    println!("params {}", count_params(&net));
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    check_output(&a.out)?;
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    write(&a.out, encode_dataset(&oriented_patterns(a.samples, a.seed)))
}

fn profile(a: &ProfileArgs) -> Result<()> {
    check_input(&a.model)?;
    check_input(&a.data)?;
    check_output(&a.out)?;
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let model = load(&a.model)?;
    let data = load_data(&a.data)?;
    check_sample_shape(model.net(), &data, &a.data)?;
    let idx = profile_indices(data.len(), a.samples, a.seed);
    let stats = measure_ranges(&model, &data.images().gather(&idx))?;
    write(&a.out, stats.to_json()?)
}

fn check_budget(bits: u32, threshold: f64) -> Result<()> {
    if !(2..=lowprec::fixedpoint::MAX_TOTAL_BITS).contains(&bits) {
        return Err(CliError::Usage(format!("--bits {bits} must be in 2..={}", lowprec::fixedpoint::MAX_TOTAL_BITS)));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("--threshold {threshold} must be in [0, 1)")));
    }
    Ok(())
}

fn allocate(a: &AllocateArgs) -> Result<()> {
    check_budget(a.bits, a.threshold)?;
    check_input(&a.stats)?;
    check_output(&a.out)?;
    let stats =
        RangeStats::from_json(&read_text(&a.stats)?).map_err(|e| CliError::Data(format!("{}: {e}", a.stats.display())))?;
    write(&a.out, allocate_bits(&stats, a.bits, a.threshold)?.to_json()?)
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    if a.scheme == Some(SchemeArg::Stoch) && a.seed.is_none() {
        return Err(CliError::Usage("the stochastic scheme needs --seed".into()));
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        lr_divisor: a.lr_divisor,
        momentum: a.momentum,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed.unwrap_or(0),
        scheme: a.scheme.map(Into::into),
        patience: a.patience,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let inputs = [a.model.as_ref(), a.net.as_ref(), a.alloc.as_ref(), Some(&a.data), a.eval.as_ref()];
    for p in inputs.into_iter().flatten() {
        check_input(p)?;
    }
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history.jsonl");
        PathBuf::from(s)
    });
    check_output(&a.out)?;
    check_output(&history_path)?;

    let (net, init) = match (&a.model, &a.net) {
        (Some(m), _) => {
            let model = load(m)?;
            (model.net().clone(), Init::Pretrained(model))
        }
        (None, Some(n)) => (load_net(n)?, Init::Random),
        (None, None) => return Err(CliError::Usage("either --model or --net is required".into())),
    };
    let net = match &a.alloc {
        Some(p) => {
            let scheme = cfg.scheme.unwrap_or(RoundingScheme::Deterministic);
            apply_allocation(&net, &load_alloc(p)?, scheme)?
        }
        None => net,
    };
    let train = load_data(&a.data)?;
    check_sample_shape(&net, &train, &a.data)?;
    let eval = match &a.eval {
        Some(p) => {
            let d = load_data(p)?;
            check_sample_shape(&net, &d, p)?;
            d
        }
        None => train.clone(),
    };
    let (model, history) = finetune(&net, init, &train, &eval, &cfg)?;
    save_model(&model, &a.out)?;
    write_history(&history, &history_path)?;
    if let Some(acc) = history.final_accuracy() {
        println!("accuracy {acc:.4}");
    }
    Ok(())
}

fn write_history(history: &History, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    history.write_jsonl(BufWriter::new(f))?;
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    check_input(&a.model)?;
    check_input(&a.data)?;
    if let Some(p) = &a.alloc {
        check_input(p)?;
    }
    check_output(&a.out)?;
    if let Some(p) = &a.study_out {
        check_output(p)?;
    }
    let model = load(&a.model)?;
    let data = load_data(&a.data)?;
    check_sample_shape(model.net(), &data, &a.data)?;
    let mode = if model.net().any_quantized() {
        SparsityMode::FineTuned
    } else {
        SparsityMode::Float
    };
    write(&a.out, sparsity_report(&model, &data, mode)?.to_json()?)?;
    if let (Some(alloc), Some(out)) = (&a.alloc, &a.study_out) {
        let quantized = apply_allocation(model.net(), &load_alloc(alloc)?, RoundingScheme::Deterministic)?;
        write(out, one_shot_study(&model, &quantized, &data, a.seed)?.to_json()?)?;
    }
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    check_input(&a.model)?;
    if let Some(p) = &a.alloc {
        check_input(p)?;
    }
    check_output(&a.out)?;
    let model = load(&a.model)?;
    match &a.alloc {
        Some(p) => export_accelerator(&model, &load_alloc(p)?, &a.out)?,
        None => write(&a.out, encode_export(&build_export(&model)?))?,
    }
    Ok(())
}

fn desk_cmd(a: &OutArgs) -> Result<()> {
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let o = desk::run()?;
    let dir = &a.out;
    save_model(&o.float_model, dir.join("float.lpmc"))?;
    write_history(&o.float_history, &dir.join("float.history.jsonl"))?;
    write(&dir.join("allocation.json"), o.allocation.to_json()?)?;
    write(&dir.join("quantized.net"), emit_descriptor(&o.quantized_net))?;
    write(&dir.join("one_shot.json"), o.one_shot.to_json()?)?;
    write(&dir.join("sparsity_float.json"), o.float_sparsity.to_json()?)?;
    write(&dir.join("sparsity_one_shot.json"), o.one_shot_sparsity.to_json()?)?;
    for (name, ft) in [("det", &o.deterministic), ("stoch", &o.stochastic)] {
        save_model(&ft.model, dir.join(format!("finetuned_{name}.lpmc")))?;
        write_history(&ft.history, &dir.join(format!("finetuned_{name}.history.jsonl")))?;
        write(&dir.join(format!("sparsity_{name}.json")), ft.sparsity.to_json()?)?;
    }
    println!("float accuracy        {:.4}", o.float_accuracy);
    for l in &o.allocation.layers {
        let w = l.weight_fmt.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
        println!("  {:<8} weights {:<6} activations {}", l.name, w, l.act_fmt);
    }
    println!(
        "one-shot accuracy     weights-only {:.4}, full {:.4}",
        o.one_shot.weights_only_accuracy, o.one_shot.full_accuracy
    );
    println!("fine-tuned accuracy   det {:.4}, stoch {:.4}", o.deterministic.accuracy, o.stochastic.accuracy);
    println!(
        "mean sparsity         float {:.4}, one-shot {:.4}, det {:.4}, stoch {:.4}",
        o.float_sparsity.mean, o.one_shot_sparsity.mean, o.deterministic.sparsity.mean, o.stochastic.sparsity.mean
    );
    Ok(())
}
