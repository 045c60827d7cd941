use std::collections::BTreeMap;

use super::*;
use crate::data::write_synth;
use crate::model::{Component, ModelSpec};
use crate::recipe::{builtin_base_recipe, builtin_share_recipe, TuningPlan, TuningType};

fn tiny_model(connector: &str) -> MultimodalModel<f32> {
    let mut spec = ModelSpec::tiny(connector, false);
    spec.template = Some("plain".into());
    MultimodalModel::build(&ComponentRegistry::with_builtins(), &spec, 1).unwrap()
}

fn synth_examples(model: &MultimodalModel<f32>, dir: &Path, n: usize) -> Vec<Example<f32>> {
    let files = write_synth(dir, n, 1, 3).unwrap();
    let mut ex = load_examples(model, &files.train, &model.template, LabelMode::Finetune).unwrap();
    ex.truncate(n);
    ex
}

fn stage(plan: TuningPlan, micro: usize, global: usize) -> Stage {
    let mut s = builtin_base_recipe().stages[1].clone();
    s.plan = plan;
    s.micro_batch = micro;
    s.global_batch = global;
    s.lr = 1e-3;
    s.init_from = None;
    s
}

fn connector_llm_plan() -> TuningPlan {
    TuningPlan::new(TuningType::Frozen, TuningType::Full, TuningType::Full)
}

#[test]
fn step_count_and_metrics_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = tiny_model("mlp");
    let ex = synth_examples(&model, tmp.path(), 8);
    let st = stage(connector_llm_plan(), 2, 4);
    apply_plan(&mut model.store, &st.plan, &mut SeedStream::new(0).rng()).unwrap();
    let out = train_stage(&mut model, &st, &ex, SeedStream::new(1), &tmp.path().join("s"), &Value::Null).unwrap();
    assert_eq!(out.state.step, 2);
    assert_eq!(out.state.optimizer.step_count(), 2);
    let text = fs::read_to_string(tmp.path().join("s").join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Map<String, Value> = serde_json::from_str(line).unwrap();
        let mut keys: Vec<&str> = v.keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["loss", "lr", "stage", "step", "tokens", "wall_ms"]);
        assert_eq!(v["step"], i + 1);
    }
    let records = read_metrics(&tmp.path().join("s").join(METRICS_FILE)).unwrap();
    for r in &records {
        assert_eq!(r.lr, lr_schedule(r.step, 2, st.lr, st.warmup_ratio));
    }
}

#[test]
fn metrics_must_increase() {
    let tmp = tempfile::tempdir().unwrap();
    let mut log = MetricsLog::create(&tmp.path().join("m.jsonl")).unwrap();
    let rec = |step| MetricRecord {
        step,
        stage: "s".into(),
        loss: 1.0,
        lr: 0.1,
        tokens: 3,
        wall_ms: 0,
    };
    log.log(&rec(1)).unwrap();
    assert!(log.log(&rec(1)).is_err());
}

#[test]
fn same_seed_same_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let mut model = tiny_model("resampler");
        let ex = synth_examples(&model, &tmp.path().join("data"), 8);
        let st = stage(connector_llm_plan(), 2, 4);
        apply_plan(&mut model.store, &st.plan, &mut SeedStream::new(0).rng()).unwrap();
        let out = train_stage(&mut model, &st, &ex, SeedStream::new(5), &tmp.path().join(sub), &Value::Null).unwrap();
        (out.state.losses, model.store.component_hash(Component::Llm))
    };
    let (a, ha) = run("a");
    let (b, hb) = run("b");
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(ha, hb);
}

/// Gradient of the full-batch mean-over-supervised-tokens loss from one graph.
fn oracle_grads(model: &MultimodalModel<f32>, ex: &[Example<f32>]) -> BTreeMap<TensorKey, Vec<f32>> {
    let total: usize = ex.iter().map(Example::supervised_targets).sum();
    let mut ctx = Ctx::new(&model.store);
    let mut terms = Vec::new();
    for e in ex {
        let l = model.loss(&mut ctx, &e.sample, e.image.as_ref()).unwrap();
        let w = e.supervised_targets() as f32 / total as f32;
        terms.push(ctx.graph.scale(l, w));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = ctx.graph.add(acc, t).unwrap();
    }
    ctx.graph.backward(acc).unwrap();
    ctx.owned_grads().into_iter().collect()
}

fn accumulated_grads(model: &mut MultimodalModel<f32>, ex: &[Example<f32>], micro: usize) -> BTreeMap<TensorKey, Vec<f32>> {
    let total: usize = ex.iter().map(Example::supervised_targets).sum();
    model.store.zero_grad();
    let refs: Vec<&Example<f32>> = ex.iter().collect();
    for chunk in refs.chunks(micro) {
        accumulate_group(model, chunk, total).unwrap();
    }
    model
        .store
        .trainable_keys()
        .into_iter()
        .map(|k| (k, model.store.tensor(k).grad().unwrap().to_vec()))
        .collect()
}

#[test]
fn accumulation_matches_full_batch() {
    let tmp = tempfile::tempdir().unwrap();
    for plan in [
        connector_llm_plan(),
        TuningPlan::new(TuningType::Frozen, TuningType::Frozen, TuningType::lora(2, 4.0)),
    ] {
        let mut model = tiny_model("qformer");
        let ex = synth_examples(&model, tmp.path(), 8);
        apply_plan(&mut model.store, &plan, &mut SeedStream::new(0).rng()).unwrap();
        // Make the LoRA B factors nonzero so every adapter tensor has signal.
        let keys = model.store.trainable_keys();
        for &k in &keys {
            if let TensorKey::LoraB(_) = k {
                let t = Tensor::randn(model.store.tensor(k).shape(), 0.05, &mut SeedStream::new(3).rng());
                model.store.tensor_mut(k).data_mut().copy_from_slice(t.data());
            }
        }
        let oracle = oracle_grads(&model, &ex);
        let acc = accumulated_grads(&mut model, &ex, 2);
        assert_eq!(oracle.keys().collect::<Vec<_>>(), acc.keys().collect::<Vec<_>>());
        let scale = oracle.values().flatten().fold(0.0f32, |m, v| m.max(v.abs()));
        let diff = oracle
            .iter()
            .flat_map(|(k, g)| g.iter().zip(&acc[k]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f32, f32::max);
        assert!(diff / scale < 1e-5, "relative diff {}", diff / scale);
    }
}

#[test]
fn frozen_parameters_untouched_and_gradient_free() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = tiny_model("mlp");
    let ex = synth_examples(&model, tmp.path(), 8);
    let st = stage(TuningPlan::new(TuningType::Frozen, TuningType::Full, TuningType::Frozen), 2, 4);
    let before = (model.store.component_hash(Component::Vision), model.store.component_hash(Component::Llm));
    apply_plan(&mut model.store, &st.plan, &mut SeedStream::new(0).rng()).unwrap();
    model.store.zero_grad();
    let refs: Vec<&Example<f32>> = ex.iter().collect();
    accumulate_group(&mut model, &refs[..2], 10).unwrap();
    for (_, p) in model.store.params() {
        assert_eq!(p.tensor.grad().is_some(), p.component == Component::Connector, "{}", p.path);
    }
    train_stage(&mut model, &st, &ex, SeedStream::new(1), &tmp.path().join("s"), &Value::Null).unwrap();
    let after = (model.store.component_hash(Component::Vision), model.store.component_hash(Component::Llm));
    assert_eq!(before, after);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = tiny_model("linear");
    let ex = synth_examples(&model, tmp.path(), 4);
    let st = stage(connector_llm_plan(), 2, 4);
    apply_plan(&mut model.store, &st.plan, &mut SeedStream::new(0).rng()).unwrap();
    let id = model.store.lookup(Component::Connector, "proj.weight").unwrap();
    model.store.tensor_mut(TensorKey::Base(id)).data_mut()[0] = f32::NAN;
    let err = train_stage(&mut model, &st, &ex, SeedStream::new(1), &tmp.path().join("s"), &Value::Null)
        .err()
        .unwrap();
    assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn empty_or_too_small_dataset_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = tiny_model("linear");
    let st = stage(connector_llm_plan(), 2, 4);
    assert!(train_stage(&mut model, &st, &[], SeedStream::new(1), tmp.path(), &Value::Null).is_err());
    let ex = synth_examples(&model, tmp.path(), 3);
    assert!(train_stage(&mut model, &st, &ex, SeedStream::new(1), tmp.path(), &Value::Null).is_err());
}

fn desk_recipe(mut recipe: TrainingRecipe, data: &Path) -> TrainingRecipe {
    for s in &mut recipe.stages {
        s.dataset = Some(data.to_path_buf());
        s.global_batch = 4;
        s.micro_batch = 2;
        s.lr = 1e-3;
    }
    recipe
}

#[test]
fn pipeline_hand_off_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let files = write_synth(&tmp.path().join("data"), 8, 1, 3).unwrap();
    let reg = ComponentRegistry::<f32>::with_builtins();
    let recipe = desk_recipe(builtin_base_recipe(), &files.train);
    let work = tmp.path().join("base");
    let mut model = tiny_model("mlp");
    let runs = run_pipeline(&mut model, &reg, &recipe, &work, 0, &Value::Null).unwrap();
    assert_eq!(runs.iter().map(|r| r.stage.as_str()).collect::<Vec<_>>(), ["pretrain", "finetune"]);
    // 8 samples yield 40 single-question records, 10 steps at global batch 4.
    assert!(runs.iter().all(|r| r.steps == 10 && !r.resumed));
    let final_hash = model.store.component_hash(Component::Llm);

    // The finetune stage starts from the pretrain connector.
    let mut probe = tiny_model("mlp");
    load_checkpoint(&mut probe.store, &runs[0].checkpoint, None).unwrap();
    let pretrain_connector = probe.store.component_hash(Component::Connector);
    let mut fresh = tiny_model("mlp");
    let mut first_stage_only = recipe.clone();
    first_stage_only.stages.truncate(1);
    run_pipeline(&mut fresh, &reg, &first_stage_only, &work, 0, &Value::Null).unwrap();
    assert_eq!(fresh.store.component_hash(Component::Connector), pretrain_connector);

    // Re-running performs no optimizer steps and restores the same weights.
    let mut again = tiny_model("mlp");
    let runs = run_pipeline(&mut again, &reg, &recipe, &work, 0, &Value::Null).unwrap();
    assert!(runs.iter().all(|r| r.steps == 0 && r.resumed));
    assert_eq!(again.store.component_hash(Component::Llm), final_hash);

    // Share pretrain starts from the base pretrain connector.
    let share = desk_recipe(builtin_share_recipe(Some(&runs[0].checkpoint)).unwrap(), &files.train);
    let mut share_model = tiny_model("mlp");
    let st = &share.stages[0];
    let init = st.init_from.as_ref().unwrap();
    load_checkpoint(&mut share_model.store, &init_source_dir(&work, &init.source), Some(&init.components)).unwrap();
    assert_eq!(share_model.store.component_hash(Component::Connector), pretrain_connector);
    let runs = run_pipeline(&mut tiny_model("mlp"), &reg, &share, &tmp.path().join("share"), 0, &Value::Null).unwrap();
    assert_eq!(runs.len(), 2);
}

#[test]
fn broken_init_reference_fails_upfront() {
    let tmp = tempfile::tempdir().unwrap();
    let files = write_synth(&tmp.path().join("data"), 8, 1, 3).unwrap();
    let reg = ComponentRegistry::<f32>::with_builtins();
    let share = desk_recipe(builtin_share_recipe(Some(&tmp.path().join("missing"))).unwrap(), &files.train);
    let work = tmp.path().join("w");
    assert!(run_pipeline(&mut tiny_model("mlp"), &reg, &share, &work, 0, &Value::Null).is_err());
    assert!(!work.exists());
}

#[test]
fn default_model_overfits_one_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = MultimodalModel::build(&ComponentRegistry::with_builtins(), &ModelSpec::default(), 0).unwrap();
    let ex = synth_examples(&model, tmp.path(), 4);
    let mut st = stage(connector_llm_plan(), 4, 4);
    st.epochs = 300;
    st.lr = 3e-3;
    apply_plan(&mut model.store, &st.plan, &mut SeedStream::new(0).rng()).unwrap();
    let out = train_stage(&mut model, &st, &ex, SeedStream::new(0), &tmp.path().join("s"), &Value::Null).unwrap();
    assert_eq!(out.state.step, 300);
    let last = *out.state.losses.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
}
